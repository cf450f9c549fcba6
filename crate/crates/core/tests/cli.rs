use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xdistill::analysis::read_projection_tsv;
use xdistill::commands::{cmd_mine, cmd_tatoeba, MineArgs};
use xdistill::corpus::{write_parallel_tsv, TokenizerConfig};
use xdistill::encoder::{embed_texts, init_encoder, load_params, read_embeddings, save_params, sentence_hash, EncoderConfig};
use xdistill::eval_sts::{write_sts_tsv, StsPair};
use xdistill::mining::{tatoeba_accuracy, MiningConfig};
use xdistill::synthetic::{cipher_corpus, sts_pairs, CipherCorpus, CipherSpec};

fn xdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdistill")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xdistill(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: CipherCorpus,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = cipher_corpus(&CipherSpec {
            sentences: 240,
            vocab: 80,
            seed: 3,
            ..CipherSpec::default()
        });
        write_parallel_tsv(&root.join("train.tsv"), &corpus.pairs).unwrap();
        let teacher = init_encoder(Self::encoder(), 19).unwrap();
        save_params(&teacher, &root.join("teacher.xenc")).unwrap();
        Fixture { _dir: dir, root, corpus }
    }

    fn encoder() -> EncoderConfig {
        EncoderConfig {
            tokenizer: TokenizerConfig {
                buckets: 1 << 12,
                ..TokenizerConfig::default()
            },
            embed_dim: 12,
            out_dim: 12,
            ..EncoderConfig::default()
        }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }

    fn write_config(&self, name: &str, extra: serde_json::Value) -> String {
        let mut cfg = serde_json::json!({
            "seed": 5,
            "datasets": [{"path": self.path("train.tsv"), "source_lang": "aa", "target_lang": "bb"}],
            "holdout": {"size": 40},
            "teacher": {"params": self.path("teacher.xenc")},
            "student": {"encoder": Self::encoder()},
            "train": {"batch_size": 16, "epochs": 2, "peak_lr": 0.02, "warmup_steps": 5, "eval_every": 10}
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.path(name);
        fs::write(&path, cfg.to_string()).unwrap();
        path
    }

    fn lines(&self, name: &str, texts: impl Iterator<Item = String>) -> String {
        let path = self.path(name);
        fs::write(&path, texts.map(|t| t + "\n").collect::<String>()).unwrap();
        path
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(xdistill(&[]).status.code(), Some(2));
    assert_eq!(xdistill(&["train"]).status.code(), Some(2));
    assert_eq!(xdistill(&["mine", "--src", "a", "--tgt", "b", "--direction", "sideways"]).status.code(), Some(2));
    assert_eq!(xdistill(&["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_with_one_and_a_single_line() {
    let fx = Fixture::new();
    let out = xdistill(&["embed", "--params", &fx.path("missing.xenc"), "--input", &fx.path("train.tsv"), "--output", &fx.path("x")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\tio\t"), "{err}");
    assert!(err.contains("missing.xenc"));

    fs::write(fx.path("bad.xenc"), b"XENC\x02\0\0\0").unwrap();
    let out = xdistill(&["embed", "--params", &fx.path("bad.xenc"), "--input", &fx.path("train.tsv"), "--output", &fx.path("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error\tformat\t"));
}

#[test]
fn train_rejects_missing_inputs_before_computing() {
    let fx = Fixture::new();
    let cfg = fx.write_config("cfg.json", serde_json::json!({"teacher": {"embeddings": fx.path("nope.xemb")}}));
    let out = xdistill(&["train", "--config", &cfg, "--out-dir", &fx.path("out")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error\tconfig\t") && err.contains("nope.xemb"), "{err}");
    assert!(!Path::new(&fx.path("out")).exists());
}

#[test]
fn train_writes_manifest_and_reloadable_params() {
    let fx = Fixture::new();
    let sts: Vec<StsPair> = sts_pairs(&fx.corpus, &[('A', 'A'), ('A', 'B')], 30, 1);
    let sts_path = fx.path("sts.tsv");
    write_sts_tsv(Path::new(&sts_path), &sts).unwrap();
    let tatoeba_path = fx.path("tatoeba.tsv");
    write_parallel_tsv(Path::new(&tatoeba_path), &fx.corpus.pairs[..50]).unwrap();
    let cfg = fx.write_config(
        "cfg.json",
        serde_json::json!({"eval": {"sts": sts_path, "tatoeba": [{"name": "cipher", "path": tatoeba_path}]}}),
    );
    let stdout = ok(&["train", "--config", &cfg, "--out-dir", &fx.path("out"), "--seed", "8"]);
    assert!(stdout.contains("holdout_mse"));

    let out = fx.root.join("out");
    for f in ["final.xenc", "best.xenc", "history.tsv", "manifest.json", "sts_report.tsv", "sts_report.json", "tatoeba_report.tsv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run_config"]["seed"], 8);
    assert_eq!(manifest["command"], "train");
    let text = manifest.to_string();
    assert!(!text.contains("time") && !text.contains("date"));
    let final_digest = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["role"] == "final_params")
        .unwrap()["sha256"]
        .clone();
    assert_eq!(
        final_digest,
        xdistill::commands::file_sha256(&out.join("final.xenc")).unwrap()
    );

    let history = fs::read_to_string(out.join("history.tsv")).unwrap();
    assert_eq!(history.lines().next(), Some("step\ttrain_loss\tholdout_mse"));
    let params = load_params(&out.join("final.xenc")).unwrap();
    assert_eq!(params.config, Fixture::encoder());
    let summary = &manifest["summary"];
    assert_eq!(summary["holdout_pairs"], 40);
    assert_eq!(summary["training_pairs"], 200);
    assert!(summary["final_holdout_mse"].as_f64().unwrap() < summary["initial_holdout_mse"].as_f64().unwrap());
}

#[test]
fn embed_mine_tatoeba_and_pca_agree_with_the_library() {
    let fx = Fixture::new();
    let cfg = fx.write_config("cfg.json", serde_json::json!({}));
    ok(&["train", "--config", &cfg, "--out-dir", &fx.path("out")]);
    let model = fx.path("out/final.xenc");
    let pairs = &fx.corpus.pairs[..120];
    let src = fx.lines("src.txt", pairs.iter().map(|p| p.source_text.clone()));
    let tgt = fx.lines("tgt.txt", pairs.iter().map(|p| p.target_text.clone()));
    assert_eq!(ok(&["embed", "--params", &model, "--input", &src, "--output", &fx.path("src.xemb")]), "rows\t120\n");
    ok(&["embed", "--params", &model, "--input", &tgt, "--output", &fx.path("tgt.xemb"), "--threads", "3"]);

    let file = read_embeddings(Path::new(&fx.path("src.xemb"))).unwrap();
    assert_eq!(file.hashes[7], sentence_hash(&pairs[7].source_text));
    let params = load_params(Path::new(&model)).unwrap();
    let texts: Vec<&str> = pairs.iter().map(|p| p.source_text.as_str()).collect();
    let direct = embed_texts(&params, &texts).unwrap();
    for (a, b) in file.matrix.data().iter().zip(direct.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let stdout = ok(&["tatoeba", "--src", &fx.path("src.xemb"), "--tgt", &fx.path("tgt.xemb"), "--out-dir", &fx.path("tt")]);
    let api = cmd_tatoeba(Path::new(&fx.path("src.xemb")), Path::new(&fx.path("tgt.xemb")), &fx.root.join("tt2"), 1).unwrap();
    let (f, b) = tatoeba_accuracy(&file.matrix, &read_embeddings(Path::new(&fx.path("tgt.xemb"))).unwrap().matrix).unwrap();
    assert_eq!((api.forward, api.backward), (f, b));
    assert!(stdout.contains(&format!("forward\t{f}")));

    let gold = fx.lines("gold.tsv", (0..120).map(|i| format!("{i}\t{i}")));
    ok(&["mine", "--src", &fx.path("src.xemb"), "--tgt", &fx.path("tgt.xemb"), "--gold", &gold, "--k", "2", "--out-dir", &fx.path("m")]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.root.join("m/mining_report.json")).unwrap()).unwrap();
    let api = cmd_mine(&MineArgs {
        src: fx.path("src.xemb").into(),
        tgt: fx.path("tgt.xemb").into(),
        src_ids: None,
        tgt_ids: None,
        gold: Some(gold.into()),
        threshold: None,
        config: MiningConfig { k: 2, ..MiningConfig::default() },
        out_dir: fx.root.join("m2"),
        threads: 2,
    })
    .unwrap();
    assert_eq!(report, serde_json::to_value(&api).unwrap());
    assert_eq!(
        fs::read(fx.root.join("m/candidates.tsv")).unwrap(),
        fs::read(fx.root.join("m2/candidates.tsv")).unwrap()
    );
    let candidates = fs::read_to_string(fx.root.join("m/candidates.tsv")).unwrap();
    assert!(candidates.starts_with("# k=2\n"));
    assert!(candidates.contains("# direction=union_max"));

    let labels = fx.lines("labels.txt", (0..120).map(|i| if i % 2 == 0 { "aa".into() } else { "bb".into() }));
    let stdout = ok(&["pca", "--embeddings", &fx.path("src.xemb"), "--labels", &labels, "--output", &fx.path("p/proj.tsv")]);
    assert!(stdout.starts_with("explained_variance\t"));
    let rows = read_projection_tsv(&fx.root.join("p/proj.tsv")).unwrap();
    assert_eq!(rows.rows.len(), 120);
}

#[test]
fn eval_sts_and_bias_from_params_and_embeddings() {
    let fx = Fixture::new();
    let sts = sts_pairs(&fx.corpus, &[('A', 'A'), ('B', 'B')], 40, 2);
    let sts_path = fx.path("sts.tsv");
    write_sts_tsv(Path::new(&sts_path), &sts).unwrap();
    let teacher = fx.path("teacher.xenc");
    let stdout = ok(&["eval-sts", "--params", &teacher, "--sts", &sts_path, "--out-dir", &fx.path("e")]);
    assert!(stdout.contains("rho_x100\tA-A\t"));
    assert!(fx.root.join("e/sts_report.json").is_file());

    ok(&["bias", "--sts", &sts_path, "--params", &teacher, "--trials", "99", "--seed", "4", "--out-dir", &fx.path("b")]);
    let tsv = fs::read_to_string(fx.root.join("b/bias_report.tsv")).unwrap();
    assert!(tsv.contains("significance\tp_value\t"), "{tsv}");

    // precomputed (f32) vectors give a report with the same layout
    let sentences: Vec<&str> = sts.iter().flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()]).collect();
    let text = fx.lines("sents.txt", sentences.iter().map(|s| s.to_string()));
    ok(&["embed", "--params", &teacher, "--input", &text, "--output", &fx.path("s.xemb")]);
    ok(&["bias", "--sts", &sts_path, "--embeddings", &fx.path("s.xemb"), "--trials", "99", "--seed", "4", "--out-dir", &fx.path("b2")]);
    let keys = |t: &str| t.lines().map(|l| l.rsplit_once('\t').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(keys(&tsv), keys(&fs::read_to_string(fx.root.join("b2/bias_report.tsv")).unwrap()));

    let out = xdistill(&["bias", "--sts", &sts_path, "--embeddings", &fx.path("src-missing.xemb"), "--out-dir", &fx.path("b3")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn common_flags_fall_back_to_a_config_file() {
    let fx = Fixture::new();
    let texts = fx.lines("s.txt", fx.corpus.pairs[..30].iter().map(|p| p.source_text.clone()));
    let settings = fx.path("settings.json");
    fs::write(&settings, serde_json::json!({"threads": 2, "out_dir": fx.path("from-config")}).to_string()).unwrap();
    ok(&["embed", "--params", &fx.path("teacher.xenc"), "--input", &texts, "--config", &settings]);
    let emb = fx.path("from-config/embeddings.xemb");
    assert!(Path::new(&emb).is_file());

    let labels = fx.lines("l.txt", (0..30).map(|i| format!("{i}\t{}", if i < 15 { "aa" } else { "bb" })));
    ok(&["pca", "--embeddings", &emb, "--labels", &labels, "--config", &settings, "--out-dir", &fx.path("flag")]);
    assert!(fx.root.join("flag/projection.tsv").is_file());
    assert!(!fx.root.join("from-config/projection.tsv").exists());
}
