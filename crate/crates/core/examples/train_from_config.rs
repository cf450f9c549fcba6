//! The `train` command end to end: writes a small corpus, a teacher and a
//! JSON run config, trains, then reruns from the emitted manifest.

use std::fs;

use xdistill::commands::{cmd_train, RunConfig};
use xdistill::corpus::{write_parallel_tsv, TokenizerConfig};
use xdistill::encoder::{init_encoder, save_params, EncoderConfig};
use xdistill::synthetic::{cipher_corpus, CipherSpec};
use xdistill::Error;

fn main() -> xdistill::Result<()> {
    let dir = std::env::temp_dir().join("xdistill-train-example");
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let corpus = cipher_corpus(&CipherSpec { sentences: 800, vocab: 150, seed: 9, ..CipherSpec::default() });
    let (news, chat) = corpus.pairs.split_at(600);
    write_parallel_tsv(&dir.join("news.tsv"), news)?;
    write_parallel_tsv(&dir.join("chat.tsv"), chat)?;

    let encoder = EncoderConfig {
        tokenizer: TokenizerConfig { buckets: 1 << 13, ..TokenizerConfig::default() },
        embed_dim: 24,
        out_dim: 24,
        ..EncoderConfig::default()
    };
    save_params(&init_encoder(encoder, 1)?, &dir.join("teacher.xenc"))?;

    let config = serde_json::json!({
        "seed": 2024,
        "threads": 2,
        "out_dir": dir.join("run"),
        "datasets": [
            {"name": "news", "path": dir.join("news.tsv"), "source_lang": "aa", "target_lang": "bb"},
            {"name": "chat", "path": dir.join("chat.tsv"), "source_lang": "aa", "target_lang": "bb", "truncate": 150}
        ],
        "holdout": {"size": 60, "mode": "per_dataset"},
        "teacher": {"params": dir.join("teacher.xenc")},
        "student": {"encoder": encoder},
        "train": {"batch_size": 32, "epochs": 3, "peak_lr": 0.02, "warmup_steps": 10, "eval_every": 25}
    });
    let config = RunConfig::from_json(&config.to_string())?;
    let run = cmd_train(&config)?;
    println!("{}", fs::read_to_string(config.out_dir.join("history.tsv")).map_err(|e| Error::Io { path: config.out_dir.clone(), source: e })?);
    println!("summary: {:?}", run.manifest.summary);

    let manifest = fs::read_to_string(config.out_dir.join("manifest.json"))
        .map_err(|e| Error::Io { path: config.out_dir.clone(), source: e })?;
    let again = cmd_train(&RunConfig::from_json(&manifest)?)?;
    let same = again.manifest.outputs.iter().zip(&run.manifest.outputs).all(|(a, b)| a.sha256 == b.sha256);
    println!("rerun from manifest reproduces every output: {same}");
    Ok(())
}
