//! Run configuration, manifests and the subcommands behind the `xdistill`
//! binary. Every command is a plain function so the binary stays thin and
//! tests can call the same code paths.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{pca_top2, projection_tsv, read_labels, Projection2D};
use crate::corpus::{build_registry, filter_by_score, load_parallel_tsv_with, HoldoutMode, LoadOptions, ParallelPair};
use crate::distill::{history_tsv, train, TrainConfig, TrainOutcome};
use crate::encoder::{
    embed_texts, init_encoder, load_params, params_to_bytes, read_embeddings, sentence_hash, write_embeddings,
    EmbeddingIndex, EmbeddingMatrix, EncoderConfig, EncoderParams, TeacherProvider,
};
use crate::error::{Error, Result};
use crate::eval_sts::{
    bias_significance_weighted, evaluate_sts, joint_bias_report_weighted, load_sts_tsv, score_sts_pairs,
    JointWeighting, PermutationTest, StsReport,
};
use crate::mining::{
    candidates_tsv, evaluate_threshold, format_threshold, mine_candidates, optimize_threshold, read_gold_pairs,
    read_id_map, tatoeba_accuracy, MiningConfig, PrecisionRecall,
};
use crate::seed;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub path: PathBuf,
    pub source_lang: String,
    pub target_lang: String,
    /// Keep only the first `k` pairs.
    #[serde(default)]
    pub truncate: Option<usize>,
    /// Keep pairs whose score is strictly above this.
    #[serde(default)]
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutSpec {
    #[serde(default)]
    pub size: usize,
    #[serde(default)]
    pub mode: HoldoutMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// Frozen encoder in the params format.
    Params(PathBuf),
    /// Precomputed vectors keyed by sentence hash.
    Embeddings(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Start from these parameters instead of a seeded init.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TatoebaSpec {
    pub name: String,
    /// Row-aligned `source<TAB>target` file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub sts: Option<PathBuf>,
    #[serde(default)]
    pub tatoeba: Vec<TatoebaSpec>,
}

/// Everything a training run needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub holdout: HoldoutSpec,
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub student: StudentSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_threads() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Flag values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Reads `seed`, `threads` and `out_dir` from a run config or manifest
    /// without requiring the training-only fields.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let value = value.get("run_config").unwrap_or(&value);
        let field = |key: &str| value.get(key).filter(|v| !v.is_null());
        let bad = |key: &str| Error::Config(format!("config field {key} has the wrong type"));
        Ok(Overrides {
            seed: field("seed").map(|v| v.as_u64().ok_or_else(|| bad("seed"))).transpose()?,
            threads: field("threads")
                .map(|v| v.as_u64().map(|t| t as usize).ok_or_else(|| bad("threads")))
                .transpose()?,
            out_dir: field("out_dir")
                .map(|v| v.as_str().map(PathBuf::from).ok_or_else(|| bad("out_dir")))
                .transpose()?,
        })
    }

    /// Fields set here win over `fallback`.
    pub fn or(self, fallback: Overrides) -> Overrides {
        Overrides {
            seed: self.seed.or(fallback.seed),
            threads: self.threads.or(fallback.threads),
            out_dir: self.out_dir.or(fallback.out_dir),
        }
    }
}

impl RunConfig {
    /// Parses a run config, or the `run_config` echoed in a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let value = match value.get("run_config") {
            Some(inner) => inner.clone(),
            None => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn input_paths(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = self.datasets.iter().map(|d| ("dataset", d.path.as_path())).collect();
        v.push(match &self.teacher {
            TeacherSpec::Params(p) => ("teacher", p.as_path()),
            TeacherSpec::Embeddings(p) => ("teacher", p.as_path()),
        });
        if let Some(p) = &self.student.init {
            v.push(("student_init", p));
        }
        if let Some(p) = &self.eval.sts {
            v.push(("sts", p));
        }
        v.extend(self.eval.tatoeba.iter().map(|t| ("tatoeba", t.path.as_path())));
        v
    }

    /// Checks paths and settings before any compute happens.
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets declared".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for (role, p) in self.input_paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("{role} path {} does not exist", p.display())));
            }
        }
        self.student.encoder.validate()?;
        self.train.validate()?;
        if self.train.eval_every > 0 && self.holdout.size == 0 {
            return Err(Error::Config("train.eval_every > 0 needs holdout.size > 0".into()));
        }
        Ok(())
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub total_steps: usize,
    pub initial_holdout_mse: Option<f64>,
    pub final_holdout_mse: Option<f64>,
    pub best_step: Option<usize>,
    pub best_holdout_mse: Option<f64>,
    pub training_pairs: usize,
    pub holdout_pairs: usize,
}

/// `manifest.json`: the effective config plus content hashes of every input
/// and output. Feeding it back to `train --config` reruns the same job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub run_config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: TrainSummary,
}

#[derive(Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub manifest: Manifest,
    pub sts: Option<StsReport>,
}

fn load_teacher(spec: &TeacherSpec) -> Result<TeacherProvider> {
    Ok(match spec {
        TeacherSpec::Params(p) => TeacherProvider::FrozenEncoder(load_params(p)?),
        TeacherSpec::Embeddings(p) => TeacherProvider::EmbeddingFile(EmbeddingIndex::load(p)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TatoebaReport {
    pub forward: f64,
    pub backward: f64,
    pub mean: f64,
    pub pairs: usize,
}

impl TatoebaReport {
    fn new((forward, backward): (f64, f64), pairs: usize) -> Self {
        TatoebaReport {
            forward,
            backward,
            mean: (forward + backward) / 2.0,
            pairs,
        }
    }
}

/// Trains a student from a run config and writes `final.xenc`, `best.xenc`
/// (when a hold-out set exists), `history.tsv`, optional evaluation reports
/// and `manifest.json` into `out_dir`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainRun> {
    config.validate()?;
    with_threads(config.threads, || run_train(config))
}

fn run_train(config: &RunConfig) -> Result<TrainRun> {
    let mut datasets = Vec::with_capacity(config.datasets.len());
    for spec in &config.datasets {
        let opts = LoadOptions {
            truncate: spec.truncate,
            name: spec.name.clone(),
        };
        let loaded = load_parallel_tsv_with(&spec.path, &spec.source_lang, &spec.target_lang, &opts)?;
        let ds = match spec.min_score {
            Some(min) => filter_by_score(loaded.dataset, min),
            None => loaded.dataset,
        };
        datasets.push(ds);
    }
    let registry = build_registry(
        datasets,
        config.holdout.size,
        config.holdout.mode,
        seed::derive(config.seed, "holdout"),
    )?;
    let teacher = load_teacher(&config.teacher)?;
    let student = match &config.student.init {
        Some(p) => load_params(p)?,
        None => init_encoder(config.student.encoder, seed::derive(config.seed, "student_init"))?,
    };
    let train_cfg = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let outcome = train(&registry, &teacher, student, &train_cfg)?;

    create_dir(&config.out_dir)?;
    let mut outputs = Vec::new();
    let mut emit = |role: &str, name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = config.out_dir.join(name);
        write(&path, &bytes)?;
        outputs.push(FileDigest {
            role: role.into(),
            path,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    };
    emit("final_params", "final.xenc", params_to_bytes(&outcome.params)?)?;
    if let Some(best) = &outcome.best {
        emit("best_params", "best.xenc", params_to_bytes(&best.params)?)?;
    }
    emit("history", "history.tsv", history_tsv(&outcome.history).into_bytes())?;

    // evaluate what was written, not the f64 in-memory copy
    let saved = outcome.params.rounded_to_f32();
    let sts = match &config.eval.sts {
        Some(p) => {
            let report = evaluate_sts(&saved, &load_sts_tsv(p)?)?;
            emit("sts_report", "sts_report.tsv", report.to_tsv().into_bytes())?;
            emit("sts_report", "sts_report.json", report.to_json().into_bytes())?;
            Some(report)
        }
        None => None,
    };
    if !config.eval.tatoeba.is_empty() {
        let mut rows = String::from("name\tforward\tbackward\tmean\tpairs\n");
        for t in &config.eval.tatoeba {
            let ds = load_parallel_tsv_with(&t.path, "src", "tgt", &LoadOptions::default())?.dataset;
            let r = tatoeba_for_pairs(&saved, &ds.pairs)?;
            rows.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", t.name, r.forward, r.backward, r.mean, r.pairs));
        }
        emit("tatoeba_report", "tatoeba_report.tsv", rows.into_bytes())?;
    }

    let inputs = config
        .input_paths()
        .into_iter()
        .map(|(role, p)| {
            Ok(FileDigest {
                role: role.into(),
                path: p.to_path_buf(),
                sha256: file_sha256(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = TrainSummary {
        total_steps: outcome.total_steps,
        initial_holdout_mse: outcome.initial_holdout_mse,
        final_holdout_mse: outcome.history.last().map(|r| r.holdout_mse).filter(|x| x.is_finite()),
        best_step: outcome.best.as_ref().map(|b| b.step),
        best_holdout_mse: outcome.best.as_ref().map(|b| b.holdout_mse),
        training_pairs: registry.total_pairs(),
        holdout_pairs: registry.holdout().len(),
    };
    let manifest = Manifest {
        tool: "xdistill".into(),
        version: TOOL_VERSION.into(),
        command: "train".into(),
        run_config: config.clone(),
        inputs,
        outputs,
        summary,
    };
    let path = config.out_dir.join("manifest.json");
    write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    Ok(TrainRun { outcome, manifest, sts })
}

/// Tatoeba accuracy of `encoder` on row-aligned pairs.
pub fn tatoeba_for_pairs(encoder: &EncoderParams, pairs: &[ParallelPair]) -> Result<TatoebaReport> {
    let src: Vec<&str> = pairs.iter().map(|p| p.source_text.as_str()).collect();
    let tgt: Vec<&str> = pairs.iter().map(|p| p.target_text.as_str()).collect();
    let acc = tatoeba_accuracy(&embed_texts(encoder, &src)?, &embed_texts(encoder, &tgt)?)?;
    Ok(TatoebaReport::new(acc, pairs.len()))
}

/// Embeds every line of `input` (file order) into an embedding file.
pub fn cmd_embed(params_path: &Path, input: &Path, output: &Path, threads: usize) -> Result<EmbeddingMatrix> {
    let params = load_params(params_path)?;
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<&str> = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let matrix = with_threads(threads, || embed_texts(&params, &lines))?;
    let hashes: Vec<u64> = lines.iter().map(|l| sentence_hash(l)).collect();
    write_embeddings(output, &hashes, &matrix)?;
    Ok(matrix)
}

pub fn cmd_eval_sts(params_path: &Path, sts: &Path, out_dir: &Path, threads: usize) -> Result<StsReport> {
    let params = load_params(params_path)?;
    let pairs = load_sts_tsv(sts)?;
    let report = with_threads(threads, || evaluate_sts(&params, &pairs))?;
    create_dir(out_dir)?;
    write(&out_dir.join("sts_report.tsv"), report.to_tsv())?;
    write(&out_dir.join("sts_report.json"), report.to_json())?;
    Ok(report)
}

/// Where `bias` gets its sentence vectors.
#[derive(Debug, Clone)]
pub enum VectorSource {
    Params(PathBuf),
    Embeddings(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BiasArgs {
    pub sts: PathBuf,
    pub vectors: VectorSource,
    pub trials: usize,
    pub seed: u64,
    pub weighting: JointWeighting,
    pub out_dir: PathBuf,
    pub threads: usize,
}

/// Joint-pool bias report with a permutation p-value.
pub fn cmd_bias(args: &BiasArgs) -> Result<StsReport> {
    let provider = load_teacher(&match &args.vectors {
        VectorSource::Params(p) => TeacherSpec::Params(p.clone()),
        VectorSource::Embeddings(p) => TeacherSpec::Embeddings(p.clone()),
    })?;
    let pairs = load_sts_tsv(&args.sts)?;
    let report = with_threads(args.threads, || {
        let scores = score_sts_pairs(&provider, &pairs)?;
        let mut report = joint_bias_report_weighted(&scores, args.weighting)?;
        let p_value = bias_significance_weighted(&scores, args.trials, args.seed, args.weighting)?;
        report.permutation = Some(PermutationTest {
            test: "permutation (subset labels shuffled, sizes kept, add-one smoothing)".into(),
            trials: args.trials,
            seed: args.seed,
            p_value,
        });
        Ok(report)
    })?;
    create_dir(&args.out_dir)?;
    write(&args.out_dir.join("bias_report.tsv"), report.to_tsv())?;
    write(&args.out_dir.join("bias_report.json"), report.to_json())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MineArgs {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub src_ids: Option<PathBuf>,
    pub tgt_ids: Option<PathBuf>,
    /// With gold pairs and no fixed threshold, the F1-optimal threshold is
    /// chosen.
    pub gold: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub config: MiningConfig,
    pub out_dir: PathBuf,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub k: usize,
    pub margin: String,
    pub direction: String,
    pub dedup: String,
    pub candidates: usize,
    /// `"-inf"`, a number, or absent when no threshold was applied.
    pub threshold: Option<String>,
    pub selected: Option<usize>,
    pub metrics: Option<PrecisionRecall>,
}

fn load_matrix(path: &Path, ids: Option<&Path>) -> Result<EmbeddingMatrix> {
    let m = read_embeddings(path)?.matrix;
    match ids {
        Some(p) => {
            let ids = read_id_map(p, m.rows())?;
            m.with_ids(ids)
        }
        None => Ok(m),
    }
}

pub fn cmd_mine(args: &MineArgs) -> Result<MiningReport> {
    let src = load_matrix(&args.src, args.src_ids.as_deref())?;
    let tgt = load_matrix(&args.tgt, args.tgt_ids.as_deref())?;
    let gold: Option<HashSet<(String, String)>> = args.gold.as_deref().map(read_gold_pairs).transpose()?;
    let candidates = with_threads(args.threads, || mine_candidates(&src, &tgt, &args.config))?;
    let (threshold, metrics) = match (args.threshold, &gold) {
        (Some(t), Some(g)) => (Some(t), Some(evaluate_threshold(&candidates, g, t))),
        (Some(t), None) => (Some(t), None),
        (None, Some(g)) => {
            let best = optimize_threshold(&candidates, g);
            (Some(best.threshold), Some(best.metrics))
        }
        (None, None) => (None, None),
    };
    create_dir(&args.out_dir)?;
    write(&args.out_dir.join("candidates.tsv"), candidates_tsv(&candidates, &args.config, threshold))?;
    let report = MiningReport {
        k: args.config.k,
        margin: args.config.margin.to_string(),
        direction: args.config.direction.to_string(),
        dedup: "none".into(),
        candidates: candidates.len(),
        threshold: threshold.map(format_threshold),
        selected: threshold.map(|t| candidates.iter().filter(|c| c.score > t).count()),
        metrics,
    };
    write(
        &args.out_dir.join("mining_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}

pub fn cmd_tatoeba(src: &Path, tgt: &Path, out_dir: &Path, threads: usize) -> Result<TatoebaReport> {
    let s = read_embeddings(src)?.matrix;
    let t = read_embeddings(tgt)?.matrix;
    let acc = with_threads(threads, || tatoeba_accuracy(&s, &t))?;
    let report = TatoebaReport::new(acc, s.rows());
    create_dir(out_dir)?;
    write(
        &out_dir.join("tatoeba_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}

pub fn cmd_pca(embeddings: &Path, labels: &Path, out: &Path) -> Result<Projection2D> {
    let m = read_embeddings(embeddings)?.matrix;
    let labels = read_labels(labels, m.rows())?;
    let projection = pca_top2(&m, &labels)?;
    let text = projection_tsv(&projection)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, text)?;
    Ok(projection)
}
