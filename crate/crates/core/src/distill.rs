//! Multilingual distillation: the student is regressed onto the teacher's
//! vector of the source sentence from both the source sentence and its
//! translation.
//!
//! For a mini-batch `B` the objective is
//!
//! ```text
//! L = 1/|B| * sum_j ( |M(s_j) - S(s_j)|^2 + |M(s_j) - S(t_j)|^2 )
//! ```
//!
//! with `M` the frozen teacher and `S` the student.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{balanced_batches, DatasetRegistry, ParallelPair, TokenIds};
use crate::encoder::{EncoderParams, TeacherProvider};
use crate::error::{Error, Result};
use crate::seed;

/// Squared Euclidean distance.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-pair loss `|m - u_s|^2 + |m - u_t|^2`.
pub fn distill_loss(teacher_s: &[f64], student_s: &[f64], student_t: &[f64]) -> Result<f64> {
    if teacher_s.len() != student_s.len() || teacher_s.len() != student_t.len() {
        return Err(Error::arg(format!(
            "dimension mismatch: teacher {}, student source {}, student target {}",
            teacher_s.len(),
            student_s.len(),
            student_t.len()
        )));
    }
    Ok(sq_dist(teacher_s, student_s) + sq_dist(teacher_s, student_t))
}

/// One training example: the teacher vector of the source sentence and the
/// student-side tokens of both sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub teacher: Vec<f64>,
    pub source: TokenIds,
    pub target: TokenIds,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

struct Forward {
    pooled: [Vec<f64>; 2],
    out: [Vec<f64>; 2],
}

fn forward(params: &EncoderParams, ex: &Example) -> Result<Forward> {
    if ex.teacher.len() != params.out_dim() {
        return Err(Error::arg(format!(
            "teacher vector has dim {} but student out_dim is {}",
            ex.teacher.len(),
            params.out_dim()
        )));
    }
    let ps = params.pool(&ex.source)?;
    let pt = params.pool(&ex.target)?;
    let us = params.head(&ps);
    let ut = params.head(&pt);
    Ok(Forward {
        pooled: [ps, pt],
        out: [us, ut],
    })
}

/// Mean per-pair loss over the batch.
pub fn batch_loss(params: &EncoderParams, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let per: Vec<f64> = batch
        .examples
        .par_iter()
        .map(|ex| {
            let f = forward(params, ex)?;
            distill_loss(&ex.teacher, &f.out[0], &f.out[1])
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / batch.len() as f64)
}

/// Gradients of the batch loss. Token-table gradients are kept sparse, by
/// row id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub e_rows: BTreeMap<u32, Vec<f64>>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Gradients {
            loss: 0.0,
            e_rows: BTreeMap::new(),
            w: vec![0.0; params.w.len()],
            b: vec![0.0; params.b.len()],
        }
    }

    /// Token-table gradient as a dense `V x embed_dim` array.
    pub fn e_dense(&self, params: &EncoderParams) -> Vec<f64> {
        let d = params.embed_dim();
        let mut out = vec![0.0; params.e.len()];
        for (&row, g) in &self.e_rows {
            out[row as usize * d..(row as usize + 1) * d].copy_from_slice(g);
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::Training(format!("non-finite gradient in parameter block {name}")));
        if self.e_rows.values().flatten().any(|x| !x.is_finite()) {
            return bad("e");
        }
        if self.w.iter().any(|x| !x.is_finite()) {
            return bad("w");
        }
        if self.b.iter().any(|x| !x.is_finite()) {
            return bad("b");
        }
        Ok(())
    }
}

/// Analytic gradients of the batch-mean loss.
///
/// Forward passes run in parallel; accumulation walks the batch in order so
/// the result does not depend on the worker count.
pub fn loss_gradients(params: &EncoderParams, batch: &Batch) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let fwd: Vec<Forward> = batch
        .examples
        .par_iter()
        .map(|ex| forward(params, ex))
        .collect::<Result<_>>()?;
    let d = params.embed_dim();
    let o = params.out_dim();
    let scale = 2.0 / batch.len() as f64;
    let act = params.config.activation;
    let mut g = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut dz = vec![0.0; o];
    let mut dpooled = vec![0.0; d];
    for (ex, f) in batch.examples.iter().zip(&fwd) {
        loss += distill_loss(&ex.teacher, &f.out[0], &f.out[1])?;
        for side in 0..2 {
            let u = &f.out[side];
            let pooled = &f.pooled[side];
            let tokens = if side == 0 { &ex.source } else { &ex.target };
            for j in 0..o {
                dz[j] = scale * (u[j] - ex.teacher[j]) * act.derivative_from_output(u[j]);
                g.b[j] += dz[j];
            }
            for i in 0..d {
                let wrow = &params.w[i * o..(i + 1) * o];
                let grow = &mut g.w[i * o..(i + 1) * o];
                let mut acc = 0.0;
                for j in 0..o {
                    grow[j] += pooled[i] * dz[j];
                    acc += wrow[j] * dz[j];
                }
                dpooled[i] = acc / tokens.len() as f64;
            }
            for &t in tokens.as_slice() {
                let row = g.e_rows.entry(t).or_insert_with(|| vec![0.0; d]);
                for (r, x) in row.iter_mut().zip(&dpooled) {
                    *r += x;
                }
            }
        }
    }
    g.loss = loss / batch.len() as f64;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record a history row (with hold-out MSE) every this many steps;
    /// 0 records once per epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 5,
            peak_lr: 5e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("epsilon must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> f64 {
    let peak = config.peak_lr;
    let warm = config.warmup_steps;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if total_steps <= warm {
        return peak;
    }
    let left = total_steps.saturating_sub(step);
    peak * left as f64 / (total_steps - warm) as f64
}

/// Adam moments, shaped like the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m_e: Vec<f64>,
    pub v_e: Vec<f64>,
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        OptimizerState {
            m_e: vec![0.0; params.e.len()],
            v_e: vec![0.0; params.e.len()],
            m_w: vec![0.0; params.w.len()],
            v_w: vec![0.0; params.w.len()],
            m_b: vec![0.0; params.b.len()],
            v_b: vec![0.0; params.b.len()],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

struct AdamCoeffs {
    cfg: AdamConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
}

impl AdamCoeffs {
    #[inline]
    fn update(&self, p: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
        let c = &self.cfg;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        if self.lr == 0.0 {
            return;
        }
        *p -= self.lr * c.weight_decay * *p;
        let m_hat = *m / self.bc1;
        let v_hat = *v / self.bc2;
        *p -= self.lr * m_hat / (v_hat.sqrt() + c.epsilon);
    }

    fn dense(&self, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        for i in 0..p.len() {
            self.update(&mut p[i], &mut m[i], &mut v[i], g[i]);
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay
/// (`p <- p - lr * wd * p` before the moment update is applied).
///
/// Rows of the token table without a gradient still see their moments
/// decay and their stale momentum applied, as in dense Adam.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if state.m_e.len() != params.e.len() || state.m_w.len() != params.w.len() || state.m_b.len() != params.b.len()
    {
        return Err(Error::arg("optimizer state does not match parameter shapes"));
    }
    if grads.w.len() != params.w.len() || grads.b.len() != params.b.len() {
        return Err(Error::arg("gradient shapes do not match parameters"));
    }
    grads.check_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let k = AdamCoeffs {
        cfg: *config,
        lr,
        bc1: 1.0 - config.beta1.powi(t),
        bc2: 1.0 - config.beta2.powi(t),
    };
    let d = params.embed_dim();
    let mut sparse = grads.e_rows.iter().peekable();
    for (r, ((p, m), v)) in params
        .e
        .chunks_exact_mut(d)
        .zip(state.m_e.chunks_exact_mut(d))
        .zip(state.v_e.chunks_exact_mut(d))
        .enumerate()
    {
        match sparse.peek() {
            Some((&row, g)) if row as usize == r => {
                k.dense(p, m, v, g);
                sparse.next();
            }
            _ => {
                for i in 0..d {
                    k.update(&mut p[i], &mut m[i], &mut v[i], 0.0);
                }
            }
        }
    }
    if let Some((&row, _)) = sparse.next() {
        return Err(Error::arg(format!("gradient for token row {row} outside the table")));
    }
    k.dense(&mut params.w, &mut state.m_w, &mut state.v_w, &grads.w);
    k.dense(&mut params.b, &mut state.m_b, &mut state.v_b, &grads.b);
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    /// NaN when there is no hold-out set.
    pub holdout_mse: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub holdout_mse: f64,
    pub params: EncoderParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final step.
    pub params: EncoderParams,
    pub history: Vec<HistoryRow>,
    /// Hold-out MSE of the untrained student.
    pub initial_holdout_mse: Option<f64>,
    /// Lowest hold-out MSE seen at a history row.
    pub best: Option<Checkpoint>,
    pub total_steps: usize,
}

/// Teacher vectors for unique source sentences, computed once per run.
struct TeacherCache<'a> {
    teacher: &'a TeacherProvider,
    vectors: HashMap<String, Vec<f64>>,
}

impl<'a> TeacherCache<'a> {
    fn new(teacher: &'a TeacherProvider) -> Self {
        TeacherCache {
            teacher,
            vectors: HashMap::new(),
        }
    }

    fn get(&mut self, sentence: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.vectors.get(sentence) {
            return Ok(v.clone());
        }
        let v = self.teacher.lookup(sentence)?;
        self.vectors.insert(sentence.to_owned(), v.clone());
        Ok(v)
    }

    fn example(&mut self, student: &EncoderParams, pair: &ParallelPair) -> Result<Example> {
        Ok(Example {
            teacher: self.get(&pair.source_text)?,
            source: student.tokenize(&pair.source_text),
            target: student.tokenize(&pair.target_text),
        })
    }
}

/// Mean per-pair distillation loss of `student` over `examples`.
pub fn holdout_mse(student: &EncoderParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::arg("empty hold-out set"));
    }
    let batch = Batch {
        examples: examples.to_vec(),
    };
    batch_loss(student, &batch)
}

/// Prepares hold-out examples with a teacher lookup per pair.
pub fn prepare_examples(
    student: &EncoderParams,
    teacher: &TeacherProvider,
    pairs: &[ParallelPair],
) -> Result<Vec<Example>> {
    let mut cache = TeacherCache::new(teacher);
    pairs.iter().map(|p| cache.example(student, p)).collect()
}

/// Trains `student` on balanced batches drawn from `registry`.
///
/// The teacher only ever sees source sentences; both student outputs regress
/// onto that vector. Update `t` (0-based) uses `lr_at(t)`.
pub fn train(
    registry: &DatasetRegistry,
    teacher: &TeacherProvider,
    student: EncoderParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if teacher.dim() != student.out_dim() {
        return Err(Error::arg(format!(
            "teacher dim {} differs from student out_dim {}",
            teacher.dim(),
            student.out_dim()
        )));
    }
    if config.eval_every > 0 && registry.holdout().is_empty() {
        return Err(Error::arg("eval_every > 0 requires a non-empty hold-out set"));
    }
    let mut cache = TeacherCache::new(teacher);
    let holdout: Vec<Example> = registry
        .holdout()
        .iter()
        .map(|p| cache.example(&student, p))
        .collect::<Result<_>>()?;
    let eval = |p: &EncoderParams| -> Result<f64> {
        if holdout.is_empty() {
            Ok(f64::NAN)
        } else {
            holdout_mse(p, &holdout)
        }
    };

    let mut params = student;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            history: Vec::new(),
            initial_holdout_mse: None,
            best: None,
            total_steps: 0,
        });
    }
    let mut sampler = balanced_batches(registry, config.batch_size, seed::derive(config.seed, "sampler"))?;
    let total_steps = sampler.batches_per_epoch() * config.epochs;
    let initial = eval(&params)?;
    let adam = AdamConfig::from(config);
    let mut state = OptimizerState::new(&params);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for epoch in 0..config.epochs {
        let batches: Vec<Vec<&ParallelPair>> =
            sampler.epoch().map(|b| b.into_iter().map(|d| d.pair).collect()).collect();
        let last_epoch = epoch + 1 == config.epochs;
        for (bi, pairs) in batches.iter().enumerate() {
            let batch = Batch {
                examples: pairs
                    .iter()
                    .map(|p| cache.example(&params, p))
                    .collect::<Result<_>>()?,
            };
            let grads = loss_gradients(&params, &batch)?;
            if !grads.loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            adam_step(&mut params, &grads, &mut state, lr_at(step, config, total_steps), &adam)?;
            step += 1;
            loss_sum += grads.loss;
            loss_count += 1;

            let end_of_epoch = bi + 1 == batches.len();
            let record = if config.eval_every > 0 {
                step.is_multiple_of(config.eval_every) || (last_epoch && end_of_epoch)
            } else {
                end_of_epoch
            };
            if record {
                let mse = eval(&params)?;
                if !holdout.is_empty() && !mse.is_finite() {
                    return Err(Error::Training(format!("non-finite hold-out loss at step {step}")));
                }
                history.push(HistoryRow {
                    step,
                    train_loss: loss_sum / loss_count as f64,
                    holdout_mse: mse,
                });
                loss_sum = 0.0;
                loss_count = 0;
                if mse.is_finite() && best.as_ref().is_none_or(|b| mse < b.holdout_mse) {
                    best = Some(Checkpoint {
                        step,
                        holdout_mse: mse,
                        params: params.clone(),
                    });
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        initial_holdout_mse: initial.is_finite().then_some(initial),
        best,
        total_steps,
    })
}

pub fn history_tsv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step\ttrain_loss\tholdout_mse\n");
    for r in history {
        out.push_str(&format!("{}\t{}\t{}\n", r.step, r.train_loss, r.holdout_mse));
    }
    out
}

pub fn write_history_tsv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    fs::write(path, history_tsv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, TokenizerConfig};
    use crate::encoder::{init_encoder, Activation, EncoderConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(v: u32, d: u32, o: u32, seed: u64) -> EncoderParams {
        let cfg = EncoderConfig {
            tokenizer: TokenizerConfig {
                buckets: v,
                ..TokenizerConfig::default()
            },
            embed_dim: d,
            out_dim: o,
            activation: Activation::Identity,
        };
        let mut p = init_encoder(cfg, seed).unwrap();
        let mut rng = seed::rng(seed + 100);
        p.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        p
    }

    #[test]
    fn loss_examples() {
        assert_eq!(distill_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distill_loss(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(distill_loss(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = seed::rng(11);
        for _ in 0..50 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let mut oracle = 0.0;
            for i in 0..16 {
                let a = v[0][i] - v[1][i];
                oracle += a * a;
            }
            for i in 0..16 {
                let a = v[0][i] - v[2][i];
                oracle += a * a;
            }
            assert!((distill_loss(&v[0], &v[1], &v[2]).unwrap() - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn loss_properties(m in proptest::collection::vec(-5.0f64..5.0, 4), s in proptest::collection::vec(-5.0f64..5.0, 4), t in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let l = distill_loss(&m, &s, &t).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l, distill_loss(&m, &t, &s).unwrap());
            let dbl = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
            let l2 = distill_loss(&dbl(&m), &dbl(&s), &dbl(&t)).unwrap();
            prop_assert!((l2 - 4.0 * l).abs() <= 1e-12 * l2.max(1.0));
            prop_assert_eq!(l == 0.0, m == s && m == t);
        }
    }

    #[test]
    fn zero_gradient_at_exact_mimicry() {
        let p = tiny(16, 3, 2, 1);
        let src = TokenIds(vec![1, 2, 3]);
        let u = crate::encoder::embed(&p, &src).unwrap();
        let batch = Batch {
            examples: vec![Example {
                teacher: u,
                source: src.clone(),
                target: src,
            }],
        };
        let g = loss_gradients(&p, &batch).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.b.iter().chain(&g.w).chain(g.e_rows.values().flatten()).all(|&x| x == 0.0));
    }

    #[test]
    fn hand_chain_rule_bias() {
        let p = tiny(8, 2, 2, 3);
        let m = vec![0.3, -0.7];
        let ex = Example {
            teacher: m.clone(),
            source: TokenIds(vec![1]),
            target: TokenIds(vec![5]),
        };
        let us = crate::encoder::embed(&p, &ex.source).unwrap();
        let ut = crate::encoder::embed(&p, &ex.target).unwrap();
        let g = loss_gradients(&p, &Batch { examples: vec![ex.clone()] }).unwrap();
        for j in 0..2 {
            let hand = 2.0 * (us[j] - m[j]) + 2.0 * (ut[j] - m[j]);
            assert!((g.b[j] - hand).abs() < 1e-14);
            // dW[i][j] = pooled_i * dz_j summed over both sides
            for i in 0..2 {
                let hw = p.token_row(1)[i] * 2.0 * (us[j] - m[j]) + p.token_row(5)[i] * 2.0 * (ut[j] - m[j]);
                assert!((g.w[i * 2 + j] - hw).abs() < 1e-14);
            }
        }
        let h = 1e-5;
        for j in 0..2 {
            let mut plus = p.clone();
            plus.b[j] += h;
            let mut minus = p.clone();
            minus.b[j] -= h;
            let b = Batch { examples: vec![ex.clone()] };
            let fd = (batch_loss(&plus, &b).unwrap() - batch_loss(&minus, &b).unwrap()) / (2.0 * h);
            assert!((fd - g.b[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn tanh_gradients_match_finite_differences() {
        let mut p = tiny(12, 3, 2, 5);
        p.config.activation = Activation::Tanh;
        let mut rng = seed::rng(5);
        let examples = (0..3)
            .map(|_| Example {
                teacher: (0..2).map(|_| rng.gen_range(-0.9..0.9)).collect(),
                source: TokenIds((0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..12)).collect()),
                target: TokenIds((0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..12)).collect()),
            })
            .collect();
        let batch = Batch { examples };
        let g = loss_gradients(&p, &batch).unwrap();
        let dense_e = g.e_dense(&p);
        let h = 1e-5;
        for i in 0..p.e.len() {
            let mut a = p.clone();
            a.e[i] += h;
            let mut b = p.clone();
            b.e[i] -= h;
            let num = (batch_loss(&a, &batch).unwrap() - batch_loss(&b, &batch).unwrap()) / (2.0 * h);
            assert!((num - dense_e[i]).abs() < 1e-8, "e[{i}] {num} vs {}", dense_e[i]);
        }
    }

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig {
            peak_lr: 2e-5,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg, 1100), 0.0);
        assert_eq!(lr_at(100, &cfg, 1100), 2e-5);
        assert_eq!(lr_at(1100, &cfg, 1100), 0.0);
        assert!((lr_at(600, &cfg, 1100) - 1e-5).abs() < 1e-20);
        assert!((lr_at(50, &cfg, 1100) - 1e-5).abs() < 1e-20);
        let no_warm = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lr_at(0, &no_warm, 10), 2e-5);
    }

    fn one_param_model() -> EncoderParams {
        let cfg = EncoderConfig {
            tokenizer: TokenizerConfig {
                buckets: 1,
                ..TokenizerConfig::default()
            },
            embed_dim: 1,
            out_dim: 1,
            activation: Activation::Identity,
        };
        EncoderParams {
            config: cfg,
            e: vec![0.5],
            w: vec![-0.25],
            b: vec![0.125],
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = one_param_model();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        st.m_w[0] = 0.0;
        let g = Gradients::zeros_like(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        // non-zero moments decay under zero gradient
        st.m_b[0] = 1.0;
        st.v_b[0] = 1.0;
        adam_step(&mut p, &g, &mut st, 0.0, &cfg).unwrap();
        assert_eq!(st.m_b[0], 0.9);
        assert_eq!(st.v_b[0], 0.999);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut p = one_param_model();
        let mut st = OptimizerState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.e_rows.insert(0, vec![1.0]);
        g.w[0] = 1.0;
        g.b[0] = 1.0;
        let cfg = AdamConfig::default();
        let lr = 0.01;
        let before = p.clone();
        adam_step(&mut p, &g, &mut st, lr, &cfg).unwrap();
        // m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1
        let closed = |p0: f64| {
            let decayed = p0 - lr * 0.01 * p0;
            let m_hat = (1.0 - 0.9) / (1.0 - 0.9f64.powi(1));
            let v_hat = (1.0 - 0.999) / (1.0 - 0.999f64.powi(1));
            decayed - lr * m_hat / (v_hat.sqrt() + 1e-8)
        };
        assert!((p.e[0] - closed(before.e[0])).abs() < 1e-15);
        assert!((p.w[0] - closed(before.w[0])).abs() < 1e-15);
        assert!((p.b[0] - (before.b[0] - lr * 0.01 * before.b[0] - lr / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = one_param_model();
        let mut st = OptimizerState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.w[0] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("block w"), "{err}");
    }

    fn toy_registry() -> (DatasetRegistry, TeacherProvider, EncoderParams) {
        let teacher = tiny(64, 4, 3, 1);
        let student = tiny(64, 4, 3, 2);
        let words = ["red", "blue", "green", "cat", "dog", "runs", "sleeps", "big", "small"];
        let mut rng = seed::rng(4);
        let pairs: Vec<ParallelPair> = (0..60)
            .map(|i| {
                let s: Vec<&str> = (0..4).map(|_| words[rng.gen_range(0..words.len())]).collect();
                let src = format!("{} {i}", s.join(" "));
                let tgt = src.to_uppercase().chars().rev().collect::<String>();
                ParallelPair::new(src, tgt, "en", "xx").unwrap()
            })
            .collect();
        let reg = crate::corpus::build_registry(
            vec![Dataset::new("toy", pairs)],
            10,
            crate::corpus::HoldoutMode::Pooled,
            1,
        )
        .unwrap();
        (reg, TeacherProvider::FrozenEncoder(teacher), student)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (reg, teacher, student) = toy_registry();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&reg, &teacher, student.clone(), &cfg).unwrap();
        assert_eq!(out.params, student);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_reduces_holdout_and_is_deterministic() {
        let (reg, teacher, student) = toy_registry();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 20,
            peak_lr: 0.05,
            warmup_steps: 5,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let a = train(&reg, &teacher, student.clone(), &cfg).unwrap();
        let b = train(&reg, &teacher, student, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(history_tsv(&a.history), history_tsv(&b.history));
        assert!(a.history.windows(2).all(|w| w[0].step < w[1].step));
        assert!(a.history.iter().all(|r| r.train_loss.is_finite() && r.holdout_mse.is_finite()));
        assert_eq!(a.history.last().unwrap().step, a.total_steps);
        let first = a.initial_holdout_mse.unwrap();
        assert!(a.history.last().unwrap().holdout_mse < first);
        let best = a.best.unwrap();
        assert!(a.history.iter().all(|r| r.holdout_mse >= best.holdout_mse));
    }

    #[test]
    fn thread_count_does_not_change_training() {
        let (reg, teacher, student) = toy_registry();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 2,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let run = |n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| train(&reg, &teacher, student.clone(), &cfg).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.params, b.params);
        assert_eq!(history_tsv(&a.history), history_tsv(&b.history));
    }

    #[test]
    fn missing_teacher_sentence_aborts() {
        let (reg, _, student) = toy_registry();
        let idx = crate::encoder::EmbeddingIndex::from_file(&crate::encoder::EmbeddingFile {
            hashes: vec![1],
            matrix: crate::encoder::EmbeddingMatrix::new(3, vec![0.0; 3], None).unwrap(),
        });
        let err = train(&reg, &TeacherProvider::EmbeddingFile(idx), student, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Lookup { .. }));
    }

    #[test]
    fn holdout_required_when_evaluating() {
        let (_, teacher, student) = toy_registry();
        let reg = DatasetRegistry::new(
            vec![Dataset::new("d", vec![ParallelPair::new("a", "b", "en", "de").unwrap()])],
            vec![],
        )
        .unwrap();
        assert!(train(&reg, &teacher, student.clone(), &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            eval_every: 0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train(&reg, &teacher, student, &cfg).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history[0].holdout_mse.is_nan());
    }
}
