//! Distils a frozen "language A" encoder into a student that must also embed
//! a word-substitution cipher of A written in another script.
//!
//! Run with `cargo run --release --example distill_cipher`.

use std::time::Instant;

use xdistill::corpus::{build_registry, Dataset, HoldoutMode, TokenizerConfig};
use xdistill::distill::{train, TrainConfig};
use xdistill::encoder::{embed_texts, init_encoder, EncoderConfig, TeacherProvider};
use xdistill::mining::tatoeba_accuracy;
use xdistill::seed;
use xdistill::synthetic::{cipher_corpus, CipherSpec};

fn main() -> xdistill::Result<()> {
    let seed = 7;
    let corpus = cipher_corpus(&CipherSpec { seed, ..CipherSpec::default() });
    let encoder = EncoderConfig {
        tokenizer: TokenizerConfig { buckets: 1 << 16, ..TokenizerConfig::default() },
        embed_dim: 32,
        out_dim: 32,
        ..EncoderConfig::default()
    };
    let teacher = init_encoder(encoder, seed::derive(seed, "teacher"))?;
    let student = init_encoder(encoder, seed::derive(seed, "student_init"))?;
    let registry = build_registry(
        vec![Dataset::new("cipher", corpus.pairs.clone())],
        200,
        HoldoutMode::Pooled,
        seed::derive(seed, "holdout"),
    )?;
    let config = TrainConfig {
        batch_size: 32,
        epochs: 5,
        peak_lr: 2e-2,
        warmup_steps: 50,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    };

    let started = Instant::now();
    let teacher = TeacherProvider::FrozenEncoder(teacher);
    let outcome = train(&registry, &teacher, student, &config)?;
    println!("trained {} steps in {:.1?}", outcome.total_steps, started.elapsed());
    println!("initial hold-out mse\t{:.5}", outcome.initial_holdout_mse.unwrap_or(f64::NAN));
    for row in &outcome.history {
        println!("step {:>5}\ttrain {:.5}\thold-out {:.5}", row.step, row.train_loss, row.holdout_mse);
    }

    let TeacherProvider::FrozenEncoder(teacher) = &teacher else { unreachable!() };
    let src: Vec<&str> = registry.holdout().iter().map(|p| p.source_text.as_str()).collect();
    let tgt: Vec<&str> = registry.holdout().iter().map(|p| p.target_text.as_str()).collect();
    let (fwd, bwd) = tatoeba_accuracy(&embed_texts(&outcome.params, &tgt)?, &embed_texts(teacher, &src)?)?;
    println!("student B vs teacher A retrieval\tforward {fwd:.3}\tbackward {bwd:.3}");
    Ok(())
}
