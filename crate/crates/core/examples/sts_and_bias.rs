//! Spearman evaluation of an encoder on graded similarity pairs, and the
//! joint-pool language-bias report with its permutation test.

use std::collections::BTreeMap;

use xdistill::corpus::TokenizerConfig;
use xdistill::encoder::{init_encoder, EncoderConfig};
use xdistill::eval_sts::{bias_significance, evaluate_sts, joint_bias_report, spearman, SubsetScores};
use xdistill::synthetic::{cipher_corpus, sts_pairs, CipherSpec};

fn main() -> xdistill::Result<()> {
    println!("spearman of a monotone pair: {}", spearman(&[0.1, 0.4, 0.2], &[1.0, 5.0, 3.0])?);

    let corpus = cipher_corpus(&CipherSpec { sentences: 10, vocab: 200, seed: 1, ..CipherSpec::default() });
    let pairs = sts_pairs(&corpus, &[('A', 'A'), ('B', 'B')], 200, 5);
    let config = EncoderConfig {
        tokenizer: TokenizerConfig { buckets: 1 << 14, ..TokenizerConfig::default() },
        embed_dim: 32,
        out_dim: 32,
        ..EncoderConfig::default()
    };
    // a random encoder already ranks word-overlap similarity well
    let report = evaluate_sts(&init_encoder(config, 3)?, &pairs)?;
    print!("{}", report.to_tsv());

    // a constructed bias: one subset's predictions are inflated by 0.5
    let gold: Vec<f64> = (0..100).map(|i| (i % 21) as f64 / 4.0).collect();
    let pred = |shift: f64| gold.iter().enumerate().map(|(i, g)| g / 5.0 + ((i * 7) % 10) as f64 * 0.01 + shift).collect();
    let subsets = BTreeMap::from([
        ("EN-EN".to_string(), SubsetScores { pred: pred(0.0), gold: gold.clone() }),
        ("EN-DE".to_string(), SubsetScores { pred: pred(0.5), gold: gold.clone() }),
    ]);
    let mut bias = joint_bias_report(&subsets)?;
    let p = bias_significance(&subsets, 999, 11)?;
    bias.permutation = Some(xdistill::eval_sts::PermutationTest {
        test: "permutation".into(),
        trials: 999,
        seed: 11,
        p_value: p,
    });
    println!("{}", bias.to_json());
    Ok(())
}
