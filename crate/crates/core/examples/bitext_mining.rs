//! Margin-scored bitext mining between two pools with planted translations,
//! F1-optimal thresholding and Tatoeba-style retrieval accuracy.

use std::collections::HashSet;

use rand::Rng;
use xdistill::encoder::EmbeddingMatrix;
use xdistill::mining::{
    candidates_tsv, knn, mine_candidates, optimize_threshold, tatoeba_accuracy, Direction, MiningConfig,
};
use xdistill::seed;

fn main() -> xdistill::Result<()> {
    let mut rng = seed::rng(2);
    let dim = 24;
    let (n_src, n_tgt, planted) = (300, 250, 120);
    let random = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let src: Vec<Vec<f64>> = (0..n_src).map(|_| random(&mut rng)).collect();
    let mut tgt: Vec<Vec<f64>> = (0..n_tgt).map(|_| random(&mut rng)).collect();
    // the first `planted` targets are noisy copies of the first sources
    for i in 0..planted {
        tgt[i] = src[i].iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
    }
    let src_ids = (0..n_src).map(|i| format!("en-{i:06}")).collect();
    let tgt_ids = (0..n_tgt).map(|i| format!("de-{i:06}")).collect();
    let src = EmbeddingMatrix::from_rows(dim, src, Some(src_ids))?;
    let tgt = EmbeddingMatrix::from_rows(dim, tgt, Some(tgt_ids))?;

    let nn = knn(&src, &tgt, 3)?;
    println!("nearest targets of {}: {:?}", src.ids()[0], nn.neighbors(0));

    let gold: HashSet<(String, String)> =
        (0..planted).map(|i| (format!("en-{i:06}"), format!("de-{i:06}"))).collect();
    for direction in [Direction::Forward, Direction::Backward, Direction::UnionMax] {
        let config = MiningConfig { k: 4, direction, ..MiningConfig::default() };
        let candidates = mine_candidates(&src, &tgt, &config)?;
        let best = optimize_threshold(&candidates, &gold);
        println!(
            "{direction}: {} candidates, threshold {:.4}, P {:.3} R {:.3} F1 {:.3}",
            candidates.len(),
            best.threshold,
            best.metrics.precision,
            best.metrics.recall,
            best.metrics.f1
        );
        if direction == Direction::UnionMax {
            let tsv = candidates_tsv(&candidates[..5], &config, Some(best.threshold));
            print!("{tsv}");
        }
    }

    let rows = |m: &EmbeddingMatrix| (0..planted).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
    let (fwd, bwd) = tatoeba_accuracy(
        &EmbeddingMatrix::from_rows(dim, rows(&src), None)?,
        &EmbeddingMatrix::from_rows(dim, rows(&tgt), None)?,
    )?;
    println!("tatoeba accuracy on the planted pairs: {fwd:.3} / {bwd:.3}");
    Ok(())
}
