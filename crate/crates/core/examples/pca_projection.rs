//! Projects two "languages" of embeddings onto their top principal axes and
//! writes the labelled 2-D coordinates.

use rand::Rng;
use xdistill::analysis::{emit_projection_tsv, pca_top2};
use xdistill::encoder::EmbeddingMatrix;
use xdistill::seed;

fn main() -> xdistill::Result<()> {
    let mut rng = seed::rng(4);
    let dim = 10;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lang, offset) in [("en", 0.0), ("de", 1.5)] {
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // a per-language shift along the first axis
            v[0] += offset;
            rows.push(v);
            labels.push(lang.to_string());
        }
    }
    let projection = pca_top2(&EmbeddingMatrix::from_rows(dim, rows, None)?, &labels)?;
    println!(
        "eigenvalues {:.4} {:.4} after {:?} power iterations",
        projection.explained_variance[0], projection.explained_variance[1], projection.iterations
    );
    for lang in ["en", "de"] {
        let xs: Vec<f64> = projection
            .coords
            .iter()
            .zip(&projection.labels)
            .filter(|(_, l)| *l == lang)
            .map(|(c, _)| c[0])
            .collect();
        println!("{lang}: mean first coordinate {:.3}", xs.iter().sum::<f64>() / xs.len() as f64);
    }
    let out = std::env::temp_dir().join("xdistill-projection.tsv");
    emit_projection_tsv(&projection, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
