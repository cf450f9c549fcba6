//! Two-component PCA of sentence embeddings, for checking whether the
//! languages of a parallel set separate in the embedding space.

use std::fs;
use std::path::Path;

use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const POWER_TOLERANCE: f64 = 1e-12;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
/// Second eigenvalue below this fraction of the first is treated as rank
/// deficiency.
pub const DEGENERATE_RATIO: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    /// Unit-norm, mutually orthogonal principal axes.
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues of the two axes, non-increasing.
    pub explained_variance: [f64; 2],
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Power iterations used for each component.
    pub iterations: [usize; 2],
}

fn matvec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    c.chunks_exact(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flips `v` so its first entry with magnitude above 1e-12 is positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(&x) = v.iter().find(|x| x.abs() > 1e-12) {
        if x < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Sample covariance (divisor n - 1) of the mean-centred rows.
pub fn covariance(m: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (m.rows(), m.dim());
    let mut mean = vec![0.0; d];
    for row in m.iter_rows() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut c = vec![0.0; d * d];
    for row in m.iter_rows() {
        let centred: Vec<f64> = row.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..d {
            for j in i..d {
                c[i * d + j] += centred[i] * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = c[i * d + j] / denom;
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    (c, mean)
}

enum PowerOutcome {
    Converged { vector: Vec<f64>, value: f64, iterations: usize },
    Vanished,
}

/// Power iteration on the symmetric PSD matrix `c`, optionally kept
/// orthogonal to `against`.
fn power_iteration(c: &[f64], d: usize, start: Vec<f64>, against: Option<&[f64]>, floor: f64) -> Result<PowerOutcome> {
    let project = |v: &mut Vec<f64>| {
        if let Some(u) = against {
            let p = dotp(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
    };
    let mut v = start;
    for it in 1..=POWER_MAX_ITERATIONS {
        let mut w = matvec(c, d, &v);
        project(&mut w);
        let len = norm(&w);
        if len <= floor {
            return Ok(PowerOutcome::Vanished);
        }
        w.iter_mut().for_each(|x| *x /= len);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta < POWER_TOLERANCE {
            let value = dotp(&v, &matvec(c, d, &v));
            return Ok(PowerOutcome::Converged { vector: v, value, iterations: it });
        }
    }
    let value = dotp(&v, &matvec(c, d, &v));
    if value <= floor {
        return Ok(PowerOutcome::Vanished);
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge within {POWER_MAX_ITERATIONS} iterations"
    )))
}

/// Top-two principal components via power iteration with deflation.
///
/// Iteration starts from the normalized all-ones vector and stops when
/// successive iterates differ by less than 1e-12.
pub fn pca_top2(embeddings: &EmbeddingMatrix, labels: &[String]) -> Result<Projection2D> {
    let (n, d) = (embeddings.rows(), embeddings.dim());
    if n < 3 || d < 2 {
        return Err(Error::arg(format!("pca needs at least 3 rows and 2 dims, got {n}x{d}")));
    }
    if labels.len() != n {
        return Err(Error::arg(format!("{} labels for {n} rows", labels.len())));
    }
    let (c, mean) = covariance(embeddings);
    let ones = vec![1.0 / (d as f64).sqrt(); d];

    let (mut v1, l1, it1) = match power_iteration(&c, d, ones.clone(), None, 0.0)? {
        PowerOutcome::Converged { vector, value, iterations } => (vector, value, iterations),
        PowerOutcome::Vanished => return Err(Error::Numeric("data has zero variance".into())),
    };
    if l1 <= 0.0 {
        return Err(Error::Numeric("data has zero variance".into()));
    }

    let mut deflated = c.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let mut start = ones;
    let p = dotp(&start, &v1);
    start.iter_mut().zip(&v1).for_each(|(x, y)| *x -= p * y);
    if norm(&start) < 1e-8 {
        // all-ones is (nearly) the first axis; fall back to the basis vector
        // least aligned with it
        let k = (0..d).min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs())).unwrap_or(0);
        start = vec![0.0; d];
        start[k] = 1.0;
        let p = dotp(&start, &v1);
        start.iter_mut().zip(&v1).for_each(|(x, y)| *x -= p * y);
    }
    let len = norm(&start);
    start.iter_mut().for_each(|x| *x /= len);
    let floor = DEGENERATE_RATIO * l1;
    let degenerate = || {
        Error::Numeric(format!(
            "degenerate variance: second eigenvalue below {DEGENERATE_RATIO:e} x first ({l1:e})"
        ))
    };
    let (mut v2, l2, it2) = match power_iteration(&deflated, d, start, Some(&v1), floor)? {
        PowerOutcome::Converged { vector, value, iterations } => (vector, value, iterations),
        PowerOutcome::Vanished => return Err(degenerate()),
    };
    if l2 < floor {
        return Err(degenerate());
    }
    // Gram-Schmidt clean-up against accumulated drift
    let p = dotp(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(x, y)| *x -= p * y);
    let len = norm(&v2);
    v2.iter_mut().for_each(|x| *x /= len);
    fix_sign(&mut v1);
    fix_sign(&mut v2);

    let coords = embeddings
        .iter_rows()
        .map(|row| {
            let centred: Vec<f64> = row.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
            [dotp(&centred, &v1), dotp(&centred, &v2)]
        })
        .collect();
    Ok(Projection2D {
        components: [v1, v2],
        explained_variance: [l1, l2],
        coords,
        labels: labels.to_vec(),
        iterations: [it1, it2],
    })
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains(['\t', '\n', '\r']) {
        return Err(Error::arg(format!("invalid projection label {label:?}")));
    }
    Ok(())
}

pub fn projection_tsv(projection: &Projection2D) -> Result<String> {
    let [l1, l2] = projection.explained_variance;
    let mut out = format!("# explained_variance\t{l1}\t{l2}\n");
    for (label, [a, b]) in projection.labels.iter().zip(&projection.coords) {
        check_label(label)?;
        out.push_str(&format!("{label}\t{a}\t{b}\n"));
    }
    Ok(out)
}

/// Writes `label<TAB>pc1<TAB>pc2` rows under a `# explained_variance`
/// header.
pub fn emit_projection_tsv(projection: &Projection2D, path: &Path) -> Result<()> {
    let text = projection_tsv(projection)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRows {
    pub explained_variance: [f64; 2],
    pub rows: Vec<(String, f64, f64)>,
}

pub fn read_projection_tsv(path: &Path) -> Result<ProjectionRows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut explained = [f64::NAN; 2];
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: m.into(),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        if let Some(rest) = line.strip_prefix("# explained_variance\t") {
            let (a, b) = rest.split_once('\t').ok_or_else(|| err("bad header"))?;
            explained = [num(a)?, num(b)?];
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err("expected label<TAB>pc1<TAB>pc2"));
        }
        rows.push((f[0].to_owned(), num(f[1])?, num(f[2])?));
    }
    Ok(ProjectionRows {
        explained_variance: explained,
        rows,
    })
}

/// Reads `row_index<TAB>label` (or bare `label` lines in row order).
pub fn read_labels(path: &Path, rows: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
    if lines.iter().all(|l| l.contains('\t')) {
        return crate::mining::read_id_map(path, rows);
    }
    if lines.len() != rows {
        return Err(Error::arg(format!("{}: {} labels for {rows} rows", path.display(), lines.len())));
    }
    Ok(lines.into_iter().map(str::to_owned).collect())
}
