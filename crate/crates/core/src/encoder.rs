//! Embedding-bag encoder: hashed n-gram token table, mean pooling and an
//! affine head. Teacher and student share this architecture.

use std::collections::HashMap;
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{fnv1a64, tokenize, TokenIds, TokenizerConfig};
use crate::error::{Error, Result};
use crate::seed;

pub const PARAMS_MAGIC: &[u8; 4] = b"XENC";
pub const PARAMS_VERSION: u32 = 1;
pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"XEMB";
pub const EMBEDDINGS_VERSION: u32 = 1;

/// Output nonlinearity of the head. The default is a plain affine map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Tokenizer settings; `tokenizer.buckets` is the vocabulary size V.
    pub tokenizer: TokenizerConfig,
    pub embed_dim: u32,
    pub out_dim: u32,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tokenizer: TokenizerConfig::default(),
            embed_dim: 64,
            out_dim: 64,
            activation: Activation::Identity,
        }
    }
}

impl EncoderConfig {
    pub fn vocab(&self) -> usize {
        self.tokenizer.buckets as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        if self.embed_dim == 0 || self.out_dim == 0 {
            return Err(Error::arg("embed_dim and out_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Token table `e` (V x embed_dim), projection `w` (embed_dim x out_dim)
/// and bias `b`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub e: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Uniform init on `[-1/sqrt(embed_dim), 1/sqrt(embed_dim)]`, bias zero.
///
/// Draws are rounded to `f32` so a fresh model survives a save/load cycle
/// unchanged.
pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let d = config.embed_dim as usize;
    let o = config.out_dim as usize;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = seed::rng(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.gen_range(-bound..=bound) as f32 as f64)
            .collect()
    };
    let e = draw(config.vocab() * d);
    let w = draw(d * o);
    Ok(EncoderParams {
        config,
        e,
        w,
        b: vec![0.0; o],
    })
}

impl EncoderParams {
    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim as usize
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim as usize
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab()
    }

    pub fn num_params(&self) -> usize {
        self.e.len() + self.w.len() + self.b.len()
    }

    pub fn token_row(&self, id: u32) -> &[f64] {
        let d = self.embed_dim();
        &self.e[id as usize * d..(id as usize + 1) * d]
    }

    pub fn check_tokens(&self, tokens: &TokenIds) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::arg("cannot embed an empty token list"));
        }
        let v = self.vocab();
        if let Some(&bad) = tokens.as_slice().iter().find(|&&t| t as usize >= v) {
            return Err(Error::arg(format!("token id {bad} out of range for {v} buckets")));
        }
        Ok(())
    }

    /// Arithmetic mean of the token rows, duplicates counted.
    pub fn pool(&self, tokens: &TokenIds) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut acc = vec![0.0; self.embed_dim()];
        for &t in tokens.as_slice() {
            for (a, x) in acc.iter_mut().zip(self.token_row(t)) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// `activation(pooled · W + b)`.
    pub fn head(&self, pooled: &[f64]) -> Vec<f64> {
        let o = self.out_dim();
        let mut out = self.b.clone();
        for (i, &p) in pooled.iter().enumerate() {
            let row = &self.w[i * o..(i + 1) * o];
            for (u, &wij) in out.iter_mut().zip(row) {
                *u += p * wij;
            }
        }
        let act = self.config.activation;
        out.iter_mut().for_each(|u| *u = act.apply(*u));
        out
    }

    pub fn tokenize(&self, text: &str) -> TokenIds {
        tokenize(text, &self.config.tokenizer)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        // tokenize never yields ids outside the table
        embed(self, &self.tokenize(text)).expect("tokenizer ids are within the vocabulary")
    }

    /// Copy with every value rounded through `f32`, i.e. what a save/load
    /// cycle yields.
    pub fn rounded_to_f32(&self) -> EncoderParams {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        EncoderParams {
            config: self.config,
            e: r(&self.e),
            w: r(&self.w),
            b: r(&self.b),
        }
    }
}

pub fn embed(params: &EncoderParams, tokens: &TokenIds) -> Result<Vec<f64>> {
    let pooled = params.pool(tokens)?;
    Ok(params.head(&pooled))
}

/// Row `i` is `embed(params, &sentences[i])`; rows are computed in parallel
/// on the current rayon pool and written independently.
pub fn embed_batch(params: &EncoderParams, sentences: &[TokenIds]) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = sentences
        .par_iter()
        .map(|t| embed(params, t))
        .collect::<Result<_>>()?;
    EmbeddingMatrix::from_rows(params.out_dim(), rows, None)
}

pub fn embed_texts<S: AsRef<str> + Sync>(params: &EncoderParams, texts: &[S]) -> Result<EmbeddingMatrix> {
    let tokens: Vec<TokenIds> = texts.par_iter().map(|t| params.tokenize(t.as_ref())).collect();
    embed_batch(params, &tokens)
}

// ---------------------------------------------------------------------------

/// Dense row-per-sentence vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// `ids` defaults to the row indices `"0"`, `"1"`, ...
    pub fn new(dim: usize, data: Vec<f64>, ids: Option<Vec<String>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let rows = data.len() / dim;
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in row {}", i / dim)));
        }
        let ids = ids.unwrap_or_else(|| (0..rows).map(|i| i.to_string()).collect());
        if ids.len() != rows {
            return Err(Error::arg(format!("{} ids for {rows} rows", ids.len())));
        }
        let mut seen = HashSet::with_capacity(rows);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::arg(format!("duplicate row id {dup:?}")));
        }
        Ok(EmbeddingMatrix { rows, dim, data, ids })
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>, ids: Option<Vec<String>>) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::arg(format!("row {i} has dim {} (expected {dim})", r.len())));
        }
        Self::new(dim, rows.concat(), ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn with_ids(self, ids: Vec<String>) -> Result<Self> {
        Self::new(self.dim, self.data, Some(ids))
    }
}

// ---------------------------------------------------------------------------
// Binary formats

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "{} truncated: needed {n} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, block: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        bytes
            .chunks_exact(4)
            .map(|c| {
                let x = f32::from_le_bytes(c.try_into().unwrap());
                if x.is_finite() {
                    Ok(x as f64)
                } else {
                    Err(Error::Format(format!("non-finite value in {block}")))
                }
            })
            .collect()
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!(
                "{}: unsupported version, expected {version}, found {v}",
                self.what
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes params. Layout (little-endian): `XENC`, u32 version, u32
/// n_min, u32 n_max, u32 buckets, u32 max_tokens, u32 embed_dim, u32
/// out_dim, u32 activation, then `e`, `w`, `b` as f32.
pub fn params_to_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    if params.e.iter().chain(&params.w).chain(&params.b).any(|x| !(*x as f32).is_finite()) {
        return Err(Error::Format("parameters contain non-finite values".into()));
    }
    let c = &params.config;
    let mut out = Vec::with_capacity(40 + 4 * params.num_params());
    out.extend_from_slice(PARAMS_MAGIC);
    for v in [
        PARAMS_VERSION,
        c.tokenizer.n_min,
        c.tokenizer.n_max,
        c.tokenizer.buckets,
        c.tokenizer.max_tokens,
        c.embed_dim,
        c.out_dim,
        c.activation.code(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(&mut out, &params.e);
    put_f32s(&mut out, &params.w);
    put_f32s(&mut out, &params.b);
    Ok(out)
}

pub fn params_from_bytes(buf: &[u8]) -> Result<EncoderParams> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "params file",
    };
    r.header(PARAMS_MAGIC, PARAMS_VERSION)?;
    let tokenizer = TokenizerConfig {
        n_min: r.u32()?,
        n_max: r.u32()?,
        buckets: r.u32()?,
        max_tokens: r.u32()?,
    };
    let config = EncoderConfig {
        tokenizer,
        embed_dim: r.u32()?,
        out_dim: r.u32()?,
        activation: Activation::from_code(r.u32()?)?,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let d = config.embed_dim as usize;
    let o = config.out_dim as usize;
    let e = r.f32s(config.vocab() * d, "token table")?;
    let w = r.f32s(d * o, "projection")?;
    let b = r.f32s(o, "bias")?;
    r.finish()?;
    Ok(EncoderParams { config, e, w, b })
}

pub fn save_params(params: &EncoderParams, path: &Path) -> Result<()> {
    let bytes = params_to_bytes(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<EncoderParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&buf)
}

/// Contents of an embedding file: vectors in record order with the
/// sentence hash of every record.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub hashes: Vec<u64>,
    pub matrix: EmbeddingMatrix,
}

pub fn sentence_hash(sentence: &str) -> u64 {
    fnv1a64(sentence.as_bytes())
}

/// Layout (little-endian): `XEMB`, u32 version, u32 dim, u64 count, then
/// `count` records of (u64 sentence hash, dim x f32).
pub fn write_embeddings(path: &Path, hashes: &[u64], matrix: &EmbeddingMatrix) -> Result<()> {
    if hashes.len() != matrix.rows() {
        return Err(Error::arg(format!(
            "{} hashes for {} embedding rows",
            hashes.len(),
            matrix.rows()
        )));
    }
    let mut out = Vec::with_capacity(20 + matrix.rows() * (8 + 4 * matrix.dim()));
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.extend_from_slice(&EMBEDDINGS_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    for (h, row) in hashes.iter().zip(matrix.iter_rows()) {
        out.extend_from_slice(&h.to_le_bytes());
        put_f32s(&mut out, row);
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&out).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn embeddings_from_bytes(buf: &[u8]) -> Result<EmbeddingFile> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "embedding file",
    };
    r.header(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    if dim == 0 {
        return Err(Error::Format("embedding file: dim is 0".into()));
    }
    let mut hashes = Vec::with_capacity(count.min(1 << 24));
    let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 26));
    for i in 0..count {
        hashes.push(r.u64()?);
        data.extend(r.f32s(dim, &format!("record {i}"))?);
    }
    r.finish()?;
    Ok(EmbeddingFile {
        hashes,
        matrix: EmbeddingMatrix::new(dim, data, None)?,
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    embeddings_from_bytes(&buf)
}

// ---------------------------------------------------------------------------

/// Hash-keyed in-memory view of an embedding file. The first record wins
/// when a hash repeats.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: HashMap<u64, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn from_file(file: &EmbeddingFile) -> Self {
        let mut vectors = HashMap::with_capacity(file.hashes.len());
        for (h, row) in file.hashes.iter().zip(file.matrix.iter_rows()) {
            vectors.entry(*h).or_insert_with(|| row.to_vec());
        }
        EmbeddingIndex {
            dim: file.matrix.dim(),
            vectors,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_file(&read_embeddings(path)?))
    }

    pub fn get(&self, sentence: &str) -> Option<&[f64]> {
        self.vectors.get(&sentence_hash(sentence)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Source of sentence vectors: a frozen encoder or precomputed vectors.
#[derive(Debug, Clone)]
pub enum TeacherProvider {
    FrozenEncoder(EncoderParams),
    EmbeddingFile(EmbeddingIndex),
}

impl TeacherProvider {
    pub fn dim(&self) -> usize {
        match self {
            TeacherProvider::FrozenEncoder(p) => p.out_dim(),
            TeacherProvider::EmbeddingFile(ix) => ix.dim,
        }
    }

    pub fn lookup(&self, sentence: &str) -> Result<Vec<f64>> {
        match self {
            TeacherProvider::FrozenEncoder(p) => Ok(p.embed_text(sentence)),
            TeacherProvider::EmbeddingFile(ix) => ix.get(sentence).map(<[f64]>::to_vec).ok_or_else(|| Error::Lookup {
                hash: sentence_hash(sentence),
                sentence: sentence.to_owned(),
            }),
        }
    }
}

/// Anything that maps a sentence to a vector.
pub trait SentenceEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, sentence: &str) -> Result<Vec<f64>>;
}

impl SentenceEncoder for EncoderParams {
    fn dim(&self) -> usize {
        self.out_dim()
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f64>> {
        embed(self, &self.tokenize(sentence))
    }
}

impl SentenceEncoder for TeacherProvider {
    fn dim(&self) -> usize {
        TeacherProvider::dim(self)
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f64>> {
        self.lookup(sentence)
    }
}

pub fn teacher_lookup(provider: &TeacherProvider, sentence: &str) -> Result<Vec<f64>> {
    provider.lookup(sentence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(v: u32, d: u32, o: u32) -> EncoderConfig {
        EncoderConfig {
            tokenizer: TokenizerConfig {
                buckets: v,
                ..TokenizerConfig::default()
            },
            embed_dim: d,
            out_dim: o,
            activation: Activation::Identity,
        }
    }

    fn random_params(seed: u64) -> EncoderParams {
        let mut p = init_encoder(small_config(32, 5, 3), seed).unwrap();
        let mut rng = seed::rng(seed ^ 0xabc);
        p.b.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        p
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let c = small_config(64, 8, 4);
        let a = init_encoder(c, 7).unwrap();
        assert_eq!(a, init_encoder(c, 7).unwrap());
        assert_ne!(a, init_encoder(c, 8).unwrap());
        assert!(a.b.iter().all(|&b| b == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.e.iter().chain(&a.w).all(|x| x.abs() <= bound + 1e-7));
    }

    #[test]
    fn init_mean_within_three_sigma() {
        let c = small_config(1 << 14, 8, 4);
        let p = init_encoder(c, 1).unwrap();
        let n = p.e.len() as f64;
        assert!(n >= 1e5);
        let mean = p.e.iter().sum::<f64>() / n;
        // uniform on [-a, a]: variance a^2 / 3
        let a = 1.0 / 8f64.sqrt();
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn invalid_config() {
        assert!(init_encoder(small_config(0, 4, 4), 0).is_err());
        assert!(init_encoder(small_config(4, 0, 4), 0).is_err());
    }

    #[test]
    fn single_token_is_affine_of_row() {
        let p = random_params(3);
        let u = embed(&p, &TokenIds(vec![5])).unwrap();
        for j in 0..3 {
            let expect: f64 = p.b[j] + (0..5).map(|i| p.e[5 * 5 + i] * p.w[i * 3 + j]).sum::<f64>();
            assert!((u[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let p = random_params(4);
        let a = embed(&p, &TokenIds(vec![1, 2])).unwrap();
        let b = embed(&p, &TokenIds(vec![2, 1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiplicity_matches_scalar_loop() {
        let p = random_params(5);
        let (a, b) = (3usize, 17usize);
        let got = embed(&p, &TokenIds(vec![a as u32, a as u32, b as u32])).unwrap();
        for j in 0..3 {
            let mut z = p.b[j];
            for i in 0..5 {
                let pooled = (2.0 * p.e[a * 5 + i] + p.e[b * 5 + i]) / 3.0;
                z += pooled * p.w[i * 3 + j];
            }
            assert!((got[j] - z).abs() < 1e-14, "{} vs {z}", got[j]);
        }
    }

    #[test]
    fn out_of_range_token() {
        let p = random_params(6);
        assert!(matches!(embed(&p, &TokenIds(vec![32])), Err(Error::Argument(_))));
        assert!(embed(&p, &TokenIds(vec![])).is_err());
    }

    #[test]
    fn tanh_head() {
        let mut p = random_params(9);
        p.config.activation = Activation::Tanh;
        let lin = {
            let mut q = p.clone();
            q.config.activation = Activation::Identity;
            embed(&q, &TokenIds(vec![1, 4])).unwrap()
        };
        let t = embed(&p, &TokenIds(vec![1, 4])).unwrap();
        for (a, b) in lin.iter().zip(&t) {
            assert_eq!(a.tanh(), *b);
        }
    }

    #[test]
    fn batch_matches_sequential() {
        let p = random_params(7);
        assert_eq!(embed_batch(&p, &[]).unwrap().rows(), 0);
        let mut rng = seed::rng(1);
        let sents: Vec<TokenIds> = (0..1000)
            .map(|_| {
                let n = rng.gen_range(1..12);
                TokenIds((0..n).map(|_| rng.gen_range(0..32)).collect())
            })
            .collect();
        let par = embed_batch(&p, &sents).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| embed_batch(&p, &sents).unwrap());
        assert_eq!(par, seq);
        for (i, s) in sents.iter().enumerate().step_by(97) {
            assert_eq!(par.row(i), embed(&p, s).unwrap().as_slice());
        }
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xenc");
        let mut p = init_encoder(small_config(16, 4, 3), 2).unwrap();
        p.config.tokenizer.n_max = 3;
        p.config.tokenizer.max_tokens = 99;
        p.config.activation = Activation::Tanh;
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn truncated_params_rejected() {
        let p = init_encoder(small_config(16, 4, 3), 2).unwrap();
        let bytes = params_to_bytes(&p).unwrap();
        let err = params_from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(params_from_bytes(&extra).is_err());
    }

    #[test]
    fn version_bump_names_expected_and_actual() {
        let p = init_encoder(small_config(16, 4, 3), 2).unwrap();
        let mut bytes = params_to_bytes(&p).unwrap();
        bytes[4] = 2;
        let msg = params_from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("expected 1") && msg.contains("found 2"), "{msg}");
        bytes[0] = b'Y';
        assert!(params_from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = init_encoder(small_config(16, 4, 3), 2).unwrap();
        p.b[0] = f64::NAN;
        assert!(params_to_bytes(&p).is_err());
        p.b[0] = 0.0;
        let mut bytes = params_to_bytes(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(params_from_bytes(&bytes).is_err());
    }

    #[test]
    fn frozen_teacher_equals_embed() {
        let p = random_params(8);
        let t = TeacherProvider::FrozenEncoder(p.clone());
        assert_eq!(t.lookup("hello world").unwrap(), embed(&p, &p.tokenize("hello world")).unwrap());
        assert_eq!(t.dim(), 3);
    }

    #[test]
    fn file_teacher_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.xemb");
        let v = vec![0.25, -1.5, 3.0];
        let m = EmbeddingMatrix::from_rows(3, vec![v.clone()], None).unwrap();
        write_embeddings(&path, &[sentence_hash("hello")], &m).unwrap();
        let t = TeacherProvider::EmbeddingFile(EmbeddingIndex::load(&path).unwrap());
        assert_eq!(t.lookup("hello").unwrap(), v);
        match t.lookup("bye") {
            Err(Error::Lookup { hash, .. }) => assert_eq!(hash, sentence_hash("bye")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_teacher_round_trip_many() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.xemb");
        let mut rng = seed::rng(3);
        let sents: Vec<String> = (0..100).map(|i| format!("sentence {i} {}", rng.gen::<u32>())).collect();
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..7).map(|_| rng.gen_range(-2.0f32..2.0) as f64).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(7, rows.clone(), None).unwrap();
        let hashes: Vec<u64> = sents.iter().map(|s| sentence_hash(s)).collect();
        write_embeddings(&path, &hashes, &m).unwrap();
        let t = TeacherProvider::EmbeddingFile(EmbeddingIndex::load(&path).unwrap());
        for (s, r) in sents.iter().zip(&rows) {
            let got = t.lookup(s).unwrap();
            assert!(got.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn empty_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.xemb");
        write_embeddings(&path, &[], &EmbeddingMatrix::new(4, vec![], None).unwrap()).unwrap();
        let f = read_embeddings(&path).unwrap();
        assert_eq!((f.matrix.rows(), f.matrix.dim()), (0, 4));
    }

    #[test]
    fn matrix_invariants() {
        assert!(EmbeddingMatrix::new(2, vec![1.0, 2.0, 3.0], None).is_err());
        assert!(EmbeddingMatrix::new(1, vec![f64::NAN], None).is_err());
        assert!(EmbeddingMatrix::new(1, vec![1.0, 2.0], Some(vec!["a".into(), "a".into()])).is_err());
    }

    proptest! {
        #[test]
        fn linear_in_token_table(seed in any::<u64>(), toks in proptest::collection::vec(0u32..32, 1..10)) {
            let p1 = random_params(seed);
            let mut p2 = random_params(seed.wrapping_add(1));
            p2.w = p1.w.clone();
            p2.b = p1.b.clone();
            let mut sum = p1.clone();
            sum.e = p1.e.iter().zip(&p2.e).map(|(a, b)| a + b).collect();
            let t = TokenIds(toks);
            let (u1, u2, us) = (embed(&p1, &t).unwrap(), embed(&p2, &t).unwrap(), embed(&sum, &t).unwrap());
            for j in 0..3 {
                prop_assert!((us[j] - (u1[j] + u2[j] - p1.b[j])).abs() < 1e-12);
            }
        }

        #[test]
        fn pooled_within_row_bounds(seed in any::<u64>(), toks in proptest::collection::vec(0u32..32, 1..10)) {
            let p = random_params(seed);
            let t = TokenIds(toks.clone());
            let pooled = p.pool(&t).unwrap();
            prop_assert_eq!(embed(&p, &t).unwrap().len(), p.out_dim());
            for (i, &m) in pooled.iter().enumerate() {
                let col = toks.iter().map(|&k| p.token_row(k)[i]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-15 && m <= hi + 1e-15);
            }
        }
    }
}
