//! Seeded toy corpora.
//!
//! "Language A" sentences are random word sequences over a small Latin-script
//! vocabulary; "language B" is a bijective word-substitution cipher of A whose
//! words are written in Greek letters. Cipher words keep the length of the
//! word they replace, so both languages produce the same number of n-gram
//! tokens per sentence.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::ParallelPair;
use crate::eval_sts::StsPair;
use crate::seed;

const LATIN: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's', 't', 'u', 'v',
    'w', 'x', 'y', 'z',
];
const GREEK: &[char] = &[
    'α', 'β', 'γ', 'δ', 'ε', 'ζ', 'η', 'θ', 'ι', 'κ', 'λ', 'μ', 'ν', 'ξ', 'ο', 'π', 'ρ', 'σ', 'τ', 'υ', 'φ', 'χ',
    'ψ', 'ω',
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherSpec {
    pub sentences: usize,
    pub vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub seed: u64,
}

impl Default for CipherSpec {
    fn default() -> Self {
        CipherSpec {
            sentences: 5000,
            vocab: 500,
            min_words: 4,
            max_words: 12,
            min_word_len: 3,
            max_word_len: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CipherCorpus {
    pub vocab_a: Vec<String>,
    /// `vocab_b[i]` is the cipher of `vocab_a[i]`.
    pub vocab_b: Vec<String>,
    /// Unique sentence pairs, A as source, B as target.
    pub pairs: Vec<ParallelPair>,
}

impl CipherCorpus {
    pub fn encipher(&self, sentence_a: &str) -> Option<String> {
        sentence_a
            .split(' ')
            .map(|w| self.vocab_a.iter().position(|v| v == w).map(|i| self.vocab_b[i].as_str()))
            .collect::<Option<Vec<_>>>()
            .map(|ws| ws.join(" "))
    }
}

fn unique_words(rng: &mut impl Rng, alphabet: &[char], lens: &[usize]) -> Vec<String> {
    let mut seen = HashSet::new();
    lens.iter()
        .map(|&len| loop {
            let w: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            if seen.insert(w.clone()) {
                break w;
            }
        })
        .collect()
}

pub fn cipher_corpus(spec: &CipherSpec) -> CipherCorpus {
    let mut rng = seed::derived_rng(spec.seed, "cipher-vocab");
    let lens: Vec<usize> = (0..spec.vocab)
        .map(|_| rng.gen_range(spec.min_word_len..=spec.max_word_len))
        .collect();
    let vocab_a = unique_words(&mut rng, LATIN, &lens);
    let vocab_b = unique_words(&mut rng, GREEK, &lens);

    let mut rng = seed::derived_rng(spec.seed, "cipher-sentences");
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(spec.sentences);
    while pairs.len() < spec.sentences {
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab)).collect();
        let a = idx.iter().map(|&i| vocab_a[i].as_str()).collect::<Vec<_>>().join(" ");
        if !seen.insert(a.clone()) {
            continue;
        }
        let b = idx.iter().map(|&i| vocab_b[i].as_str()).collect::<Vec<_>>().join(" ");
        pairs.push(ParallelPair::new(a, b, "aa", "bb").expect("generated sentences are non-empty"));
    }
    CipherCorpus { vocab_a, vocab_b, pairs }
}

/// Graded similarity pairs over a cipher corpus.
///
/// For every subset in `subsets` (each `(lang_a, lang_b)` with values `'A'`
/// or `'B'`), sentences are perturbed by replacing a random number of words;
/// gold is `5 * (1 - replaced / len)`.
pub fn sts_pairs(corpus: &CipherCorpus, subsets: &[(char, char)], per_subset: usize, seed: u64) -> Vec<StsPair> {
    let mut rng = seed::derived_rng(seed, "sts-pairs");
    let vocab = corpus.vocab_a.len();
    let mut out = Vec::new();
    for &(la, lb) in subsets {
        let name = format!("{la}-{lb}");
        for _ in 0..per_subset {
            let n = rng.gen_range(4..=10);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let replaced = rng.gen_range(0..=n);
            let mut other = idx.clone();
            let mut positions: Vec<usize> = (0..n).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..replaced] {
                other[p] = (other[p] + rng.gen_range(1..vocab)) % vocab;
            }
            let render = |ids: &[usize], lang: char| {
                let v = if lang == 'A' { &corpus.vocab_a } else { &corpus.vocab_b };
                ids.iter().map(|&i| v[i].as_str()).collect::<Vec<_>>().join(" ")
            };
            out.push(StsPair {
                sentence_a: render(&idx, la),
                sentence_b: render(&other, lb),
                gold: 5.0 * (1.0 - replaced as f64 / n as f64),
                subset: name.clone(),
            });
        }
    }
    out
}
