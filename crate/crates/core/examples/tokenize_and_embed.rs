//! Hashed n-gram tokenization, mean-pooled embeddings and the binary params
//! and embedding file formats.

use xdistill::corpus::{tokenize, TokenizerConfig};
use xdistill::encoder::{
    embed_texts, init_encoder, load_params, read_embeddings, save_params, sentence_hash, write_embeddings, EncoderConfig,
};
use xdistill::eval_sts::cosine;

fn main() -> xdistill::Result<()> {
    let tokenizer = TokenizerConfig::default();
    for text in ["Hello world", "Grüße", ""] {
        let ids = tokenize(text, &tokenizer);
        println!("{text:?}: {} tokens, first {:?}", ids.len(), &ids.as_slice()[..ids.len().min(6)]);
    }

    let config = EncoderConfig {
        tokenizer: TokenizerConfig { buckets: 1 << 14, ..tokenizer },
        embed_dim: 16,
        out_dim: 8,
        ..EncoderConfig::default()
    };
    let params = init_encoder(config, 42)?;
    println!("encoder with {} parameters", params.num_params());

    let sentences = ["the cat sat on the mat", "the cat sat on a mat", "stock prices fell sharply"];
    let matrix = embed_texts(&params, &sentences)?;
    for i in 1..sentences.len() {
        println!("cos({:?}, {:?}) = {:.3}", sentences[0], sentences[i], cosine(matrix.row(0), matrix.row(i))?);
    }

    let dir = std::env::temp_dir().join("xdistill-tokenize-example");
    std::fs::create_dir_all(&dir).map_err(|e| xdistill::Error::Io { path: dir.clone(), source: e })?;
    save_params(&params, &dir.join("encoder.xenc"))?;
    assert_eq!(load_params(&dir.join("encoder.xenc"))?, params);

    let hashes: Vec<u64> = sentences.iter().map(|s| sentence_hash(s)).collect();
    write_embeddings(&dir.join("sentences.xemb"), &hashes, &matrix)?;
    let file = read_embeddings(&dir.join("sentences.xemb"))?;
    println!("wrote {} vectors of dim {} to {}", file.matrix.rows(), file.matrix.dim(), dir.display());
    Ok(())
}
