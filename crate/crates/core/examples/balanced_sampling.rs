//! Round-robin sampling over corpora of very different sizes: every batch
//! holds each corpus in near-equal share and small corpora repeat.

use xdistill::corpus::{BalancedSampler, Dataset, ParallelPair};

fn corpus(name: &str, n: usize) -> Dataset {
    let pairs = (0..n)
        .map(|i| ParallelPair::new(format!("{name} source {i}"), format!("{name} target {i}"), "en", "xx").expect("non-empty"))
        .collect();
    Dataset::new(name, pairs)
}

fn main() -> xdistill::Result<()> {
    let datasets = vec![corpus("tiny", 4), corpus("medium", 40), corpus("large", 400)];
    let mut sampler = BalancedSampler::new(&datasets, 30, 1)?;
    println!(
        "datasets {:?}: {} draws in {} batches per epoch",
        sampler.dataset_names(),
        sampler.draws_per_epoch(),
        sampler.batches_per_epoch()
    );
    let mut totals = vec![0usize; datasets.len()];
    for (b, batch) in sampler.epoch().enumerate() {
        let mut counts = vec![0usize; datasets.len()];
        for draw in &batch {
            counts[draw.dataset] += 1;
        }
        if b < 3 {
            println!("batch {b}: per-dataset counts {counts:?}, first pair {:?}", batch[0].pair.source_text);
        }
        totals.iter_mut().zip(&counts).for_each(|(t, c)| *t += c);
    }
    println!("epoch totals {totals:?}");
    Ok(())
}
