//! Grouping comparison on the default synthetic split: trains A- and
//! N-grouping models for several seeds and prints test Recall@1, the
//! untrained baseline and group-similarity statistics.
//!
//! ```text
//! cargo run --release --example oracle_run -- [seeds] [key=value ...]
//! ```

use std::time::Instant;

use agmt::config::RunConfig;
use agmt::eval::{chance_recall_at_1, recall_at_k};
use agmt::model::Model;
use agmt::pipeline::{embed_dataset, load_splits, mean_abs_group_cosine};
use agmt::trainer::Trainer;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> agmt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let overrides: Vec<String> = args.collect();
    let base = RunConfig::parse("", &overrides)?;
    let (train, test) = load_splits(&base)?;
    println!("train {} images, test {} images", train.len(), test.len());
    println!("chance recall@1 = {:.4}", chance_recall_at_1(&test.labels));

    for kind in ["A", "N"] {
        let mut total = 0.0;
        for seed in 0..seeds {
            let mut o = overrides.clone();
            o.push(format!("model.grouping={kind}"));
            o.push(format!("train.seed={seed}"));
            let cfg = RunConfig::parse("", &o)?;
            let init = Model::init(seed, &cfg.model, &cfg.loss.metric)?;
            let e0 = embed_dataset(&init, &test, 1)?;
            let start = Instant::now();
            let mut t = Trainer::init(&cfg.model, cfg.loss.clone(), cfg.train.clone())?;
            let reports = t.fit(&train, None, |_| {})?;
            let secs = start.elapsed().as_secs_f64();
            let e = embed_dataset(&t.model, &test, 1)?;
            let r1 = recall_at_k(&e.set, 1)?;
            total += r1;
            println!(
                "{kind} seed {seed}: R@1 {r1:.4} (init {:.4}) | loss {:.4} -> {:.4} | |cos| {:.4} -> {:.4} | {secs:.1}s",
                recall_at_k(&e0.set, 1)?,
                reports.first().map_or(0.0, |r| r.total),
                reports.last().map_or(0.0, |r| r.total),
                mean_abs_group_cosine(&e0.groups),
                mean_abs_group_cosine(&e.groups),
            );
        }
        println!("{kind} mean R@1 = {:.4}", total / seeds as f64);
    }
    Ok(())
}
