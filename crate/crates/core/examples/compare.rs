//! Desk-scale comparison on the synthetic tasks.
//!
//! Trains source c on stripe frequencies and source b on blob shapes, then
//! transfers both to the imbalanced mixed task with MedMerge, with plain
//! weight averaging and with LP-FT of each source alone. Prints test
//! macro-F1 per seed and the medians.
//!
//! ```text
//! cargo run --release -p medmerge --example compare [seeds]
//! ```

use medmerge::data::{generate_synth, Family, SplitSizes, SynthTaskSpec, TEST};
use medmerge::train::*;
use medmerge::*;

fn task(family: Family, train: usize, seed: u64) -> Result<LabeledDataset> {
    let samples = SplitSizes {
        train,
        val: train / 4,
        test: train / 2,
    };
    let mut spec = SynthTaskSpec::new(family, samples, seed);
    if family == Family::Mixed {
        spec.class_weights = vec![4.0, 2.0, 2.0, 1.0];
    }
    generate_synth(&spec)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = ModelSpec::smallnet(4);
    let src = StageConfig::ft(0).with_lr(3e-3).with_epochs(8).with_batch_size(32);
    let (ck_c, rc) = train_source::<f32>(&spec, &task(Family::Frequency, 600, 1)?, &src, None, "frequency")?;
    let (ck_b, rb) = train_source::<f32>(&spec, &task(Family::Blob, 600, 2)?, &src, None, "blob")?;
    println!(
        "source val macro-F1: b {:.3}, c {:.3}",
        rb.best().val_macro_f1,
        rc.best().val_macro_f1
    );
    let target = task(Family::Mixed, 300, 3)?;
    let pair = MergePair::new(ck_b.tree.clone(), ck_c.tree.clone(), spec)?;

    println!("seed  medmerge  average  lpft-b  lpft-c  mean-w");
    let mut rows = vec![];
    for seed in 0..seeds {
        let lp = StageConfig::lp(seed).with_lr(1e-2).with_epochs(10).with_batch_size(32);
        let ft = StageConfig::ft(seed).with_lr(1e-4).with_epochs(3).with_batch_size(32);
        let f1 = |ck: &Checkpoint| evaluate_checkpoint::<f32>(ck, &target, TEST).map(|r| r.macro_f1);
        let mm = run_medmerge::<f32>(&pair, &target, &lp, &ft, MedMergeOptions::default())?;
        let row = [
            f1(&mm.checkpoint)?,
            f1(&run_simple_average::<f32>(&pair, &target, &lp, &ft)?.0)?,
            f1(&run_lpft::<f32>(&ck_b, &target, &lp, &ft)?.0)?,
            f1(&run_lpft::<f32>(&ck_c, &target, &lp, &ft)?.0)?,
        ];
        let mean_w = medmerge::analysis::aggregate_mean_w(&mm.merge_weights);
        println!(
            "{seed:>4}  {:>8.3}  {:>7.3}  {:>6.3}  {:>6.3}  {mean_w:.4}",
            row[0], row[1], row[2], row[3]
        );
        rows.push(row);
    }
    let col = |i: usize| median(rows.iter().map(|r| r[i]).collect());
    println!(
        "median {:>6.3}  {:>7.3}  {:>6.3}  {:>6.3}",
        col(0),
        col(1),
        col(2),
        col(3)
    );
    Ok(())
}
