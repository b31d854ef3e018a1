//! The miscoverage grid for one score: per-alpha curves and the selected
//! operating point per strategy.

use conformal_deferral::conformal::ScoreKind;
use conformal_deferral::evaluation::{alpha_grid, curves, summarize, Benchmark, ExperimentConfig};
use conformal_deferral::policy::Strategy;
use conformal_deferral::synth::{canonical_specialists, gen_dataset};

fn main() -> conformal_deferral::Result<()> {
    let (table, store) = gen_dataset(&canonical_specialists(3))?;
    let bench = Benchmark::new(table, store)?;
    let acc = bench.table().model_accuracy();
    println!(
        "model accuracy {acc:.4}, {} grid points",
        alpha_grid(acc)?.len()
    );

    let config = ExperimentConfig {
        score: ScoreKind::Aps,
        strategies: vec![
            Strategy::Segregativity,
            Strategy::NaiveMostAccurate,
            Strategy::NaiveRandom,
        ],
        splits: 5,
        ..ExperimentConfig::default()
    };
    let results = bench.run(&config)?;
    for point in curves(&results)
        .iter()
        .filter(|c| c.strategy == Strategy::Segregativity)
        .step_by(10)
    {
        println!(
            "  alpha {:<6} acc {:.4}  queries {:>7.1}  max/expert {:>6.1}",
            point.alpha, point.accuracy.mean, point.n_queries, point.max_qpe
        );
    }
    for s in summarize(&results)? {
        println!(
            "{:<20} alpha_opt {:<6} acc {:.4}",
            s.strategy.as_str(),
            s.alpha_opt,
            s.accuracy.mean
        );
    }
    Ok(())
}
