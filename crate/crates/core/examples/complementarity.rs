//! Canonical specialist pool: the segregativity router against the model,
//! the best single expert and the naive most-accurate router, with the
//! paired significance protocol over 20 splits.

use conformal_deferral::conformal::ScoreKind;
use conformal_deferral::evaluation::{summarize, Benchmark, ExperimentConfig};
use conformal_deferral::synth::{canonical_specialists, gen_dataset};

fn main() -> conformal_deferral::Result<()> {
    let cfg = canonical_specialists(7);
    let (table, store) = gen_dataset(&cfg)?;
    let bench = Benchmark::new(table, store)?;
    println!("model accuracy {:.4}", bench.table().model_accuracy());

    for score in ScoreKind::ALL {
        let run = ExperimentConfig {
            score,
            splits: 20,
            ..ExperimentConfig::default()
        };
        let results = bench.run(&run)?;
        println!("\n{score}");
        for s in summarize(&results)? {
            let sig = s
                .significance
                .as_ref()
                .map(|v| {
                    format!(
                        "p = {:.2e} ({:?}) complementary = {}",
                        v.p_value, v.test_used, v.complementarity
                    )
                })
                .unwrap_or_default();
            println!(
                "  {:<20} alpha_opt {:<6} acc {:.4} +- {:.4}  queries {:>7.1}  {sig}",
                s.strategy.as_str(),
                s.alpha_opt,
                s.accuracy.mean,
                s.accuracy.sd,
                s.n_queries.mean
            );
        }
    }
    Ok(())
}
