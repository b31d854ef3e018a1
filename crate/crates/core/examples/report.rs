//! Run a small sweep, save results.csv and render the markdown table and
//! SVG plots from it.

use conformal_deferral::conformal::ScoreKind;
use conformal_deferral::dataio::write_results;
use conformal_deferral::evaluation::{summarize, Benchmark, ExperimentConfig};
use conformal_deferral::report::render_report;
use conformal_deferral::synth::{canonical_specialists, gen_dataset};

fn main() -> conformal_deferral::Result<()> {
    let (table, store) = gen_dataset(&canonical_specialists(9))?;
    let bench = Benchmark::new(table, store)?;
    let config = ExperimentConfig {
        score: ScoreKind::Raps,
        splits: 5,
        ..ExperimentConfig::default()
    };
    let results = bench.run(&config)?;

    let out = std::env::temp_dir().join("conformal_deferral_report");
    write_results(&results, &summarize(&results)?, &out)?;
    let report = render_report(out.join("results.csv"), &out)?;
    println!("{}", report.table);
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
