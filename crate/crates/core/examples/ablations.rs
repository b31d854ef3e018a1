//! Shrinking the expert pool to its weakest members, and limiting expert
//! knowledge to a few records per label.

use conformal_deferral::conformal::ScoreKind;
use conformal_deferral::evaluation::{
    ablate_shots, expert_fraction_sweep, summarize_ablation, Benchmark, ExperimentConfig,
};
use conformal_deferral::policy::Strategy;
use conformal_deferral::report::ablation_table;
use conformal_deferral::synth::{canonical_specialists, gen_dataset};

fn main() -> conformal_deferral::Result<()> {
    let (table, store) = gen_dataset(&canonical_specialists(5))?;
    let bench = Benchmark::new(table, store)?;
    let config = ExperimentConfig {
        score: ScoreKind::Lac,
        strategies: vec![
            Strategy::Segregativity,
            Strategy::NaiveRandom,
            Strategy::ModelOnly,
        ],
        splits: 4,
        ..ExperimentConfig::default()
    };

    let pool = expert_fraction_sweep(&bench, &config, 0.25)?;
    println!(
        "{}",
        ablation_table("Kept fraction", &summarize_ablation(&pool)?)
    );

    let shots = ablate_shots(&bench, &config, &[1, 5, 20])?;
    println!("{}", ablation_table("Shots", &summarize_ablation(&shots)?));
    Ok(())
}
