//! A custom synthetic scenario with partial coverage and costs, written to
//! disk in the file formats the command line reads.

use conformal_deferral::dataio::write_costs;
use conformal_deferral::synth::{gen_dataset, ExpertSpec, SynthConfig};
use conformal_deferral::ExpertId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        classes: 6,
        n: 2000,
        model_target_accuracy: 0.85,
        confusion_sharpness: 0.5,
        leak: 0.05,
        blocks: vec![vec![0, 1, 2], vec![3, 4, 5]],
        experts: vec![
            ExpertSpec::generalist("senior", 0.93).with_cost(3.0),
            ExpertSpec::specialist("block_a", vec![0, 1, 2], 0.98, 0.4).with_coverage(0.7),
            ExpertSpec::specialist("block_b", vec![3, 4, 5], 0.98, 0.4).with_coverage(0.7),
        ],
        seed: 17,
    };
    let (table, store) = gen_dataset(&cfg)?;
    println!(
        "model accuracy {:.4}, {} annotations",
        table.model_accuracy(),
        store.len()
    );
    for spec in &cfg.experts {
        let id = ExpertId::from(spec.id.as_str());
        let n = store.for_expert(&id).count();
        let hits = store
            .for_expert(&id)
            .filter(|r| {
                table
                    .get(&r.sample_id)
                    .is_some_and(|row| row.truth == r.predicted_label)
            })
            .count();
        println!(
            "  {:<8} {n:>5} labels  accuracy {:.3}",
            spec.id,
            hits as f64 / n as f64
        );
    }

    let out = std::env::temp_dir().join("conformal_deferral_synth");
    std::fs::create_dir_all(&out)?;
    table.write(out.join("probs.csv"))?;
    store.write(out.join("annotations.csv"))?;
    write_costs(&cfg.costs(), out.join("costs.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
