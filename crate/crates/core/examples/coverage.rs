//! Split-conformal calibration for the three scores: empirical coverage and
//! mean set size on held-out rows of a synthetic table.

use conformal_deferral::conformal::{
    default_raps_grid, CalibrationScores, ConformalPredictor, Score, ScoreKind,
};
use conformal_deferral::synth::{canonical_specialists, gen_dataset, SynthConfig};

fn main() -> conformal_deferral::Result<()> {
    let cfg = SynthConfig {
        n: 6000,
        ..canonical_specialists(1)
    };
    let (table, _) = gen_dataset(&cfg)?;
    let (cal, test) = table.rows().split_at(1000);

    for kind in ScoreKind::ALL {
        let raps = (kind == ScoreKind::Raps).then(|| default_raps_grid()[0]);
        let score = Score::from_kind(kind, raps)?;
        let scores = cal
            .iter()
            .map(|r| score.score(&r.probs, r.truth))
            .collect::<Result<Vec<_>, _>>()?;
        let calibration = CalibrationScores::new(scores, kind)?;
        println!("{kind}");
        for alpha in [0.05, 0.1, 0.2] {
            let predictor =
                ConformalPredictor::new(score, calibration.threshold(alpha)?, table.classes())?;
            let (mut covered, mut size, mut singletons) = (0usize, 0usize, 0usize);
            for row in test {
                let set = predictor.predict(&row.probs)?;
                covered += usize::from(set.contains(row.truth));
                size += set.len();
                singletons += usize::from(set.singleton().is_some());
            }
            let n = test.len() as f64;
            println!(
                "  alpha {alpha:<4}  tau {:.4}  coverage {:.4} (target {:.2})  mean size {:.2}  singletons {:.1}%",
                predictor.threshold().tau,
                covered as f64 / n,
                1.0 - alpha,
                size as f64 / n,
                100.0 * singletons as f64 / n
            );
        }
    }
    Ok(())
}
