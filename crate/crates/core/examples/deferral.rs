//! One routing decision by hand: two experts with known confusion matrices,
//! a prediction set over {0, 1}, and the choice each strategy makes.

use conformal_deferral::conformal::{calibrate, ConformalPredictor, ProbVector, Score, ScoreKind};
use conformal_deferral::experts::{segregativity_ratio, ConfusionMatrix, ExpertProfile, TieRule};
use conformal_deferral::policy::{decide, resolve, Strategy};
use conformal_deferral::ExpertId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn profile(
    name: &str,
    counts: &[(usize, usize, u64)],
) -> conformal_deferral::Result<ExpertProfile> {
    let mut cm = ConfusionMatrix::new(3);
    for &(truth, predicted, times) in counts {
        for _ in 0..times {
            cm.add(truth, predicted)?;
        }
    }
    Ok(ExpertProfile::new(ExpertId::from(name), cm))
}

fn main() -> conformal_deferral::Result<()> {
    // strong overall, but mixes up 0 and 1
    let generalist = profile(
        "generalist",
        &[(0, 0, 6), (0, 1, 4), (1, 1, 6), (1, 0, 4), (2, 2, 80)],
    )?;
    // weak on class 2, sharp on {0, 1}
    let specialist = profile(
        "specialist",
        &[(0, 0, 10), (1, 1, 10), (2, 2, 30), (2, 0, 50)],
    )?;
    let experts = [generalist, specialist];

    let threshold = calibrate(
        &[0.05, 0.1, 0.2, 0.3, 0.45, 0.5, 0.6, 0.62, 0.7],
        0.2,
        ScoreKind::Lac,
    )?;
    let predictor = ConformalPredictor::new(Score::Lac, threshold, 3)?;
    let p = ProbVector::new(vec![0.48, 0.44, 0.08])?;
    let set = predictor.predict(&p)?;
    println!("tau {:.2}  set {:?}", threshold.tau, set.labels());
    for e in &experts {
        let s = segregativity_ratio(&e.confusion, &set).unwrap();
        println!(
            "  {:<11} overall {:.2}  segregativity {:?} = {:.2}",
            e.expert_id.0,
            e.overall_accuracy().unwrap(),
            s,
            s.value().unwrap()
        );
    }

    let annotations = [
        (ExpertId::from("generalist"), 0),
        (ExpertId::from("specialist"), 1),
    ];
    let truth = 1;
    for strategy in Strategy::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = decide(
            &p,
            &predictor,
            &experts,
            strategy,
            TieRule::Random,
            &mut rng,
        )?;
        let out = resolve(&d, &annotations, truth)?;
        println!(
            "{:<20} {:?} -> label {} ({})",
            strategy.as_str(),
            d.source,
            out.final_label,
            if out.correct { "correct" } else { "wrong" }
        );
    }
    Ok(())
}
