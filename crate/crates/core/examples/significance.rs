//! The paired test protocol on hand-made per-split accuracies.

use conformal_deferral::evaluation::{complementarity_test, stars};
use conformal_deferral::stats::{paired_t_one_tailed, shapiro_wilk, wilcoxon_one_tailed};

fn main() -> conformal_deferral::Result<()> {
    let method = [
        0.981, 0.979, 0.983, 0.978, 0.980, 0.982, 0.977, 0.984, 0.980, 0.979,
    ];
    let expert = [
        0.951, 0.948, 0.955, 0.946, 0.950, 0.953, 0.949, 0.952, 0.947, 0.950,
    ];
    let model = [
        0.901, 0.897, 0.905, 0.899, 0.902, 0.900, 0.896, 0.904, 0.898, 0.903,
    ];

    let d: Vec<f64> = method.iter().zip(&expert).map(|(a, b)| a - b).collect();
    let sw = shapiro_wilk(&d)?;
    println!("shapiro-wilk W {:.4} p {:.4}", sw.statistic, sw.p_value);
    let t = paired_t_one_tailed(&method, &expert)?;
    let w = wilcoxon_one_tailed(&method, &expert)?;
    println!("paired t {:.3} p {:.2e}", t.statistic, t.p_value);
    println!(
        "wilcoxon {:.1} p {:.2e} ({})",
        w.statistic, w.p_value, w.method_note
    );

    let verdict = complementarity_test(&method, &expert, &model)?;
    println!(
        "verdict: {:?} p {:.2e} {} complementary = {}",
        verdict.test_used,
        verdict.p_value,
        stars(verdict.p_value),
        verdict.complementarity
    );
    Ok(())
}
