use std::fmt::Write as _;

use super::run::Summary;
use crate::error::{contract_err, Result};
use crate::model::Variant;

#[derive(Clone, Debug, PartialEq)]
pub struct Gap {
    pub better: Variant,
    pub worse: Variant,
    /// Difference of mean rewards divided by `√((σ_a² + σ_b²)/2)`.
    pub pooled_std_units: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Best first.
    pub ranking: Vec<(Variant, f64, f64)>,
    pub gaps: Vec<Gap>,
}

/// Mean-difference of two summaries in units of their pooled standard
/// deviation. Equal means give 0 even when both deviations vanish.
pub fn pooled_gap(a: &Summary, b: &Summary) -> f64 {
    let diff = a.reward_mean - b.reward_mean;
    if diff == 0.0 {
        return 0.0;
    }
    let pooled = ((a.reward_std.powi(2) + b.reward_std.powi(2)) / 2.0).sqrt();
    if pooled == 0.0 {
        return diff.signum() * f64::INFINITY;
    }
    diff / pooled
}

/// Rank variants by converged reward and report every pairwise gap.
pub fn compare_variants(summaries: &[Summary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return contract_err("comparison needs at least two summaries");
    }
    let n = summaries[0].n_joints;
    if let Some(s) = summaries.iter().find(|s| s.n_joints != n) {
        return contract_err(format!(
            "cannot compare a {}-joint run with a {}-joint run",
            s.n_joints, n
        ));
    }
    let mut order: Vec<&Summary> = summaries.iter().collect();
    order.sort_by(|a, b| {
        b.reward_mean
            .total_cmp(&a.reward_mean)
            .then(a.variant.cmp(&b.variant))
    });
    let mut gaps = Vec::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            gaps.push(Gap {
                better: a.variant,
                worse: b.variant,
                pooled_std_units: pooled_gap(a, b),
            });
        }
    }
    Ok(Comparison {
        ranking: order
            .iter()
            .map(|s| (s.variant, s.reward_mean, s.reward_std))
            .collect(),
        gaps,
    })
}

impl Comparison {
    pub fn report(&self) -> String {
        let mut s = String::from("rank  variant                   reward mean ± std\n");
        for (i, (v, m, sd)) in self.ranking.iter().enumerate() {
            let _ = writeln!(s, "{:>4}  {:<24}  {m:.3} ± {sd:.3}", i + 1, v.tag());
        }
        s.push_str("\npairwise gaps (pooled std units)\n");
        for g in &self.gaps {
            let _ = writeln!(
                s,
                "  {:<24} - {:<24} {:.3}",
                g.better.tag(),
                g.worse.tag(),
                g.pooled_std_units
            );
        }
        s
    }
}
