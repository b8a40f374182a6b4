use serde::{Deserialize, Serialize};

use super::distill::combine_distillation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub distill: f64,
    pub smooth: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill: 0.001,
            smooth: 0.01,
            consistency: 0.01,
        }
    }
}

/// Raw term values for one step. `None` marks a term that was skipped
/// (degenerate input or empty mask) and must not enter the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub photo: Option<f64>,
    /// (ssi, reg) pair; both skip together.
    pub distill: Option<(f64, f64)>,
    pub smooth: Option<f64>,
    pub consistency: Option<f64>,
}

impl LossParts {
    pub fn all(photo: f64, ssi: f64, reg: f64, smooth: f64, consistency: f64) -> Self {
        LossParts {
            photo: Some(photo),
            distill: Some((ssi, reg)),
            smooth: Some(smooth),
            consistency: Some(consistency),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTermKind {
    Photo,
    Distill,
    Smooth,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo: f64,
    pub distill_ssi: f64,
    pub distill_reg: f64,
    pub smooth: f64,
    pub consistency: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// Terms left out of `total` for this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<LossTermKind>,
}

impl LossBreakdown {
    /// Recomputes the total from the stored parts and weights.
    pub fn reconstructed_total(&self) -> f64 {
        self.photo
            + self.weights.distill * combine_distillation(self.distill_ssi, self.distill_reg)
            + self.weights.smooth * self.smooth
            + self.weights.consistency * self.consistency
    }

    pub fn is_finite(&self) -> bool {
        [
            self.photo,
            self.distill_ssi,
            self.distill_reg,
            self.smooth,
            self.consistency,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("photometric", self.photo),
            ("distillation ssi", self.distill_ssi),
            ("distillation gradient matching", self.distill_reg),
            ("smoothness", self.smooth),
            ("scale consistency", self.consistency),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Element-wise mean of several breakdowns (weights taken from the first).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mut excluded: Vec<LossTermKind> = items.iter().flat_map(|b| b.excluded.clone()).collect();
        excluded.sort_by_key(|k| *k as u8);
        excluded.dedup();
        Some(LossBreakdown {
            photo: avg(|b| b.photo),
            distill_ssi: avg(|b| b.distill_ssi),
            distill_reg: avg(|b| b.distill_reg),
            smooth: avg(|b| b.smooth),
            consistency: avg(|b| b.consistency),
            total: avg(|b| b.total),
            weights: first.weights,
            excluded,
        })
    }
}

/// `photo + ω_d·(ssi + ½·reg) + ω_sm·smooth + ω_c·consistency` over the
/// terms that were not skipped.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> LossBreakdown {
    let mut excluded = Vec::new();
    let mut take = |v: Option<f64>, kind| {
        v.unwrap_or_else(|| {
            excluded.push(kind);
            0.0
        })
    };
    let photo = take(parts.photo, LossTermKind::Photo);
    let (ssi, reg) = match parts.distill {
        Some(p) => p,
        None => {
            take(None, LossTermKind::Distill);
            (0.0, 0.0)
        }
    };
    let smooth = take(parts.smooth, LossTermKind::Smooth);
    let consistency = take(parts.consistency, LossTermKind::Consistency);
    let mut b = LossBreakdown {
        photo,
        distill_ssi: ssi,
        distill_reg: reg,
        smooth,
        consistency,
        total: 0.0,
        weights: *weights,
        excluded,
    };
    b.total = b.reconstructed_total();
    b
}
