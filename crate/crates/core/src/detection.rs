//! Cue scores, spuriosity rankings, extreme selection and dataset diversity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    /// `x_min, y_min, x_max, y_max`, normalized to `[0, 1]`.
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionOutput {
    pub detections: Vec<Detection>,
}

impl DetectionOutput {
    /// Reject scores outside `[0, 1]` and boxes that are unordered or out of range.
    pub fn validate(&self) -> core::result::Result<(), String> {
        for d in &self.detections {
            if !d.score.is_finite() || !(0.0..=1.0).contains(&d.score) {
                return Err(format!("score {} for `{}` outside [0, 1]", d.score, d.label));
            }
            let [x0, y0, x1, y1] = d.bbox;
            if d.bbox.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(format!("box {:?} for `{}` outside [0, 1]", d.bbox, d.label));
            }
            if x0 > x1 || y0 > y1 {
                return Err(format!("box {:?} for `{}` is not ordered", d.bbox, d.label));
            }
        }
        Ok(())
    }
}

/// Highest confidence among detections labeled `feature`, or 0.
pub fn f_score(output: &DetectionOutput, feature: &str) -> f64 {
    output
        .detections
        .iter()
        .filter(|d| d.label == feature)
        .fold(0.0, |acc, d| acc.max(d.score))
}

/// Scores keyed by feature, then image id.
pub type ScoreTable = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankEntry {
    pub image_id: String,
    pub f_score: f64,
}

/// Images ordered by descending score, ties by ascending image id.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpuriosityRanking {
    pub target: String,
    pub feature: String,
    pub entries: Vec<RankEntry>,
}

fn rank_order(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.f_score.total_cmp(&a.f_score).then_with(|| a.image_id.cmp(&b.image_id))
}

pub fn build_ranking(
    scores: &BTreeMap<String, f64>,
    pool: &[String],
    target: &str,
    feature: &str,
) -> Result<SpuriosityRanking> {
    let mut entries = pool
        .iter()
        .map(|id| {
            scores
                .get(id)
                .map(|s| RankEntry { image_id: id.clone(), f_score: *s })
                .ok_or_else(|| Error::MissingScore { image_id: id.clone(), feature: feature.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(rank_order);
    Ok(SpuriosityRanking { target: target.to_string(), feature: feature.to_string(), entries })
}

impl SpuriosityRanking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extremes {
    pub top: Vec<String>,
    pub bottom: Vec<String>,
}

/// The `k` highest- and `k` lowest-ranked images.
pub fn select_extremes(ranking: &SpuriosityRanking, k: usize) -> Result<Extremes> {
    let n = ranking.entries.len();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".to_string()));
    }
    if 2 * k > n {
        return Err(Error::InsufficientPool { required: 2 * k, available: n });
    }
    let top = ranking.entries[..k].iter().map(|e| e.image_id.clone()).collect();
    let bottom = ranking.entries[n - k..].iter().map(|e| e.image_id.clone()).collect();
    Ok(Extremes { top, bottom })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TauK {
    pub tau: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiversityReport {
    pub tau_grid: Vec<f64>,
    pub per_tau_k: Vec<TauK>,
    pub tau_star: f64,
    pub k_star: usize,
    pub n_tilde: usize,
}

/// 41 thresholds, 0.00 to 0.40 in steps of 0.01.
pub fn default_tau_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 / 100.0).collect()
}

/// Largest K for which the feature has K images scoring strictly above `tau`
/// and K strictly below.
pub fn max_k(scores: impl IntoIterator<Item = f64>, tau: f64) -> usize {
    let (mut above, mut below) = (0usize, 0usize);
    for s in scores {
        if s > tau {
            above += 1;
        } else if s < tau {
            below += 1;
        }
    }
    above.min(below)
}

/// `K_{tau,N}` over a threshold grid: for each tau, the `n_tilde`-th largest
/// per-feature `max_k`; `tau_star` is the first tau attaining the maximum.
pub fn diversity_k(
    scores: &ScoreTable,
    features: &[String],
    n_tilde: usize,
    tau_grid: &[f64],
) -> Result<DiversityReport> {
    if tau_grid.is_empty() {
        return Err(Error::EmptyInput("tau grid"));
    }
    if let Some(t) = tau_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("tau {t} outside [0, 1]")));
    }
    if n_tilde == 0 || n_tilde > features.len() {
        return Err(Error::InvalidArgument(format!(
            "required feature count {n_tilde} must be in 1..={}",
            features.len()
        )));
    }
    let mut per_tau_k = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let mut ks: Vec<usize> = features
            .iter()
            .map(|f| scores.get(f).map_or(0, |m| max_k(m.values().copied(), tau)))
            .collect();
        ks.sort_unstable_by(|a, b| b.cmp(a));
        per_tau_k.push(TauK { tau, k: ks[n_tilde - 1] });
    }
    let mut best = &per_tau_k[0];
    for tk in &per_tau_k[1..] {
        if tk.k > best.k || (tk.k == best.k && tk.tau < best.tau) {
            best = tk;
        }
    }
    Ok(DiversityReport {
        tau_grid: tau_grid.to_vec(),
        tau_star: best.tau,
        k_star: best.k,
        per_tau_k,
        n_tilde,
    })
}
