//! Spurious-gap arithmetic, per-class aggregation, baselines and statistics.
//!
//! Per-image yes-rates are kept as exact fractions ([`Rate`]) so that means
//! over image sets do not depend on summation order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::detection::{select_extremes, SpuriosityRanking};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// `yes` affirmative answers out of `of` counted prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rate {
    pub yes: u32,
    pub of: u32,
}

impl Rate {
    pub fn new(yes: u32, of: u32) -> Self {
        assert!(of > 0 && yes <= of, "invalid rate {yes}/{of}");
        Rate { yes, of }
    }

    pub fn value(self) -> f64 {
        f64::from(self.yes) / f64::from(self.of)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact mean of fractions, rounded once at the end.
pub fn mean_rate<'a>(rates: impl IntoIterator<Item = &'a Rate>) -> Option<f64> {
    let rates: Vec<Rate> = rates.into_iter().copied().collect();
    if rates.is_empty() {
        return None;
    }
    let lcm = rates.iter().fold(1u64, |l, r| {
        let d = u64::from(r.of);
        l / gcd(l, d) * d
    });
    let numer: u64 = rates.iter().map(|r| u64::from(r.yes) * (lcm / u64::from(r.of))).sum();
    Some(numer as f64 / (lcm * rates.len() as u64) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GapKind {
    #[cfg_attr(feature = "serde", serde(rename = "PA"))]
    Pa,
    #[cfg_attr(feature = "serde", serde(rename = "HR"))]
    Hr,
}

impl GapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GapKind::Pa => "PA",
            GapKind::Hr => "HR",
        }
    }
}

/// Identifies what a gap was measured on.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GapMeta {
    pub kind: GapKind,
    pub model: String,
    pub target: String,
    pub feature: String,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GapReport {
    pub kind: GapKind,
    pub model: String,
    pub target: String,
    pub feature: String,
    pub k: usize,
    pub rate_s: f64,
    pub rate_c: f64,
    pub gap: f64,
    pub top_ids: Vec<String>,
    pub bottom_ids: Vec<String>,
    pub strategy: String,
}

/// `gap = top_rate - bottom_rate`.
pub fn compute_gap(
    top_rate: f64,
    bottom_rate: f64,
    meta: GapMeta,
    top_ids: Vec<String>,
    bottom_ids: Vec<String>,
) -> Result<GapReport> {
    for r in [top_rate, bottom_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("rate {r} outside [0, 1]")));
        }
    }
    if top_ids.len() != bottom_ids.len() {
        return Err(Error::InvalidArgument("top and bottom sets differ in size".to_string()));
    }
    Ok(GapReport {
        kind: meta.kind,
        model: meta.model,
        target: meta.target,
        feature: meta.feature,
        k: top_ids.len(),
        rate_s: top_rate,
        rate_c: bottom_rate,
        gap: top_rate - bottom_rate,
        top_ids,
        bottom_ids,
        strategy: meta.strategy,
    })
}

/// Look up per-image rates for two image sets and build the gap report.
pub fn gap_from_rates(
    top: &[String],
    bottom: &[String],
    rates: &BTreeMap<String, Rate>,
    meta: GapMeta,
) -> Result<GapReport> {
    let lookup = |ids: &[String]| -> Result<Vec<Rate>> {
        ids.iter()
            .map(|id| {
                rates.get(id).copied().ok_or_else(|| Error::MissingScore {
                    image_id: id.clone(),
                    feature: "rate".to_string(),
                })
            })
            .collect()
    };
    let t = lookup(top)?;
    let b = lookup(bottom)?;
    let rs = mean_rate(&t).ok_or(Error::EmptyInput("top set"))?;
    let rc = mean_rate(&b).ok_or(Error::EmptyInput("bottom set"))?;
    compute_gap(rs, rc, meta, top.to_vec(), bottom.to_vec())
}

/// Largest gap wins; ties go to the lexicographically smallest feature.
pub fn select_max_gap_feature(reports: &[GapReport]) -> Result<&GapReport> {
    let mut best = reports.first().ok_or(Error::EmptyInput("gap reports"))?;
    for r in &reports[1..] {
        if r.gap > best.gap || (r.gap == best.gap && r.feature < best.feature) {
            best = r;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSummary {
    pub per_class_best: BTreeMap<String, GapReport>,
    pub classwise_mean_s: f64,
    pub classwise_mean_c: f64,
    pub classwise_mean_gap: f64,
}

/// Unweighted means over classes, in class-name order.
pub fn classwise_aggregate(best_per_class: &BTreeMap<String, GapReport>) -> Result<ClassSummary> {
    if best_per_class.is_empty() {
        return Err(Error::EmptyInput("class results"));
    }
    let n = best_per_class.len() as f64;
    let (mut s, mut c, mut g) = (0.0, 0.0, 0.0);
    for r in best_per_class.values() {
        s += r.rate_s;
        c += r.rate_c;
        g += r.gap;
    }
    Ok(ClassSummary {
        per_class_best: best_per_class.clone(),
        classwise_mean_s: s / n,
        classwise_mean_c: c / n,
        classwise_mean_gap: g / n,
    })
}

/// Stream purpose used by [`random_baseline`].
pub fn random_baseline_purpose(target: &str) -> String {
    format!("random-baseline/{target}")
}

/// Mean over `n_repeats` of the maximum gap among `n_rankings` uniformly
/// shuffled orderings of the pool. Shuffles are drawn sequentially from one
/// stream, repeat-major.
pub fn random_baseline<F: FnMut(&str) -> Rate>(
    pool: &[String],
    target: &str,
    k: usize,
    n_rankings: usize,
    n_repeats: usize,
    mut eval_fn: F,
    seed: u64,
) -> Result<f64> {
    if k == 0 || n_rankings == 0 || n_repeats == 0 {
        return Err(Error::InvalidArgument("k, rankings and repeats must be positive".to_string()));
    }
    if 2 * k > pool.len() {
        return Err(Error::InsufficientPool { required: 2 * k, available: pool.len() });
    }
    let rates: BTreeMap<&str, Rate> = pool.iter().map(|id| (id.as_str(), eval_fn(id))).collect();
    let mut stream = Stream::for_purpose(seed, &random_baseline_purpose(target));
    let mut order: Vec<&str> = pool.iter().map(String::as_str).collect();
    let n = order.len();
    let mut total = 0.0;
    for _ in 0..n_repeats {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..n_rankings {
            order.clear();
            order.extend(pool.iter().map(String::as_str));
            stream.shuffle(&mut order);
            let top = mean_rate(order[..k].iter().map(|id| &rates[id])).expect("k > 0");
            let bottom = mean_rate(order[n - k..].iter().map(|id| &rates[id])).expect("k > 0");
            best = best.max(top - bottom);
        }
        total += best;
    }
    Ok(total / n_repeats as f64)
}

/// Gap at each K from already-computed per-image rates.
pub fn k_sensitivity_sweep(
    ranking: &SpuriosityRanking,
    rates: &BTreeMap<String, Rate>,
    k_values: &[usize],
    meta: &GapMeta,
) -> Result<BTreeMap<usize, GapReport>> {
    let mut out = BTreeMap::new();
    for &k in k_values {
        let ex = select_extremes(ranking, k)?;
        out.insert(k, gap_from_rates(&ex.top, &ex.bottom, rates, meta.clone())?);
    }
    Ok(out)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), found: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two points".to_string()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Mean yes-rate per group. Groups with no records do not appear.
pub fn grouped_accuracy<G: Ord + Clone>(records: &[(G, Rate)]) -> BTreeMap<G, f64> {
    let mut groups: BTreeMap<G, Vec<Rate>> = BTreeMap::new();
    for (g, r) in records {
        groups.entry(g.clone()).or_default().push(*r);
    }
    groups
        .into_iter()
        .map(|(g, rs)| (g, mean_rate(&rs).expect("non-empty group")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistributionSummary {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Quantile of sorted data with linear interpolation between closest ranks
/// (position `q * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn distribution_summary(values: &[f64]) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(DistributionSummary {
        min: v[0],
        p25: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        p75: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryIdentities {
    /// `alpha * pa_c + (1 - alpha) * pa_s`
    pub pa_total: f64,
    /// `alpha * (pa_s - pa_c)`, equal to `pa_s - pa_total`.
    pub gap_times_alpha: f64,
}

/// Overall PA as a mixture of cue-present and cue-absent PA, where `alpha`
/// is the probability the cue is absent given the object.
pub fn theory_identities(pa_s: f64, pa_c: f64, alpha: f64) -> Result<TheoryIdentities> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let pa_total = alpha * pa_c + (1.0 - alpha) * pa_s;
    let gap_times_alpha = alpha * (pa_s - pa_c);
    debug_assert!(((pa_s - pa_total) - gap_times_alpha).abs() <= 1e-12);
    Ok(TheoryIdentities { pa_total, gap_times_alpha })
}
