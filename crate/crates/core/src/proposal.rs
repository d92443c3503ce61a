//! Candidate spurious features: parsing, normalization, filter bookkeeping
//! and cross-proposer similarity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::answer::Answer;
use crate::error::{Error, Result};
use crate::lemma::{lemma_tokens, lemmatize};
use crate::prompts::{self, fill};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PromptVariant {
    Objects,
    Background,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 2] = [PromptVariant::Objects, PromptVariant::Background];

    pub fn prompt(self, n: usize, class: &str) -> String {
        prompts::generation_prompt(self == PromptVariant::Objects, n, class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Provenance {
    pub prompt_variant: PromptVariant,
    pub line_index: usize,
    pub proposer_model: String,
    /// The response held fewer parseable lines than requested.
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CandidateFeature {
    pub text: String,
    pub raw_text: String,
    pub provenance: Provenance,
    pub filter_verdicts: BTreeMap<String, Verdict>,
    pub active: bool,
}

impl CandidateFeature {
    pub fn new(raw_text: &str, provenance: Provenance) -> Self {
        CandidateFeature {
            text: lemmatize(raw_text),
            raw_text: raw_text.to_string(),
            provenance,
            filter_verdicts: BTreeMap::new(),
            active: true,
        }
    }

    /// Record a verdict and recompute `active` (every applied filter passed).
    pub fn record(&mut self, filter: FilterKind, verdict: Verdict) {
        self.filter_verdicts.insert(filter.name().to_string(), verdict);
        self.active = self.filter_verdicts.values().all(|v| *v != Verdict::Fail);
    }
}

/// Extract one feature per line: the text before the first period, with any
/// leading list marker (`-`, `*`, `•`, `3.`, `3)`) stripped.
pub fn parse_generation_response(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let mut l = line.trim();
            l = l.trim_start_matches(['-', '*', '•']).trim_start();
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            if digits > 0 {
                let rest = &l[digits..];
                if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                    l = r.trim_start();
                }
            }
            let head = l.split('.').next().unwrap_or("").trim();
            let head = head.trim_matches(|c: char| c == '"' || c == '\'' || c == '`');
            (!head.is_empty()).then(|| head.to_string())
        })
        .collect()
}

/// Turn one generation response into candidates, flagging short responses.
pub fn candidates_from_response(
    response: &str,
    requested: usize,
    variant: PromptVariant,
    proposer_model: &str,
) -> Vec<CandidateFeature> {
    let lines = parse_generation_response(response);
    let partial = lines.len() < requested;
    lines
        .iter()
        .take(requested)
        .enumerate()
        .map(|(i, raw)| {
            CandidateFeature::new(
                raw,
                Provenance {
                    prompt_variant: variant,
                    line_index: i,
                    proposer_model: proposer_model.to_string(),
                    partial,
                },
            )
        })
        .collect()
}

/// Lemmatize, drop empties and duplicates (first wins), and drop any
/// candidate sharing a lemmatized token with the target name.
pub fn normalize_candidates(candidates: &[CandidateFeature], target: &str) -> Vec<CandidateFeature> {
    let target_tokens: BTreeSet<String> = lemma_tokens(target).into_iter().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in candidates {
        let text = lemmatize(&c.text);
        if text.is_empty() {
            continue;
        }
        if text.split_whitespace().any(|t| target_tokens.contains(t)) {
            continue;
        }
        if !seen.insert(text.clone()) {
            continue;
        }
        let mut c = c.clone();
        c.text = text;
        out.push(c);
    }
    out
}

/// The filter battery, in the order it is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FilterKind {
    ExistsWithout,
    PartOf,
    AllFeatureHaveClass,
    AllClassHaveFeature,
    Detectability,
    Vocabulary,
    Synonyms,
    Separable,
    Composition,
    Confusion,
}

impl FilterKind {
    pub const ALL: [FilterKind; 10] = [
        FilterKind::ExistsWithout,
        FilterKind::PartOf,
        FilterKind::AllFeatureHaveClass,
        FilterKind::AllClassHaveFeature,
        FilterKind::Detectability,
        FilterKind::Vocabulary,
        FilterKind::Synonyms,
        FilterKind::Separable,
        FilterKind::Composition,
        FilterKind::Confusion,
    ];

    /// The four definitional questions (used alone when comparing proposers).
    pub const DEFINITIONAL: [FilterKind; 4] = [
        FilterKind::ExistsWithout,
        FilterKind::PartOf,
        FilterKind::AllFeatureHaveClass,
        FilterKind::AllClassHaveFeature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::ExistsWithout => "exists_without",
            FilterKind::PartOf => "part_of",
            FilterKind::AllFeatureHaveClass => "all_feature_have_class",
            FilterKind::AllClassHaveFeature => "all_class_have_feature",
            FilterKind::Detectability => "detectability",
            FilterKind::Vocabulary => "vocabulary",
            FilterKind::Synonyms => "synonyms",
            FilterKind::Separable => "separable",
            FilterKind::Composition => "composition",
            FilterKind::Confusion => "confusion",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// The answer a genuine spurious feature should receive.
    pub fn desired_yes(self) -> bool {
        matches!(self, FilterKind::ExistsWithout | FilterKind::Detectability)
    }

    fn template(self) -> &'static str {
        match self {
            FilterKind::ExistsWithout => prompts::FILTER_EXIST_WITHOUT,
            FilterKind::PartOf => prompts::FILTER_PART_OF,
            FilterKind::AllFeatureHaveClass => prompts::FILTER_ALL_FEATURE_HAVE,
            FilterKind::AllClassHaveFeature => prompts::FILTER_ALL_CLASS_HAVE,
            FilterKind::Detectability => prompts::FILTER_DETECTABILITY,
            FilterKind::Vocabulary => prompts::FILTER_VOCABULARY,
            FilterKind::Synonyms => prompts::FILTER_SYNONYMS,
            FilterKind::Separable => prompts::FILTER_SEPARABLE,
            FilterKind::Composition => prompts::FILTER_COMPOSITION,
            FilterKind::Confusion => prompts::FILTER_CONFUSION,
        }
    }

    pub fn prompt(self, feature: &str, class: &str) -> String {
        fill(
            self.template(),
            &[
                ("FEATURENAME", feature),
                ("CLASSNAME", class),
                ("SPUR FEATURE", feature),
                ("TARGET OBJECT", class),
            ],
        )
    }

    /// Verdict for a reply; non-binary replies fail.
    pub fn judge(self, answer: Answer) -> Verdict {
        if !answer.binary {
            return Verdict::Fail;
        }
        if answer.yes == self.desired_yes() {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProposalSimilarityReport {
    pub alpha: f64,
    pub ps_value: f64,
    pub per_feature_s: BTreeMap<String, f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// `S(alt_j) = max_i cos(ref_i, alt_j)`, and the fraction of alt features with
/// `S > alpha`.
pub fn proposal_similarity(
    reference: &[Vec<f64>],
    alt: &[(String, Vec<f64>)],
    alpha: f64,
) -> Result<ProposalSimilarityReport> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference features"));
    }
    if alt.is_empty() {
        return Err(Error::EmptyInput("alternative features"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(alloc::format!("alpha {alpha} outside [0, 1]")));
    }
    let mut per_feature_s = BTreeMap::new();
    let mut above = 0usize;
    for (name, v) in alt {
        let mut best = f64::NEG_INFINITY;
        for r in reference {
            best = best.max(cosine(r, v)?);
        }
        if best > alpha {
            above += 1;
        }
        per_feature_s.insert(name.clone(), best);
    }
    Ok(ProposalSimilarityReport {
        alpha,
        ps_value: above as f64 / alt.len() as f64,
        per_feature_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::parse_yes_no;
    use alloc::vec;

    fn prov() -> Provenance {
        Provenance {
            prompt_variant: PromptVariant::Objects,
            line_index: 0,
            proposer_model: "m".into(),
            partial: false,
        }
    }

    fn cands(xs: &[&str]) -> Vec<CandidateFeature> {
        xs.iter().map(|x| CandidateFeature::new(x, prov())).collect()
    }

    #[test]
    fn parse_rule_takes_text_before_period() {
        let r = parse_generation_response("saddle. Horses are often ridden with saddles.\n\nfence. x\n");
        assert_eq!(r, vec!["saddle", "fence"]);
        assert_eq!(parse_generation_response("1. bridle. y\n- hay. z"), vec!["bridle", "hay"]);
    }

    #[test]
    fn partial_flag() {
        let c = candidates_from_response("a. x\nb. y\nc. z", 16, PromptVariant::Background, "gpt");
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.provenance.partial));
        let full = candidates_from_response("a. x\nb. y", 2, PromptVariant::Objects, "gpt");
        assert!(full.iter().all(|c| !c.provenance.partial));
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_candidates(&cands(&["Trees", "tree"]), "horse");
        assert_eq!(n.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), vec!["tree"]);
        assert!(normalize_candidates(&cands(&["hydrant cap"]), "fire hydrant").is_empty());
        let n = normalize_candidates(&cands(&["fallen logs"]), "howler monkey");
        assert_eq!(n[0].text, "fallen log");
        assert_eq!(n[0].raw_text, "fallen logs");
    }

    #[test]
    fn normalization_is_idempotent() {
        let once = normalize_candidates(&cands(&["Roads", "road", "Cars", "fire trucks", "hydrant"]), "fire hydrant");
        assert_eq!(normalize_candidates(&once, "fire hydrant"), once);
    }

    #[test]
    fn verdicts_drive_activity() {
        let mut c = CandidateFeature::new("screen", prov());
        for f in FilterKind::ALL {
            let reply = if f == FilterKind::Composition || f.desired_yes() { "Yes" } else { "No" };
            c.record(f, f.judge(parse_yes_no(reply)));
        }
        assert!(!c.active);
        assert_eq!(c.filter_verdicts["composition"], Verdict::Fail);

        let mut s = CandidateFeature::new("sunlight", prov());
        s.record(FilterKind::Detectability, FilterKind::Detectability.judge(parse_yes_no("No")));
        assert!(!s.active);

        let mut ok = CandidateFeature::new("saddle", prov());
        for f in FilterKind::ALL {
            ok.record(f, f.judge(parse_yes_no(if f.desired_yes() { "Yes" } else { "No" })));
        }
        assert!(ok.active);
        assert!(ok.filter_verdicts.values().all(|v| *v == Verdict::Pass));
    }

    #[test]
    fn unparseable_answer_fails() {
        assert_eq!(FilterKind::PartOf.judge(parse_yes_no("Maybe")), Verdict::Fail);
    }

    #[test]
    fn similarity_examples() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let same: Vec<(String, Vec<f64>)> =
            vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])];
        let r = proposal_similarity(&refs, &same, 0.99).unwrap();
        assert_eq!(r.ps_value, 1.0);
        assert!(r.per_feature_s.values().all(|s| *s == 1.0));

        // S-values 0.9 and 0.4 at alpha 0.7
        let alt = vec![
            ("x".to_string(), vec![0.9, libm::sqrt(1.0 - 0.81)]),
            ("y".to_string(), vec![0.4, -libm::sqrt(1.0 - 0.16)]),
        ];
        let r = proposal_similarity(&[vec![1.0, 0.0]], &alt, 0.7).unwrap();
        assert!((r.per_feature_s["x"] - 0.9).abs() < 1e-12);
        assert!((r.per_feature_s["y"] - 0.4).abs() < 1e-12);
        assert_eq!(r.ps_value, 0.5);

        assert!(matches!(
            proposal_similarity(&[vec![1.0]], &[("z".into(), vec![1.0, 2.0])], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
