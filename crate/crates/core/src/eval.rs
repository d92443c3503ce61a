//! Query plans and per-image aggregation for each prompting strategy.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::answer::parse_yes_no;
use crate::error::{Error, Result};
use crate::gaps::Rate;
use crate::prompts::{self, fill};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Strategy {
    Baseline,
    Ensemble,
    Guiding,
    Dual,
    SpuriousList,
    SpuriousTop,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Baseline,
        Strategy::Ensemble,
        Strategy::Guiding,
        Strategy::Dual,
        Strategy::SpuriousList,
        Strategy::SpuriousTop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Ensemble => "ensemble",
            Strategy::Guiding => "guiding",
            Strategy::Dual => "dual",
            Strategy::SpuriousList => "spurious_list",
            Strategy::SpuriousTop => "spurious_top",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StrategyInputs {
    pub cues_list: Option<Vec<String>>,
    pub strongest_cue: Option<String>,
}

/// One conversation with the model: user turns sent in order, each request
/// carrying all earlier turns and replies. The image rides on the first turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub turns: Vec<String>,
}

/// Every conversation a strategy issues for one image, in order.
pub fn plan(strategy: Strategy, target: &str, inputs: &StrategyInputs) -> Result<Vec<Conversation>> {
    let one = |t: String| Conversation { turns: alloc::vec![t] };
    Ok(match strategy {
        Strategy::Baseline | Strategy::Ensemble => {
            (0..3).map(|i| one(prompts::eval_prompt(i, target))).collect()
        }
        Strategy::Guiding => alloc::vec![one(fill(prompts::GUIDING_PROMPT, &[("CLASSNAME", target)]))],
        Strategy::Dual => alloc::vec![Conversation {
            turns: alloc::vec![
                prompts::DUAL_DESCRIBE_PROMPT.to_string(),
                fill(prompts::DUAL_ASK_PROMPT, &[("CLASSNAME", target)]),
            ],
        }],
        Strategy::SpuriousList => {
            let cues = inputs.cues_list.as_ref().ok_or(Error::MissingStrategyInput("CUES_LIST"))?;
            if cues.is_empty() {
                return Err(Error::MissingStrategyInput("CUES_LIST"));
            }
            let list = prompts::cues_list(cues);
            alloc::vec![one(fill(
                prompts::SPURIOUS_LIST_PROMPT,
                &[("CLASSNAME", target), ("CUES_LIST", &list)],
            ))]
        }
        Strategy::SpuriousTop => {
            let cue = inputs
                .strongest_cue
                .as_deref()
                .ok_or(Error::MissingStrategyInput("STRONGEST_CUE"))?;
            alloc::vec![one(fill(
                prompts::SPURIOUS_TOP_PROMPT,
                &[("CLASSNAME", target), ("STRONGEST_CUE", cue)],
            ))]
        }
    })
}

/// Result of querying one image under one strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    pub image_id: String,
    pub target: String,
    pub strategy: Strategy,
    pub prompts_sent: Vec<String>,
    pub raw_responses: Vec<String>,
    pub yes_indicators: Vec<u8>,
    pub image_rate: Rate,
    /// Replies whose first token was neither "yes" nor "no".
    pub non_binary: usize,
}

/// Fold the replies of a plan into a record. `replies[i][j]` answers turn `j`
/// of conversation `i`.
pub fn aggregate(
    image_id: &str,
    target: &str,
    strategy: Strategy,
    conversations: &[Conversation],
    replies: &[Vec<String>],
) -> Result<EvalRecord> {
    if conversations.len() != replies.len()
        || conversations.iter().zip(replies).any(|(c, r)| c.turns.len() != r.len())
    {
        return Err(Error::InvalidArgument("reply shape does not match the plan".to_string()));
    }
    let mut prompts_sent = Vec::new();
    let mut raw_responses = Vec::new();
    let mut yes_indicators = Vec::new();
    let mut counted = Vec::new();
    let mut non_binary = 0;
    for (conv, reps) in conversations.iter().zip(replies) {
        for (j, (p, r)) in conv.turns.iter().zip(reps).enumerate() {
            let a = parse_yes_no(r);
            prompts_sent.push(p.clone());
            raw_responses.push(r.clone());
            yes_indicators.push(a.indicator());
            // only the final turn of a conversation is a yes/no question
            if j + 1 == conv.turns.len() {
                counted.push(a.indicator());
                if !a.binary {
                    non_binary += 1;
                }
            }
        }
    }
    let yes = counted.iter().map(|&v| u32::from(v)).sum::<u32>();
    let n = counted.len() as u32;
    let image_rate = match strategy {
        Strategy::Baseline => Rate::new(yes, n),
        Strategy::Ensemble => Rate::new(u32::from(2 * yes > n), 1),
        _ => Rate::new(yes.min(1), 1),
    };
    Ok(EvalRecord {
        image_id: image_id.to_string(),
        target: target.to_string(),
        strategy,
        prompts_sent,
        raw_responses,
        yes_indicators,
        image_rate,
        non_binary,
    })
}

/// Mean rate over the images of a set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SetRate {
    pub rate: f64,
    pub n_scored: usize,
    pub n_errored: usize,
}

/// Default tolerated fraction of errored items per stage.
pub const DEFAULT_ERROR_BUDGET: f64 = 0.01;

/// Fail when more than `budget` of `total` items errored.
pub fn check_budget(stage: &'static str, errored: usize, total: usize, budget: f64) -> Result<()> {
    if total > 0 && errored as f64 > budget * total as f64 {
        return Err(Error::ErrorBudgetExceeded { stage, errored, total, budget });
    }
    Ok(())
}

/// Exact mean of the non-errored per-image rates (`None` marks an errored
/// image).
pub fn eval_set(rates: &[Option<Rate>], error_budget: f64) -> Result<SetRate> {
    if rates.is_empty() {
        return Err(Error::EmptyInput("image set"));
    }
    let scored: Vec<Rate> = rates.iter().flatten().copied().collect();
    let n_errored = rates.len() - scored.len();
    check_budget("eval", n_errored, rates.len(), error_budget)?;
    let rate = crate::gaps::mean_rate(&scored).ok_or(Error::EmptyInput("scored images"))?;
    Ok(SetRate { rate, n_scored: scored.len(), n_errored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn run(strategy: Strategy, replies: &[&str]) -> Rate {
        let inputs = StrategyInputs {
            cues_list: Some(vec!["road".into()]),
            strongest_cue: Some("road".into()),
        };
        let p = plan(strategy, "dog", &inputs).unwrap();
        let mut it = replies.iter();
        let reps: Vec<Vec<String>> = p
            .iter()
            .map(|c| c.turns.iter().map(|_| it.next().unwrap().to_string()).collect())
            .collect();
        aggregate("i", "dog", strategy, &p, &reps).unwrap().image_rate
    }

    #[test]
    fn baseline_rates() {
        assert_eq!(run(Strategy::Baseline, &["Yes", "Yes", "No"]).value(), 2.0 / 3.0);
        assert_eq!(run(Strategy::Baseline, &["Yes", "Yes", "Yes"]).value(), 1.0);
        assert_eq!(run(Strategy::Baseline, &["No", "No", "No"]).value(), 0.0);
    }

    #[test]
    fn ensemble_majority() {
        assert_eq!(run(Strategy::Ensemble, &["Yes", "No", "Yes"]).value(), 1.0);
        assert_eq!(run(Strategy::Ensemble, &["No", "No", "Yes"]).value(), 0.0);
    }

    #[test]
    fn dual_counts_second_turn_only() {
        assert_eq!(run(Strategy::Dual, &["Yes, a dog and a ball.", "No"]).value(), 0.0);
        assert_eq!(run(Strategy::Dual, &["A park.", "Yes"]).value(), 1.0);
    }

    #[test]
    fn missing_inputs_fail_before_any_query() {
        let e = plan(Strategy::SpuriousTop, "horse", &StrategyInputs::default());
        assert_eq!(e, Err(Error::MissingStrategyInput("STRONGEST_CUE")));
        assert!(plan(Strategy::SpuriousList, "horse", &StrategyInputs::default()).is_err());
    }

    #[test]
    fn spurious_top_substitution() {
        let inputs = StrategyInputs { cues_list: None, strongest_cue: Some("saddle".into()) };
        let p = plan(Strategy::SpuriousTop, "horse", &inputs).unwrap();
        assert_eq!(
            p[0].turns[0],
            "Is there a horse in the image? Be aware that the presence or absence of a saddle does not necessarily indicate the presence or absence of a horse. Answer with 'Yes' or 'No'."
        );
    }

    #[test]
    fn set_means() {
        let r = eval_set(&[Some(Rate::new(1, 1)), Some(Rate::new(3, 3)), Some(Rate::new(1, 3))], 0.0).unwrap();
        assert_eq!(r.rate, 7.0 / 9.0);
        assert_eq!(eval_set(&[Some(Rate::new(2, 3))], 0.0).unwrap().rate, 2.0 / 3.0);
        let half = [Some(Rate::new(1, 1)), None];
        assert!(matches!(eval_set(&half, 0.01), Err(Error::ErrorBudgetExceeded { errored: 1, total: 2, .. })));
        let ok = eval_set(&half, 0.5).unwrap();
        assert_eq!((ok.rate, ok.n_errored), (1.0, 1));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("spurious-top".parse::<Strategy>().unwrap(), Strategy::SpuriousTop);
    }
}
