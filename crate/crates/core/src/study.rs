//! Human validation: task sampling, judgment bookkeeping, agreement and
//! human-labeled gaps.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::detection::{select_extremes, SpuriosityRanking};
use crate::error::{Error, Result};
use crate::gaps::{gap_from_rates, GapMeta, GapReport, Rate};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Bucket {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotationTask {
    pub task_id: String,
    pub image_id: String,
    pub target: String,
    pub feature: String,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HumanJudgment {
    pub task_id: String,
    pub annotator_id: String,
    pub present: bool,
    /// Seconds since the Unix epoch.
    pub submitted_at: u64,
}

pub const STUDY_CLASSES_PURPOSE: &str = "study/classes";
pub const STUDY_ORDER_PURPOSE: &str = "study/order";

/// Seeded sample of `classes_sample` rankings; `n_per_bucket` top and bottom
/// images from each, shuffled together. Task ids follow presentation order.
pub fn sample_validation_tasks(
    rankings: &[SpuriosityRanking],
    n_per_bucket: usize,
    classes_sample: usize,
    seed: u64,
) -> Result<Vec<AnnotationTask>> {
    if n_per_bucket == 0 {
        return Err(Error::InvalidArgument("n_per_bucket must be positive".into()));
    }
    if classes_sample > rankings.len() {
        return Err(Error::InsufficientPool { required: classes_sample, available: rankings.len() });
    }
    let picked = Stream::for_purpose(seed, STUDY_CLASSES_PURPOSE).sample(rankings, classes_sample);
    let mut tasks = Vec::new();
    for r in &picked {
        let ex = select_extremes(r, n_per_bucket)?;
        for (ids, bucket) in [(&ex.top, Bucket::Top), (&ex.bottom, Bucket::Bottom)] {
            for id in ids {
                tasks.push(AnnotationTask {
                    task_id: String::new(),
                    image_id: id.clone(),
                    target: r.target.clone(),
                    feature: r.feature.clone(),
                    bucket,
                });
            }
        }
    }
    Stream::for_purpose(seed, STUDY_ORDER_PURPOSE).shuffle(&mut tasks);
    for (i, t) in tasks.iter_mut().enumerate() {
        t.task_id = format!("t{:04}", i + 1);
    }
    Ok(tasks)
}

/// Append-only judgment store keyed by task; one judgment per
/// `(task, annotator)`.
#[derive(Debug, Clone, Default)]
pub struct JudgmentLog {
    tasks: BTreeMap<String, AnnotationTask>,
    order: Vec<String>,
    judgments: Vec<HumanJudgment>,
    seen: BTreeSet<(String, String)>,
}

impl JudgmentLog {
    pub fn new(tasks: Vec<AnnotationTask>) -> Self {
        let order = tasks.iter().map(|t| t.task_id.clone()).collect();
        let tasks = tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect();
        JudgmentLog { tasks, order, judgments: Vec::new(), seen: BTreeSet::new() }
    }

    pub fn submit(&mut self, j: HumanJudgment) -> Result<()> {
        if !self.tasks.contains_key(&j.task_id) {
            return Err(Error::UnknownTask(j.task_id));
        }
        let key = (j.task_id.clone(), j.annotator_id.clone());
        if !self.seen.insert(key) {
            return Err(Error::DuplicateJudgment { task_id: j.task_id, annotator_id: j.annotator_id });
        }
        self.judgments.push(j);
        Ok(())
    }

    /// First task in presentation order this annotator has not judged.
    pub fn next_task(&self, annotator_id: &str) -> Option<&AnnotationTask> {
        self.order
            .iter()
            .find(|id| !self.seen.contains(&((*id).clone(), annotator_id.to_string())))
            .map(|id| &self.tasks[id])
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.order.iter().map(|id| &self.tasks[id])
    }

    pub fn judgments(&self) -> &[HumanJudgment] {
        &self.judgments
    }

    pub fn annotators(&self) -> BTreeSet<&str> {
        self.judgments.iter().map(|j| j.annotator_id.as_str()).collect()
    }

    pub fn task_map(&self) -> &BTreeMap<String, AnnotationTask> {
        &self.tasks
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Agreement {
    pub top_agreement: f64,
    pub bottom_agreement: f64,
    pub average: f64,
}

/// Fraction of top judgments marked present and of bottom judgments marked
/// absent, and their mean.
pub fn agreement(judgments: &[HumanJudgment], tasks: &BTreeMap<String, AnnotationTask>) -> Result<Agreement> {
    let (mut top, mut top_yes, mut bottom, mut bottom_no) = (0usize, 0usize, 0usize, 0usize);
    for j in judgments {
        let t = tasks.get(&j.task_id).ok_or_else(|| Error::UnknownTask(j.task_id.clone()))?;
        match t.bucket {
            Bucket::Top => {
                top += 1;
                top_yes += usize::from(j.present);
            }
            Bucket::Bottom => {
                bottom += 1;
                bottom_no += usize::from(!j.present);
            }
        }
    }
    if top == 0 || bottom == 0 {
        return Err(Error::UndefinedAgreement);
    }
    let top_agreement = top_yes as f64 / top as f64;
    let bottom_agreement = bottom_no as f64 / bottom as f64;
    Ok(Agreement { top_agreement, bottom_agreement, average: (top_agreement + bottom_agreement) / 2.0 })
}

/// Per-image label from pooled judgments by strict majority; ties are left
/// unlabeled.
pub fn majority_labels(
    judgments: &[HumanJudgment],
    tasks: &BTreeMap<String, AnnotationTask>,
) -> Result<BTreeMap<String, bool>> {
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for j in judgments {
        let t = tasks.get(&j.task_id).ok_or_else(|| Error::UnknownTask(j.task_id.clone()))?;
        let v = votes.entry(t.image_id.as_str()).or_default();
        if j.present {
            v.0 += 1;
        } else {
            v.1 += 1;
        }
    }
    Ok(votes
        .into_iter()
        .filter(|(_, (y, n))| y != n)
        .map(|(id, (y, n))| (id.to_string(), y > n))
        .collect())
}

pub fn human_gap_purpose(target: &str) -> String {
    format!("study/human-gap/{target}")
}

/// Gap between `k` sampled human-present and `k` human-absent images, using
/// only already-computed per-image rates. The feature is always `"human"`.
pub fn human_gap(
    labels: &BTreeMap<String, bool>,
    rates: &BTreeMap<String, Rate>,
    k: usize,
    mut meta: GapMeta,
    seed: u64,
) -> Result<GapReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let present: Vec<String> = labels.iter().filter(|(_, p)| **p).map(|(id, _)| id.clone()).collect();
    let absent: Vec<String> = labels.iter().filter(|(_, p)| !**p).map(|(id, _)| id.clone()).collect();
    if present.len() < k || absent.len() < k {
        return Err(Error::InsufficientLabels { present: present.len(), absent: absent.len(), required: k });
    }
    let mut stream = Stream::for_purpose(seed, &human_gap_purpose(&meta.target));
    let top = stream.sample(&present, k);
    let bottom = stream.sample(&absent, k);
    meta.feature = "human".to_string();
    gap_from_rates(&top, &bottom, rates, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::RankEntry;
    use crate::gaps::GapKind;
    use alloc::vec;

    fn ranking(target: &str, n: usize) -> SpuriosityRanking {
        SpuriosityRanking {
            target: target.into(),
            feature: "road".into(),
            entries: (0..n)
                .map(|i| RankEntry { image_id: format!("{target}-{i:02}"), f_score: 1.0 - i as f64 / n as f64 })
                .collect(),
        }
    }

    fn judge(task: &str, who: &str, present: bool) -> HumanJudgment {
        HumanJudgment { task_id: task.into(), annotator_id: who.into(), present, submitted_at: 0 }
    }

    #[test]
    fn task_counts_and_determinism() {
        let rs: Vec<_> = (0..25).map(|i| ranking(&format!("c{i}"), 30)).collect();
        let a = sample_validation_tasks(&rs, 10, 20, 7).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, sample_validation_tasks(&rs, 10, 20, 7).unwrap());
        let one = sample_validation_tasks(&rs[..1], 1, 1, 7).unwrap();
        assert_eq!(one.len(), 2);
        assert!(sample_validation_tasks(&[ranking("x", 3)], 2, 1, 0).is_err());
    }

    #[test]
    fn duplicate_rejected_and_next_task_advances() {
        let tasks = sample_validation_tasks(&[ranking("c", 4)], 1, 1, 3).unwrap();
        let mut log = JudgmentLog::new(tasks.clone());
        assert_eq!(log.next_task("a").unwrap().task_id, "t0001");
        log.submit(judge("t0001", "a", true)).unwrap();
        assert!(matches!(log.submit(judge("t0001", "a", false)), Err(Error::DuplicateJudgment { .. })));
        assert!(matches!(log.submit(judge("t9999", "a", false)), Err(Error::UnknownTask(_))));
        assert_eq!(log.next_task("a").unwrap().task_id, "t0002");
        assert_eq!(log.next_task("b").unwrap().task_id, "t0001");
    }

    fn tasks_with(buckets: &[Bucket]) -> BTreeMap<String, AnnotationTask> {
        buckets
            .iter()
            .enumerate()
            .map(|(i, &bucket)| {
                let id = format!("t{i}");
                (id.clone(), AnnotationTask {
                    task_id: id,
                    image_id: format!("img{i}"),
                    target: "dog".into(),
                    feature: "leash".into(),
                    bucket,
                })
            })
            .collect()
    }

    #[test]
    fn agreement_examples() {
        let tasks = tasks_with(&[Bucket::Top, Bucket::Top, Bucket::Top, Bucket::Top, Bucket::Bottom]);
        let js = vec![
            judge("t0", "a", true),
            judge("t1", "a", true),
            judge("t2", "a", false),
            judge("t3", "a", true),
            judge("t4", "a", false),
        ];
        let a = agreement(&js, &tasks).unwrap();
        assert_eq!(a.top_agreement, 0.75);
        assert_eq!(a.bottom_agreement, 1.0);
        assert!(agreement(&js[..4], &tasks).is_err());
    }

    #[test]
    fn majority_skips_ties() {
        let tasks = tasks_with(&[Bucket::Top, Bucket::Bottom]);
        let js = vec![judge("t0", "a", true), judge("t0", "b", true), judge("t1", "a", true), judge("t1", "b", false)];
        let m = majority_labels(&js, &tasks).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m["img0"]);
    }

    fn meta() -> GapMeta {
        GapMeta {
            kind: GapKind::Pa,
            model: "m".into(),
            target: "dog".into(),
            feature: String::new(),
            strategy: "baseline".into(),
        }
    }

    #[test]
    fn human_gap_needs_both_labels() {
        let labels: BTreeMap<String, bool> = (0..4).map(|i| (format!("i{i}"), true)).collect();
        let rates = labels.keys().map(|k| (k.clone(), Rate::new(1, 1))).collect();
        assert!(matches!(
            human_gap(&labels, &rates, 2, meta(), 0),
            Err(Error::InsufficientLabels { present: 4, absent: 0, required: 2 })
        ));
    }
}
