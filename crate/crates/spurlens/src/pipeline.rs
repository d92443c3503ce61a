//! Pipeline stages and whole-run orchestration.
//!
//! Every stage is a function from in-memory inputs to outputs so that the CLI
//! can run it alone from saved artifacts, and the audit drivers chain them.
//! Per-class artifacts live in `<out>/<setup>/<class slug>/`:
//! `candidates.json`, `filtered.json`, `scores.json`, `rankings.json`,
//! `records.jsonl`, `rates.json`, `gaps.json` and the summary `class.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use spurlens_core::ablation::{condense_mask, TokenDropMask, DEFAULT_MERGE, DEFAULT_PATCH_SIZE};
use spurlens_core::dataset::{
    build_hr_artificial_study, build_hr_random_outside_study, build_hr_supercategory_study,
    build_recognition_study, exclude_classes, ExclusionRecord, PoolSampling,
};
use spurlens_core::detection::{build_ranking, f_score, select_extremes, ScoreTable, SpuriosityRanking};
use spurlens_core::eval::{self, check_budget, EvalRecord, Strategy, StrategyInputs};
use spurlens_core::gaps::{
    classwise_aggregate, compute_gap, random_baseline, select_max_gap_feature, GapKind, GapMeta, GapReport, Rate,
};
use spurlens_core::proposal::{candidates_from_response, normalize_candidates, CandidateFeature, FilterKind, PromptVariant};

use crate::config::{HrSetup, RunConfig};
use crate::endpoints::{ChatRequest, ImagePayload, Message, Role};
use crate::error::{Error, Result};
use crate::imaging::black_fill_bytes;
use crate::loader::LoadedDataset;
use crate::par::par_map;
use crate::services::Services;

/// Resolves an image id to the bytes sent to endpoints.
pub type ImageFn<'a> = &'a (dyn Fn(&str) -> Result<ImagePayload> + Sync);

/// Owned form of [`ImageFn`].
pub type BoxedImageFn<'a> = Box<dyn Fn(&str) -> Result<ImagePayload> + Sync + 'a>;

pub fn original_images(data: &LoadedDataset) -> impl Fn(&str) -> Result<ImagePayload> + Sync + '_ {
    move |id| Ok(ImagePayload::new(data.image_bytes(id)?))
}

/// Object-removed variants: the target's mask is filled with black.
pub fn black_filled_images<'a>(
    data: &'a LoadedDataset,
    target: &'a str,
) -> impl Fn(&str) -> Result<ImagePayload> + Sync + 'a {
    move |id| {
        let mask = data
            .target_mask(id, target)?
            .ok_or_else(|| Error::Config(format!("image `{id}` has no mask for `{target}`")))?;
        Ok(ImagePayload::new(black_fill_bytes(&data.image_bytes(id)?, &mask)?))
    }
}

pub fn class_slug(class: &str) -> String {
    let s: String = class.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Cache(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| crate::error::json_parse_error(path, &text, &e))
}

/// `Error::Budget` when the failures exceed the budget.
pub fn enforce_budget(stage: &'static str, errored: &BTreeMap<String, String>, total: usize, budget: f64) -> Result<()> {
    if check_budget(stage, errored.len(), total, budget).is_err() {
        let first = errored.iter().next().map(|(id, m)| format!("{id}: {m}")).unwrap_or_default();
        return Err(Error::Budget { stage, errored: errored.len(), total, budget, first });
    }
    Ok(())
}

// ---------------------------------------------------------------- proposal

/// Both generation prompts with `n_total / 2` items each.
pub fn generate_candidates(svc: &Services, target: &str, n_total: usize) -> Result<Vec<CandidateFeature>> {
    if n_total == 0 || !n_total.is_multiple_of(2) {
        return Err(Error::Config(format!("n_total must be even and positive, got {n_total}")));
    }
    let per = n_total / 2;
    let replies = par_map(&PromptVariant::ALL, svc.max_inflight, |v| svc.ask(&v.prompt(per, target)));
    let mut out = Vec::with_capacity(n_total);
    for (variant, reply) in PromptVariant::ALL.into_iter().zip(replies) {
        let reply = reply.map_err(|e| e.context(format!("generating candidates for `{target}`")))?;
        let cands = candidates_from_response(&reply, per, variant, &svc.chat_model);
        if cands.len() < per {
            log::warn!("`{target}`: {variant:?} prompt gave {} of {per} items", cands.len());
        }
        out.extend(cands);
    }
    Ok(out)
}

/// Every filter for every candidate; verdicts are all recorded.
pub fn filter_candidates(svc: &Services, candidates: &[CandidateFeature], target: &str) -> Result<Vec<CandidateFeature>> {
    let judged = par_map(candidates, svc.max_inflight, |c| -> Result<CandidateFeature> {
        let mut c = c.clone();
        for f in FilterKind::ALL {
            let reply = svc.ask(&f.prompt(&c.text, target))?;
            let answer = spurlens_core::answer::parse_yes_no(&reply);
            if !answer.binary {
                log::warn!("filter `{}` on `{}`: unparseable answer {reply:?}, marked fail", f.name(), c.text);
            }
            c.record(f, f.judge(answer));
        }
        Ok(c)
    });
    judged.into_iter().collect::<Result<Vec<_>>>().map_err(|e| e.context(format!("filtering candidates for `{target}`")))
}

/// Active feature names in candidate order, de-duplicated.
pub fn active_features(filtered: &[CandidateFeature]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    filtered.iter().filter(|c| c.active && seen.insert(c.text.clone())).map(|c| c.text.clone()).collect()
}

// ---------------------------------------------------------------- detection

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreArtifact {
    pub pool: Vec<String>,
    pub features: Vec<String>,
    /// feature -> image id -> f-score, for images that did not error.
    pub scores: ScoreTable,
    pub errored: BTreeMap<String, String>,
}

impl ScoreArtifact {
    pub fn scored_pool(&self) -> Vec<String> {
        self.pool.iter().filter(|id| !self.errored.contains_key(*id)).cloned().collect()
    }
}

/// One detection request per image carrying every feature query.
pub fn score_pool(
    svc: &Services,
    pool: &[String],
    features: &[String],
    images: ImageFn,
    budget: f64,
) -> Result<ScoreArtifact> {
    if features.is_empty() {
        return Err(Error::Config("score_pool needs at least one feature".into()));
    }
    let results = par_map(pool, svc.max_inflight, |id| -> Result<Vec<f64>> {
        let out = svc.detect(&images(id)?, features)?;
        Ok(features.iter().map(|f| f_score(&out, f)).collect())
    });
    let mut art = ScoreArtifact { pool: pool.to_vec(), features: features.to_vec(), ..Default::default() };
    for f in features {
        art.scores.insert(f.clone(), BTreeMap::new());
    }
    for (id, r) in pool.iter().zip(results) {
        match r {
            Ok(scores) => {
                for (f, s) in features.iter().zip(scores) {
                    art.scores.get_mut(f).expect("inserted above").insert(id.clone(), s);
                }
            }
            Err(e) if e.is_item_failure() => {
                log::warn!("detect `{id}`: {e}");
                art.errored.insert(id.clone(), e.to_string());
            }
            Err(e) => return Err(e.context(format!("detecting cues in `{id}`"))),
        }
    }
    enforce_budget("detect", &art.errored, pool.len(), budget)?;
    Ok(art)
}

pub fn rank_all(scores: &ScoreArtifact, target: &str) -> Result<BTreeMap<String, SpuriosityRanking>> {
    let pool = scores.scored_pool();
    scores
        .features
        .iter()
        .map(|f| {
            let table = scores.scores.get(f).cloned().unwrap_or_default();
            Ok((f.clone(), build_ranking(&table, &pool, target, f)?))
        })
        .collect()
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditedRecord {
    #[serde(flatten)]
    pub record: EvalRecord,
    /// Chat cache keys, one per prompt sent.
    pub cache_keys: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalBatch {
    pub records: BTreeMap<String, AuditedRecord>,
    pub errored: BTreeMap<String, String>,
}

impl EvalBatch {
    pub fn rates(&self) -> BTreeMap<String, Rate> {
        self.records.iter().map(|(id, r)| (id.clone(), r.record.image_rate)).collect()
    }

    pub fn merge(&mut self, other: EvalBatch) {
        self.records.extend(other.records);
        self.errored.extend(other.errored);
    }
}

fn eval_one(
    svc: &Services,
    id: &str,
    target: &str,
    strategy: Strategy,
    plan: &[eval::Conversation],
    images: ImageFn,
) -> Result<AuditedRecord> {
    let image = images(id)?;
    let mut replies = Vec::with_capacity(plan.len());
    let mut cache_keys = Vec::new();
    for conv in plan {
        let mut messages = Vec::new();
        let mut conv_replies = Vec::with_capacity(conv.turns.len());
        for (j, turn) in conv.turns.iter().enumerate() {
            messages.push(if j == 0 { Message::with_image(turn.clone(), image.clone()) } else { Message::text(Role::User, turn.clone()) });
            let (reply, key) = svc.chat_keyed(&ChatRequest::new(&svc.chat_model, messages.clone(), svc.chat_seed))?;
            messages.push(Message::text(Role::Assistant, reply.clone()));
            conv_replies.push(reply);
            cache_keys.push(key);
        }
        replies.push(conv_replies);
    }
    let record = eval::aggregate(id, target, strategy, plan, &replies)?;
    if record.non_binary > 0 {
        log::info!("`{id}`: {} non-binary reply(s) scored as no: {:?}", record.non_binary, record.raw_responses);
    }
    Ok(AuditedRecord { record, cache_keys })
}

/// Evaluate each image under a strategy. Missing strategy inputs fail before
/// any request is sent.
pub fn eval_images(
    svc: &Services,
    ids: &[String],
    target: &str,
    strategy: Strategy,
    inputs: &StrategyInputs,
    images: ImageFn,
) -> Result<EvalBatch> {
    let plan = eval::plan(strategy, target, inputs)?;
    let results = par_map(ids, svc.max_inflight, |id| eval_one(svc, id, target, strategy, &plan, images));
    let mut batch = EvalBatch::default();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(rec) => {
                batch.records.insert(id.clone(), rec);
            }
            Err(e) if e.is_item_failure() => {
                log::warn!("eval `{id}`: {e}");
                batch.errored.insert(id.clone(), e.to_string());
            }
            Err(e) => return Err(e.context(format!("evaluating `{id}`"))),
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------- gaps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGap {
    #[serde(flatten)]
    pub report: GapReport,
    /// Images in the top or bottom set without a rate.
    pub n_errored: usize,
}

/// Mean rate over the ids that have one, and how many did not.
fn set_rate(ids: &[String], rates: &BTreeMap<String, Rate>) -> (Option<f64>, usize) {
    let present: Vec<Option<Rate>> = ids.iter().map(|id| rates.get(id).copied()).collect();
    let missing = present.iter().filter(|r| r.is_none()).count();
    (eval::eval_set(&present, 1.0).ok().map(|s| s.rate), missing)
}

pub fn gap_for_sets(top: &[String], bottom: &[String], rates: &BTreeMap<String, Rate>, meta: GapMeta) -> Result<Option<FeatureGap>> {
    let (rs, ms) = set_rate(top, rates);
    let (rc, mc) = set_rate(bottom, rates);
    let (Some(rs), Some(rc)) = (rs, rc) else {
        log::warn!("`{}`/`{}`: no rated images on one side, gap skipped", meta.target, meta.feature);
        return Ok(None);
    };
    let report = compute_gap(rs, rc, meta, top.to_vec(), bottom.to_vec())?;
    Ok(Some(FeatureGap { report, n_errored: ms + mc }))
}

/// Gap at `k` for every ranked feature, in feature order.
pub fn feature_gaps(
    rankings: &BTreeMap<String, SpuriosityRanking>,
    rates: &BTreeMap<String, Rate>,
    k: usize,
    base: &GapMeta,
) -> Result<Vec<FeatureGap>> {
    let mut out = Vec::new();
    for (feature, ranking) in rankings {
        let ex = select_extremes(ranking, k)?;
        let meta = GapMeta { feature: feature.clone(), ..base.clone() };
        out.extend(gap_for_sets(&ex.top, &ex.bottom, rates, meta)?);
    }
    Ok(out)
}

pub fn best_gap(gaps: &[FeatureGap]) -> Option<FeatureGap> {
    let reports: Vec<GapReport> = gaps.iter().map(|g| g.report.clone()).collect();
    let best = select_max_gap_feature(&reports).ok()?;
    gaps.iter().find(|g| g.report.feature == best.feature).cloned()
}

/// Inputs for the cue-aware strategies from baseline gaps: the strongest cue
/// is the max-gap feature; the list holds every feature with a positive gap,
/// largest first, and never less than the strongest cue.
pub fn derive_strategy_inputs(baseline: &[FeatureGap]) -> Option<StrategyInputs> {
    let best = best_gap(baseline)?;
    let mut ordered: Vec<&FeatureGap> = baseline.iter().collect();
    ordered.sort_by(|a, b| b.report.gap.total_cmp(&a.report.gap).then_with(|| a.report.feature.cmp(&b.report.feature)));
    let mut cues: Vec<String> = ordered.iter().filter(|g| g.report.gap > 0.0).map(|g| g.report.feature.clone()).collect();
    if cues.is_empty() {
        cues.push(best.report.feature.clone());
    }
    Some(StrategyInputs { cues_list: Some(cues), strongest_cue: Some(best.report.feature) })
}

/// Union of the top and bottom sets of every ranking, sorted.
pub fn extremes_union(rankings: &BTreeMap<String, SpuriosityRanking>, k: usize) -> Result<Vec<String>> {
    let mut ids = BTreeSet::new();
    for r in rankings.values() {
        let ex = select_extremes(r, k)?;
        ids.extend(ex.top);
        ids.extend(ex.bottom);
    }
    Ok(ids.into_iter().collect())
}

// ---------------------------------------------------------------- classes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClassStatus {
    Evaluated,
    NoFeatureEvaluated,
    InsufficientPool { required: usize, available: usize },
    BudgetExceeded { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    #[serde(flatten)]
    pub status: ClassStatus,
    pub pool_size: usize,
    pub n_candidates: usize,
    pub active_features: Vec<String>,
    pub gaps: Vec<FeatureGap>,
    pub best: Option<FeatureGap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy_inputs: Option<StrategyInputs>,
}

impl ClassResult {
    fn empty(class: &str, status: ClassStatus, pool_size: usize) -> Self {
        ClassResult {
            class: class.to_string(),
            status,
            pool_size,
            n_candidates: 0,
            active_features: Vec::new(),
            gaps: Vec::new(),
            best: None,
            strategy_inputs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Pa,
    Hr(HrSetup),
}

impl AuditKind {
    pub fn gap_kind(self) -> GapKind {
        match self {
            AuditKind::Pa => GapKind::Pa,
            AuditKind::Hr(_) => GapKind::Hr,
        }
    }

    pub fn setup_name(self) -> String {
        match self {
            AuditKind::Pa => "recognition".into(),
            AuditKind::Hr(s) => format!("hr_{}", s.as_str()),
        }
    }
}

/// Shared state of one run.
pub struct RunCtx<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a LoadedDataset,
    pub svc: &'a Services,
}

impl RunCtx<'_> {
    pub fn class_dir(&self, kind: AuditKind, class: &str) -> PathBuf {
        self.cfg.out_dir.join(kind.setup_name()).join(class_slug(class))
    }

    fn meta(&self, kind: AuditKind, class: &str) -> GapMeta {
        GapMeta {
            kind: kind.gap_kind(),
            model: self.svc.chat_model.clone(),
            target: class.to_string(),
            feature: String::new(),
            strategy: self.cfg.strategy.as_str().to_string(),
        }
    }

    /// The image pool a setup ranks, and how its images are rendered.
    pub fn pool(&self, kind: AuditKind, class: &str) -> Result<Vec<String>> {
        let ds = &self.data.dataset;
        let study = match kind {
            AuditKind::Pa => build_recognition_study(ds, class)?,
            AuditKind::Hr(HrSetup::Supercategory) | AuditKind::Hr(HrSetup::SupercategoryFixed) => {
                build_hr_supercategory_study(ds, class, None)?
            }
            AuditKind::Hr(HrSetup::RandomOutside) => build_hr_random_outside_study(ds, class, self.cfg.hr.n, self.cfg.seed)?,
            AuditKind::Hr(HrSetup::Artificial) => build_hr_artificial_study(ds, class)?,
        };
        Ok(study.ranking_pool().to_vec())
    }

    /// Image source of a setup: black-filled for the artificial setup,
    /// original bytes otherwise.
    pub fn images<'b>(&'b self, kind: AuditKind, class: &'b str) -> BoxedImageFn<'b> {
        match kind {
            AuditKind::Hr(HrSetup::Artificial) => Box::new(black_filled_images(self.data, class)),
            _ => Box::new(original_images(self.data)),
        }
    }

    pub fn run_class(&self, kind: AuditKind, class: &str) -> Result<ClassResult> {
        let result = match kind {
            AuditKind::Hr(HrSetup::SupercategoryFixed) => self.run_fixed_class(class)?,
            AuditKind::Hr(HrSetup::Artificial) => {
                self.write_token_masks(kind, class)?;
                self.run_ranked_class(kind, class, &*self.images(kind, class))?
            }
            _ => self.run_ranked_class(kind, class, &*self.images(kind, class))?,
        };
        write_json(&self.class_dir(kind, class).join("class.json"), &result)?;
        Ok(result)
    }

    pub fn write_token_masks(&self, kind: AuditKind, class: &str) -> Result<()> {
        let mut masks: BTreeMap<String, TokenDropMask> = BTreeMap::new();
        for id in self.pool(kind, class)? {
            if let Some(m) = self.data.target_mask(&id, class)? {
                masks.insert(id, condense_mask(&m, DEFAULT_PATCH_SIZE, DEFAULT_MERGE)?);
            }
        }
        write_json(&self.class_dir(kind, class).join("token_masks.json"), &masks)
    }

    fn run_ranked_class(&self, kind: AuditKind, class: &str, images: ImageFn) -> Result<ClassResult> {
        let (cfg, svc) = (self.cfg, self.svc);
        let dir = self.class_dir(kind, class);
        let k = cfg.k();
        let pool = self.pool(kind, class)?;

        let candidates = generate_candidates(svc, class, cfg.n_candidates)?;
        write_json(&dir.join("candidates.json"), &candidates)?;
        let filtered = filter_candidates(svc, &normalize_candidates(&candidates, class), class)?;
        write_json(&dir.join("filtered.json"), &filtered)?;
        let features = active_features(&filtered);
        let mut result = ClassResult::empty(class, ClassStatus::Evaluated, pool.len());
        result.n_candidates = candidates.len();
        result.active_features = features.clone();
        if features.is_empty() {
            result.status = ClassStatus::NoFeatureEvaluated;
            return Ok(result);
        }
        if 2 * k > pool.len() {
            result.status = ClassStatus::InsufficientPool { required: 2 * k, available: pool.len() };
            return Ok(result);
        }

        let scores = match score_pool(svc, &pool, &features, images, cfg.error_budget) {
            Ok(s) => s,
            Err(e @ Error::Budget { .. }) => {
                result.status = ClassStatus::BudgetExceeded { message: e.to_string() };
                return Ok(result);
            }
            Err(e) => return Err(e),
        };
        write_json(&dir.join("scores.json"), &scores)?;
        let scored = scores.scored_pool().len();
        if 2 * k > scored {
            result.status = ClassStatus::InsufficientPool { required: 2 * k, available: scored };
            return Ok(result);
        }
        let rankings = rank_all(&scores, class)?;
        write_json(&dir.join("rankings.json"), &rankings)?;

        let ids = extremes_union(&rankings, k)?;
        let meta = self.meta(kind, class);
        let needs_inputs = matches!(cfg.strategy, Strategy::SpuriousList | Strategy::SpuriousTop);
        let mut batch = EvalBatch::default();
        let inputs = if needs_inputs {
            let base = eval_images(svc, &ids, class, Strategy::Baseline, &StrategyInputs::default(), images)?;
            let base_meta = GapMeta { strategy: Strategy::Baseline.as_str().into(), ..meta.clone() };
            let base_gaps = feature_gaps(&rankings, &base.rates(), k, &base_meta)?;
            match derive_strategy_inputs(&base_gaps) {
                Some(i) => i,
                None => {
                    result.status = ClassStatus::NoFeatureEvaluated;
                    return Ok(result);
                }
            }
        } else {
            StrategyInputs::default()
        };
        batch.merge(eval_images(svc, &ids, class, cfg.strategy, &inputs, images)?);
        write_records(&dir.join("records.jsonl"), &batch)?;
        write_json(&dir.join("rates.json"), &batch.rates())?;
        if let Err(e) = enforce_budget("eval", &batch.errored, ids.len(), cfg.error_budget) {
            result.status = ClassStatus::BudgetExceeded { message: e.to_string() };
            return Ok(result);
        }

        let gaps = feature_gaps(&rankings, &batch.rates(), k, &meta)?;
        write_json(&dir.join("gaps.json"), &gaps)?;
        result.best = best_gap(&gaps);
        if result.best.is_none() {
            result.status = ClassStatus::NoFeatureEvaluated;
        }
        result.gaps = gaps;
        if needs_inputs {
            result.strategy_inputs = Some(inputs);
        }
        Ok(result)
    }

    /// Fixed same-supercategory sample against a fixed other-supercategory
    /// sample, without cue ranking.
    fn run_fixed_class(&self, class: &str) -> Result<ClassResult> {
        let (cfg, svc) = (self.cfg, self.svc);
        let kind = AuditKind::Hr(HrSetup::SupercategoryFixed);
        let dir = self.class_dir(kind, class);
        let study = build_hr_supercategory_study(
            &self.data.dataset,
            class,
            Some(PoolSampling { n: cfg.hr.n, seed: cfg.seed }),
        )?;
        let same = study.negative_pool_spurious_candidates;
        let other = study.negative_pool_baseline.unwrap_or_default();
        let n = same.len().min(other.len());
        let (same, other) = (same[..n].to_vec(), other[..n].to_vec());
        let mut result = ClassResult::empty(class, ClassStatus::Evaluated, same.len() + other.len());
        let ids: Vec<String> = same.iter().chain(&other).cloned().collect();
        let images = original_images(self.data);
        let batch = eval_images(svc, &ids, class, cfg.strategy, &StrategyInputs::default(), &images)?;
        write_records(&dir.join("records.jsonl"), &batch)?;
        write_json(&dir.join("rates.json"), &batch.rates())?;
        if let Err(e) = enforce_budget("eval", &batch.errored, ids.len(), cfg.error_budget) {
            result.status = ClassStatus::BudgetExceeded { message: e.to_string() };
            return Ok(result);
        }
        let meta = GapMeta { feature: "supercategory".into(), ..self.meta(kind, class) };
        let gaps: Vec<FeatureGap> = gap_for_sets(&same, &other, &batch.rates(), meta)?.into_iter().collect();
        write_json(&dir.join("gaps.json"), &gaps)?;
        result.best = gaps.first().cloned();
        if result.best.is_none() {
            result.status = ClassStatus::NoFeatureEvaluated;
        }
        result.gaps = gaps;
        Ok(result)
    }
}

pub fn write_records(path: &Path, batch: &EvalBatch) -> Result<()> {
    let mut text = String::new();
    for rec in batch.records.values() {
        text.push_str(&serde_json::to_string(rec).map_err(|e| Error::Cache(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<AuditedRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| crate::error::json_parse_error(path, l, &e)))
        .collect()
}

// ---------------------------------------------------------------- runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBlock {
    pub n_classes: usize,
    pub classwise_mean_s: f64,
    pub classwise_mean_c: f64,
    pub classwise_mean_gap: f64,
    /// class -> max-gap feature
    pub best_features: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub model: String,
    pub kind: GapKind,
    pub setup: String,
    pub k: usize,
    pub strategy: Strategy,
    pub exclusions: ExclusionRecord,
    pub classes: Vec<ClassResult>,
    pub summary: Option<SummaryBlock>,
}

impl RunReport {
    pub fn budget_exceeded(&self) -> bool {
        self.classes.iter().any(|c| matches!(c.status, ClassStatus::BudgetExceeded { .. }))
    }
}

/// The configured classes (all dataset classes when none are listed) minus
/// the exclusions.
pub fn selected_classes(cfg: &RunConfig, data: &LoadedDataset) -> (Vec<String>, ExclusionRecord) {
    let classes: Vec<String> =
        if cfg.classes.is_empty() { data.dataset.classes().iter().cloned().collect() } else { cfg.classes.clone() };
    let (kept, record) = exclude_classes(&classes, &cfg.exclusions);
    for u in &record.unknown {
        log::warn!("exclusion `{u}` matches no selected class");
    }
    (kept, record)
}

pub fn summarize(classes: &[ClassResult]) -> Result<Option<SummaryBlock>> {
    let best: BTreeMap<String, GapReport> =
        classes.iter().filter_map(|c| c.best.as_ref().map(|b| (c.class.clone(), b.report.clone()))).collect();
    if best.is_empty() {
        return Ok(None);
    }
    let s = classwise_aggregate(&best)?;
    Ok(Some(SummaryBlock {
        n_classes: best.len(),
        classwise_mean_s: s.classwise_mean_s,
        classwise_mean_c: s.classwise_mean_c,
        classwise_mean_gap: s.classwise_mean_gap,
        best_features: best.into_iter().map(|(c, r)| (c, r.feature)).collect(),
    }))
}

/// Run every selected class through one setup. Budget overruns mark the
/// class and the run continues; other errors abort with class context.
pub fn run_audit(ctx: &RunCtx, kind: AuditKind) -> Result<RunReport> {
    let (classes, exclusions) = selected_classes(ctx.cfg, ctx.data);
    let mut results = Vec::with_capacity(classes.len());
    for class in &classes {
        log::info!("{}: class `{class}`", kind.setup_name());
        let r = ctx.run_class(kind, class).map_err(|e| e.context(format!("class `{class}`")))?;
        results.push(r);
    }
    Ok(RunReport {
        dataset: ctx.cfg.dataset_name(),
        model: ctx.svc.chat_model.clone(),
        kind: kind.gap_kind(),
        setup: kind.setup_name(),
        k: ctx.cfg.k(),
        strategy: ctx.cfg.strategy,
        exclusions,
        summary: summarize(&results)?,
        classes: results,
    })
}

pub fn run_pa_audit(ctx: &RunCtx) -> Result<RunReport> {
    run_audit(ctx, AuditKind::Pa)
}

pub fn run_hr_audit(ctx: &RunCtx) -> Result<RunReport> {
    run_audit(ctx, AuditKind::Hr(ctx.cfg.hr.setup))
}

// ---------------------------------------------------------------- baselines

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselineResult {
    pub target: String,
    pub k: usize,
    pub n_rankings: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub value: f64,
    pub pool_size: usize,
    pub n_errored: usize,
}

/// Random-ranking baseline over a pool; every pool image is evaluated once
/// (through the cache) and errored images are left out of the shuffles.
#[allow(clippy::too_many_arguments)]
pub fn random_baseline_for(
    svc: &Services,
    pool: &[String],
    target: &str,
    k: usize,
    rounds: (usize, usize),
    strategy: (Strategy, &StrategyInputs),
    images: ImageFn,
    seed: u64,
    budget: f64,
) -> Result<RandomBaselineResult> {
    let batch = eval_images(svc, pool, target, strategy.0, strategy.1, images)?;
    enforce_budget("eval", &batch.errored, pool.len(), budget)?;
    let rates = batch.rates();
    let ok: Vec<String> = pool.iter().filter(|id| rates.contains_key(*id)).cloned().collect();
    let value = random_baseline(&ok, target, k, rounds.0, rounds.1, |id| rates[id], seed)?;
    Ok(RandomBaselineResult {
        target: target.to_string(),
        k,
        n_rankings: rounds.0,
        n_repeats: rounds.1,
        seed,
        value,
        pool_size: ok.len(),
        n_errored: batch.errored.len(),
    })
}
