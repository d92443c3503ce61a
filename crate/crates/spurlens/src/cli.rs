//! Command-line surface. Every stage reads its inputs from and writes its
//! outputs to the per-class artifact directory, so a run can be resumed or
//! re-driven one stage at a time.
//!
//! Exit codes: 0 on success, 2 when a stage exceeded its error budget, 1 on
//! any other error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use spurlens_core::ablation::DEFAULT_BLANK_SIDE;
use spurlens_core::detection::{default_tau_grid, diversity_k, select_extremes, SpuriosityRanking};
use spurlens_core::eval::{Strategy, StrategyInputs};
use spurlens_core::gaps::{k_sensitivity_sweep, GapMeta, Rate};
use spurlens_core::probe::{probe_gap_experiment, ProbeConfig, ProbeData};
use spurlens_core::proposal::{normalize_candidates, CandidateFeature};
use spurlens_core::study::sample_validation_tasks;

use crate::config::{HrSetup, RunConfig};
use crate::endpoints::{EmbedRequest, EmbedResponse, ImagePayload};
use crate::error::{Error, Result};
use crate::imaging::{blank_png, black_fill_bytes};
use crate::loader::{load_annotations, LoadedDataset};
use crate::pipeline::{
    self, active_features, best_gap, class_slug, derive_strategy_inputs, eval_images, extremes_union, feature_gaps,
    filter_candidates, generate_candidates, rank_all, read_json, score_pool, selected_classes, summarize, write_atomic,
    write_json, write_records, AuditKind, ClassResult, ClassStatus, FeatureGap, RunCtx, RunReport, ScoreArtifact,
};
use crate::report::{audit_completeness, build_manifest, emit_report, run_dir, ReportFormat};
use crate::services::Services;
use crate::study_server::{default_judgments_path, load_tasks, HumanGapSettings, StudyServer, StudyState};

pub const EXIT_BUDGET: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetupArg {
    Recognition,
    Supercategory,
    SupercategoryFixed,
    RandomOutside,
    Artificial,
}

impl SetupArg {
    fn kind(self) -> AuditKind {
        match self {
            SetupArg::Recognition => AuditKind::Pa,
            SetupArg::Supercategory => AuditKind::Hr(HrSetup::Supercategory),
            SetupArg::SupercategoryFixed => AuditKind::Hr(HrSetup::SupercategoryFixed),
            SetupArg::RandomOutside => AuditKind::Hr(HrSetup::RandomOutside),
            SetupArg::Artificial => AuditKind::Hr(HrSetup::Artificial),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spurlens", version, about = "Find and measure spurious visual cues in multimodal models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Restrict to these classes (repeatable).
    #[arg(long = "class", global = true)]
    pub classes: Vec<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Serve every request from the cache; a miss is an error.
    #[arg(long, global = true)]
    pub offline: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Which pool the stage commands operate on.
    #[arg(long, global = true, value_enum)]
    pub setup: Option<SetupArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask the chat model for candidate cues.
    Propose,
    /// Run every filter question over the candidates.
    Filter,
    /// Score every pool image for every active cue.
    Detect,
    /// Build one spuriosity ranking per cue.
    Rank,
    /// Report K over a threshold grid for the scored cues.
    Diversity {
        /// Minimum number of sufficiently represented cues.
        #[arg(long, default_value_t = 7)]
        n_tilde: usize,
    },
    /// Evaluate the top and bottom K images of every ranking.
    Eval,
    /// Per-cue gaps from rankings and cached rates.
    Gaps,
    /// Random-ranking baseline over the scored pool.
    Baseline {
        #[arg(long, default_value_t = 16)]
        rankings: usize,
        #[arg(long, default_value_t = 16)]
        repeats: usize,
    },
    /// Gap of the strongest cue at several K.
    SweepK {
        /// Comma-separated K values; defaults to 10, 25, 50, 100 capped by the pool.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        feature: Option<String>,
    },
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Logistic-regression probe on image embeddings.
    Probe(ProbeArgs),
    #[command(subcommand)]
    Study(StudyCommand),
    /// Assemble report.json, report.csv and manifest.json from class results.
    Report,
    /// Full recognition audit.
    RunPa,
    /// Full hallucination audit with the configured (or --setup) negative pool.
    RunHr,
}

#[derive(Debug, Subcommand)]
pub enum AblateCommand {
    /// Token-drop masks for the target's segmentation.
    Mask,
    /// PNG copies of the pool with the target filled black.
    Blackfill,
    /// An all-black PNG.
    Blank {
        #[arg(long, default_value_t = DEFAULT_BLANK_SIDE)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_BLANK_SIDE)]
        height: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// JSON map image id -> embedding; the embed endpoint is used otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub x: usize,
    #[arg(long, default_value_t = 1)]
    pub f: usize,
    #[arg(long, default_value_t = 100)]
    pub k_holdout: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Sample validation tasks from the classes' strongest-cue rankings.
    Sample {
        #[arg(long, default_value_t = 10)]
        per_bucket: usize,
        #[arg(long)]
        n_classes: Option<usize>,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

/// Configuration with command-line overrides applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let path = g.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if !g.classes.is_empty() {
        cfg.classes = g.classes.clone();
    }
    if let Some(k) = g.k {
        cfg.k = Some(k);
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.strategy {
        cfg.strategy = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(AuditKind::Hr(s)) = g.setup.map(SetupArg::kind) {
        cfg.hr.setup = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Session {
    cfg: RunConfig,
    data: Arc<LoadedDataset>,
    svc: Services,
    kind: AuditKind,
}

impl Session {
    fn open(g: &GlobalArgs, default_kind: AuditKind) -> Result<Self> {
        let cfg = resolve_config(g)?;
        let data = Arc::new(load_annotations(&cfg.dataset.path, cfg.dataset.format, cfg.dataset.images_dir.as_deref())?);
        let svc = Services::from_config(&cfg, g.offline)?;
        let kind = g.setup.map_or(default_kind, SetupArg::kind);
        Ok(Session { cfg, data, svc, kind })
    }

    fn ctx(&self) -> RunCtx<'_> {
        RunCtx { cfg: &self.cfg, data: &self.data, svc: &self.svc }
    }

    fn classes(&self) -> Vec<String> {
        selected_classes(&self.cfg, &self.data).0
    }

    fn dir(&self, class: &str) -> PathBuf {
        self.ctx().class_dir(self.kind, class)
    }

    fn meta(&self, class: &str) -> GapMeta {
        GapMeta {
            kind: self.kind.gap_kind(),
            model: self.svc.chat_model.clone(),
            target: class.to_string(),
            feature: String::new(),
            strategy: self.cfg.strategy.as_str().to_string(),
        }
    }

    fn each_class(&self, mut f: impl FnMut(&str, &Path) -> Result<()>) -> Result<()> {
        for class in self.classes() {
            let dir = self.dir(&class);
            f(&class, &dir).map_err(|e| e.context(format!("class `{class}`")))?;
        }
        Ok(())
    }
}

fn load_rates(dir: &Path) -> Result<BTreeMap<String, Rate>> {
    read_json(&dir.join("rates.json"))
}

fn load_rankings(dir: &Path) -> Result<BTreeMap<String, SpuriosityRanking>> {
    read_json(&dir.join("rankings.json"))
}

/// Cue inputs for the spurious strategies from a saved baseline gap table.
fn saved_strategy_inputs(dir: &Path, strategy: Strategy) -> Result<StrategyInputs> {
    if !matches!(strategy, Strategy::SpuriousList | Strategy::SpuriousTop) {
        return Ok(StrategyInputs::default());
    }
    let path = dir.join("gaps.json");
    let gaps: Vec<FeatureGap> = read_json(&path)
        .map_err(|e| e.context("strategies that name cues need baseline gaps; run `eval` and `gaps` with --strategy baseline"))?;
    derive_strategy_inputs(&gaps).ok_or_else(|| Error::Config(format!("{} holds no gaps", path.display())))
}

fn default_sweep(pool: usize) -> Vec<usize> {
    let ks: Vec<usize> = [10, 25, 50, 100].into_iter().filter(|k| 2 * k <= pool).collect();
    if ks.is_empty() && pool >= 2 {
        vec![pool / 2]
    } else {
        ks
    }
}

fn write_report(s: &Session, report: &RunReport) -> Result<i32> {
    let dir = run_dir(&s.cfg.out_dir, s.kind);
    let manifest = build_manifest(&s.cfg, &s.data, report)?;
    emit_report(&dir, report, &manifest, &[ReportFormat::Json, ReportFormat::Csv])?;
    let check = audit_completeness(&dir, report, &s.svc.cache)?;
    if !check.complete() {
        log::warn!("{} cache key(s) behind the report are missing from the cache", check.missing.len());
    }
    log::info!("report written to {}", dir.display());
    Ok(if report.budget_exceeded() { EXIT_BUDGET } else { 0 })
}

fn ablate(s: &Session, cmd: &AblateCommand) -> Result<()> {
    match cmd {
        AblateCommand::Mask => s.each_class(|class, _| s.ctx().write_token_masks(s.kind, class)),
        AblateCommand::Blackfill => s.each_class(|class, dir| {
            let out = dir.join("blackfill");
            for id in s.ctx().pool(s.kind, class)? {
                let Some(mask) = s.data.target_mask(&id, class)? else { continue };
                let png = black_fill_bytes(&s.data.image_bytes(&id)?, &mask)?;
                write_atomic(&out.join(format!("{}.png", class_slug(&id))), &png)?;
            }
            Ok(())
        }),
        AblateCommand::Blank { .. } => unreachable!("handled without a session"),
    }
}

fn probe(s: &Session, a: &ProbeArgs) -> Result<()> {
    let from_file: Option<BTreeMap<String, Vec<f64>>> = a.embeddings.as_deref().map(read_json).transpose()?;
    let embed = |ids: &[String]| -> Result<BTreeMap<String, Vec<f64>>> {
        if let Some(m) = &from_file {
            return ids
                .iter()
                .map(|id| {
                    m.get(id).cloned().map(|v| (id.clone(), v)).ok_or_else(|| Error::Config(format!("no embedding for `{id}`")))
                })
                .collect();
        }
        let images: Vec<ImagePayload> =
            ids.iter().map(|id| Ok(ImagePayload::new(s.data.image_bytes(id)?))).collect::<Result<_>>()?;
        match s.svc.embed(&EmbedRequest::Images { images, pooled: true })? {
            EmbedResponse::Vectors(v) => Ok(ids.iter().cloned().zip(v).collect()),
            EmbedResponse::Patches(_) => Err(Error::Protocol { endpoint: "embed".into(), message: "expected pooled vectors".into() }),
        }
    };
    let cfg = ProbeConfig { x: a.x, f: a.f, k_holdout: a.k_holdout, runs: a.runs, ..ProbeConfig::default() };
    s.each_class(|class, dir| {
        let rankings = load_rankings(&s.ctx().class_dir(AuditKind::Pa, class))?;
        let feature = match &a.feature {
            Some(f) => f.clone(),
            None => {
                let gaps: Vec<FeatureGap> = read_json(&s.ctx().class_dir(AuditKind::Pa, class).join("gaps.json"))?;
                best_gap(&gaps).ok_or_else(|| Error::Config("no gaps to pick a cue from".into()))?.report.feature
            }
        };
        let ranking = rankings.get(&feature).ok_or_else(|| Error::Config(format!("no ranking for `{feature}`")))?;
        let ranked_ids: Vec<String> = ranking.ids().map(str::to_string).collect();
        let others: Vec<String> =
            s.data.dataset.images().iter().filter(|r| !r.contains(class)).map(|r| r.image_id.clone()).collect();
        let mut ids = ranked_ids.clone();
        ids.extend(others.iter().cloned());
        let emb = embed(&ids)?;
        let ranked: Vec<Vec<f64>> = ranked_ids.iter().map(|id| emb[id].clone()).collect();
        let negs: Vec<Vec<f64>> = others.iter().map(|id| emb[id].clone()).collect();
        let data = ProbeData { ranked: &ranked, others: &negs, val_positive: &[], val_negative: &[] };
        let eval_k = s.cfg.k().min(cfg.k_holdout);
        let result = probe_gap_experiment(data, &cfg, eval_k, s.cfg.seed)?;
        write_json(&dir.join("probe.json"), &json!({"feature": feature, "eval_k": eval_k, "config": cfg, "result": result}))
    })
}

fn study(s: &Session, cmd: &StudyCommand) -> Result<()> {
    let study_dir = s.cfg.out_dir.join("study");
    match cmd {
        StudyCommand::Sample { per_bucket, n_classes } => {
            let mut rankings = Vec::new();
            for class in s.classes() {
                let dir = s.dir(&class);
                let gaps: Vec<FeatureGap> = read_json(&dir.join("gaps.json"))?;
                let Some(best) = best_gap(&gaps) else { continue };
                let mut all = load_rankings(&dir)?;
                if let Some(r) = all.remove(&best.report.feature) {
                    rankings.push(r);
                }
            }
            let n = n_classes.unwrap_or(rankings.len());
            let tasks = sample_validation_tasks(&rankings, *per_bucket, n, s.cfg.seed)?;
            write_json(&study_dir.join("tasks.json"), &tasks)?;
            log::info!("{} tasks written to {}", tasks.len(), study_dir.display());
            Ok(())
        }
        StudyCommand::Serve { addr, tasks, threads } => {
            let tasks_path = tasks.clone().unwrap_or_else(|| study_dir.join("tasks.json"));
            let tasks = load_tasks(&tasks_path)?;
            let mut rates = BTreeMap::new();
            for t in &tasks {
                if !rates.contains_key(&t.target) {
                    let r = load_rates(&s.dir(&t.target)).unwrap_or_default();
                    rates.insert(t.target.clone(), r);
                }
            }
            let gap = HumanGapSettings {
                rates,
                k: s.cfg.k(),
                model: s.svc.chat_model.clone(),
                strategy: s.cfg.strategy.as_str().into(),
                seed: s.cfg.seed,
            };
            let state =
                Arc::new(StudyState::open(tasks, &default_judgments_path(&tasks_path), Some(s.data.clone()), gap)?);
            let server = StudyServer::start(state, addr, *threads)?;
            eprintln!("study API listening on http://{}", server.addr);
            server.wait();
            Ok(())
        }
    }
}

/// Run one parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let g = &cli.global;
    if let Command::Ablate(AblateCommand::Blank { width, height, output }) = &cli.command {
        let out = match output {
            Some(p) => p.clone(),
            None => g.out.clone().unwrap_or_else(|| PathBuf::from("out")).join(format!("blank_{width}x{height}.png")),
        };
        write_atomic(&out, &blank_png(*width, *height)?)?;
        return Ok(0);
    }
    let default_kind = match cli.command {
        Command::RunHr => AuditKind::Hr(HrSetup::Supercategory),
        _ => AuditKind::Pa,
    };
    let mut s = Session::open(g, default_kind)?;
    if matches!(cli.command, Command::RunHr) && g.setup.is_none() {
        s.kind = AuditKind::Hr(s.cfg.hr.setup);
    }
    let svc = &s.svc;
    let budget = s.cfg.error_budget;
    let k = s.cfg.k();
    let mut budget_hit = false;
    let mut on_budget = |r: Result<()>| -> Result<()> {
        match r {
            Err(e @ Error::Budget { .. }) => {
                log::error!("{e}");
                budget_hit = true;
                Ok(())
            }
            Err(Error::Context { context, source }) if matches!(*source, Error::Budget { .. }) => {
                log::error!("{context}: {source}");
                budget_hit = true;
                Ok(())
            }
            other => other,
        }
    };
    match &cli.command {
        Command::Propose => s.each_class(|class, dir| {
            write_json(&dir.join("candidates.json"), &generate_candidates(svc, class, s.cfg.n_candidates)?)
        })?,
        Command::Filter => s.each_class(|class, dir| {
            let cands: Vec<CandidateFeature> = read_json(&dir.join("candidates.json"))?;
            write_json(&dir.join("filtered.json"), &filter_candidates(svc, &normalize_candidates(&cands, class), class)?)
        })?,
        Command::Detect => {
            let r = s.each_class(|class, dir| {
                let filtered: Vec<CandidateFeature> = read_json(&dir.join("filtered.json"))?;
                let features = active_features(&filtered);
                if features.is_empty() {
                    log::warn!("`{class}`: no active cues");
                    return Ok(());
                }
                let ctx = s.ctx();
                let pool = ctx.pool(s.kind, class)?;
                let scores = score_pool(svc, &pool, &features, &*ctx.images(s.kind, class), budget)?;
                write_json(&dir.join("scores.json"), &scores)
            });
            on_budget(r)?
        }
        Command::Rank => s.each_class(|class, dir| {
            let scores: ScoreArtifact = read_json(&dir.join("scores.json"))?;
            write_json(&dir.join("rankings.json"), &rank_all(&scores, class)?)
        })?,
        Command::Diversity { n_tilde } => s.each_class(|_, dir| {
            let scores: ScoreArtifact = read_json(&dir.join("scores.json"))?;
            let report = diversity_k(&scores.scores, &scores.features, *n_tilde, &default_tau_grid())?;
            write_json(&dir.join("diversity.json"), &report)
        })?,
        Command::Eval => {
            let r = s.each_class(|class, dir| {
                let rankings = load_rankings(dir)?;
                let ids = extremes_union(&rankings, k)?;
                let inputs = saved_strategy_inputs(dir, s.cfg.strategy)?;
                let ctx = s.ctx();
                let batch = eval_images(svc, &ids, class, s.cfg.strategy, &inputs, &*ctx.images(s.kind, class))?;
                write_records(&dir.join("records.jsonl"), &batch)?;
                write_json(&dir.join("rates.json"), &batch.rates())?;
                pipeline::enforce_budget("eval", &batch.errored, ids.len(), budget)
            });
            on_budget(r)?
        }
        Command::Gaps => s.each_class(|class, dir| {
            let rankings = load_rankings(dir)?;
            let gaps = feature_gaps(&rankings, &load_rates(dir)?, k, &s.meta(class))?;
            write_json(&dir.join("gaps.json"), &gaps)?;
            let scores: Option<ScoreArtifact> = read_json(&dir.join("scores.json")).ok();
            let best = best_gap(&gaps);
            let result = ClassResult {
                class: class.to_string(),
                status: if best.is_some() { ClassStatus::Evaluated } else { ClassStatus::NoFeatureEvaluated },
                pool_size: scores.as_ref().map_or(0, |sc| sc.pool.len()),
                n_candidates: read_json::<Vec<CandidateFeature>>(&dir.join("candidates.json")).map_or(0, |c| c.len()),
                active_features: rankings.keys().cloned().collect(),
                gaps,
                best,
                strategy_inputs: None,
            };
            write_json(&dir.join("class.json"), &result)
        })?,
        Command::Baseline { rankings, repeats } => {
            let r = s.each_class(|class, dir| {
                let scores: ScoreArtifact = read_json(&dir.join("scores.json"))?;
                let ctx = s.ctx();
                let inputs = saved_strategy_inputs(dir, s.cfg.strategy)?;
                let result = pipeline::random_baseline_for(
                    svc,
                    &scores.scored_pool(),
                    class,
                    k,
                    (*rankings, *repeats),
                    (s.cfg.strategy, &inputs),
                    &*ctx.images(s.kind, class),
                    s.cfg.seed,
                    budget,
                )?;
                write_json(&dir.join("random_baseline.json"), &result)
            });
            on_budget(r)?
        }
        Command::SweepK { ks, feature } => {
            let r = s.each_class(|class, dir| {
                let rankings = load_rankings(dir)?;
                let feature = match feature {
                    Some(f) => f.clone(),
                    None => {
                        let gaps: Vec<FeatureGap> = read_json(&dir.join("gaps.json"))?;
                        best_gap(&gaps).ok_or_else(|| Error::Config("no gaps to pick a cue from".into()))?.report.feature
                    }
                };
                let ranking = rankings.get(&feature).ok_or_else(|| Error::Config(format!("no ranking for `{feature}`")))?;
                let ks = if ks.is_empty() { default_sweep(ranking.len()) } else { ks.clone() };
                let kmax = ks.iter().copied().max().ok_or_else(|| Error::Config("no K values".into()))?;
                let ex = select_extremes(ranking, kmax)?;
                let ids: Vec<String> = ex.top.into_iter().chain(ex.bottom).collect();
                let inputs = saved_strategy_inputs(dir, s.cfg.strategy)?;
                let ctx = s.ctx();
                let batch = eval_images(svc, &ids, class, s.cfg.strategy, &inputs, &*ctx.images(s.kind, class))?;
                pipeline::enforce_budget("eval", &batch.errored, ids.len(), budget)?;
                let meta = GapMeta { feature: feature.clone(), ..s.meta(class) };
                let sweep = k_sensitivity_sweep(ranking, &batch.rates(), &ks, &meta)?;
                write_json(&dir.join("sweep_k.json"), &sweep)
            });
            on_budget(r)?
        }
        Command::Ablate(cmd) => ablate(&s, cmd)?,
        Command::Probe(a) => probe(&s, a)?,
        Command::Study(cmd) => study(&s, cmd)?,
        Command::Report => {
            let (classes, exclusions) = selected_classes(&s.cfg, &s.data);
            let results: Vec<ClassResult> =
                classes.iter().map(|c| read_json(&s.dir(c).join("class.json"))).collect::<Result<_>>()?;
            let report = RunReport {
                dataset: s.cfg.dataset_name(),
                model: svc.chat_model.clone(),
                kind: s.kind.gap_kind(),
                setup: s.kind.setup_name(),
                k,
                strategy: s.cfg.strategy,
                exclusions,
                summary: summarize(&results)?,
                classes: results,
            };
            return write_report(&s, &report);
        }
        Command::RunPa | Command::RunHr => {
            let report = pipeline::run_audit(&s.ctx(), s.kind)?;
            return write_report(&s, &report);
        }
    }
    Ok(if budget_hit { EXIT_BUDGET } else { 0 })
}
