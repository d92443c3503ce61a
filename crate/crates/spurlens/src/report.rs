//! Report emission, run manifests and the audit-completeness check.
//!
//! A run directory `<out>/<setup>/` holds `report.json`, `report.csv` and
//! `manifest.json`. None of them carry timestamps, so a replay of the same
//! configuration against a warm cache rewrites them byte for byte.
//! CSV floats are rendered with exactly 4 decimals and never as `-0.0000`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spurlens_core::dataset::ExclusionRecord;
use spurlens_core::eval::Strategy;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loader::LoadedDataset;
use crate::pipeline::{class_slug, read_records, write_atomic, write_json, AuditKind, RunReport};
use crate::store::{Cache, EndpointKind};

pub const CSV_COLUMNS: [&str; 11] =
    ["dataset", "model", "class", "kind", "feature", "K", "rate_s", "rate_c", "gap", "strategy", "n_errored"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEndpoint {
    pub name: String,
    pub base_url: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub name: String,
    pub format: String,
    /// Digest of the annotation file.
    pub annotations_sha256: String,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub endpoints: Vec<ManifestEndpoint>,
    pub dataset: ManifestDataset,
    pub setup: String,
    pub classes: Vec<String>,
    pub exclusions: ExclusionRecord,
    pub k: usize,
    pub n_candidates: usize,
    pub strategy: Strategy,
    pub code_version: String,
}

pub fn build_manifest(cfg: &RunConfig, data: &LoadedDataset, report: &RunReport) -> Result<RunManifest> {
    Ok(RunManifest {
        config_digest: cfg.digest()?,
        seed: cfg.seed,
        endpoints: cfg
            .endpoints
            .iter()
            .map(|(name, ep)| ManifestEndpoint { name: name.into(), base_url: ep.base_url.clone(), model: ep.model.clone() })
            .collect(),
        dataset: ManifestDataset {
            name: cfg.dataset_name(),
            format: cfg.dataset.format.to_string(),
            annotations_sha256: data.source_digest.to_hex(),
            n_images: data.dataset.len(),
        },
        setup: report.setup.clone(),
        classes: report.classes.iter().map(|c| c.class.clone()).collect(),
        exclusions: report.exclusions.clone(),
        k: report.k,
        n_candidates: cfg.n_candidates,
        strategy: report.strategy,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Four decimals; negative zero prints as zero.
pub fn fmt4(x: f64) -> String {
    let s = format!("{x:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// One row per feature gap of every evaluated class.
pub fn csv_rows(report: &RunReport) -> Vec<[String; 11]> {
    let mut rows = Vec::new();
    for class in &report.classes {
        for g in &class.gaps {
            let r = &g.report;
            rows.push([
                report.dataset.clone(),
                r.model.clone(),
                class.class.clone(),
                r.kind.as_str().to_string(),
                r.feature.clone(),
                r.k.to_string(),
                fmt4(r.rate_s),
                fmt4(r.rate_c),
                fmt4(r.gap),
                r.strategy.clone(),
                g.n_errored.to_string(),
            ]);
        }
    }
    rows
}

pub fn render_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Cache(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(to_err)?;
    for row in csv_rows(report) {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Cache(format!("csv: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn run_dir(out_dir: &Path, kind: AuditKind) -> PathBuf {
    out_dir.join(kind.setup_name())
}

/// Writes the requested report files plus `manifest.json`; returns the paths.
pub fn emit_report(dir: &Path, report: &RunReport, manifest: &RunManifest, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for f in formats {
        let path = match f {
            ReportFormat::Json => {
                let p = dir.join("report.json");
                write_json(&p, report)?;
                p
            }
            ReportFormat::Csv => {
                let p = dir.join("report.csv");
                write_atomic(&p, &render_csv(report)?)?;
                p
            }
        };
        written.push(path);
    }
    let p = dir.join("manifest.json");
    write_json(&p, manifest)?;
    written.push(p);
    Ok(written)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditCheck {
    pub records: usize,
    pub cache_keys: usize,
    /// `(class, image id, key)` for keys absent from the cache.
    pub missing: Vec<(String, String, String)>,
}

impl AuditCheck {
    pub fn complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Every evaluation record behind a report must resolve to cached raw
/// responses.
pub fn audit_completeness(dir: &Path, report: &RunReport, cache: &Cache) -> Result<AuditCheck> {
    let mut check = AuditCheck::default();
    let mut seen = BTreeSet::new();
    for class in &report.classes {
        let path = dir.join(class_slug(&class.class)).join("records.jsonl");
        if !path.exists() {
            continue;
        }
        for rec in read_records(&path)? {
            check.records += 1;
            for key in &rec.cache_keys {
                check.cache_keys += 1;
                if !seen.insert(key.clone()) {
                    continue;
                }
                let present = hex::decode(key)
                    .ok()
                    .and_then(|b| <[u8; 32]>::try_from(b).ok())
                    .is_some_and(|k| cache.contains(EndpointKind::Chat, &k));
                if !present {
                    check.missing.push((class.class.clone(), rec.record.image_id.clone(), key.clone()));
                }
            }
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ClassResult, ClassStatus, FeatureGap};
    use spurlens_core::gaps::{GapKind, GapReport};

    fn report() -> RunReport {
        let gap = |feature: &str, s: f64, c: f64| FeatureGap {
            report: GapReport {
                kind: GapKind::Pa,
                model: "mm".into(),
                target: "dog".into(),
                feature: feature.into(),
                k: 2,
                rate_s: s,
                rate_c: c,
                gap: s - c,
                top_ids: vec![],
                bottom_ids: vec![],
                strategy: "baseline".into(),
            },
            n_errored: 1,
        };
        RunReport {
            dataset: "toy".into(),
            model: "mm".into(),
            kind: GapKind::Pa,
            setup: "recognition".into(),
            k: 2,
            strategy: Strategy::Baseline,
            exclusions: ExclusionRecord::default(),
            classes: vec![ClassResult {
                class: "dog".into(),
                status: ClassStatus::Evaluated,
                pool_size: 4,
                n_candidates: 2,
                active_features: vec!["leash".into(), "a, b".into()],
                gaps: vec![gap("leash", 0.88, 0.676), gap("a, b", 0.5, 0.5)],
                best: None,
                strategy_inputs: None,
            }],
            summary: None,
        }
    }

    #[test]
    fn csv_has_exact_columns_and_one_row_per_gap() {
        let text = String::from_utf8(render_csv(&report()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,model,class,kind,feature,K,rate_s,rate_c,gap,strategy,n_errored");
        assert_eq!(lines[1], "toy,mm,dog,PA,leash,2,0.8800,0.6760,0.2040,baseline,1");
        assert_eq!(lines[2], "toy,mm,dog,PA,\"a, b\",2,0.5000,0.5000,0.0000,baseline,1");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn four_decimals_without_negative_zero() {
        assert_eq!(fmt4(-0.00001), "0.0000");
        assert_eq!(fmt4(-0.2), "-0.2000");
        assert_eq!(fmt4(0.35), "0.3500");
    }
}
