//! `report`: label accuracy against reference poses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use poseforge_core::formats::{LabelRecord, TransformRecord, TruthRecord, SCHEMA_VERSION};
use poseforge_core::fusion::Provenance;
use poseforge_core::metrics::{rotation_error, sample_reprojection_rms, speed_terms, translation_error, MetricsError};
use poseforge_core::pnp::PnpSample;
use poseforge_core::se3::RigidTransform;
use poseforge_core::SampleId;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{load_board, load_camera, Stat};
use crate::error::{CliError, Result};
use crate::ingest::ingest;
use crate::io::{read_json_lines, write_bytes, write_json};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub labels: PathBuf,
    pub truth: PathBuf,
    pub out: PathBuf,
    /// With `camera` and `board`, enables the reprojection column.
    pub measurements: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub board: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPose {
    pub sample_id: SampleId,
    pub pose: RigidTransform<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub sample_id: SampleId,
    pub provenance: Provenance,
    /// m.
    pub e_t: f64,
    /// rad.
    pub e_r: f64,
    pub speed: f64,
    pub e_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub e_t_mm: Stat,
    pub e_r_deg: Stat,
    pub speed: Stat,
    /// px; only over samples with observations.
    pub e_p_px: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    #[serde(flatten)]
    pub all: GroupSummary,
    pub by_provenance: BTreeMap<String, GroupSummary>,
}

impl ReportSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10}{:>6}  {:>22}  {:>22}  {:>22}  {:>20}",
            "labels", "N", "E_T [mm]", "E_R [deg]", "SPEED", "E_p [px]"
        );
        let groups = std::iter::once(("ALL", &self.all)).chain(self.by_provenance.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, g) in groups {
            let _ = writeln!(
                s,
                "{:<10}{:>6}  {:>22}  {:>22}  {:>22}  {:>20}",
                name,
                g.count,
                g.e_t_mm.display(3),
                g.e_r_deg.display(3),
                g.speed.display(5),
                g.e_p_px.map_or("n/a".to_string(), |p| p.display(3))
            );
        }
        s
    }
}

fn group(samples: &[&SampleReport]) -> GroupSummary {
    let pick = |f: fn(&SampleReport) -> f64| samples.iter().map(|s| f(s)).collect::<Vec<_>>();
    let e_p: Vec<f64> = samples.iter().filter_map(|s| s.e_p).collect();
    GroupSummary {
        count: samples.len(),
        e_t_mm: Stat::of(&pick(|s| s.e_t)).expect("non-empty").scaled(1e3),
        e_r_deg: Stat::of(&pick(|s| s.e_r)).expect("non-empty").scaled(180.0 / std::f64::consts::PI),
        speed: Stat::of(&pick(|s| s.speed)).expect("non-empty"),
        e_p_px: Stat::of(&e_p),
    }
}

pub fn summarize(samples: &[SampleReport]) -> ReportSummary {
    let all: Vec<&SampleReport> = samples.iter().collect();
    let mut by: BTreeMap<String, Vec<&SampleReport>> = BTreeMap::new();
    for s in samples {
        by.entry(s.provenance.as_str().to_string()).or_default().push(s);
    }
    ReportSummary {
        schema_version: SCHEMA_VERSION,
        all: group(&all),
        by_provenance: by.into_iter().map(|(k, v)| (k, group(&v))).collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(samples: &[SampleReport]) -> String {
    let mut s = String::from("sample_id,provenance,e_t_m,e_r_rad,speed,e_p_px\n");
    for r in samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.provenance.as_str(),
            r.e_t,
            r.e_r,
            r.speed,
            fmt_opt(r.e_p)
        );
    }
    s
}

/// Per-sample errors. `labels` and `truth` must cover the same sample ids;
/// output follows label order.
pub fn evaluate(
    labels: &[LabeledPose],
    truth: &BTreeMap<SampleId, RigidTransform<f64>>,
    reprojection: Option<&(dyn Fn(SampleId, &RigidTransform<f64>) -> Option<Result<f64>> + Sync)>,
) -> Result<Vec<SampleReport>> {
    if labels.len() != truth.len() {
        return Err(CliError::metrics(MetricsError::LengthMismatch {
            estimated: labels.len(),
            truth: truth.len(),
        }));
    }
    if labels.is_empty() {
        return Err(CliError::metrics(MetricsError::Empty));
    }
    let reference = labels
        .iter()
        .map(|l| {
            truth.get(&l.sample_id).copied().ok_or_else(|| {
                CliError::validation("report", format!("sample {} has no reference pose", l.sample_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let estimated: Vec<_> = labels.iter().map(|l| l.pose).collect();
    let speed = speed_terms(&estimated, &reference).map_err(|e| match e {
        MetricsError::ZeroRangeTruth { index } => CliError::validation(
            "report",
            format!("sample {}: reference pose has zero range", labels[index].sample_id),
        ),
        other => CliError::metrics(other),
    })?;
    labels
        .par_iter()
        .zip(reference.par_iter())
        .zip(speed.par_iter())
        .map(|((l, t), s)| {
            let e_p = match reprojection {
                Some(f) => f(l.sample_id, &l.pose).transpose()?,
                None => None,
            };
            Ok(SampleReport {
                sample_id: l.sample_id,
                provenance: l.provenance,
                e_t: translation_error(&l.pose, t),
                e_r: rotation_error(&l.pose, t),
                speed: *s,
                e_p,
            })
        })
        .collect()
}

fn decode_pose(path: &Path, line: usize, rec: &TransformRecord) -> Result<RigidTransform<f64>> {
    rec.decode("pose")
        .map(|d| d.transform)
        .map_err(|e| CliError::validation(format!("{}:{line}", path.display()), e))
}

pub fn load_labels(path: &Path) -> Result<Vec<LabeledPose>> {
    let mut seen = BTreeSet::new();
    read_json_lines::<LabelRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            let ctx = || format!("{}:{line}", path.display());
            poseforge_core::formats::check_schema(rec.schema_version).map_err(|e| CliError::validation(ctx(), e))?;
            if !seen.insert(rec.sample_id) {
                return Err(CliError::validation(ctx(), format!("duplicate sample_id {}", rec.sample_id)));
            }
            Ok(LabeledPose {
                sample_id: rec.sample_id,
                pose: decode_pose(path, line, &rec.pose)?,
                provenance: rec.provenance().map_err(|e| CliError::validation(ctx(), e))?,
            })
        })
        .collect()
}

pub fn load_truth(path: &Path) -> Result<BTreeMap<SampleId, RigidTransform<f64>>> {
    let mut out = BTreeMap::new();
    for (line, rec) in read_json_lines::<TruthRecord>(path)? {
        let ctx = || format!("{}:{line}", path.display());
        poseforge_core::formats::check_schema(rec.schema_version).map_err(|e| CliError::validation(ctx(), e))?;
        let pose = decode_pose(path, line, &rec.pose)?;
        if out.insert(rec.sample_id, pose).is_some() {
            return Err(CliError::validation(ctx(), format!("duplicate sample_id {}", rec.sample_id)));
        }
    }
    Ok(out)
}

pub fn cmd_report(config: &ReportConfig) -> Result<ReportSummary> {
    let labels = load_labels(&config.labels)?;
    let truth = load_truth(&config.truth)?;

    let samples = match (&config.measurements, &config.camera, &config.board) {
        (Some(m), Some(c), Some(b)) => {
            let (camera, _) = load_camera(c)?;
            let board = load_board(b)?;
            let observations: BTreeMap<SampleId, PnpSample<f64>> = ingest(m)?
                .into_iter()
                .filter_map(|r| Some((r.sample_id, r.observations?)))
                .collect();
            let f = |id: SampleId, pose: &RigidTransform<f64>| {
                observations.get(&id).map(|obs| {
                    sample_reprojection_rms(&camera, &board, pose, obs).map_err(CliError::metrics)
                })
            };
            evaluate(&labels, &truth, Some(&f))?
        }
        (None, None, None) => evaluate(&labels, &truth, None)?,
        _ => {
            return Err(CliError::validation(
                "report",
                "--measurements, --camera and --board must be given together",
            ))
        }
    };
    let summary = summarize(&samples);
    write_bytes(&config.out.join(REPORT_CSV), render_csv(&samples).as_bytes())?;
    write_json(&config.out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}
