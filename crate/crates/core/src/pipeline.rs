//! Reproducible end-to-end runs: dataset generation, fold splitting,
//! per-lesion inference with multilabel fusion, and evaluation.
//!
//! Output layout under `output_root`:
//!
//! ```text
//! predictions/<patient_id>_merged.svol         u16 multilabel
//! predictions/<patient_id>_lesion<id>.svol     u8 per lesion
//! predictions/manifest.json                    sha256 of every prediction file
//! predictions/run_config.json                  resolved configuration
//! metrics.csv
//! folds.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::case::{
    list_cases, load_case, read_lesions, CaseRecord, GT_FOLLOWUP_FILE, LESIONS_FILE,
};
use crate::error::{Error, Result};
use crate::evalx::{
    attach_predictions, evaluate_dataset, evaluate_patient, fold_split, group_gt_lesions,
    split_labels, write_metrics_csv, MetricsRow,
};
use crate::fuse::{export_separate, merge_multilabel, LesionPrediction};
use crate::patcher::{paste_patch, validate_case, PatchSpec, Patcher};
use crate::promptenc::{InputMode, NormalizationConfig, PointBlobConfig};
use crate::segmenter::{
    EnsembleSegmenter, OracleBackend, RegionGrowBackend, RegionGrowConfig, SegmenterBackend,
};
use crate::synthgen::{gen_dataset, PhantomConfig};
use crate::volgrid::{read_svol_as, write_svol, Volume3};

pub const PREDICTIONS_DIR: &str = "predictions";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FOLDS_FILE: &str = "folds.json";
pub const GEN_CONFIG_FILE: &str = "gen_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    RegionGrow,
    Oracle,
}

impl FromStr for BackendName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region_grow" => Ok(BackendName::RegionGrow),
            "oracle" => Ok(BackendName::Oracle),
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (expected region_grow or oracle)"
            ))),
        }
    }
}

impl fmt::Display for BackendName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendName::RegionGrow => "region_grow",
            BackendName::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub name: BackendName,
    pub region_grow: RegionGrowConfig,
    /// Fold identifiers whose predictions are averaged.
    pub ensemble: Vec<String>,
    /// Per-fold replacements of `region_grow`.
    pub member_overrides: BTreeMap<String, RegionGrowConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: BackendName::RegionGrow,
            region_grow: RegionGrowConfig::default(),
            ensemble: (0..5).map(|f| format!("fold_{f}")).collect(),
            member_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    pub master_seed: u64,
    pub patch: PatchSpec,
    pub normalization: NormalizationConfig,
    pub blob: PointBlobConfig,
    pub input_mode: InputMode,
    pub backend: BackendConfig,
    pub threshold: f32,
    pub k_folds: usize,
    /// Lesions whose follow-up center lies within this many voxels of a face are skipped.
    pub edge_margin: u32,
    /// Skip the whole patient instead of the offending lesion.
    pub exclude_patient_on_edge: bool,
    pub phantom: PhantomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("dataset"),
            output_root: PathBuf::from("output"),
            master_seed: 42,
            patch: PatchSpec::default(),
            normalization: NormalizationConfig::default(),
            blob: PointBlobConfig::default(),
            input_mode: InputMode::default(),
            backend: BackendConfig::default(),
            threshold: 0.5,
            k_folds: 5,
            edge_margin: 0,
            exclude_patient_on_edge: false,
            phantom: PhantomConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.normalization.validate()?;
        self.blob.validate()?;
        self.input_mode.validate()?;
        self.backend.region_grow.validate()?;
        for cfg in self.backend.member_overrides.values() {
            cfg.validate()?;
        }
        if self.backend.ensemble.is_empty() {
            return Err(Error::Config("ensemble member list is empty".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.output_root.join(PREDICTIONS_DIR)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Generates the synthetic dataset into `dataset_root`.
pub fn run_gen(cfg: &RunConfig, n_cases: usize) -> Result<Vec<String>> {
    let ids = gen_dataset(cfg.master_seed, n_cases, &cfg.phantom, &cfg.dataset_root)?;
    write_text(&cfg.dataset_root.join(GEN_CONFIG_FILE), &cfg.to_json()?)?;
    log::info!(
        "generated {} cases under {}",
        ids.len(),
        cfg.dataset_root.display()
    );
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldsFile {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

pub fn dataset_ids(cfg: &RunConfig) -> Result<Vec<String>> {
    Ok(list_cases(&cfg.dataset_root)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

pub fn run_split(cfg: &RunConfig) -> Result<FoldsFile> {
    let ids = dataset_ids(cfg)?;
    let folds = FoldsFile {
        k: cfg.k_folds,
        assignment: fold_split(&ids, cfg.k_folds)?,
    };
    create_dir(&cfg.output_root)?;
    let mut json =
        serde_json::to_string_pretty(&folds).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_text(&cfg.output_root.join(FOLDS_FILE), &json)?;
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FoldSelector {
    #[default]
    All,
    Fold(usize),
}

impl FromStr for FoldSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FoldSelector::All);
        }
        s.parse()
            .map(FoldSelector::Fold)
            .map_err(|_| Error::Config(format!("fold must be an integer or \"all\", got {s:?}")))
    }
}

/// Dataset patients selected by `fold`, sorted by id.
pub fn select_patients(cfg: &RunConfig, fold: FoldSelector) -> Result<Vec<(String, PathBuf)>> {
    let cases = list_cases(&cfg.dataset_root)?;
    match fold {
        FoldSelector::All => Ok(cases),
        FoldSelector::Fold(f) => {
            if f >= cfg.k_folds {
                return Err(Error::Config(format!(
                    "fold {f} out of range for k = {}",
                    cfg.k_folds
                )));
            }
            let ids: Vec<String> = cases.iter().map(|(id, _)| id.clone()).collect();
            let assignment = fold_split(&ids, cfg.k_folds)?;
            Ok(cases
                .into_iter()
                .filter(|(id, _)| assignment[id] == f)
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the predictions directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLesion {
    pub patient_id: String,
    pub lesion_id: u16,
    pub face_distance: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub backend: String,
    pub input_mode: Option<InputMode>,
    pub files: Vec<ManifestEntry>,
    pub skipped_patients: Vec<String>,
    pub skipped_lesions: Vec<SkippedLesion>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn merged_file_name(patient_id: &str) -> String {
    format!("{patient_id}_merged.svol")
}

pub fn lesion_file_name(patient_id: &str, lesion_id: u16) -> String {
    format!("{patient_id}_lesion{lesion_id}.svol")
}

fn build_backend<'a>(
    cfg: &RunConfig,
    case: &'a CaseRecord,
    ids: &'a [u16],
) -> Result<Box<dyn SegmenterBackend + 'a>> {
    let members = cfg
        .backend
        .ensemble
        .iter()
        .map(|fold| -> Result<Box<dyn SegmenterBackend + 'a>> {
            Ok(match cfg.backend.name {
                BackendName::RegionGrow => Box::new(RegionGrowBackend {
                    cfg: cfg
                        .backend
                        .member_overrides
                        .get(fold)
                        .copied()
                        .unwrap_or(cfg.backend.region_grow),
                }),
                BackendName::Oracle => Box::new(OracleBackend {
                    gt: case.gt_followup.as_ref().ok_or_else(|| {
                        Error::Config(format!(
                            "oracle backend needs follow-up truth for {}",
                            case.patient_id
                        ))
                    })?,
                    lesion_ids: ids,
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Box::new(EnsembleSegmenter { members }))
}

/// Per-lesion predictions of one case in full-volume coordinates.
pub fn predict_case(
    cfg: &RunConfig,
    case: &CaseRecord,
    lesion_ids: &[u16],
) -> Result<Vec<LesionPrediction>> {
    let patcher = Patcher::new(cfg.patch, cfg.normalization, cfg.blob)?;
    let all_ids = case.lesion_ids();
    let backend = build_backend(cfg, case, &all_ids)?;
    lesion_ids
        .iter()
        .map(|&id| {
            let pair = patcher.infer_patch(case, id)?;
            let prob = backend.segment(&pair, cfg.input_mode)?;
            Ok(LesionPrediction {
                lesion_id: id,
                update: paste_patch(case.followup.shape(), pair.origin_curr, &prob),
            })
        })
        .collect()
}

enum PatientOutcome {
    Written {
        files: Vec<String>,
        skipped: Vec<SkippedLesion>,
    },
    Skipped {
        skipped: Vec<SkippedLesion>,
    },
}

fn infer_patient(cfg: &RunConfig, case_dir: &Path, out_dir: &Path) -> Result<PatientOutcome> {
    let case = load_case(case_dir)?;
    let pid = case.patient_id.clone();
    let skipped: Vec<SkippedLesion> = validate_case(&case, cfg.edge_margin)
        .into_iter()
        .map(|w| {
            log::warn!(
                "{pid}: lesion {} follow-up center {:?} is {} voxels from the scan edge",
                w.lesion_id,
                w.center_followup.to_array(),
                w.face_distance
            );
            SkippedLesion {
                patient_id: pid.clone(),
                lesion_id: w.lesion_id,
                face_distance: w.face_distance,
            }
        })
        .collect();
    if cfg.exclude_patient_on_edge && !skipped.is_empty() {
        log::warn!("{pid}: excluded because a lesion center lies on the scan edge");
        return Ok(PatientOutcome::Skipped { skipped });
    }

    let keep: Vec<u16> = case
        .lesion_ids()
        .into_iter()
        .filter(|id| !skipped.iter().any(|s| s.lesion_id == *id))
        .collect();
    let preds = predict_case(cfg, &case, &keep)?;
    let shape = case.followup.shape();
    let spacing = case.followup.spacing();

    let mut files = Vec::new();
    let merged = merge_multilabel(&preds, shape, spacing, cfg.threshold)?;
    let name = merged_file_name(&pid);
    write_svol(&merged, out_dir.join(&name))?;
    files.push(name);
    for (id, mask) in export_separate(&preds, shape, spacing, cfg.threshold)? {
        let name = lesion_file_name(&pid, id);
        write_svol(&mask, out_dir.join(&name))?;
        files.push(name);
    }
    log::info!("{pid}: predicted {} lesions", keep.len());
    Ok(PatientOutcome::Written { files, skipped })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs inference for the selected patients and writes predictions plus a
/// manifest. `jobs == 0` uses all available cores.
pub fn run_infer(cfg: &RunConfig, fold: FoldSelector, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    let cases = select_patients(cfg, fold)?;
    let out_dir = cfg.predictions_dir();
    create_dir(&out_dir)?;
    write_text(&out_dir.join(RUN_CONFIG_FILE), &cfg.to_json()?)?;

    let outcomes = thread_pool(jobs)?.install(|| {
        cases
            .par_iter()
            .map(|(_, dir)| infer_patient(cfg, dir, &out_dir))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut manifest = Manifest {
        backend: cfg.backend.name.to_string(),
        input_mode: Some(cfg.input_mode),
        ..Default::default()
    };
    for ((pid, _), outcome) in cases.iter().zip(outcomes) {
        match outcome {
            PatientOutcome::Written { files, skipped } => {
                for name in files {
                    let path = out_dir.join(&name);
                    let bytes = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                    manifest.files.push(ManifestEntry {
                        sha256: sha256_file(&path)?,
                        path: name,
                        bytes,
                    });
                }
                manifest.skipped_lesions.extend(skipped);
            }
            PatientOutcome::Skipped { skipped } => {
                manifest.skipped_patients.push(pid.clone());
                manifest.skipped_lesions.extend(skipped);
            }
        }
    }
    manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_text(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub mean: Option<MetricsRow>,
    /// Patients whose merged prediction file is missing.
    pub missing: Vec<String>,
    /// Patients left out on purpose, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty() && self.mean.is_some()
    }
}

/// Scores one patient's merged prediction against its follow-up truth.
pub fn evaluate_case_files(case_dir: &Path, merged_path: &Path) -> Result<MetricsRow> {
    let lesions = read_lesions(case_dir.join(LESIONS_FILE))?;
    let gt = read_svol_as::<u16>(case_dir.join(GT_FOLLOWUP_FILE))?;
    let pred: Volume3<u16> = read_svol_as(merged_path)?;
    gt.same_shape(&pred)?;
    let ids: Vec<u16> = lesions.lesions.iter().map(|l| l.id).collect();
    let mut groups = group_gt_lesions(&split_labels(&gt, &ids))?;
    attach_predictions(&mut groups, &split_labels(&pred, &ids))?;
    evaluate_patient(&lesions.patient_id, &groups, gt.spacing())
}

/// Evaluates merged predictions under `predictions_dir` and writes
/// `metrics.csv` into `output_root`. Missing predictions are reported, not
/// fatal; callers decide the exit status from [`EvalReport::is_complete`].
pub fn run_eval(cfg: &RunConfig, predictions_dir: &Path, fold: FoldSelector) -> Result<EvalReport> {
    let cases = select_patients(cfg, fold)?;
    let manifest_path = predictions_dir.join(MANIFEST_FILE);
    let skipped: BTreeSet<String> = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
            .skipped_patients
            .into_iter()
            .collect()
    } else {
        BTreeSet::new()
    };

    let mut report = EvalReport::default();
    for (pid, dir) in &cases {
        if skipped.contains(pid) {
            report
                .excluded
                .push((pid.clone(), "skipped at inference (edge center)".into()));
            continue;
        }
        let merged = predictions_dir.join(merged_file_name(pid));
        if !merged.is_file() {
            log::error!("{pid}: missing prediction {}", merged.display());
            report.missing.push(pid.clone());
            continue;
        }
        match evaluate_case_files(dir, &merged) {
            Ok(row) => report.rows.push(row),
            Err(Error::NoLesions(_)) => {
                log::warn!("{pid}: no ground-truth lesions, excluded from the average");
                report.excluded.push((pid.clone(), "no lesions".into()));
            }
            Err(e) => return Err(e),
        }
    }

    if !report.rows.is_empty() {
        let mean = evaluate_dataset(&report.rows)?;
        create_dir(&cfg.output_root)?;
        let path = cfg.output_root.join(METRICS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_metrics_csv(std::io::BufWriter::new(file), &report.rows, &mean)?;
        report.mean = Some(mean);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidateReport {
    pub cases: usize,
    pub warnings: Vec<SkippedLesion>,
    pub errors: Vec<(String, String)>,
}

/// Loads every case and collects structural errors and edge-center warnings.
pub fn run_validate(cfg: &RunConfig) -> Result<ValidateReport> {
    let mut report = ValidateReport::default();
    for (pid, dir) in list_cases(&cfg.dataset_root)? {
        report.cases += 1;
        match load_case(&dir) {
            Ok(case) => {
                if case.patient_id != pid {
                    report.errors.push((
                        pid.clone(),
                        format!("lesions.json names patient {}", case.patient_id),
                    ));
                }
                report
                    .warnings
                    .extend(validate_case(&case, cfg.edge_margin).into_iter().map(|w| {
                        SkippedLesion {
                            patient_id: pid.clone(),
                            lesion_id: w.lesion_id,
                            face_distance: w.face_distance,
                        }
                    }));
            }
            Err(e) => report.errors.push((pid, e.to_string())),
        }
    }
    Ok(report)
}
