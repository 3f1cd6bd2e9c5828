//! Patient case records and the on-disk dataset layout.
//!
//! ```text
//! <root>/<patient_id>/baseline.svol      f32 HU
//!                    /followup.svol      f32 HU
//!                    /gt_baseline.svol   u16 multilabel
//!                    /gt_followup.svol   u16 multilabel
//!                    /lesions.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{read_svol_as, write_svol, Volume3, VoxelIndex};

pub const BASELINE_FILE: &str = "baseline.svol";
pub const FOLLOWUP_FILE: &str = "followup.svol";
pub const GT_BASELINE_FILE: &str = "gt_baseline.svol";
pub const GT_FOLLOWUP_FILE: &str = "gt_followup.svol";
pub const LESIONS_FILE: &str = "lesions.json";

/// One lesion: its label id and its center in both scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionPrompt {
    pub id: u16,
    pub center_baseline: VoxelIndex,
    pub center_followup: VoxelIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionsFile {
    pub patient_id: String,
    pub lesions: Vec<LesionPrompt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub patient_id: String,
    /// Baseline (prior) scan in HU.
    pub baseline: Volume3<f32>,
    /// Follow-up (current) scan in HU.
    pub followup: Volume3<f32>,
    /// Baseline delineations; supplies the prior-mask prompt.
    pub gt_baseline: Volume3<u16>,
    /// Follow-up truth, present only when the case is used for evaluation.
    pub gt_followup: Option<Volume3<u16>>,
    pub lesions: Vec<LesionPrompt>,
}

impl CaseRecord {
    pub fn lesion(&self, id: u16) -> Result<&LesionPrompt> {
        self.lesions
            .iter()
            .find(|l| l.id == id)
            .ok_or(Error::UnknownLesion(id))
    }

    pub fn lesion_ids(&self) -> Vec<u16> {
        self.lesions.iter().map(|l| l.id).collect()
    }

    /// Checks internal consistency: matching shapes, unique nonzero ids.
    pub fn check(&self) -> Result<()> {
        self.baseline.same_shape(&self.gt_baseline)?;
        if let Some(gt) = &self.gt_followup {
            self.followup.same_shape(gt)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.lesions {
            if l.id == 0 {
                return Err(Error::ReservedLabel);
            }
            if !seen.insert(l.id) {
                return Err(Error::DuplicateLesion(l.id));
            }
        }
        Ok(())
    }

    pub fn lesions_file(&self) -> LesionsFile {
        LesionsFile {
            patient_id: self.patient_id.clone(),
            lesions: self.lesions.clone(),
        }
    }
}

pub fn is_patient_id(s: &str) -> bool {
    s.len() == 10
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn read_lesions(path: impl AsRef<Path>) -> Result<LesionsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_case(dir: impl AsRef<Path>) -> Result<CaseRecord> {
    let dir = dir.as_ref();
    let lesions = read_lesions(dir.join(LESIONS_FILE))?;
    let gt_followup_path = dir.join(GT_FOLLOWUP_FILE);
    let gt_followup = if gt_followup_path.exists() {
        Some(read_svol_as::<u16>(&gt_followup_path)?)
    } else {
        None
    };
    let case = CaseRecord {
        patient_id: lesions.patient_id,
        baseline: read_svol_as(dir.join(BASELINE_FILE))?,
        followup: read_svol_as(dir.join(FOLLOWUP_FILE))?,
        gt_baseline: read_svol_as(dir.join(GT_BASELINE_FILE))?,
        gt_followup,
        lesions: lesions.lesions,
    };
    case.check()?;
    Ok(case)
}

pub fn save_case(case: &CaseRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_svol(&case.baseline, dir.join(BASELINE_FILE))?;
    write_svol(&case.followup, dir.join(FOLLOWUP_FILE))?;
    write_svol(&case.gt_baseline, dir.join(GT_BASELINE_FILE))?;
    if let Some(gt) = &case.gt_followup {
        write_svol(gt, dir.join(GT_FOLLOWUP_FILE))?;
    }
    let path = dir.join(LESIONS_FILE);
    let mut json = serde_json::to_string_pretty(&case.lesions_file())
        .map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Patient directories under a dataset root, sorted by patient id.
pub fn list_cases(root: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(LESIONS_FILE).is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.push((name.to_owned(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
