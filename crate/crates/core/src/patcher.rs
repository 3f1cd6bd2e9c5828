//! Center-aligned longitudinal patch extraction.
//!
//! Both scans are cropped so that their lesion centers land on the same
//! in-patch voxel. Training draws place that voxel anywhere in the inner half
//! of the patch and jitter each scan independently; inference places it at
//! `floor(P / 2)` with no jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::case::{CaseRecord, LesionPrompt};
use crate::error::{Error, Result};
use crate::promptenc::{
    mask_channel, normalize_ct, rasterize_point, stack_inputs, InputMode, NormalizationConfig,
    PointBlobConfig, StackedInput,
};
use crate::seeding::RngStream;
use crate::volgrid::{Volume3, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    /// HU value for image voxels outside the scan, applied before normalization.
    pub pad_value_hu: f64,
    /// Per-axis bound of the training jitter, in voxels.
    pub train_shift_max: u32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: [64, 64, 64],
            pad_value_hu: -1000.0,
            train_shift_max: 4,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p < 4 || p % 2 != 0) {
            return Err(Error::Config(format!(
                "patch_size components must be even and >= 4, got {:?}",
                self.patch_size
            )));
        }
        if !self.pad_value_hu.is_finite() {
            return Err(Error::Config("pad_value_hu must be finite".into()));
        }
        Ok(())
    }

    /// Half-open per-axis range `[floor(P/4), floor(3P/4))` of training centers.
    pub fn inner_half(&self, axis: usize) -> std::ops::Range<i64> {
        let p = self.patch_size[axis];
        (p / 4) as i64..(3 * p / 4) as i64
    }
}

/// Where the lesion center goes inside the patch, and how far each scan's
/// stored center is shifted before cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub center_in_patch: VoxelIndex,
    pub jitter_curr: VoxelIndex,
    pub jitter_prior: VoxelIndex,
}

impl Placement {
    pub fn centered(spec: &PatchSpec) -> Self {
        Self {
            center_in_patch: VoxelIndex::middle_of(spec.patch_size),
            jitter_curr: VoxelIndex::default(),
            jitter_prior: VoxelIndex::default(),
        }
    }

    /// Draw order: in-patch center (z, y, x), follow-up jitter, baseline jitter.
    pub fn draw(spec: &PatchSpec, rng: &mut RngStream) -> Self {
        let mut axis = |r: std::ops::Range<i64>| rng.random_range(r);
        let center_in_patch = VoxelIndex::new(
            axis(spec.inner_half(0)),
            axis(spec.inner_half(1)),
            axis(spec.inner_half(2)),
        );
        let s = spec.train_shift_max as i64;
        let mut jitter = || {
            VoxelIndex::new(
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
            )
        };
        let jitter_curr = jitter();
        let jitter_prior = jitter();
        Self {
            center_in_patch,
            jitter_curr,
            jitter_prior,
        }
    }
}

/// Aligned patches from both timepoints plus prompt channels.
///
/// Every channel is extracted regardless of input mode; [`PatchPair::to_input`]
/// selects what a model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lesion_id: u16,
    /// Follow-up image, normalized.
    pub curr_patch: Volume3<f32>,
    /// Follow-up image in raw HU.
    pub curr_raw: Volume3<f32>,
    /// Baseline image, normalized.
    pub prior_patch: Volume3<f32>,
    /// Baseline delineation of this lesion, {0, 1}.
    pub prior_mask_patch: Volume3<f32>,
    pub point_channel: Volume3<f32>,
    pub origin_curr: VoxelIndex,
    pub origin_prior: VoxelIndex,
    pub placement: Placement,
    pub curr_full_shape: [usize; 3],
    pub prior_full_shape: [usize; 3],
}

impl PatchPair {
    pub fn patch_shape(&self) -> [usize; 3] {
        self.curr_patch.shape()
    }

    pub fn center_in_patch(&self) -> VoxelIndex {
        self.placement.center_in_patch
    }

    /// True when an in-patch index of the follow-up patch lies outside the scan.
    pub fn is_padding(&self, idx: VoxelIndex) -> bool {
        !(idx + self.origin_curr).in_bounds(self.curr_full_shape)
    }

    pub fn to_input(&self, mode: InputMode) -> Result<StackedInput> {
        stack_inputs(
            &self.curr_patch,
            Some(&self.prior_patch),
            Some(&self.prior_mask_patch),
            Some(&self.point_channel),
            mode,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patcher {
    pub spec: PatchSpec,
    pub norm: NormalizationConfig,
    pub blob: PointBlobConfig,
}

impl Patcher {
    pub fn new(spec: PatchSpec, norm: NormalizationConfig, blob: PointBlobConfig) -> Result<Self> {
        spec.validate()?;
        norm.validate()?;
        blob.validate()?;
        Ok(Self { spec, norm, blob })
    }

    pub fn train_sample(
        &self,
        case: &CaseRecord,
        lesion_id: u16,
        rng: &mut RngStream,
    ) -> Result<PatchPair> {
        let lesion = case.lesion(lesion_id)?;
        self.extract(case, lesion, Placement::draw(&self.spec, rng))
    }

    pub fn infer_patch(&self, case: &CaseRecord, lesion_id: u16) -> Result<PatchPair> {
        let lesion = case.lesion(lesion_id)?;
        self.extract(case, lesion, Placement::centered(&self.spec))
    }

    /// Crops both scans for an explicit placement.
    pub fn extract(
        &self,
        case: &CaseRecord,
        lesion: &LesionPrompt,
        placement: Placement,
    ) -> Result<PatchPair> {
        let size = self.spec.patch_size;
        let pad = self.spec.pad_value_hu as f32;
        let origin_curr =
            lesion.center_followup + placement.jitter_curr - placement.center_in_patch;
        let origin_prior =
            lesion.center_baseline + placement.jitter_prior - placement.center_in_patch;

        let curr_raw = case.followup.crop(origin_curr, size, pad);
        let prior_raw = case.baseline.crop(origin_prior, size, pad);
        let prior_labels = case.gt_baseline.crop(origin_prior, size, 0);
        let point_channel = rasterize_point(placement.center_in_patch, size, &self.blob)?
            .with_spacing(case.followup.spacing())?;

        Ok(PatchPair {
            lesion_id: lesion.id,
            curr_patch: normalize_ct(&curr_raw, &self.norm),
            curr_raw,
            prior_patch: normalize_ct(&prior_raw, &self.norm),
            prior_mask_patch: mask_channel(&prior_labels, lesion.id),
            point_channel,
            origin_curr,
            origin_prior,
            placement,
            curr_full_shape: case.followup.shape(),
            prior_full_shape: case.baseline.shape(),
        })
    }
}

/// Patch values mapped back into a full volume; padded voxels are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub full_shape: [usize; 3],
    /// `(flat offset, value)` in increasing offset order.
    pub entries: Vec<(usize, f32)>,
}

impl SparseUpdate {
    pub fn empty(full_shape: [usize; 3]) -> Self {
        Self {
            full_shape,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn voxels(&self) -> impl Iterator<Item = (VoxelIndex, f32)> + '_ {
        let [_, ny, nx] = self.full_shape;
        self.entries.iter().map(move |&(o, v)| {
            (
                VoxelIndex::new(
                    (o / (ny * nx)) as i64,
                    ((o / nx) % ny) as i64,
                    (o % nx) as i64,
                ),
                v,
            )
        })
    }
}

pub fn paste_patch(
    full_shape: [usize; 3],
    origin: VoxelIndex,
    patch: &Volume3<f32>,
) -> SparseUpdate {
    let [pz, py, px] = patch.shape();
    let [nz, ny, nx] = full_shape;
    // in-patch index range that maps inside the volume, per axis
    let clip = |o: i64, p: usize, n: usize| -> std::ops::Range<i64> {
        let lo = (-o).max(0);
        let hi = (n as i64 - o).min(p as i64);
        lo..hi.max(lo)
    };
    let (rz, ry, rx) = (
        clip(origin.z, pz, nz),
        clip(origin.y, py, ny),
        clip(origin.x, px, nx),
    );
    let mut entries = Vec::with_capacity(
        (rz.end - rz.start) as usize * (ry.end - ry.start) as usize * (rx.end - rx.start) as usize,
    );
    let src = patch.data();
    for z in rz {
        for y in ry.clone() {
            let src_row = (z as usize * py + y as usize) * px;
            let dst_row = ((origin.z + z) as usize * ny + (origin.y + y) as usize) * nx;
            for x in rx.clone() {
                entries.push((dst_row + (origin.x + x) as usize, src[src_row + x as usize]));
            }
        }
    }
    SparseUpdate {
        full_shape,
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EdgeWarning {
    pub lesion_id: u16,
    pub center_followup: VoxelIndex,
    /// Voxels between the center and the nearest face (negative: outside).
    pub face_distance: i64,
}

/// Flags lesions whose follow-up center lies within `margin` voxels of a face
/// of the follow-up scan.
pub fn validate_case(case: &CaseRecord, margin: u32) -> Vec<EdgeWarning> {
    let shape = case.followup.shape();
    case.lesions
        .iter()
        .filter_map(|l| {
            let d = l.center_followup.face_distance(shape);
            (d <= margin as i64).then_some(EdgeWarning {
                lesion_id: l.id,
                center_followup: l.center_followup,
                face_distance: d,
            })
        })
        .collect()
}
