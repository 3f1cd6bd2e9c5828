//! Per-lesion segmentation backends, fold ensembling and thresholding.
//!
//! A backend maps one [`PatchPair`] to a probability patch of the same shape.
//! The trained network is not part of this crate; [`RegionGrowBackend`] is a
//! deterministic intensity-based stand-in and [`OracleBackend`] replays ground
//! truth to check the surrounding pipeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patcher::PatchPair;
use crate::promptenc::InputMode;
use crate::volgrid::{Volume3, VoxelIndex};

pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Probability patch in `[0, 1]`, shaped like `pair.patch_shape()`.
    fn segment(&self, pair: &PatchPair, mode: InputMode) -> Result<Volume3<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    #[default]
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<VoxelIndex> {
        let mut out = Vec::new();
        for z in -1..=1 {
            for y in -1..=1 {
                for x in -1..=1 {
                    let d = VoxelIndex::new(z, y, x);
                    let n = d.norm_sq();
                    if n > 0 && (self == Connectivity::TwentySix || n == 1) {
                        out.push(d);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionGrowConfig {
    /// Half-width of the accepted HU band around the seed intensity.
    pub tau_hu: f64,
    /// Maximum Euclidean distance from the seed, in voxels.
    pub r_max_vox: f64,
    pub connectivity: Connectivity,
    /// Distance around the prior mask where the band is widened.
    pub mask_dilation_vox: u32,
    /// Band multiplier near the prior mask.
    pub mask_tau_relax: f64,
}

impl Default for RegionGrowConfig {
    fn default() -> Self {
        Self {
            tau_hu: 150.0,
            r_max_vox: 24.0,
            connectivity: Connectivity::Six,
            mask_dilation_vox: 3,
            mask_tau_relax: 1.5,
        }
    }
}

impl RegionGrowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_hu > 0.0) || !(self.r_max_vox > 0.0) {
            return Err(Error::Config(
                "region_grow needs tau_hu > 0 and r_max_vox > 0".into(),
            ));
        }
        if !(self.mask_tau_relax >= 1.0) {
            return Err(Error::Config(
                "region_grow mask_tau_relax must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Marks voxels within Euclidean distance `radius` of any nonzero mask voxel.
fn dilate_ball(mask: &Volume3<f32>, radius: u32) -> Vec<bool> {
    let r = radius as i64;
    let ball: Vec<VoxelIndex> = (-r..=r)
        .flat_map(|z| (-r..=r).flat_map(move |y| (-r..=r).map(move |x| VoxelIndex::new(z, y, x))))
        .filter(|d| d.norm_sq() <= r * r)
        .collect();
    let mut out = vec![false; mask.len()];
    for (o, &v) in mask.data().iter().enumerate() {
        if v > 0.5 {
            let c = mask.index_of(o);
            for &d in &ball {
                if let Some(t) = mask.offset(c + d) {
                    out[t] = true;
                }
            }
        }
    }
    out
}

/// Seeded flood fill on raw follow-up HU from the in-patch lesion center.
///
/// A voxel joins the region when it is connected to the seed through region
/// voxels, lies inside the scan, lies within `r_max_vox` of the seed, and its
/// HU is within `tau_hu` of the seed HU. When the mode carries a prior mask,
/// the band widens to `tau_hu * mask_tau_relax` within `mask_dilation_vox` of
/// that mask.
pub fn region_grow(
    pair: &PatchPair,
    cfg: &RegionGrowConfig,
    mode: InputMode,
) -> Result<Volume3<f32>> {
    cfg.validate()?;
    let raw = &pair.curr_raw;
    let seed = pair.center_in_patch();
    let seed_off = raw.offset(seed).ok_or(Error::SeedInPadding(seed))?;
    if pair.is_padding(seed) {
        return Err(Error::SeedInPadding(seed));
    }

    let near_mask = mode
        .use_prior_mask
        .then(|| dilate_ball(&pair.prior_mask_patch, cfg.mask_dilation_vox));
    let seed_hu = raw.data()[seed_off] as f64;
    let relaxed = cfg.tau_hu * cfg.mask_tau_relax;
    let r_sq = cfg.r_max_vox * cfg.r_max_vox;
    let eligible = |idx: VoxelIndex, off: usize| -> bool {
        if pair.is_padding(idx) || ((idx - seed).norm_sq() as f64) > r_sq {
            return false;
        }
        let tau = match &near_mask {
            Some(m) if m[off] => relaxed,
            _ => cfg.tau_hu,
        };
        (raw.data()[off] as f64 - seed_hu).abs() <= tau
    };

    let mut out = Volume3::<f32>::zeros(raw.shape(), raw.spacing())?;
    let neighbors = cfg.connectivity.offsets();
    let mut queue = VecDeque::from([seed]);
    out.data_mut()[seed_off] = 1.0;
    while let Some(v) = queue.pop_front() {
        for &d in &neighbors {
            let n = v + d;
            if let Some(o) = out.offset(n) {
                if out.data()[o] == 0.0 && eligible(n, o) {
                    out.data_mut()[o] = 1.0;
                    queue.push_back(n);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RegionGrowBackend {
    pub cfg: RegionGrowConfig,
}

impl SegmenterBackend for RegionGrowBackend {
    fn name(&self) -> &str {
        "region_grow"
    }

    fn segment(&self, pair: &PatchPair, mode: InputMode) -> Result<Volume3<f32>> {
        region_grow(pair, &self.cfg, mode)
    }
}

/// Follow-up truth of `pair.lesion_id` cropped to the patch window.
pub fn oracle_segment(
    pair: &PatchPair,
    gt: &Volume3<u16>,
    lesion_ids: &[u16],
) -> Result<Volume3<f32>> {
    if !lesion_ids.contains(&pair.lesion_id) {
        return Err(Error::UnknownLesion(pair.lesion_id));
    }
    let id = pair.lesion_id;
    Ok(gt
        .crop(pair.origin_curr, pair.patch_shape(), 0)
        .map(|l| if l == id { 1.0 } else { 0.0 }))
}

/// Replays one case's follow-up ground truth.
#[derive(Debug, Clone, Copy)]
pub struct OracleBackend<'a> {
    pub gt: &'a Volume3<u16>,
    pub lesion_ids: &'a [u16],
}

impl SegmenterBackend for OracleBackend<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn segment(&self, pair: &PatchPair, _mode: InputMode) -> Result<Volume3<f32>> {
        oracle_segment(pair, self.gt, self.lesion_ids)
    }
}

/// Voxelwise arithmetic mean of equally shaped probability maps.
///
/// Per-voxel values are summed in sorted order so the result does not depend
/// on the order of `maps`.
pub fn ensemble_mean(maps: &[Volume3<f32>]) -> Result<Volume3<f32>> {
    let first = maps.first().ok_or(Error::EmptyEnsemble)?;
    for m in &maps[1..] {
        first.same_shape(m)?;
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let k = maps.len() as f64;
    let mut out = first.clone();
    let mut buf = Vec::with_capacity(maps.len());
    for (o, dst) in out.data_mut().iter_mut().enumerate() {
        buf.clear();
        buf.extend(maps.iter().map(|m| m.data()[o]));
        buf.sort_unstable_by(f32::total_cmp);
        let sum: f64 = buf.iter().map(|&v| v as f64).sum();
        *dst = (sum / k) as f32;
    }
    Ok(out)
}

/// Runs every member on the same patch and averages their probabilities.
pub struct EnsembleSegmenter<'a> {
    pub members: Vec<Box<dyn SegmenterBackend + 'a>>,
}

impl SegmenterBackend for EnsembleSegmenter<'_> {
    fn name(&self) -> &str {
        "ensemble"
    }

    fn segment(&self, pair: &PatchPair, mode: InputMode) -> Result<Volume3<f32>> {
        let maps = self
            .members
            .iter()
            .map(|m| m.segment(pair, mode))
            .collect::<Result<Vec<_>>>()?;
        ensemble_mean(&maps)
    }
}

/// Foreground iff `value >= threshold`.
pub fn binarize(map: &Volume3<f32>, threshold: f32) -> Volume3<u8> {
    map.map(|v| u8::from(v >= threshold))
}
