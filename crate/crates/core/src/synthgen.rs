//! Synthetic longitudinal phantoms: ellipsoidal lesions inside a water-density
//! body cylinder, with a follow-up scan in which every lesion grows or shrinks
//! and drifts by a few voxels.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{save_case, CaseRecord, LesionPrompt};
use crate::error::{Error, Result};
use crate::seeding::{mix64, splitmix64, RngStream};
use crate::volgrid::{Volume3, VoxelIndex};

const MAX_PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Lesion count is drawn uniformly from `1..=max_lesions`.
    pub max_lesions: usize,
    /// Per-axis semi-axis range in mm.
    pub lesion_radius_mm: [f64; 2],
    pub lesion_hu: [f64; 2],
    /// Air outside the body.
    pub background_hu: f64,
    pub body_hu: f64,
    /// Body cylinder radius as a fraction of the smaller in-plane extent.
    pub body_radius_frac: f64,
    pub noise_std_hu: f64,
    /// Follow-up semi-axes are the baseline ones times a factor from this range.
    pub growth_factor: [f64; 2],
    /// Per-axis bound of the follow-up center drift, in voxels.
    pub drift_max_vox: u32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing: [1.5, 1.5, 1.5],
            max_lesions: 5,
            lesion_radius_mm: [3.0, 10.0],
            lesion_hu: [50.0, 150.0],
            background_hu: -1000.0,
            body_hu: 0.0,
            body_radius_frac: 0.45,
            noise_std_hu: 20.0,
            growth_factor: [0.6, 1.6],
            drift_max_vox: 3,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.shape.iter().any(|&n| n < 8) {
            return bad("every shape component must be >= 8");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive");
        }
        if self.max_lesions == 0 || self.max_lesions > u16::MAX as usize {
            return bad("max_lesions must lie in 1..=65535");
        }
        let [rlo, rhi] = self.lesion_radius_mm;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("lesion radius range must be positive and ordered");
        }
        let [glo, ghi] = self.growth_factor;
        if !(glo > 0.0 && glo <= ghi) {
            return bad("growth factors must be positive and ordered");
        }
        if !(self.lesion_hu[0] <= self.lesion_hu[1]) {
            return bad("lesion HU range must be ordered");
        }
        if !(self.noise_std_hu >= 0.0) {
            return bad("noise std must be >= 0");
        }
        if !(self.body_radius_frac > 0.0 && self.body_radius_frac <= 0.5) {
            return bad("body_radius_frac must lie in (0, 0.5]");
        }
        let min_side = *self.shape.iter().min().unwrap_or(&0);
        if self.drift_max_vox as usize > min_side / 8 {
            return bad("drift_max_vox must not exceed min(shape) / 8");
        }
        Ok(())
    }

    fn body_center(&self) -> (f64, f64) {
        (
            (self.shape[1] as f64 - 1.0) / 2.0,
            (self.shape[2] as f64 - 1.0) / 2.0,
        )
    }

    fn body_radius_mm(&self) -> f64 {
        self.body_radius_frac
            * (self.shape[1] as f64 * self.spacing[1]).min(self.shape[2] as f64 * self.spacing[2])
    }

    fn in_body(&self, v: VoxelIndex) -> bool {
        let (cy, cx) = self.body_center();
        let dy = (v.y as f64 - cy) * self.spacing[1];
        let dx = (v.x as f64 - cx) * self.spacing[2];
        dy * dy + dx * dx <= self.body_radius_mm().powi(2)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: VoxelIndex,
    radii_mm: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, v: VoxelIndex, spacing: [f64; 3]) -> bool {
        let d = v - self.center;
        let q: f64 = d
            .to_array()
            .iter()
            .zip(spacing)
            .zip(self.radii_mm)
            .map(|((&c, s), r)| (c as f64 * s / r).powi(2))
            .sum();
        q <= 1.0
    }

    fn max_radius(&self) -> f64 {
        self.radii_mm.iter().copied().fold(0.0, f64::max)
    }

    /// Fits inside the volume (one voxel away from every face) and the body.
    fn fits(&self, cfg: &PhantomConfig) -> bool {
        let c = self.center.to_array();
        let inside_volume = (0..3).all(|a| {
            let reach = (self.radii_mm[a] / cfg.spacing[a]).ceil() as i64;
            c[a] - reach >= 1 && c[a] + reach <= cfg.shape[a] as i64 - 2
        });
        let (cy, cx) = cfg.body_center();
        let dy = (self.center.y as f64 - cy) * cfg.spacing[1];
        let dx = (self.center.x as f64 - cx) * cfg.spacing[2];
        let inplane = self.radii_mm[1].max(self.radii_mm[2]);
        inside_volume && (dy * dy + dx * dx).sqrt() + inplane < cfg.body_radius_mm()
    }

    /// Conservative separation test that also rules out 26-adjacency.
    fn well_separated(&self, other: &Ellipsoid, spacing: [f64; 3]) -> bool {
        let d = self.center - other.center;
        let dist = d
            .to_array()
            .iter()
            .zip(spacing)
            .map(|(&c, s)| (c as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt();
        let gap = 2.0 * spacing.iter().copied().fold(0.0, f64::max);
        dist > self.max_radius() + other.max_radius() + gap
    }
}

struct LesionDraw {
    baseline: Ellipsoid,
    followup: Ellipsoid,
    hu: f64,
}

fn uniform(rng: &mut RngStream, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn place_lesions(cfg: &PhantomConfig, rng: &mut RngStream) -> Result<Vec<LesionDraw>> {
    let n = rng.random_range(1..=cfg.max_lesions);
    let d = cfg.drift_max_vox as i64;
    let mut placed: Vec<LesionDraw> = Vec::with_capacity(n);
    for lesion in 0..n {
        let mut attempt = 0;
        let draw = loop {
            if attempt == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::PlacementFailed {
                    lesion,
                    attempts: attempt,
                });
            }
            attempt += 1;
            let radii_mm = [
                uniform(rng, cfg.lesion_radius_mm),
                uniform(rng, cfg.lesion_radius_mm),
                uniform(rng, cfg.lesion_radius_mm),
            ];
            let growth = uniform(rng, cfg.growth_factor);
            let hu = uniform(rng, cfg.lesion_hu);
            let center = VoxelIndex::new(
                rng.random_range(0..cfg.shape[0] as i64),
                rng.random_range(0..cfg.shape[1] as i64),
                rng.random_range(0..cfg.shape[2] as i64),
            );
            let drift = VoxelIndex::new(
                rng.random_range(-d..=d),
                rng.random_range(-d..=d),
                rng.random_range(-d..=d),
            );
            let candidate = LesionDraw {
                baseline: Ellipsoid { center, radii_mm },
                followup: Ellipsoid {
                    center: center + drift,
                    radii_mm: radii_mm.map(|r| r * growth),
                },
                hu,
            };
            let fits = candidate.baseline.fits(cfg) && candidate.followup.fits(cfg);
            let separate = placed.iter().all(|p| {
                p.baseline.well_separated(&candidate.baseline, cfg.spacing)
                    && p.followup.well_separated(&candidate.followup, cfg.spacing)
            });
            if fits && separate {
                break candidate;
            }
        };
        placed.push(draw);
    }
    Ok(placed)
}

fn render(
    cfg: &PhantomConfig,
    lesions: &[(u16, Ellipsoid, f64)],
    rng: &mut RngStream,
) -> Result<(Volume3<f32>, Volume3<u16>)> {
    let labels = Volume3::from_fn(cfg.shape, cfg.spacing, |v| {
        lesions
            .iter()
            .find(|(_, e, _)| e.contains(v, cfg.spacing))
            .map_or(0, |(id, _, _)| *id)
    })?;
    let noise = Normal::new(0.0, cfg.noise_std_hu).map_err(|e| Error::Config(e.to_string()))?;
    let image = Volume3::from_fn(cfg.shape, cfg.spacing, |v| {
        let base = match labels.get(v).unwrap_or(0) {
            0 if cfg.in_body(v) => cfg.body_hu,
            0 => cfg.background_hu,
            id => lesions[id as usize - 1].2,
        };
        (base + noise.sample(rng)) as f32
    })?;
    Ok((image, labels))
}

/// Patient id derived from the case seed: 10 lowercase hex chars.
pub fn patient_id_for_seed(seed: u64) -> String {
    format!("{:010x}", mix64(seed) >> 24)
}

/// Generates one fully determined case from `seed`. The returned record
/// carries follow-up ground truth.
pub fn gen_case(seed: u64, cfg: &PhantomConfig) -> Result<CaseRecord> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed, "phantom");
    let draws = place_lesions(cfg, &mut rng)?;

    let with_ids = |pick: fn(&LesionDraw) -> Ellipsoid| -> Vec<(u16, Ellipsoid, f64)> {
        draws
            .iter()
            .enumerate()
            .map(|(i, d)| (i as u16 + 1, pick(d), d.hu))
            .collect()
    };
    let (baseline, gt_baseline) = render(cfg, &with_ids(|d| d.baseline), &mut rng)?;
    let (followup, gt_followup) = render(cfg, &with_ids(|d| d.followup), &mut rng)?;

    let lesions = draws
        .iter()
        .enumerate()
        .map(|(i, d)| LesionPrompt {
            id: i as u16 + 1,
            center_baseline: d.baseline.center,
            center_followup: d.followup.center,
        })
        .collect();

    Ok(CaseRecord {
        patient_id: patient_id_for_seed(seed),
        baseline,
        followup,
        gt_baseline,
        gt_followup: Some(gt_followup),
        lesions,
    })
}

/// Seed of case `index` under `master_seed`.
pub fn case_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed, index)
}

/// Writes `n_cases` phantoms under `root`, one directory per patient.
/// Returns the patient ids in case order.
pub fn gen_dataset(
    master_seed: u64,
    n_cases: usize,
    cfg: &PhantomConfig,
    root: &Path,
) -> Result<Vec<String>> {
    if n_cases == 0 {
        return Err(Error::Config("n_cases must be >= 1".into()));
    }
    cfg.validate()?;
    let seeds: Vec<u64> = (0..n_cases as u64)
        .map(|i| case_seed(master_seed, i))
        .collect();
    let ids: Vec<String> = seeds.iter().map(|&s| patient_id_for_seed(s)).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    seeds.par_iter().zip(&ids).try_for_each(|(&seed, id)| {
        let case = gen_case(seed, cfg)?;
        log::debug!("generated {id} with {} lesions", case.lesions.len());
        save_case(&case, root.join(id))
    })?;
    Ok(ids)
}
