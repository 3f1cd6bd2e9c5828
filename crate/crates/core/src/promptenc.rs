//! Intensity normalization, prompt channels and multi-channel input assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{Volume3, Voxel, VoxelIndex};

/// Fixed-window CT normalization: clip to `[clip_lo, clip_hi]`, then
/// subtract `mu` and divide by `sigma_hu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mu: f64,
    pub sigma_hu: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            clip_lo: -1000.0,
            clip_hi: 1000.0,
            mu: 0.0,
            sigma_hu: 500.0,
        }
    }
}

impl NormalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Config(format!(
                "normalization clip_lo ({}) must be below clip_hi ({})",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.sigma_hu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(
                "normalization needs sigma_hu > 0 and a finite mu".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f32 {
        ((hu.clamp(self.clip_lo, self.clip_hi) - self.mu) / self.sigma_hu) as f32
    }
}

pub fn normalize_ct<T: Voxel>(raw: &Volume3<T>, cfg: &NormalizationConfig) -> Volume3<f32> {
    raw.map(|v| cfg.apply(v.to_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobMode {
    /// Peak rescaled to 1 at the prompt voxel.
    UnitIntensity,
    /// Blob divided by its sum so the channel integrates to 1.
    UnitVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointBlobConfig {
    /// Isotropic standard deviation in voxels.
    pub sigma_vox: f64,
    /// Cut-off radius in multiples of `sigma_vox`.
    pub truncation_radius: f64,
    pub mode: BlobMode,
}

impl Default for PointBlobConfig {
    fn default() -> Self {
        Self {
            sigma_vox: 2.0,
            truncation_radius: 3.0,
            mode: BlobMode::UnitIntensity,
        }
    }
}

impl PointBlobConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_vox > 0.0 && self.sigma_vox.is_finite()) {
            return Err(Error::Config(
                "blob sigma_vox must be finite and > 0".into(),
            ));
        }
        if !(self.truncation_radius > 0.0) {
            return Err(Error::Config("blob truncation_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Renders a point prompt as a truncated isotropic Gaussian centred on `center`.
///
/// Distances are measured in voxel units. The returned channel has unit spacing;
/// callers attach the real spacing when embedding it in a patch.
pub fn rasterize_point(
    center: VoxelIndex,
    patch_shape: [usize; 3],
    cfg: &PointBlobConfig,
) -> Result<Volume3<f32>> {
    cfg.validate()?;
    if !center.in_bounds(patch_shape) {
        return Err(Error::PromptOutOfPatch {
            center,
            shape: patch_shape,
        });
    }
    let two_var = 2.0 * cfg.sigma_vox * cfg.sigma_vox;
    let cutoff = cfg.truncation_radius * cfg.sigma_vox;
    let cutoff_sq = cutoff * cutoff;
    let reach = cutoff.floor() as i64;

    let mut channel = Volume3::<f32>::zeros(patch_shape, [1.0; 3])?;
    let mut total = 0.0f64;
    let lo = |c: i64| (c - reach).max(0);
    let hi = |c: i64, n: usize| (c + reach).min(n as i64 - 1);
    for z in lo(center.z)..=hi(center.z, patch_shape[0]) {
        for y in lo(center.y)..=hi(center.y, patch_shape[1]) {
            for x in lo(center.x)..=hi(center.x, patch_shape[2]) {
                let v = VoxelIndex::new(z, y, x);
                let d2 = (v - center).norm_sq() as f64;
                if d2 <= cutoff_sq {
                    let g = (-d2 / two_var).exp();
                    total += g;
                    channel.set(v, g as f32);
                }
            }
        }
    }

    if cfg.mode == BlobMode::UnitVolume {
        // total >= 1 since the center voxel always contributes exp(0)
        for v in channel.data_mut() {
            *v = (*v as f64 / total) as f32;
        }
    }
    Ok(channel)
}

/// Binary prior-mask channel from a label map: 1 where the label equals `lesion_id`.
pub fn mask_channel(labels: &Volume3<u16>, lesion_id: u16) -> Volume3<f32> {
    labels.map(|l| if l == lesion_id { 1.0 } else { 0.0 })
}

/// Which optional channels accompany the current image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputMode {
    pub use_prior_image: bool,
    pub use_prior_mask: bool,
    pub use_point: bool,
}

impl Default for InputMode {
    fn default() -> Self {
        Self::LONGITUDINAL_MASK_POINT
    }
}

impl InputMode {
    pub const CROSS_SECTIONAL_POINT: Self = Self {
        use_prior_image: false,
        use_prior_mask: false,
        use_point: true,
    };
    pub const CROSS_SECTIONAL_MASK: Self = Self {
        use_prior_image: false,
        use_prior_mask: true,
        use_point: false,
    };
    pub const LONGITUDINAL_MASK_POINT: Self = Self {
        use_prior_image: true,
        use_prior_mask: true,
        use_point: true,
    };
    pub const LONGITUDINAL_POINT: Self = Self {
        use_prior_image: true,
        use_prior_mask: false,
        use_point: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.use_prior_mask || self.use_point) {
            return Err(Error::Config(
                "input mode needs at least one prompt (prior mask or point)".into(),
            ));
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        1 + self.use_prior_image as usize + self.use_prior_mask as usize + self.use_point as usize
    }
}

/// Channel-concatenated network input, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput {
    pub shape: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl StackedInput {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Concatenates channels in the order current image, prior image, prior mask,
/// point. Channels not selected by `mode` are ignored even when supplied.
pub fn stack_inputs(
    curr_img: &Volume3<f32>,
    prior_img: Option<&Volume3<f32>>,
    prior_mask: Option<&Volume3<f32>>,
    point_channel: Option<&Volume3<f32>>,
    mode: InputMode,
) -> Result<StackedInput> {
    mode.validate()?;
    let mut selected = vec![curr_img];
    for (wanted, supplied, name) in [
        (mode.use_prior_image, prior_img, "prior image"),
        (mode.use_prior_mask, prior_mask, "prior mask"),
        (mode.use_point, point_channel, "point"),
    ] {
        if wanted {
            let ch = supplied.ok_or(Error::MissingChannel(name))?;
            curr_img.same_shape(ch)?;
            selected.push(ch);
        }
    }
    let data = selected
        .iter()
        .flat_map(|c| c.data().iter().copied())
        .collect();
    Ok(StackedInput {
        shape: curr_img.shape(),
        channels: selected.len(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: f32) -> f32 {
        let raw = Volume3::new([1, 1, 1], [1.0; 3], vec![v]).unwrap();
        normalize_ct(&raw, &NormalizationConfig::default()).data()[0]
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(norm(0.0), 0.0);
        assert_eq!(norm(-2000.0), -2.0);
        assert_eq!(norm(250.0), 0.5);
        assert_eq!(norm(5000.0), 2.0);
    }

    #[test]
    fn normalization_accepts_integer_volumes() {
        let raw = Volume3::new([1, 1, 2], [1.0; 3], vec![0u16, 500]).unwrap();
        assert_eq!(
            normalize_ct(&raw, &NormalizationConfig::default()).data(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn blob_center_and_closed_form() {
        let cfg = PointBlobConfig::default();
        let c = VoxelIndex::new(8, 8, 8);
        let ch = rasterize_point(c, [16, 16, 16], &cfg).unwrap();
        assert_eq!(ch.get(c), Some(1.0));
        let off = ch.get(VoxelIndex::new(8, 8, 10)).unwrap();
        assert!((off as f64 - (-0.5f64).exp()).abs() < 1e-6);
        // beyond 3 sigma = 6 voxels
        assert_eq!(ch.get(VoxelIndex::new(8, 8, 15)), Some(0.0));
        assert!(ch.get(VoxelIndex::new(8, 8, 14)).unwrap() > 0.0);
    }

    #[test]
    fn blob_unit_volume_sums_to_one() {
        let cfg = PointBlobConfig {
            mode: BlobMode::UnitVolume,
            ..Default::default()
        };
        let ch = rasterize_point(VoxelIndex::new(1, 10, 5), [12, 20, 20], &cfg).unwrap();
        let sum: f64 = ch.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5, "{sum}");
    }

    #[test]
    fn blob_outside_patch() {
        let err = rasterize_point(
            VoxelIndex::new(0, 16, 0),
            [16, 16, 16],
            &PointBlobConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PromptOutOfPatch { .. }));
    }

    #[test]
    fn table_modes_channel_counts() {
        let img = Volume3::<f32>::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let s = |m| {
            stack_inputs(&img, Some(&img), Some(&img), Some(&img), m)
                .unwrap()
                .channels
        };
        assert_eq!(s(InputMode::LONGITUDINAL_MASK_POINT), 4);
        assert_eq!(s(InputMode::CROSS_SECTIONAL_POINT), 2);
        assert_eq!(s(InputMode::CROSS_SECTIONAL_MASK), 2);
    }

    #[test]
    fn stack_order_and_errors() {
        let a = Volume3::filled([2, 2, 2], [1.0; 3], 1.0f32).unwrap();
        let b = Volume3::filled([2, 2, 2], [1.0; 3], 2.0f32).unwrap();
        let c = Volume3::filled([2, 2, 2], [1.0; 3], 3.0f32).unwrap();
        let d = Volume3::filled([2, 2, 2], [1.0; 3], 4.0f32).unwrap();
        let st = stack_inputs(
            &a,
            Some(&b),
            Some(&c),
            Some(&d),
            InputMode::LONGITUDINAL_MASK_POINT,
        )
        .unwrap();
        for ch in 0..4 {
            assert!(st.channel(ch).iter().all(|&v| v == (ch + 1) as f32));
        }

        let err =
            stack_inputs(&a, None, None, Some(&d), InputMode::LONGITUDINAL_MASK_POINT).unwrap_err();
        assert!(matches!(err, Error::MissingChannel("prior image")));

        let small = Volume3::<f32>::zeros([2, 2, 1], [1.0; 3]).unwrap();
        let err = stack_inputs(
            &a,
            None,
            None,
            Some(&small),
            InputMode::CROSS_SECTIONAL_POINT,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));

        let promptless = InputMode {
            use_prior_image: true,
            use_prior_mask: false,
            use_point: false,
        };
        assert!(stack_inputs(&a, Some(&b), None, None, promptless).is_err());
    }

    proptest! {
        #[test]
        fn blob_reflection_symmetry_and_peak(
            sigma in 0.3f64..6.0,
            trunc in 0.5f64..4.0,
            unit_volume in any::<bool>(),
        ) {
            let cfg = PointBlobConfig {
                sigma_vox: sigma,
                truncation_radius: trunc,
                mode: if unit_volume { BlobMode::UnitVolume } else { BlobMode::UnitIntensity },
            };
            let shape = [25, 25, 25];
            let c = VoxelIndex::splat(12);
            let ch = rasterize_point(c, shape, &cfg).unwrap();
            let peak = ch.get(c).unwrap();
            for (o, &v) in ch.data().iter().enumerate() {
                prop_assert!(v >= 0.0);
                let idx = ch.index_of(o);
                let d = idx - c;
                prop_assert_eq!(ch.get(c - d).unwrap().to_bits(), v.to_bits());
                if idx != c {
                    prop_assert!(v < peak);
                }
            }
            if !unit_volume {
                prop_assert_eq!(peak, 1.0);
            }
        }

        #[test]
        fn normalization_is_monotone(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0) {
            let cfg = NormalizationConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cfg.apply(lo) <= cfg.apply(hi));
        }

        #[test]
        fn channel_count_formula(pi in any::<bool>(), pm in any::<bool>(), pp in any::<bool>()) {
            let mode = InputMode { use_prior_image: pi, use_prior_mask: pm, use_point: pp };
            prop_assume!(pm || pp);
            let img = Volume3::<f32>::zeros([3, 3, 3], [1.0; 3]).unwrap();
            let st = stack_inputs(&img, Some(&img), Some(&img), Some(&img), mode).unwrap();
            prop_assert_eq!(st.channels, 1 + pi as usize + pm as usize + pp as usize);
            prop_assert_eq!(st.data.len(), st.channels * 27);
        }
    }
}
