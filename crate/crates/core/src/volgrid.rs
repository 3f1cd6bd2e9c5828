//! Volumetric grids, voxel geometry and the SVOL1 on-disk format.
//!
//! All grids use `(z, y, x)` axis order with `x` varying fastest in memory.
//! There is no orientation matrix; scans are related to each other through
//! lesion center points only, so spacing is the only geometric metadata.

use std::fmt;
use std::fs;
use std::ops::{Add, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SVOL_MAGIC: &[u8; 6] = b"SVOL1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u16")]
    U16,
    #[serde(rename = "u8")]
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::U16 => "u16",
            DType::U8 => "u8",
        })
    }
}

/// Element types that can be stored in a [`Volume3`] and serialized to SVOL1.
pub trait Voxel: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn extend_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    fn to_f64(self) -> f64;
    fn from_any(vol: AnyVolume) -> Option<Volume3<Self>>;
}

impl Voxel for f32 {
    const DTYPE: DType = DType::F32;

    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_any(vol: AnyVolume) -> Option<Volume3<Self>> {
        match vol {
            AnyVolume::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Voxel for u16 {
    const DTYPE: DType = DType::U16;

    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes([bytes[0], bytes[1]])
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_any(vol: AnyVolume) -> Option<Volume3<Self>> {
        match vol {
            AnyVolume::U16(v) => Some(v),
            _ => None,
        }
    }
}

impl Voxel for u8 {
    const DTYPE: DType = DType::U8;

    fn extend_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn from_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_any(vol: AnyVolume) -> Option<Volume3<Self>> {
        match vol {
            AnyVolume::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// Integer voxel coordinate. May lie outside any particular grid.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(from = "[i64; 3]", into = "[i64; 3]")]
pub struct VoxelIndex {
    pub z: i64,
    pub y: i64,
    pub x: i64,
}

impl VoxelIndex {
    pub const fn new(z: i64, y: i64, x: i64) -> Self {
        Self { z, y, x }
    }

    pub const fn splat(v: i64) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_shape(shape: [usize; 3]) -> Self {
        Self::new(shape[0] as i64, shape[1] as i64, shape[2] as i64)
    }

    /// Per-axis `floor(n / 2)` of a shape, i.e. the middle voxel.
    pub fn middle_of(shape: [usize; 3]) -> Self {
        Self::new(
            (shape[0] / 2) as i64,
            (shape[1] / 2) as i64,
            (shape[2] / 2) as i64,
        )
    }

    pub fn to_array(self) -> [i64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn norm_sq(self) -> i64 {
        self.z * self.z + self.y * self.y + self.x * self.x
    }

    pub fn chebyshev(self) -> i64 {
        self.z.abs().max(self.y.abs()).max(self.x.abs())
    }

    pub fn in_bounds(self, shape: [usize; 3]) -> bool {
        self.z >= 0
            && self.y >= 0
            && self.x >= 0
            && (self.z as usize) < shape[0]
            && (self.y as usize) < shape[1]
            && (self.x as usize) < shape[2]
    }

    /// Smallest number of voxels between this index and any face of a grid.
    /// Zero means the voxel lies on a face; negative means it lies outside.
    pub fn face_distance(self, shape: [usize; 3]) -> i64 {
        self.to_array()
            .iter()
            .zip(shape)
            .map(|(&c, n)| c.min(n as i64 - 1 - c))
            .min()
            .unwrap_or(0)
    }
}

impl From<[i64; 3]> for VoxelIndex {
    fn from(a: [i64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<VoxelIndex> for [i64; 3] {
    fn from(v: VoxelIndex) -> Self {
        v.to_array()
    }
}

impl Add for VoxelIndex {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.z + o.z, self.y + o.y, self.x + o.x)
    }
}

impl Sub for VoxelIndex {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.z - o.z, self.y - o.y, self.x - o.x)
    }
}

impl Neg for VoxelIndex {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.z, -self.y, -self.x)
    }
}

/// A dense 3D grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3<T> {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

fn check_geometry(shape: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidVolume(format!(
            "all shape components must be >= 1, got {shape:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidVolume(format!(
            "all spacing components must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

impl<T: Voxel> Volume3<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_geometry(shape, spacing)?;
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match shape {shape:?} ({expected} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        check_geometry(shape, spacing)?;
        Ok(Self {
            shape,
            spacing,
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::filled(shape, spacing, T::default())
    }

    /// Builds a volume by evaluating `f` at every voxel in memory order.
    pub fn from_fn(
        shape: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(VoxelIndex) -> T,
    ) -> Result<Self> {
        check_geometry(shape, spacing)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(VoxelIndex::new(z as i64, y as i64, x as i64)));
                }
            }
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(self.shape, spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Flat memory offset of an index, or `None` when it is out of bounds.
    #[inline]
    pub fn offset(&self, idx: VoxelIndex) -> Option<usize> {
        idx.in_bounds(self.shape).then(|| {
            (idx.z as usize * self.shape[1] + idx.y as usize) * self.shape[2] + idx.x as usize
        })
    }

    #[inline]
    pub fn index_of(&self, offset: usize) -> VoxelIndex {
        let plane = self.shape[1] * self.shape[2];
        VoxelIndex::new(
            (offset / plane) as i64,
            ((offset % plane) / self.shape[2]) as i64,
            (offset % self.shape[2]) as i64,
        )
    }

    #[inline]
    pub fn get(&self, idx: VoxelIndex) -> Option<T> {
        self.offset(idx).map(|o| self.data[o])
    }

    #[inline]
    pub fn set(&mut self, idx: VoxelIndex, value: T) -> bool {
        match self.offset(idx) {
            Some(o) => {
                self.data[o] = value;
                true
            }
            None => false,
        }
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Volume3<U> {
        Volume3 {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Volume3<U>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.shape, self.spacing)?;
        if self.data.len() != self.shape.iter().product::<usize>() {
            return Err(Error::InvalidVolume(
                "payload length does not match shape".into(),
            ));
        }
        Ok(())
    }

    /// Copies a `size`-shaped window whose corner sits at `origin`. Voxels
    /// falling outside this volume take the value `pad`.
    pub fn crop(&self, origin: VoxelIndex, size: [usize; 3], pad: T) -> Volume3<T> {
        let mut data = vec![pad; size.iter().product()];
        // x range of the window that falls inside the volume, in window coordinates
        let x_lo = (-origin.x).clamp(0, size[2] as i64) as usize;
        let x_hi = (self.shape[2] as i64 - origin.x).clamp(0, size[2] as i64) as usize;
        if x_lo < x_hi {
            for dz in 0..size[0] {
                let z = origin.z + dz as i64;
                if z < 0 || z >= self.shape[0] as i64 {
                    continue;
                }
                for dy in 0..size[1] {
                    let y = origin.y + dy as i64;
                    if y < 0 || y >= self.shape[1] as i64 {
                        continue;
                    }
                    let src = (z as usize * self.shape[1] + y as usize) * self.shape[2];
                    let src = src + (origin.x + x_lo as i64) as usize;
                    let dst = (dz * size[1] + dy) * size[2];
                    data[dst + x_lo..dst + x_hi]
                        .copy_from_slice(&self.data[src..src + (x_hi - x_lo)]);
                }
            }
        }
        Volume3 {
            shape: size,
            spacing: self.spacing,
            data,
        }
    }
}

impl Volume3<u8> {
    pub fn count_nonzero(&self) -> u64 {
        self.data.iter().filter(|&&v| v != 0).count() as u64
    }
}

/// Physical volume in mm³ of `voxel_count` voxels at the given spacing.
pub fn volume_mm3(voxel_count: u64, spacing: [f64; 3]) -> f64 {
    voxel_count as f64 * (spacing[0] * spacing[1] * spacing[2])
}

/// A volume of any supported element type, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    F32(Volume3<f32>),
    U16(Volume3<u16>),
    U8(Volume3<u8>),
}

impl AnyVolume {
    pub fn dtype(&self) -> DType {
        match self {
            AnyVolume::F32(_) => DType::F32,
            AnyVolume::U16(_) => DType::U16,
            AnyVolume::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        match self {
            AnyVolume::F32(v) => v.shape(),
            AnyVolume::U16(v) => v.shape(),
            AnyVolume::U8(v) => v.shape(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvolHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: DType,
}

pub fn encode_svol<T: Voxel>(vol: &Volume3<T>) -> Result<Vec<u8>> {
    vol.validate()?;
    let header = serde_json::to_string(&SvolHeader {
        shape: vol.shape,
        spacing: vol.spacing,
        dtype: T::DTYPE,
    })
    .map_err(|e| Error::Format(e.to_string()))?;

    let mut out =
        Vec::with_capacity(SVOL_MAGIC.len() + header.len() + 1 + vol.len() * T::DTYPE.size());
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for &v in &vol.data {
        v.extend_le(&mut out);
    }
    Ok(out)
}

fn decode_payload<T: Voxel>(header: &SvolHeader, payload: &[u8]) -> Result<Volume3<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::from_le)
        .collect();
    Volume3::new(header.shape, header.spacing, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_svol(bytes: &[u8]) -> Result<AnyVolume> {
    let rest = bytes
        .strip_prefix(SVOL_MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing SVOL1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header line".into()))?;
    let header_text = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let header: SvolHeader =
        serde_json::from_str(header_text).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    check_geometry(header.shape, header.spacing).map_err(|e| Error::Format(e.to_string()))?;

    let payload = &rest[nl + 1..];
    let expected = header
        .shape
        .iter()
        .try_fold(header.dtype.size(), |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header {:?}/{} requires {expected}",
            payload.len(),
            header.shape,
            header.dtype
        )));
    }

    Ok(match header.dtype {
        DType::F32 => AnyVolume::F32(decode_payload(&header, payload)?),
        DType::U16 => AnyVolume::U16(decode_payload(&header, payload)?),
        DType::U8 => AnyVolume::U8(decode_payload(&header, payload)?),
    })
}

pub fn write_svol<T: Voxel>(vol: &Volume3<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_svol(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_svol(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_svol(&bytes)
}

/// Reads an SVOL1 file and requires a specific element type.
pub fn read_svol_as<T: Voxel>(path: impl AsRef<Path>) -> Result<Volume3<T>> {
    let path = path.as_ref();
    let any = read_svol(path)?;
    let found = any.dtype();
    T::from_any(any).ok_or_else(|| {
        Error::Format(format!(
            "{}: expected dtype {}, found {found}",
            path.display(),
            T::DTYPE
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn volume_mm3_examples() {
        assert_eq!(volume_mm3(10, [1.0, 1.0, 1.0]), 10.0);
        assert_eq!(volume_mm3(0, [2.0, 2.0, 2.0]), 0.0);
        // 6 voxels of 1.0 * 0.5 * 0.5 = 0.25 mm³ each
        assert_eq!(volume_mm3(6, [1.0, 0.5, 0.5]), 1.5);
    }

    #[test]
    fn rejects_zero_shape() {
        let err = Volume3::<u8>::new([0, 4, 4], [1.0; 3], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidVolume(_)));
        assert!(Volume3::<u8>::zeros([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn single_u8_voxel_payload() {
        let vol = Volume3::new([1, 1, 1], [1.0; 3], vec![7u8]).unwrap();
        let bytes = encode_svol(&vol).unwrap();
        assert!(bytes.starts_with(
            b"SVOL1\n{\"shape\":[1,1,1],\"spacing\":[1.0,1.0,1.0],\"dtype\":\"u8\"}\n"
        ));
        assert_eq!(*bytes.last().unwrap(), 0x07);
        let header_len = bytes.iter().skip(6).position(|&b| b == b'\n').unwrap() + 7;
        assert_eq!(&bytes[header_len..], &[0x07]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes =
            encode_svol(&Volume3::new([1, 1, 1], [1.0; 3], vec![1u8]).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_svol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload() {
        let mut bytes =
            encode_svol(&Volume3::new([2, 2, 2], [1.0; 3], vec![0.5f32; 8]).unwrap()).unwrap();
        bytes.pop();
        let err = decode_svol(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes =
            encode_svol(&Volume3::new([1, 1, 2], [1.0; 3], vec![1u16, 2]).unwrap()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_svol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_dtype() {
        let bytes =
            b"SVOL1\n{\"shape\":[1,1,1],\"spacing\":[1.0,1.0,1.0],\"dtype\":\"i32\"}\n\0\0\0\0";
        assert!(matches!(decode_svol(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn crop_pads_outside() {
        let vol =
            Volume3::from_fn([3, 3, 3], [1.0; 3], |i| (i.z * 9 + i.y * 3 + i.x) as u8).unwrap();
        let c = vol.crop(VoxelIndex::new(-1, 1, 1), [2, 2, 3], 255);
        assert_eq!(c.shape(), [2, 2, 3]);
        assert_eq!(c.get(VoxelIndex::new(0, 0, 0)), Some(255));
        assert_eq!(c.get(VoxelIndex::new(1, 0, 0)), Some(4));
        assert_eq!(c.get(VoxelIndex::new(1, 1, 1)), Some(8));
        assert_eq!(c.get(VoxelIndex::new(1, 1, 2)), Some(255));
    }

    #[test]
    fn face_distance() {
        let shape = [64, 64, 64];
        assert_eq!(VoxelIndex::new(0, 40, 40).face_distance(shape), 0);
        assert_eq!(VoxelIndex::new(1, 40, 40).face_distance(shape), 1);
        assert_eq!(VoxelIndex::new(30, 63, 40).face_distance(shape), 0);
        assert_eq!(VoxelIndex::new(-2, 40, 40).face_distance(shape), -2);
    }

    #[test]
    fn voxel_index_serializes_as_array() {
        let v = VoxelIndex::new(3, -1, 7);
        assert_eq!(serde_json::to_string(&v).unwrap(), "[3,-1,7]");
        assert_eq!(serde_json::from_str::<VoxelIndex>("[3,-1,7]").unwrap(), v);
    }

    fn arb_geometry() -> impl Strategy<Value = ([usize; 3], [f64; 3])> {
        (
            [1usize..6, 1usize..6, 1usize..6],
            [0.01f64..10.0, 0.01f64..10.0, 0.01f64..10.0],
        )
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bitwise((shape, spacing) in arb_geometry(), seed in any::<u64>()) {
            let n = shape.iter().product::<usize>();
            let data: Vec<f32> = (0..n as u64)
                .map(|i| f32::from_bits((seed.wrapping_mul(i + 1) >> 32) as u32))
                .map(|v| if v.is_nan() { 0.25 } else { v })
                .collect();
            let vol = Volume3::new(shape, spacing, data).unwrap();
            let back = match decode_svol(&encode_svol(&vol).unwrap()).unwrap() {
                AnyVolume::F32(v) => v,
                other => panic!("wrong dtype {:?}", other.dtype()),
            };
            prop_assert_eq!(back.shape(), vol.shape());
            prop_assert_eq!(back.spacing(), vol.spacing());
            let a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn crop_matches_pointwise(
            shape in [1usize..7, 1usize..7, 1usize..7],
            origin in [-8i64..8, -8i64..8, -8i64..8],
            size in [1usize..9, 1usize..9, 1usize..9],
        ) {
            let vol = Volume3::from_fn(shape, [1.0; 3], |i| (i.z * 49 + i.y * 7 + i.x) as u16 + 1).unwrap();
            let origin = VoxelIndex::from(origin);
            let c = vol.crop(origin, size, 0);
            for o in 0..c.len() {
                let i = c.index_of(o);
                prop_assert_eq!(c.data()[o], vol.get(origin + i).unwrap_or(0));
            }
        }

        #[test]
        fn u16_round_trip((shape, spacing) in arb_geometry(), fill in any::<u16>()) {
            let vol = Volume3::from_fn(shape, spacing, |i| fill.wrapping_add((i.x * 7 + i.z) as u16)).unwrap();
            let back = u16::from_any(decode_svol(&encode_svol(&vol).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(back, vol);
        }

        #[test]
        fn volume_is_linear_in_count(a in 0u64..1_000_000, b in 0u64..1_000_000, s in [0.1f64..4.0, 0.1f64..4.0, 0.1f64..4.0]) {
            let lhs = volume_mm3(a + b, s);
            let rhs = volume_mm3(a, s) + volume_mm3(b, s);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }
}
