//! Volumetric scans, label maps and the per-voxel helpers used by training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label values that may appear in a BraTS segmentation.
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("invalid dims {0:?}: every extent must be at least 1")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: every component must be finite and positive")]
    InvalidSpacing([f64; 3]),
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("invalid label {value} at voxel {index}; allowed labels are 0, 1, 2, 4")]
    InvalidLabel { index: usize, value: f64 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("modality stack is empty")]
    EmptyStack,
    #[error("unknown modality '{0}'")]
    UnknownModality(String),
}

/// Shared grid description: voxel counts and millimetre spacing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spaced grid.
    pub fn unit(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index with x varying fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let yz = idx / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    fn check_len(&self, got: usize) -> Result<(), VolumeError> {
        if got != self.len() {
            return Err(VolumeError::LengthMismatch {
                dims: self.dims,
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

/// One scalar MRI modality on a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self, VolumeError> {
        grid.check_len(data.len())?;
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }
}

/// Integer segmentation restricted to the BraTS label set {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u8>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}
impl Eq for Grid {}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self, VolumeError> {
        grid.check_len(data.len())?;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !VALID_LABELS.contains(v))
        {
            return Err(VolumeError::InvalidLabel {
                index,
                value: value as f64,
            });
        }
        Ok(Self { grid, data })
    }

    /// Converts scalar voxel values, rejecting anything that is not exactly 0, 1, 2 or 4.
    pub fn from_values(grid: Grid, values: &[f64]) -> Result<Self, VolumeError> {
        grid.check_len(values.len())?;
        let mut data = Vec::with_capacity(values.len());
        for (index, &v) in values.iter().enumerate() {
            let label = match v {
                v if v == 0.0 => 0,
                v if v == 1.0 => 1,
                v if v == 2.0 => 2,
                v if v == 4.0 => 4,
                _ => return Err(VolumeError::InvalidLabel { index, value: v }),
            };
            data.push(label);
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Voxel count per label, indexed by label value (0..=4).
    pub fn label_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for &l in &self.data {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Boolean voxel membership on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: Grid,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self, VolumeError> {
        grid.check_len(data.len())?;
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            data: vec![false; grid.len()],
            grid,
        }
    }

    pub fn full(grid: Grid) -> Self {
        Self {
            data: vec![true; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Linear indices of member voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
        }
    }

    /// Filename suffix used by the BraTS distribution (`<id>_<suffix>.nii.gz`).
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1" => Ok(Modality::T1),
            "t1c" | "t1ce" => Ok(Modality::T1c),
            "t2" => Ok(Modality::T2),
            other => Err(VolumeError::UnknownModality(other.to_string())),
        }
    }
}

/// Co-registered modalities of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    subject_id: String,
    volumes: BTreeMap<Modality, Volume3D>,
}

impl ModalityStack {
    pub fn new(
        subject_id: impl Into<String>,
        volumes: BTreeMap<Modality, Volume3D>,
    ) -> Result<Self, VolumeError> {
        let mut iter = volumes.values();
        let first = iter.next().ok_or(VolumeError::EmptyStack)?.grid();
        for v in iter {
            if v.grid() != first {
                return Err(VolumeError::GeometryMismatch(format!(
                    "modalities disagree on grid: {:?} vs {:?}",
                    first,
                    v.grid()
                )));
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            volumes,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn grid(&self) -> Grid {
        self.volumes.values().next().expect("nonempty by construction").grid()
    }

    pub fn get(&self, modality: Modality) -> Option<&Volume3D> {
        self.volumes.get(&modality)
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.volumes.keys().copied()
    }

    pub fn volumes(&self) -> &BTreeMap<Modality, Volume3D> {
        &self.volumes
    }

    pub fn is_full(&self) -> bool {
        self.volumes.len() == Modality::ALL.len()
    }
}

/// Voxels where any modality is nonzero. Background of skull-stripped data is exactly 0.
pub fn brain_mask(stack: &ModalityStack) -> Mask {
    let grid = stack.grid();
    let mut data = vec![false; grid.len()];
    for vol in stack.volumes.values() {
        for (m, &v) in data.iter_mut().zip(vol.data()) {
            *m |= v != 0.0;
        }
    }
    Mask { grid, data }
}

/// Standardizes masked voxels to zero mean and unit population std; everything
/// outside the mask becomes 0.
pub fn normalize_zero_mean_unit_std(vol: &Volume3D, mask: &Mask) -> Result<Volume3D, VolumeError> {
    if vol.grid() != mask.grid() {
        return Err(VolumeError::GeometryMismatch(
            "volume and mask grids differ".into(),
        ));
    }
    let n = mask.count();
    if n < 2 {
        return Err(VolumeError::DegenerateMask(format!(
            "mask holds {n} voxel(s); at least 2 are required"
        )));
    }
    let selected = || {
        vol.data()
            .iter()
            .zip(mask.data())
            .filter_map(|(&v, &m)| m.then_some(v as f64))
    };
    let mean = selected().sum::<f64>() / n as f64;
    let var = selected().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(VolumeError::DegenerateMask(
            "masked intensities are constant".into(),
        ));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Ok(Volume3D {
        grid: vol.grid(),
        data,
    })
}

fn flip_x<T: Copy>(dims: [usize; 3], data: &[T]) -> Vec<T> {
    let nx = dims[0];
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(nx) {
        out.extend(row.iter().rev());
    }
    out
}

/// Left-right mirror along the first (x) axis.
pub trait FlipLr {
    fn flip_lr(&self) -> Self;
}

impl FlipLr for Volume3D {
    fn flip_lr(&self) -> Self {
        Self {
            grid: self.grid,
            data: flip_x(self.grid.dims, &self.data),
        }
    }
}

impl FlipLr for LabelVolume {
    fn flip_lr(&self) -> Self {
        Self {
            grid: self.grid,
            data: flip_x(self.grid.dims, &self.data),
        }
    }
}

impl FlipLr for Mask {
    fn flip_lr(&self) -> Self {
        Self {
            grid: self.grid,
            data: flip_x(self.grid.dims, &self.data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
        Volume3D::new(Grid::unit(dims).unwrap(), data).unwrap()
    }

    fn stack(vols: Vec<(Modality, Volume3D)>) -> ModalityStack {
        ModalityStack::new("s", vols.into_iter().collect()).unwrap()
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(Grid::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume3D::new(Grid::unit([2, 2, 2]).unwrap(), vec![0.0; 7]).is_err());
    }

    #[test]
    fn label_three_is_rejected_at_first_offender() {
        let g = Grid::unit([4, 1, 1]).unwrap();
        let err = LabelVolume::from_values(g, &[0.0, 1.0, 3.0, 3.0]).unwrap_err();
        assert_eq!(err, VolumeError::InvalidLabel { index: 2, value: 3.0 });
        assert!(LabelVolume::new(g, vec![0, 4, 2, 5]).is_err());
    }

    #[test]
    fn two_point_standardization() {
        let v = vol([2, 1, 1], vec![2.0, 4.0]);
        let m = Mask::full(v.grid());
        let out = normalize_zero_mean_unit_std(&v, &m).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn five_point_standardization() {
        let v = vol([5, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = normalize_zero_mean_unit_std(&v, &Mask::full(v.grid())).unwrap();
        let d: Vec<f64> = out.data().iter().map(|&x| x as f64).collect();
        let mean = d.iter().sum::<f64>() / 5.0;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        // (1 - 3) / sqrt(2)
        assert!((d[0] + std::f64::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn constant_mask_is_degenerate() {
        let v = vol([3, 1, 1], vec![7.0; 3]);
        assert!(matches!(
            normalize_zero_mean_unit_std(&v, &Mask::full(v.grid())),
            Err(VolumeError::DegenerateMask(_))
        ));
        let single = Mask::new(v.grid(), vec![true, false, false]).unwrap();
        assert!(normalize_zero_mean_unit_std(&v, &single).is_err());
    }

    #[test]
    fn outside_mask_is_zeroed() {
        let v = vol([4, 1, 1], vec![9.0, 1.0, 3.0, 9.0]);
        let m = Mask::new(v.grid(), vec![false, true, true, false]).unwrap();
        let out = normalize_zero_mean_unit_std(&v, &m).unwrap();
        assert_eq!(out.data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn brain_mask_union_semantics() {
        let zero = vol([2, 2, 1], vec![0.0; 4]);
        assert!(brain_mask(&stack(vec![(Modality::T1, zero.clone())])).is_empty());

        let other = vol([2, 2, 1], vec![0.0, 1.0, 0.0, 2.0]);
        let m = brain_mask(&stack(vec![(Modality::T1, zero), (Modality::T2, other)]));
        assert_eq!(m.indices(), vec![1, 3]);
    }

    #[test]
    fn stack_rejects_mismatched_grids() {
        let mut vols = BTreeMap::new();
        vols.insert(Modality::T1, vol([2, 2, 1], vec![0.0; 4]));
        vols.insert(Modality::T2, vol([4, 1, 1], vec![0.0; 4]));
        assert!(ModalityStack::new("s", vols).is_err());
        assert_eq!(
            ModalityStack::new("s", BTreeMap::new()).unwrap_err(),
            VolumeError::EmptyStack
        );
    }

    #[test]
    fn flip_reverses_rows() {
        let v = vol([3, 2, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(v.flip_lr().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn modality_names_parse() {
        assert_eq!("t1ce".parse::<Modality>().unwrap(), Modality::T1c);
        assert_eq!("FLAIR".parse::<Modality>().unwrap(), Modality::Flair);
        assert!("pd".parse::<Modality>().is_err());
    }

    proptest! {
        #[test]
        fn flip_is_involution(nx in 1usize..6, ny in 1usize..4, nz in 1usize..4, seed in any::<u64>()) {
            let g = Grid::unit([nx, ny, nz]).unwrap();
            let data: Vec<f32> = (0..g.len()).map(|i| ((i as u64 ^ seed) % 97) as f32).collect();
            let v = Volume3D::new(g, data).unwrap();
            prop_assert_eq!(v.flip_lr().flip_lr(), v.clone());
            let mut a = v.data().to_vec();
            let mut b = v.flip_lr().data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn label_flip_preserves_counts(labels in proptest::collection::vec(prop::sample::select(VALID_LABELS.to_vec()), 24)) {
            let lv = LabelVolume::new(Grid::unit([4, 3, 2]).unwrap(), labels).unwrap();
            prop_assert_eq!(lv.flip_lr().label_counts(), lv.label_counts());
            prop_assert_eq!(lv.flip_lr().flip_lr(), lv);
        }

        #[test]
        fn normalization_is_idempotent(values in proptest::collection::vec(-100.0f32..100.0, 8..40)) {
            let n = values.len();
            let v = vol([n, 1, 1], values);
            let m = Mask::full(v.grid());
            if let Ok(once) = normalize_zero_mean_unit_std(&v, &m) {
                let twice = normalize_zero_mean_unit_std(&once, &m).unwrap();
                for (a, b) in once.data().iter().zip(twice.data()) {
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn brain_mask_is_monotone(a in proptest::collection::vec(0u8..3, 8), b in proptest::collection::vec(0u8..3, 8)) {
            let va = vol([2, 2, 2], a.iter().map(|&x| x as f32).collect());
            let vb = vol([2, 2, 2], b.iter().map(|&x| x as f32).collect());
            let small = brain_mask(&stack(vec![(Modality::T1, va.clone())]));
            let big = brain_mask(&stack(vec![(Modality::T1, va), (Modality::T2, vb)]));
            for (s, l) in small.data().iter().zip(big.data()) {
                prop_assert!(!s || *l);
            }
        }
    }
}
