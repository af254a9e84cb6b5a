//! Geometric, intensity and fractal features of segmented tumor regions, and
//! the fixed-order feature vectors used for survival regression.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::volume::{brain_mask, Grid, LabelVolume, Mask, Modality, ModalityStack, Volume3D};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("region is empty")]
    EmptyRegion,
    #[error("grid mismatch: labels {0:?} vs images {1:?}")]
    Shape(Grid, Grid),
    #[error("modality {0} is required but missing")]
    MissingModality(Modality),
    #[error("box counting needs at least 3 scales, got {0}; pad the bounding box further")]
    TooFewScales(usize),
    #[error("unknown feature name {0:?}")]
    UnknownFeature(String),
    #[error("bins must be positive")]
    Bins,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    pub centroid: [f64; 3],
    /// Descending.
    pub eigenvalues: [f64; 3],
    /// Unit eigenvectors matching `eigenvalues`; each is signed so that its
    /// largest-magnitude component is positive.
    pub axes: [[f64; 3]; 3],
    pub axis_lengths: [f64; 3],
    pub meridional_ecc: f64,
    pub equatorial_ecc: f64,
    pub volume_mm3: f64,
    pub volume_ratio: f64,
}

fn voxel_center(grid: &Grid, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    [0, 1, 2].map(|a| (c[a] as f64 + 0.5) * grid.spacing[a])
}

fn canonical_sign(v: Vector3<f64>) -> [f64; 3] {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() + 1e-12 {
            k = i;
        }
    }
    let s = if v[k] < 0.0 { -1.0 } else { 1.0 };
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Moments of the voxel-center point cloud of `mask`. `brain` supplies the
/// denominator for the volume ratio (0 when the brain mask is empty).
pub fn region_geometry(mask: &Mask, brain: &Mask) -> Result<RegionGeometry, FeatureError> {
    let grid = mask.grid();
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(FeatureError::EmptyRegion);
    }
    let n = idx.len() as f64;
    let pts: Vec<[f64; 3]> = idx.iter().map(|&i| voxel_center(&grid, i)).collect();
    let mut centroid = [0.0; 3];
    for p in &pts {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenvalues = order.map(|k| eig.eigenvalues[k].max(0.0));
    // Roundoff residue on flat or linear regions; sqrt would magnify it.
    let floor = eigenvalues[0] * 1e-12;
    eigenvalues.iter_mut().filter(|l| **l <= floor).for_each(|l| *l = 0.0);
    let axes = if eigenvalues[0] == 0.0 {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    } else {
        order.map(|k| canonical_sign(eig.eigenvectors.column(k).into_owned()))
    };
    let axis_lengths = eigenvalues.map(|l| 2.0 * (5.0 * l).sqrt());
    let [a, b, c] = axis_lengths.map(|l| l / 2.0);
    let (equatorial_ecc, meridional_ecc) = if a > 0.0 {
        ((1.0 - (b * b) / (a * a)).max(0.0).sqrt(), (1.0 - (c * c) / (a * a)).max(0.0).sqrt())
    } else {
        (0.0, 0.0)
    };
    let volume_mm3 = n * grid.voxel_volume();
    let brain_count = brain.count();
    let volume_ratio = if brain_count > 0 {
        idx.len() as f64 / brain_count as f64
    } else {
        0.0
    };
    Ok(RegionGeometry {
        centroid,
        eigenvalues,
        axes,
        axis_lengths,
        meridional_ecc,
        equatorial_ecc,
        volume_mm3,
        volume_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub skewness: f64,
    /// Pearson kurtosis, 3 for a Gaussian.
    pub kurtosis: f64,
    pub entropy_bits: f64,
    pub histogram: Vec<usize>,
    pub histogram_mode_intensity: f64,
}

pub const DEFAULT_BINS: usize = 32;

pub fn intensity_stats(vol: &Volume3D, mask: &Mask, bins: usize) -> Result<IntensityStats, FeatureError> {
    if vol.grid() != mask.grid() {
        return Err(FeatureError::Shape(mask.grid(), vol.grid()));
    }
    let vals: Vec<f64> = mask.indices().into_iter().map(|i| vol.data()[i] as f64).collect();
    stats_of(&vals, bins)
}

/// Moments and histogram of raw values; the building block of [`intensity_stats`].
pub fn stats_of(vals: &[f64], bins: usize) -> Result<IntensityStats, FeatureError> {
    if bins == 0 {
        return Err(FeatureError::Bins);
    }
    if vals.is_empty() {
        return Err(FeatureError::EmptyRegion);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in vals {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };

    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut histogram = vec![0usize; bins];
    for v in vals {
        let b = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        histogram[b] += 1;
    }
    let entropy_bits = -histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    let mut mode = 0;
    for (i, &c) in histogram.iter().enumerate() {
        if c > histogram[mode] {
            mode = i;
        }
    }
    Ok(IntensityStats {
        mean,
        variance: m2,
        std: m2.sqrt(),
        skewness,
        kurtosis,
        entropy_bits: entropy_bits.max(0.0),
        histogram,
        histogram_mode_intensity: lo + (mode as f64 + 0.5) * width,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractalResult {
    pub fractal_dimension: f64,
    pub scales_used: Vec<usize>,
    pub box_counts: Vec<usize>,
    pub fit_r2: f64,
}

/// The padded cube side is never below this, so even tiny regions yield the
/// three box sizes 1, 2 and 4.
pub const MIN_PADDED_EXTENT: usize = 8;

/// Box-counting dimension. The mask's bounding box is padded to a cube whose
/// side is the next power of two of its largest extent, boxes are aligned to
/// the bounding-box corner, and sizes run 1, 2, 4, … up to half that side.
pub fn box_counting_dimension(mask: &Mask) -> Result<FractalResult, FeatureError> {
    let grid = mask.grid();
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(FeatureError::EmptyRegion);
    }
    let coords: Vec<[usize; 3]> = idx.iter().map(|&i| grid.coords(i)).collect();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for c in &coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a] + 1).max().unwrap();
    let side = extent.next_power_of_two().max(MIN_PADDED_EXTENT);
    let mut scales = Vec::new();
    let mut s = 1;
    while s <= side / 2 {
        scales.push(s);
        s *= 2;
    }
    if scales.len() < 3 {
        return Err(FeatureError::TooFewScales(scales.len()));
    }
    let mut counts = Vec::with_capacity(scales.len());
    for &s in &scales {
        let per = side / s;
        let mut seen = vec![false; per * per * per];
        let mut n = 0;
        for c in &coords {
            let b = [0, 1, 2].map(|a| (c[a] - lo[a]) / s);
            let k = b[0] + per * (b[1] + per * b[2]);
            if !seen[k] {
                seen[k] = true;
                n += 1;
            }
        }
        counts.push(n);
    }
    let xs: Vec<f64> = scales.iter().map(|&s| -(s as f64).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let (slope, r2) = least_squares(&xs, &ys);
    Ok(FractalResult {
        fractal_dimension: slope,
        scales_used: scales,
        box_counts: counts,
        fit_r2: r2,
    })
}

/// Slope and r² of the ordinary least-squares line; r² is 1 for a perfect
/// fit, including the constant case.
fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Tumor sub-regions addressed by feature names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureRegion {
    Ncr,
    Ed,
    Et,
    WtNoEt,
    Wt,
    Tc,
}

impl FeatureRegion {
    pub const ALL: [FeatureRegion; 6] = [
        FeatureRegion::Ncr,
        FeatureRegion::Ed,
        FeatureRegion::Et,
        FeatureRegion::WtNoEt,
        FeatureRegion::Wt,
        FeatureRegion::Tc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureRegion::Ncr => "ncr",
            FeatureRegion::Ed => "ed",
            FeatureRegion::Et => "et",
            FeatureRegion::WtNoEt => "wt_no_et",
            FeatureRegion::Wt => "wt",
            FeatureRegion::Tc => "tc",
        }
    }

    pub fn labels(self) -> &'static [u8] {
        match self {
            FeatureRegion::Ncr => &[1],
            FeatureRegion::Ed => &[2],
            FeatureRegion::Et => &[4],
            FeatureRegion::WtNoEt => &[1, 2],
            FeatureRegion::Wt => &[1, 2, 4],
            FeatureRegion::Tc => &[1, 4],
        }
    }

    pub fn mask(self, labels: &LabelVolume) -> Mask {
        let m = self.labels();
        Mask::new(labels.grid(), labels.data().iter().map(|l| m.contains(l)).collect()).expect("same grid")
    }
}

const XYZ: [&str; 3] = ["x", "y", "z"];

fn geometry_names(r: FeatureRegion, full: bool) -> Vec<String> {
    let p = r.name();
    let mut out = Vec::new();
    for k in 1..=3 {
        for c in XYZ {
            out.push(format!("{p}_axis{k}_{c}"));
        }
    }
    for k in 1..=3 {
        out.push(format!("{p}_length{k}"));
    }
    for c in XYZ {
        out.push(format!("{p}_centroid_{c}"));
    }
    if full {
        for k in 1..=3 {
            out.push(format!("{p}_eigenvalue{k}"));
        }
        out.push(format!("{p}_meridional_ecc"));
        out.push(format!("{p}_equatorial_ecc"));
        out.push(format!("{p}_volume_mm3"));
        out.push(format!("{p}_volume_ratio"));
    }
    out
}

fn geometry_values(g: &RegionGeometry, full: bool) -> Vec<f64> {
    let mut out: Vec<f64> = g.axes.iter().flatten().copied().collect();
    out.extend(g.axis_lengths);
    out.extend(g.centroid);
    if full {
        out.extend(g.eigenvalues);
        out.extend([g.meridional_ecc, g.equatorial_ecc, g.volume_mm3, g.volume_ratio]);
    }
    out
}

const STAT_NAMES: [&str; 7] = ["mean", "variance", "std", "skewness", "kurtosis", "entropy", "hist_mode"];

fn stat_values(s: &IntensityStats) -> [f64; 7] {
    [
        s.mean,
        s.variance,
        s.std,
        s.skewness,
        s.kurtosis,
        s.entropy_bits,
        s.histogram_mode_intensity,
    ]
}

fn modality_key(m: Modality) -> &'static str {
    match m {
        Modality::Flair => "flair",
        Modality::T1 => "t1",
        Modality::T1c => "t1c",
        Modality::T2 => "t2",
    }
}

/// Regions whose intensity statistics appear in the full dump.
const STAT_REGIONS: [FeatureRegion; 5] = [
    FeatureRegion::Wt,
    FeatureRegion::Tc,
    FeatureRegion::Et,
    FeatureRegion::Ncr,
    FeatureRegion::Ed,
];

/// Names of every feature in [`full_feature_dump`], in output order.
pub fn full_feature_names() -> Vec<String> {
    let mut out = Vec::new();
    for r in FeatureRegion::ALL {
        out.extend(geometry_names(r, true));
    }
    for m in Modality::ALL {
        for r in STAT_REGIONS {
            for s in STAT_NAMES {
                out.push(format!("{}_{}_{}", modality_key(m), r.name(), s));
            }
        }
    }
    out.push("ncr_fractal_dim".into());
    out.push("wt_fractal_dim".into());
    out.push("fractal_ratio".into());
    out.push("age".into());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub features: Vec<String>,
}

impl FeatureSpec {
    /// The selected 50: axis vectors, lengths and centroid of label 1, label 2
    /// and labels {1,2}, then T1c-over-WT kurtosis, entropy and histogram mode,
    /// necrotic fractal dimension, and age.
    pub fn paper50() -> Self {
        let mut f = Vec::new();
        for r in [FeatureRegion::Ncr, FeatureRegion::Ed, FeatureRegion::WtNoEt] {
            f.extend(geometry_names(r, false));
        }
        for s in ["t1c_wt_kurtosis", "t1c_wt_entropy", "t1c_wt_hist_mode", "ncr_fractal_dim", "age"] {
            f.push(s.to_string());
        }
        FeatureSpec {
            name: "paper50".into(),
            features: f,
        }
    }

    pub fn all() -> Self {
        FeatureSpec {
            name: "all".into(),
            features: full_feature_names(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper50" => Some(Self::paper50()),
            "all" => Some(Self::all()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let known = full_feature_names();
        for f in &self.features {
            if !known.contains(f) {
                return Err(FeatureError::UnknownFeature(f.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub subject_id: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// Regions or modalities that were absent and zero-filled.
    pub missing: Vec<String>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn select(&self, spec: &FeatureSpec) -> Result<FeatureVector, FeatureError> {
        let index: BTreeMap<&str, usize> = self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let values = spec
            .features
            .iter()
            .map(|f| {
                index
                    .get(f.as_str())
                    .map(|&i| self.values[i])
                    .ok_or_else(|| FeatureError::UnknownFeature(f.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureVector {
            subject_id: self.subject_id.clone(),
            names: spec.features.clone(),
            values,
            missing: self.missing.clone(),
        })
    }
}

/// Every extracted feature under the names of [`full_feature_names`]. Empty
/// regions and absent non-T1c modalities contribute zeros and are listed in
/// `missing`.
pub fn full_feature_dump(labels: &LabelVolume, stack: &ModalityStack, age: f64) -> Result<FeatureVector, FeatureError> {
    if labels.grid() != stack.grid() {
        return Err(FeatureError::Shape(labels.grid(), stack.grid()));
    }
    if stack.get(Modality::T1c).is_none() {
        return Err(FeatureError::MissingModality(Modality::T1c));
    }
    let brain = brain_mask(stack);
    let masks: BTreeMap<FeatureRegion, Mask> = FeatureRegion::ALL.iter().map(|&r| (r, r.mask(labels))).collect();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for r in FeatureRegion::ALL {
        match region_geometry(&masks[&r], &brain) {
            Ok(g) => values.extend(geometry_values(&g, true)),
            Err(_) => {
                values.extend(std::iter::repeat_n(0.0, geometry_names(r, true).len()));
                missing.push(r.name().to_string());
            }
        }
    }
    for m in Modality::ALL {
        let vol = stack.get(m);
        if vol.is_none() {
            missing.push(modality_key(m).to_string());
        }
        for r in STAT_REGIONS {
            match vol.map(|v| intensity_stats(v, &masks[&r], DEFAULT_BINS)) {
                Some(Ok(s)) => values.extend(stat_values(&s)),
                Some(Err(FeatureError::EmptyRegion)) | None => values.extend([0.0; 7]),
                Some(Err(e)) => return Err(e),
            }
        }
    }
    let dim = |r: FeatureRegion| box_counting_dimension(&masks[&r]).map(|f| f.fractal_dimension).unwrap_or(0.0);
    let (ncr, wt) = (dim(FeatureRegion::Ncr), dim(FeatureRegion::Wt));
    values.push(ncr);
    values.push(wt);
    values.push(if wt > 0.0 { ncr / wt } else { 0.0 });
    values.push(age);
    let names = full_feature_names();
    debug_assert_eq!(names.len(), values.len());
    Ok(FeatureVector {
        subject_id: stack.subject_id().to_string(),
        names,
        values,
        missing,
    })
}

pub fn assemble_features(
    labels: &LabelVolume,
    stack: &ModalityStack,
    age: f64,
    spec: &FeatureSpec,
) -> Result<FeatureVector, FeatureError> {
    full_feature_dump(labels, stack, age)?.select(spec)
}

/// Header `subject_id,<feature names…>`, one row per subject.
pub fn write_feature_csv<W: Write>(w: W, spec: &FeatureSpec, rows: &[FeatureVector]) -> Result<(), FeatureError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string()];
    header.extend(spec.features.iter().cloned());
    out.write_record(&header)?;
    for r in rows {
        let r = if r.names == spec.features { r.clone() } else { r.select(spec)? };
        let mut rec = vec![r.subject_id.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| FeatureError::Parse(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<FeatureVector>,
}

pub fn read_feature_csv<R: Read>(r: R) -> Result<FeatureTable, FeatureError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("subject_id") {
        return Err(FeatureError::Parse("first feature column must be subject_id".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| FeatureError::Parse(format!("row {}: {s:?} is not a number", line + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(FeatureVector {
            subject_id: rec[0].to_string(),
            names: names.clone(),
            values,
            missing: Vec::new(),
        });
    }
    Ok(FeatureTable { names, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub subject_id: String,
    pub age: f64,
    /// Days; `None` when the cell is blank or not a number.
    pub survival_days: Option<f64>,
}

/// Reads `BraTS18ID, Age, Survival`. Extra columns are ignored.
pub fn read_cohort_csv<R: Read>(r: R) -> Result<Vec<CohortRow>, FeatureError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FeatureError::Parse(format!("cohort csv lacks column {name}")))
    };
    let (id, age, surv) = (col("BraTS18ID")?, col("Age")?, col("Survival")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let age_v = rec
            .get(age)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| FeatureError::Parse(format!("row {}: bad Age", line + 2)))?;
        out.push(CohortRow {
            subject_id: rec.get(id).unwrap_or_default().to_string(),
            age: age_v,
            survival_days: rec.get(surv).and_then(|s| s.parse::<f64>().ok()),
        });
    }
    Ok(out)
}

pub fn write_cohort_csv<W: Write>(w: W, rows: &[CohortRow]) -> Result<(), FeatureError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["BraTS18ID", "Age", "Survival"])?;
    for r in rows {
        out.write_record([
            r.subject_id.clone(),
            r.age.to_string(),
            r.survival_days.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(|e| FeatureError::Parse(e.to_string()))?;
    Ok(())
}
