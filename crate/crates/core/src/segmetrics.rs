//! Region merging, largest-component post-processing and Dice/Hausdorff
//! evaluation with cohort aggregation.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::volume::{Grid, LabelVolume, Mask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    Shape(Grid, Grid),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
    #[error("percentile must lie in (0, 100], got {0}")]
    Percentile(f64),
    #[error("aggregation needs at least one case")]
    NoCases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorCoreMode {
    /// Necrotic/non-enhancing core plus enhancing tumor, labels {1,4}.
    #[default]
    Standard,
    /// Labels {1,2}, as literally printed in the source text.
    StrictPaper,
}

impl TumorCoreMode {
    pub fn labels(self) -> &'static [u8] {
        match self {
            TumorCoreMode::Standard => &[1, 4],
            TumorCoreMode::StrictPaper => &[1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Merged(Region),
    RawLabel(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub kind: RegionKind,
    pub mask: Mask,
}

impl RegionMask {
    pub fn from_labels(labels: &LabelVolume, kind: RegionKind, members: &[u8]) -> Self {
        let data = labels.data().iter().map(|l| members.contains(l)).collect();
        RegionMask {
            kind,
            mask: Mask::new(labels.grid(), data).expect("same grid"),
        }
    }

    pub fn grid(&self) -> Grid {
        self.mask.grid()
    }

    pub fn count(&self) -> usize {
        self.mask.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedRegions {
    pub wt: RegionMask,
    pub tc: RegionMask,
    pub et: RegionMask,
}

impl MergedRegions {
    pub fn get(&self, r: Region) -> &RegionMask {
        match r {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

pub fn merge_regions(labels: &LabelVolume, mode: TumorCoreMode) -> MergedRegions {
    MergedRegions {
        wt: RegionMask::from_labels(labels, RegionKind::Merged(Region::WT), &[1, 2, 4]),
        tc: RegionMask::from_labels(labels, RegionKind::Merged(Region::TC), mode.labels()),
        et: RegionMask::from_labels(labels, RegionKind::Merged(Region::ET), &[4]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => nonzero == 1 || nonzero == 2,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

fn neighbor(grid: &Grid, c: [usize; 3], o: [isize; 3]) -> Option<usize> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + o[a];
        if v < 0 || v >= grid.dims[a] as isize {
            return None;
        }
        n[a] = v as usize;
    }
    Some(grid.index(n[0], n[1], n[2]))
}

/// Labels connected components of `fg`; returns per-voxel component ids
/// (0 = background) and component sizes indexed by id - 1. Components are
/// numbered in order of their smallest linear index.
pub fn connected_components(fg: &Mask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let grid = fg.grid();
    let offsets = conn.offsets();
    let mut comp = vec![0u32; grid.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if !fg.data()[start] || comp[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let c = grid.coords(v);
            for &o in &offsets {
                if let Some(n) = neighbor(&grid, c, o) {
                    if fg.data()[n] && comp[n] == 0 {
                        comp[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Zeroes every foreground voxel outside the largest connected component of
/// the binarized foreground. Equal sizes keep the component reached first in
/// linear index order.
pub fn largest_component_filter(labels: &LabelVolume, conn: Connectivity) -> LabelVolume {
    let fg = Mask::new(labels.grid(), labels.data().iter().map(|&l| l != 0).collect()).expect("same grid");
    let (comp, sizes) = connected_components(&fg, conn);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return labels.clone();
    };
    let data = labels
        .data()
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| if c == best { l } else { 0 })
        .collect();
    LabelVolume::new(labels.grid(), data).expect("labels unchanged")
}

fn check_grids(a: &Mask, b: &Mask) -> Result<(), MetricError> {
    if a.grid() != b.grid() {
        return Err(MetricError::Shape(a.grid(), b.grid()));
    }
    Ok(())
}

/// Dice overlap; two empty masks score 1, one empty mask scores 0.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64, MetricError> {
    check_grids(pred, truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        p += a as usize;
        t += b as usize;
        both += (a && b) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Dice of a single raw label value, before any region merge.
pub fn label_dice(pred: &LabelVolume, truth: &LabelVolume, label: u8) -> Result<f64, MetricError> {
    if pred.grid() != truth.grid() {
        return Err(MetricError::Shape(pred.grid(), truth.grid()));
    }
    let m = |v: &LabelVolume| Mask::new(v.grid(), v.data().iter().map(|&l| l == label).collect()).expect("same grid");
    dice(&m(pred), &m(truth))
}

/// Voxels of `m` with a 6-neighbor outside the mask or on the grid edge.
pub fn boundary(m: &Mask) -> Mask {
    let grid = m.grid();
    let six = Connectivity::Six.offsets();
    let data = (0..grid.len())
        .map(|i| {
            if !m.data()[i] {
                return false;
            }
            let c = grid.coords(i);
            six.iter().any(|&o| match neighbor(&grid, c, o) {
                Some(n) => !m.data()[n],
                None => true,
            })
        })
        .collect();
    Mask::new(grid, data).expect("same grid")
}

/// One-dimensional squared distance transform of sampled function `f` on
/// points spaced `step` apart (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // z[0] is -inf, so this never underflows
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// voxel of `seeds`, honoring anisotropic spacing.
pub fn squared_distance_transform(seeds: &Mask) -> Vec<f64> {
    let grid = seeds.grid();
    let [nx, ny, nz] = grid.dims;
    let mut d: Vec<f64> = seeds.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = nx.max(ny).max(nz);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let axes: [(usize, [usize; 2]); 3] = [(0, [1, 2]), (1, [0, 2]), (2, [0, 1])];
    for (axis, others) in axes {
        let n = grid.dims[axis];
        for a in 0..grid.dims[others[0]] {
            for b in 0..grid.dims[others[1]] {
                let idx = |t: usize| {
                    let mut c = [0usize; 3];
                    c[axis] = t;
                    c[others[0]] = a;
                    c[others[1]] = b;
                    grid.index(c[0], c[1], c[2])
                };
                for t in 0..n {
                    f[t] = d[idx(t)];
                }
                edt_1d(&f[..n], grid.spacing[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[idx(t)] = out[t];
                }
            }
        }
    }
    d
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

fn directed(from: &Mask, to_sq_dist: &[f64]) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_sq_dist)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// Symmetric Hausdorff distance in mm between the boundaries of two masks.
/// `percentile` = 100 gives the classical distance; lower values take that
/// percentile of each directed distance set before the max.
pub fn hausdorff(pred: &Mask, truth: &Mask, pct: f64) -> Result<f64, MetricError> {
    check_grids(pred, truth)?;
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(MetricError::Percentile(pct));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyMask("prediction"));
    }
    if truth.is_empty() {
        return Err(MetricError::EmptyMask("ground truth"));
    }
    let (bp, bt) = (boundary(pred), boundary(truth));
    let mut pt = directed(&bp, &squared_distance_transform(&bt));
    let mut tp = directed(&bt, &squared_distance_transform(&bp));
    Ok(percentile(&mut pt, pct).max(percentile(&mut tp, pct)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub subject_id: String,
    pub wt: RegionScore,
    pub tc: RegionScore,
    pub et: RegionScore,
}

impl CaseMetrics {
    pub fn get(&self, r: Region) -> &RegionScore {
        match r {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

pub fn score_region(pred: &Mask, truth: &Mask) -> Result<RegionScore, MetricError> {
    let d = dice(pred, truth)?;
    let hd = |p| match hausdorff(pred, truth, p) {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::EmptyMask(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(RegionScore {
        dice: d,
        hd: hd(100.0)?,
        hd95: hd(95.0)?,
    })
}

pub fn evaluate_case(
    subject_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    mode: TumorCoreMode,
) -> Result<CaseMetrics, MetricError> {
    if pred.grid() != truth.grid() {
        return Err(MetricError::Shape(pred.grid(), truth.grid()));
    }
    let (p, t) = (merge_regions(pred, mode), merge_regions(truth, mode));
    let s = |r| score_region(&p.get(r).mask, &t.get(r).mask);
    Ok(CaseMetrics {
        subject_id: subject_id.to_string(),
        wt: s(Region::WT)?,
        tc: s(Region::TC)?,
        et: s(Region::ET)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
    pub missing: usize,
}

/// Mean, sample standard deviation (0 for one value) and median. Returns NaN
/// statistics when `values` is empty.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            median: f64::NAN,
            n: 0,
            missing: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Summary {
        mean,
        std,
        median,
        n,
        missing: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Hd,
    Hd95,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Hd, Metric::Hd95];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Hd => "Hausdorff",
            Metric::Hd95 => "Hausdorff95",
        }
    }

    fn pick(self, s: &RegionScore) -> Option<f64> {
        match self {
            Metric::Dice => Some(s.dice),
            Metric::Hd => s.hd,
            Metric::Hd95 => s.hd95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortReport {
    /// Keyed by (metric, region) in `Metric::ALL` x `Region::ALL` order.
    pub entries: Vec<(Metric, Region, Summary)>,
}

impl CohortReport {
    pub fn get(&self, m: Metric, r: Region) -> Summary {
        self.entries
            .iter()
            .find(|(mm, rr, _)| *mm == m && *rr == r)
            .map(|e| e.2)
            .expect("all combinations present")
    }
}

/// Per-region statistics; cases whose Hausdorff is undefined are excluded
/// from that metric and counted in `missing`.
pub fn aggregate(cases: &[CaseMetrics]) -> Result<CohortReport, MetricError> {
    if cases.is_empty() {
        return Err(MetricError::NoCases);
    }
    let mut entries = Vec::new();
    for m in Metric::ALL {
        for r in Region::ALL {
            let vals: Vec<f64> = cases.iter().filter_map(|c| m.pick(c.get(r))).collect();
            let mut s = summarize(&vals);
            s.missing = cases.len() - vals.len();
            entries.push((m, r, s));
        }
    }
    Ok(CohortReport { entries })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per case and region: subject_id, region, dice, hd, hd95. Undefined
/// distances are left blank.
pub fn write_case_csv<W: Write>(w: W, cases: &[CaseMetrics]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["subject_id", "region", "dice", "hd", "hd95"])?;
    for c in cases {
        for r in Region::ALL {
            let s = c.get(r);
            out.write_record([
                c.subject_id.clone(),
                r.name().to_string(),
                s.dice.to_string(),
                fmt_opt(s.hd),
                fmt_opt(s.hd95),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Summary table with rows Mean, StdDev, Median and a Count row giving the
/// number of cases behind each column.
pub fn write_summary_csv<W: Write>(w: W, report: &CohortReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    for m in Metric::ALL {
        for r in Region::ALL {
            header.push(format!("{}_{}", m.name(), r.name()));
        }
    }
    out.write_record(&header)?;
    let rows: [(&str, fn(&Summary) -> String); 4] = [
        ("Mean", |s| s.mean.to_string()),
        ("StdDev", |s| s.std.to_string()),
        ("Median", |s| s.median.to_string()),
        ("Count", |s| s.n.to_string()),
    ];
    for (name, f) in rows {
        let mut rec = vec![name.to_string()];
        for m in Metric::ALL {
            for r in Region::ALL {
                rec.push(f(&report.get(m, r)));
            }
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::unit(d).unwrap()
    }

    fn mask_from(d: [usize; 3], on: &[[usize; 3]]) -> Mask {
        let g = grid(d);
        let mut data = vec![false; g.len()];
        for c in on {
            data[g.index(c[0], c[1], c[2])] = true;
        }
        Mask::new(g, data).unwrap()
    }

    fn brute_hd(a: &Mask, b: &Mask, pct: f64) -> f64 {
        let (ba, bb) = (boundary(a), boundary(b));
        let g = a.grid();
        let pts = |m: &Mask| -> Vec<[f64; 3]> {
            m.indices()
                .into_iter()
                .map(|i| {
                    let c = g.coords(i);
                    [0, 1, 2].map(|k| c[k] as f64 * g.spacing[k])
                })
                .collect()
        };
        let (pa, pb) = (pts(&ba), pts(&bb));
        let dir = |x: &[[f64; 3]], y: &[[f64; 3]]| -> Vec<f64> {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        percentile(&mut dir(&pa, &pb), pct).max(percentile(&mut dir(&pb, &pa), pct))
    }

    // Naive boundary test written independently of `boundary`.
    fn brute_boundary(m: &Mask) -> Vec<usize> {
        let g = m.grid();
        let [nx, ny, nz] = g.dims;
        m.indices()
            .into_iter()
            .filter(|&i| {
                let [x, y, z] = g.coords(i);
                x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !m.get(x - 1, y, z)
                    || !m.get(x + 1, y, z)
                    || !m.get(x, y - 1, z)
                    || !m.get(x, y + 1, z)
                    || !m.get(x, y, z - 1)
                    || !m.get(x, y, z + 1)
            })
            .collect()
    }

    #[test]
    fn merge_counts() {
        let g = grid([4, 1, 1]);
        let l = LabelVolume::new(g, vec![1, 2, 4, 0]).unwrap();
        let m = merge_regions(&l, TumorCoreMode::Standard);
        assert_eq!((m.wt.count(), m.tc.count(), m.et.count()), (3, 2, 1));
        assert!(m.tc.mask.data()[0] && m.tc.mask.data()[2]);
        let s = merge_regions(&l, TumorCoreMode::StrictPaper);
        assert_eq!(s.tc.count(), 2);
        assert!(s.tc.mask.data()[0] && s.tc.mask.data()[1]);
        let z = merge_regions(&LabelVolume::zeros(g), TumorCoreMode::Standard);
        assert!(z.wt.mask.is_empty() && z.tc.mask.is_empty() && z.et.mask.is_empty());
    }

    #[test]
    fn dice_examples() {
        let a = mask_from([8, 1, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = mask_from([8, 1, 1], &[[2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]]);
        let c = mask_from([8, 1, 1], &[[6, 0, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = Mask::empty(a.grid());
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
        assert!(matches!(dice(&a, &Mask::empty(grid([4, 2, 1]))), Err(MetricError::Shape(..))));
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask_from([8, 1, 1], &[[1, 0, 0]]);
        let b = mask_from([8, 1, 1], &[[4, 0, 0]]);
        assert_eq!(hausdorff(&a, &b, 100.0).unwrap(), 3.0);
        assert_eq!(hausdorff(&a, &a, 100.0).unwrap(), 0.0);
        assert!(matches!(
            hausdorff(&a, &Mask::empty(a.grid()), 100.0),
            Err(MetricError::EmptyMask(_))
        ));
    }

    #[test]
    fn hausdorff_uses_spacing() {
        let g = Grid::new([3, 3, 3], [0.5, 2.0, 3.0]).unwrap();
        let mut a = vec![false; 27];
        let mut b = vec![false; 27];
        a[g.index(0, 0, 0)] = true;
        b[g.index(2, 1, 2)] = true;
        let (a, b) = (Mask::new(g, a).unwrap(), Mask::new(g, b).unwrap());
        let want = (1.0f64 + 4.0 + 36.0).sqrt();
        assert!((hausdorff(&a, &b, 100.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn components_examples() {
        let d = [10, 10, 3];
        let g = grid(d);
        let mut l = vec![0u8; g.len()];
        for x in 0..5 {
            for y in 0..2 {
                l[g.index(x, y, 0)] = if x == 0 { 4 } else { 2 };
            }
        }
        for x in 7..10 {
            l[g.index(x, 8, 2)] = 1;
        }
        let lv = LabelVolume::new(g, l.clone()).unwrap();
        let f = largest_component_filter(&lv, Connectivity::TwentySix);
        assert_eq!(f.data().iter().filter(|&&v| v != 0).count(), 10);
        assert_eq!(f.get(0, 0, 0), 4, "labels kept inside the component");
        assert_eq!(largest_component_filter(&f, Connectivity::TwentySix), f);

        let diag = mask_from([2, 2, 1], &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(connected_components(&diag, Connectivity::TwentySix).1.len(), 1);
        assert_eq!(connected_components(&diag, Connectivity::Eighteen).1.len(), 1);
        assert_eq!(connected_components(&diag, Connectivity::Six).1.len(), 2);
        let corner = mask_from([2, 2, 2], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&corner, Connectivity::Eighteen).1.len(), 2);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).1.len(), 1);
    }

    #[test]
    fn tie_keeps_lowest_index_component() {
        let g = grid([5, 1, 1]);
        let l = LabelVolume::new(g, vec![0, 2, 0, 1, 0]).unwrap();
        let f = largest_component_filter(&l, Connectivity::Six);
        assert_eq!(f.data(), &[0, 2, 0, 0, 0]);
        let z = LabelVolume::zeros(g);
        assert_eq!(largest_component_filter(&z, Connectivity::Six), z);
    }

    #[test]
    fn aggregate_examples() {
        let case = |id: &str, d: f64, hd: Option<f64>| CaseMetrics {
            subject_id: id.into(),
            wt: RegionScore { dice: d, hd, hd95: hd },
            tc: RegionScore { dice: d, hd, hd95: hd },
            et: RegionScore { dice: d, hd, hd95: hd },
        };
        let cs = vec![case("a", 0.8, Some(2.0)), case("b", 1.0, None), case("c", 0.9, Some(4.0))];
        let r = aggregate(&cs).unwrap();
        let s = r.get(Metric::Dice, Region::WT);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.median - 0.9).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        let h = r.get(Metric::Hd, Region::ET);
        assert_eq!((h.n, h.missing, h.mean, h.median), (2, 1, 3.0, 3.0));
        let one = aggregate(&cs[..1]).unwrap().get(Metric::Dice, Region::TC);
        assert_eq!((one.mean, one.median, one.std), (0.8, 0.8, 0.0));
        assert_eq!(aggregate(&[]), Err(MetricError::NoCases));

        let mut buf = Vec::new();
        write_case_csv(&mut buf, &cs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("subject_id,region,dice,hd,hd95\na,WT,0.8,2,2\n"));
        assert!(text.contains("b,ET,1,,\n"));
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with(",Dice_WT,Dice_TC,Dice_ET,Hausdorff_WT"));
        assert_eq!(lines[1].split(',').next(), Some("Mean"));
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0, 4.0, 5.0], 50.0), 3.0);
        assert!((percentile(&mut [0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
    }

    fn small_mask() -> impl Strategy<Value = Mask> {
        (1usize..=8, 1usize..=8, 1usize..=8, 0.05f64..0.7).prop_flat_map(|(x, y, z, p)| {
            proptest::collection::vec(proptest::bool::weighted(p), x * y * z)
                .prop_map(move |d| Mask::new(grid([x, y, z]), d).unwrap())
        })
    }

    fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
        let sp = (0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0);
        (1usize..=8, 1usize..=8, 1usize..=8, 0.05f64..0.6, 0.05f64..0.6, sp).prop_flat_map(|(x, y, z, p, q, (sx, sy, sz))| {
            let n = x * y * z;
            (
                proptest::collection::vec(proptest::bool::weighted(p), n),
                proptest::collection::vec(proptest::bool::weighted(q), n),
            )
                .prop_map(move |(a, b)| {
                    let g = Grid::new([x, y, z], [sx, sy, sz]).unwrap();
                    (Mask::new(g, a).unwrap(), Mask::new(g, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn hausdorff_matches_brute_force((a, b) in mask_pair()) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            for p in [100.0, 95.0] {
                let fast = hausdorff(&a, &b, p).unwrap();
                prop_assert!((fast - brute_hd(&a, &b, p)).abs() < 1e-9);
                prop_assert!((fast - hausdorff(&b, &a, p).unwrap()).abs() < 1e-12);
            }
            prop_assert!(hausdorff(&a, &b, 95.0).unwrap() <= hausdorff(&a, &b, 100.0).unwrap() + 1e-12);
            prop_assert_eq!(hausdorff(&a, &a, 100.0).unwrap(), 0.0);
        }

        #[test]
        fn boundary_matches_naive(m in small_mask()) {
            prop_assert_eq!(boundary(&m).indices(), brute_boundary(&m));
        }

        #[test]
        fn dice_symmetric((a, b) in mask_pair()) {
            let d = dice(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            if !a.is_empty() { prop_assert_eq!(dice(&a, &a).unwrap(), 1.0); }
        }

        #[test]
        fn component_filter_idempotent_subset(m in small_mask(), c in prop_oneof![Just(6u32), Just(18), Just(26)]) {
            let conn = Connectivity::from_count(c).unwrap();
            let l = LabelVolume::new(m.grid(), m.data().iter().enumerate().map(|(i, &b)| if b { [1, 2, 4][i % 3] } else { 0 }).collect()).unwrap();
            let f = largest_component_filter(&l, conn);
            prop_assert_eq!(&largest_component_filter(&f, conn), &f);
            for (o, i) in f.data().iter().zip(l.data()) {
                prop_assert!(*o == 0 || o == i);
            }
            let sizes = connected_components(&m, conn).1;
            let kept = f.data().iter().filter(|&&v| v != 0).count();
            prop_assert_eq!(kept, sizes.iter().copied().max().unwrap_or(0));
        }

        #[test]
        fn nested_regions(m in small_mask()) {
            let l = LabelVolume::new(m.grid(), m.data().iter().enumerate().map(|(i, &b)| if b { [1, 2, 4][i % 3] } else { 0 }).collect()).unwrap();
            let r = merge_regions(&l, TumorCoreMode::Standard);
            for i in 0..l.data().len() {
                prop_assert!(!r.et.mask.data()[i] || r.tc.mask.data()[i]);
                prop_assert!(!r.tc.mask.data()[i] || r.wt.mask.data()[i]);
            }
        }

        #[test]
        fn aggregate_permutation_invariant(vals in proptest::collection::vec(0.0f64..1.0, 1..12), seed in any::<u64>()) {
            let cases: Vec<CaseMetrics> = vals.iter().enumerate().map(|(i, &d)| CaseMetrics {
                subject_id: i.to_string(),
                wt: RegionScore { dice: d, hd: Some(d * 10.0), hd95: None },
                tc: RegionScore { dice: d, hd: None, hd95: None },
                et: RegionScore { dice: 1.0 - d, hd: Some(d), hd95: Some(d) },
            }).collect();
            let mut shuffled = cases.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let (a, b) = (aggregate(&cases).unwrap(), aggregate(&shuffled).unwrap());
            for ((_, _, x), (_, _, y)) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x.n, y.n);
                prop_assert_eq!(x.median.to_bits(), y.median.to_bits());
                if x.n > 0 {
                    prop_assert!((x.mean - y.mean).abs() < 1e-12);
                    prop_assert!((x.std - y.std).abs() < 1e-12);
                }
            }
        }
    }
}
