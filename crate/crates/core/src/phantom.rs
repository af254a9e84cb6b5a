//! Synthetic subjects: an ellipsoidal brain holding a concentric tumor
//! (necrotic core, enhancing rim, edema shell) imaged in four noisy
//! pseudo-modalities, plus a matching survival cohort.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::radiomics::CohortRow;
use crate::volume::{Grid, LabelVolume, Modality, ModalityStack, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Per-voxel noise standard deviation relative to healthy tissue.
    pub noise: f64,
    /// Relabel the necrotic core as enhancing tumor.
    pub drop_necrotic: bool,
    /// Replace edema by healthy tissue.
    pub drop_edema: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 8],
            noise: 0.25,
            drop_necrotic: false,
            drop_edema: false,
        }
    }
}

/// Mean intensity of (background brain, label 1, label 2, label 4) in each
/// modality, in `Modality::ALL` order. No single modality separates all four.
const MEANS: [[f64; 4]; 4] = [
    // flair, t1, t1c, t2
    [1.0, 1.0, 1.0, 1.0],
    [1.2, 0.55, 0.7, 1.7],
    [1.9, 0.9, 1.0, 1.6],
    [1.3, 1.0, 2.1, 1.15],
];

fn class_row(label: u8) -> usize {
    match label {
        0 => 0,
        1 => 1,
        2 => 2,
        _ => 3,
    }
}

pub struct Phantom {
    pub stack: ModalityStack,
    pub labels: LabelVolume,
    pub age: f64,
    pub survival_days: f64,
}

pub fn phantom_id(i: usize) -> String {
    format!("Phantom_{i:03}")
}

/// Subject `index` of the cohort generated from `seed`; each subject has its
/// own RNG stream, so subjects can be generated in any order.
pub fn generate_phantom(seed: u64, index: usize, cfg: &PhantomConfig) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let grid = Grid::unit(cfg.dims).expect("positive dims");
    let [nx, ny, nz] = cfg.dims;
    let c = [nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0];
    let brain_r = [nx as f64 * 0.44, ny as f64 * 0.41, nz as f64 * 0.62];
    let scale = (nx.min(ny) as f64) / 32.0;
    let tumor = [
        c[0] + rng.random_range(-4.0..4.0) * scale,
        c[1] + rng.random_range(-4.0..4.0) * scale,
        c[2] + rng.random_range(-0.8..0.8),
    ];
    let r1 = rng.random_range(1.8..3.2) * scale;
    let r2 = r1 + rng.random_range(1.5..2.5) * scale;
    let r3 = r2 + rng.random_range(2.0..3.5) * scale;
    let z_stretch = rng.random_range(1.2..1.8);

    let mut labels = vec![0u8; grid.len()];
    let mut inside = vec![false; grid.len()];
    for (i, (l, b)) in labels.iter_mut().zip(inside.iter_mut()).enumerate() {
        let [x, y, z] = grid.coords(i);
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        let e: f64 = (0..3).map(|a| ((p[a] - c[a]) / brain_r[a]).powi(2)).sum();
        if e > 1.0 {
            continue;
        }
        *b = true;
        let d = ((p[0] - tumor[0]).powi(2) + (p[1] - tumor[1]).powi(2) + ((p[2] - tumor[2]) * z_stretch).powi(2)).sqrt();
        *l = if d < r1 {
            if cfg.drop_necrotic {
                4
            } else {
                1
            }
        } else if d < r2 {
            4
        } else if d < r3 && !cfg.drop_edema {
            2
        } else {
            0
        };
    }

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite");
    let mut vols = BTreeMap::new();
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let gain = rng.random_range(60.0..140.0);
        let offset = rng.random_range(0.0..20.0);
        let data = labels
            .iter()
            .zip(&inside)
            .map(|(&l, &b)| {
                if !b {
                    return 0.0;
                }
                let v = MEANS[class_row(l)][k] + noise.sample(&mut rng);
                // keep brain voxels nonzero so the brain mask is exact
                (offset + gain * v).max(1.0) as f32
            })
            .collect();
        vols.insert(m, Volume3D::new(grid, data).expect("sized"));
    }
    let labels = LabelVolume::new(grid, labels).expect("valid labels");
    let age = rng.random_range(30.0..80.0f64).round();
    let tumor_voxels = labels.data().iter().filter(|&&l| l != 0).count() as f64;
    let survival_days = (900.0 - 6.0 * age - 0.4 * tumor_voxels * (1024.0 / (nx * ny) as f64) + rng.random_range(-40.0..40.0)).max(30.0);
    Phantom {
        stack: ModalityStack::new(phantom_id(index), vols).expect("shared grid"),
        labels,
        age,
        survival_days: survival_days.round(),
    }
}

pub fn generate_cohort(seed: u64, n: usize, cfg: &PhantomConfig) -> Vec<Phantom> {
    (0..n).map(|i| generate_phantom(seed, i, cfg)).collect()
}

pub fn cohort_rows(phantoms: &[Phantom]) -> Vec<CohortRow> {
    phantoms
        .iter()
        .map(|p| CohortRow {
            subject_id: p.stack.subject_id().to_string(),
            age: p.age,
            survival_days: Some(p.survival_days),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::brain_mask;

    #[test]
    fn labels_are_concentric_and_brain_is_exact() {
        let p = generate_phantom(1, 0, &PhantomConfig::default());
        let counts = p.labels.label_counts();
        assert!(counts[1] > 0 && counts[2] > 0 && counts[4] > 0);
        let brain = brain_mask(&p.stack);
        for (i, &l) in p.labels.data().iter().enumerate() {
            assert!(l == 0 || brain.data()[i]);
        }
        assert!(brain.count() > 2000 && brain.count() < 32 * 32 * 8);
        assert!(p.survival_days > 0.0 && (30.0..=80.0).contains(&p.age));
    }

    #[test]
    fn drop_options() {
        let cfg = PhantomConfig {
            drop_necrotic: true,
            drop_edema: true,
            ..Default::default()
        };
        let p = generate_phantom(1, 0, &cfg);
        let c = p.labels.label_counts();
        assert_eq!((c[1], c[2]), (0, 0));
        assert!(c[4] > 0);
    }

    #[test]
    fn deterministic_and_order_free() {
        let cfg = PhantomConfig::default();
        let a = generate_cohort(5, 3, &cfg);
        let b = generate_phantom(5, 2, &cfg);
        assert_eq!(a[2].labels, b.labels);
        assert_eq!(a[2].stack.get(Modality::T1c), b.stack.get(Modality::T1c));
        assert_ne!(a[0].labels, a[1].labels);
    }
}
