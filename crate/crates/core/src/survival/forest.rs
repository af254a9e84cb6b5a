//! Bagged CART regression trees with variance-reduction splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SurvivalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    /// Features tried per split; `None` means ⌈p/3⌉.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            mtry: None,
            min_leaf: 2,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, z: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if z[feature] <= threshold { left } else { right },
            }
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn mean(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }

    /// Best (feature, threshold, gain) over a random feature subset, or None
    /// when no split leaves `min_leaf` rows on each side.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let p = self.x[0].len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.to_vec();
        for f in sample(rng, p, self.mtry.min(p)).into_iter() {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..sorted.len() - 1 {
                left_sum += self.y[sorted[k]];
                let nl = k + 1;
                let (a, b) = (self.x[sorted[k]][f], self.x[sorted[k + 1]][f]);
                if nl < self.min_leaf || sorted.len() - nl < self.min_leaf || a == b {
                    continue;
                }
                let nr = n - nl as f64;
                // Maximizing this is equivalent to minimizing the children's SSE.
                let score = left_sum * left_sum / nl as f64 + (total - left_sum).powi(2) / nr;
                if best.is_none_or(|(s, _, _)| score > s + 1e-12 * s.abs()) {
                    best = Some((score, f, 0.5 * (a + b)));
                }
            }
        }
        let (score, f, t) = best?;
        (score > total * total / n + 1e-12 * score.abs()).then_some((f, t))
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.mean(&idx)));
        if idx.len() < 2 * self.min_leaf || depth >= self.max_depth {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
}

/// Tree `t` draws from its own ChaCha stream, so the forest is identical
/// however the trees are scheduled across threads.
fn tree_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, seed: u64) -> Result<Self, SurvivalError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(SurvivalError::Shape("forest fit needs equal, nonzero row counts".into()));
        }
        if cfg.trees == 0 || cfg.min_leaf == 0 {
            return Err(SurvivalError::Invalid("trees and min_leaf must be positive".into()));
        }
        let p = x[0].len();
        let mtry = cfg.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p.max(1));
        let trees = (0..cfg.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = tree_rng(seed, t);
                let boot: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                let mut b = Builder {
                    x,
                    y,
                    mtry,
                    min_leaf: cfg.min_leaf,
                    max_depth: cfg.max_depth.unwrap_or(usize::MAX),
                    nodes: Vec::new(),
                };
                b.build(boot, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn tree_predictions(&self, z: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(z)).collect()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.tree_predictions(z).iter().sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..80).map(|i| vec![(i % 10) as f64, (i / 10) as f64, ((i * 37) % 13) as f64]).collect();
        let y = x.iter().map(|r| if r[0] < 5.0 { 200.0 } else { 500.0 } + 10.0 * r[1]).collect();
        (x, y)
    }

    #[test]
    fn constant_target_gives_constant() {
        let (x, _) = data();
        let y = vec![321.0; x.len()];
        let f = RandomForest::fit(&x, &y, &ForestConfig::default(), 1).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
        for r in &x {
            assert_eq!(f.predict(r), 321.0);
        }
    }

    #[test]
    fn mean_of_trees() {
        let (x, y) = data();
        let f = RandomForest::fit(&x, &y, &ForestConfig { trees: 17, ..Default::default() }, 2).unwrap();
        for r in x.iter().take(10) {
            let per = f.tree_predictions(r);
            assert_eq!(per.len(), 17);
            assert_eq!(f.predict(r), per.iter().sum::<f64>() / 17.0);
        }
        let mse: f64 = x.iter().zip(&y).map(|(r, t)| (f.predict(r) - t).powi(2)).sum::<f64>() / 80.0;
        assert!(mse < 2000.0, "{mse}");
    }

    #[test]
    fn seeded_and_thread_independent() {
        let (x, y) = data();
        let cfg = ForestConfig { trees: 8, ..Default::default() };
        let a = RandomForest::fit(&x, &y, &cfg, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| RandomForest::fit(&x, &y, &cfg, 9).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, RandomForest::fit(&x, &y, &cfg, 10).unwrap());
    }

    #[test]
    fn leaves_respect_min_size() {
        let (x, y) = data();
        let cfg = ForestConfig {
            trees: 1,
            min_leaf: 5,
            ..Default::default()
        };
        let f = RandomForest::fit(&x, &y, &cfg, 3).unwrap();
        // count bootstrap rows reaching each leaf
        let mut rng = tree_rng(3, 0);
        let boot: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
        let t = &f.trees[0];
        let mut hits = vec![0usize; t.nodes.len()];
        for &i in &boot {
            let mut k = 0;
            while let Node::Split { feature, threshold, left, right } = t.nodes[k] {
                k = if x[i][feature] <= threshold { left } else { right };
            }
            hits[k] += 1;
        }
        for (k, n) in t.nodes.iter().enumerate() {
            if matches!(n, Node::Leaf(_)) {
                assert!(hits[k] >= 5, "leaf {k} holds {}", hits[k]);
            }
        }
    }
}
