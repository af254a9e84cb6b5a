use serde::{Deserialize, Serialize};

use super::NetError;

/// Number of segmentation classes (background, NCR/NET, ED, ET).
pub const N_CLASSES: usize = 4;

/// One conv → BN → ReLU pixel-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelBlockSpec {
    pub out_channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub pad: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn three() -> usize {
    3
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_momentum() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-5
}

impl PixelBlockSpec {
    pub fn new(out_channels: usize, batch_norm: bool) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            batch_norm,
        }
    }
}

/// Declarative architecture: pixel-blocks, 2×2 max-pool points, hypercolumn
/// taps and the three MLP widths. Block indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub in_channels: usize,
    pub blocks: Vec<PixelBlockSpec>,
    #[serde(default)]
    pub pool_after: Vec<usize>,
    pub hypercolumn_taps: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

impl NetSpec {
    /// The 18-block VGG-16-style layout: five resolution groups of
    /// 64,64 / 128,128 / 256×3 / 512×3 / 512×3 followed by three extra 512
    /// blocks, 2×2 pooling after each of the first five groups, a tap on the
    /// last block of every resolution, and a 4096→4096→4 head.
    pub fn paper_scale() -> Self {
        let mut channels = vec![64, 64, 128, 128, 256, 256, 256];
        channels.extend([512; 11]);
        Self {
            in_channels: 4,
            blocks: channels.into_iter().map(|c| PixelBlockSpec::new(c, true)).collect(),
            pool_after: vec![1, 3, 6, 9, 12],
            hypercolumn_taps: vec![1, 3, 6, 9, 12, 17],
            mlp_widths: vec![4096, 4096, N_CLASSES],
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Small network for desk-scale runs: `widths.len()` blocks, one pool after
    /// the second block, every block tapped.
    pub fn toy(widths: &[usize], batch_norm: bool, hidden: usize) -> Self {
        Self {
            in_channels: 4,
            blocks: widths.iter().map(|&c| PixelBlockSpec::new(c, batch_norm)).collect(),
            pool_after: if widths.len() > 2 { vec![1] } else { vec![] },
            hypercolumn_taps: (0..widths.len()).collect(),
            mlp_widths: vec![hidden, hidden, N_CLASSES],
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::Spec(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one pixel-block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return bad(format!("block {i}: out_channels must be positive"));
            }
            if (b.kernel, b.stride, b.pad) != (3, 1, 1) {
                return bad(format!(
                    "block {i}: only 3×3 kernels with stride 1 and padding 1 are supported"
                ));
            }
        }
        let n = self.blocks.len();
        if let Some(&i) = self.pool_after.iter().find(|&&i| i >= n) {
            return bad(format!("pool_after index {i} is not a block index"));
        }
        if self.hypercolumn_taps.is_empty() {
            return bad("at least one hypercolumn tap is required".into());
        }
        if let Some(&i) = self.hypercolumn_taps.iter().find(|&&i| i >= n) {
            return bad(format!("hypercolumn tap {i} is not a block index"));
        }
        if !strictly_increasing(&self.pool_after) || !strictly_increasing(&self.hypercolumn_taps) {
            return bad("pool_after and hypercolumn_taps must be sorted without duplicates".into());
        }
        if self.mlp_widths.len() != 3 {
            return bad(format!(
                "mlp_widths must have exactly 3 entries, got {}",
                self.mlp_widths.len()
            ));
        }
        if self.mlp_widths.contains(&0) {
            return bad("mlp widths must be positive".into());
        }
        if self.mlp_widths[2] != N_CLASSES {
            return bad(format!("last mlp width must be {N_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1) and bn_eps must be positive".into());
        }
        Ok(())
    }

    /// Downscale factor of block `i`'s output relative to the input
    /// (2 to the number of pools before it).
    pub fn downscale(&self, block: usize) -> usize {
        1 << self.pool_after.iter().filter(|&&p| p < block).count()
    }

    /// Width of the concatenated hypercolumn.
    pub fn hypercolumn_width(&self) -> usize {
        self.hypercolumn_taps
            .iter()
            .map(|&i| self.blocks[i].out_channels)
            .sum()
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.blocks.iter().any(|b| b.batch_norm)
    }

    /// Spatial size of every block's output for an `h × w` input, or an error
    /// when a pool would shrink an axis to zero.
    pub fn block_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>, NetError> {
        let mut sizes = Vec::with_capacity(self.blocks.len());
        let (mut ch, mut cw) = (h, w);
        for i in 0..self.blocks.len() {
            sizes.push((ch, cw));
            if self.pool_after.contains(&i) {
                ch /= 2;
                cw /= 2;
                if ch == 0 || cw == 0 {
                    return Err(NetError::Shape(format!(
                        "input {h}×{w} is too small for the pool after block {i}"
                    )));
                }
            }
        }
        Ok(sizes)
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_shape() {
        let s = NetSpec::paper_scale();
        s.validate().unwrap();
        assert_eq!(s.blocks.len(), 18);
        assert_eq!(s.mlp_widths, vec![4096, 4096, 4]);
        assert_eq!(s.hypercolumn_width(), 128 + 256 + 512 * 3 + 64);
        assert_eq!(s.downscale(0), 1);
        assert_eq!(s.downscale(2), 2);
        assert_eq!(s.downscale(17), 32);
        let sizes = s.block_sizes(240, 240).unwrap();
        assert_eq!(sizes[17], (7, 7));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = NetSpec::toy(&[4, 4], true, 8);
        s.validate().unwrap();
        s.hypercolumn_taps = vec![2];
        assert!(s.validate().is_err());
        let mut s = NetSpec::toy(&[4, 4], true, 8);
        s.mlp_widths = vec![8, 4];
        assert!(s.validate().is_err());
        let mut s = NetSpec::toy(&[4, 4], true, 8);
        s.blocks[0].kernel = 5;
        assert!(s.validate().is_err());
        let s = NetSpec::toy(&[4, 4, 4], true, 8);
        assert!(s.block_sizes(1, 8).is_err());
    }

    #[test]
    fn json_defaults_fill_block_fields() {
        let s: NetSpec = serde_json::from_str(
            r#"{"in_channels":4,"blocks":[{"out_channels":8}],"hypercolumn_taps":[0],"mlp_widths":[16,16,4]}"#,
        )
        .unwrap();
        assert_eq!(s.blocks[0], PixelBlockSpec::new(8, true));
        assert_eq!(s.bn_momentum, 0.9);
        assert!(serde_json::from_str::<NetSpec>(r#"{"in_channels":4,"bogus":1}"#).is_err());
    }
}
