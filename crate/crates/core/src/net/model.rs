use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BatchNormState, BnCache, BnMode, Dims4, PixelRef};
use super::spec::NetSpec;
use super::tensor::Tensor;
use super::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelBlock {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub bn: Option<BatchNormState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Batch-normalized hypercolumn pixel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelNet {
    spec: NetSpec,
    pub blocks: Vec<PixelBlock>,
    pub mlp: Vec<Dense>,
}

fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let vals = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, vals).expect("consistent shape")
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    input: Tensor,
    blocks: Vec<BlockCache>,
    pixels: Vec<PixelRef>,
    footprints: Vec<Vec<layers::Bilinear>>,
    mlp_inputs: Vec<Tensor>,
    mlp_outputs: Vec<Tensor>,
    pub logits: Tensor,
}

struct BlockCache {
    input: Tensor,
    pre_bn_dims: Dims4,
    bn: Option<BnCache>,
    activation: Tensor,
    pool: Option<(usize, Vec<usize>)>,
}

impl ForwardCache {
    /// Batch-norm statistics produced in train mode, one entry per block.
    pub fn bn_caches(&self) -> impl Iterator<Item = Option<&BnCache>> {
        self.blocks.iter().map(|b| b.bn.as_ref())
    }

    /// ReLU on/off bits and max-pool winners of this pass, packed into words.
    /// Two passes share a pattern iff they sit on the same linear piece.
    pub fn decision_pattern(&self) -> Vec<u64> {
        fn pack(out: &mut Vec<u64>, vals: &[f64]) {
            for chunk in vals.chunks(64) {
                let mut word = 0u64;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > 0.0 {
                        word |= 1 << i;
                    }
                }
                out.push(word);
            }
        }
        let mut out = Vec::new();
        for b in &self.blocks {
            pack(&mut out, b.activation.values());
            if let Some((_, arg)) = &b.pool {
                out.extend(arg.iter().map(|&i| i as u64));
            }
        }
        if let Some((_, hidden)) = self.mlp_outputs.split_last() {
            for t in hidden {
                pack(&mut out, t.values());
            }
        }
        out
    }

    /// Name of the first tensor holding a non-finite value, in forward order.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.input.is_finite() {
            return Some("input".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !b.activation.is_finite() {
                return Some(format!("block{i}.activation"));
            }
        }
        for (i, t) in self.mlp_outputs.iter().enumerate() {
            if !t.is_finite() {
                return Some(format!("mlp{i}.output"));
            }
        }
        None
    }
}

/// Parameter gradients are accumulated into the tensors; this carries the rest.
pub struct BackwardResult {
    pub input_grad: Option<Vec<f64>>,
}

impl PixelNet {
    /// He-normal conv/dense weights, zero biases, gamma = 1, beta = 0.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut cin = spec.in_channels;
        for b in &spec.blocks {
            blocks.push(PixelBlock {
                conv_w: he_normal(vec![b.out_channels, cin, 3, 3], cin * 9, rng),
                conv_b: Tensor::zeros(vec![b.out_channels]),
                bn: b
                    .batch_norm
                    .then(|| BatchNormState::new(b.out_channels, spec.bn_eps, spec.bn_momentum)),
            });
            cin = b.out_channels;
        }
        let mut mlp = Vec::with_capacity(3);
        let mut fin = spec.hypercolumn_width();
        for &w in &spec.mlp_widths {
            mlp.push(Dense {
                w: he_normal(vec![fin, w], fin, rng),
                b: Tensor::zeros(vec![w]),
            });
            fin = w;
        }
        Ok(Self { spec, blocks, mlp })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Learned parameters in declaration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), &b.conv_w));
            out.push((format!("block{i}.conv.bias"), &b.conv_b));
            if let Some(bn) = &b.bn {
                out.push((format!("block{i}.bn.gamma"), &bn.gamma));
                out.push((format!("block{i}.bn.beta"), &bn.beta));
            }
        }
        for (i, d) in self.mlp.iter().enumerate() {
            out.push((format!("mlp{i}.weight"), &d.w));
            out.push((format!("mlp{i}.bias"), &d.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv_w);
            out.push(&mut b.conv_b);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        for d in &mut self.mlp {
            out.push(&mut d.w);
            out.push(&mut d.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// True when every batch-norm layer has usable running statistics.
    pub fn bn_ready(&self) -> bool {
        self.blocks.iter().filter_map(|b| b.bn.as_ref()).all(|bn| bn.initialized)
    }

    /// Runs the network on `input` (B, C, H, W) and classifies the given pixels.
    /// Running statistics are not touched; see [`PixelNet::update_bn_stats`].
    pub fn forward(&self, input: &Tensor, pixels: &[PixelRef], mode: BnMode) -> Result<ForwardCache, NetError> {
        let d = Dims4::from_shape(input.shape())?;
        if d.c != self.spec.in_channels {
            return Err(NetError::Shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, d.c
            )));
        }
        self.spec.block_sizes(d.h, d.w)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = input.clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            let z = layers::conv2d_forward(&x, &blk.conv_w, &blk.conv_b)?;
            let pre_bn_dims = Dims4::from_shape(z.shape())?;
            let (z, bn) = match &blk.bn {
                Some(state) => {
                    let (y, c) = layers::batchnorm_forward(&z, state, mode)?;
                    (y, Some(c))
                }
                None => (z, None),
            };
            let a = layers::relu_forward(&z);
            let (next, pool) = if self.spec.pool_after.contains(&i) {
                let (p, arg) = layers::maxpool2_forward(&a)?;
                (p, Some((a.len(), arg)))
            } else {
                (a.clone(), None)
            };
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, next),
                pre_bn_dims,
                bn,
                activation: a,
                pool,
            });
        }
        let taps: Vec<&Tensor> = self.spec.hypercolumn_taps.iter().map(|&i| &blocks[i].activation).collect();
        let factors: Vec<usize> = self.spec.hypercolumn_taps.iter().map(|&i| self.spec.downscale(i)).collect();
        let (hc, footprints) = layers::hypercolumn_forward(&taps, &factors, pixels, (d.h, d.w))?;

        let mut mlp_inputs = Vec::with_capacity(3);
        let mut mlp_outputs = Vec::with_capacity(3);
        let mut h = hc;
        for (i, dense) in self.mlp.iter().enumerate() {
            let mut y = layers::linear_forward(&h, &dense.w, &dense.b)?;
            if i + 1 < self.mlp.len() {
                y = layers::relu_forward(&y);
            }
            mlp_inputs.push(std::mem::replace(&mut h, y.clone()));
            mlp_outputs.push(y);
        }
        Ok(ForwardCache {
            input: input.clone(),
            blocks,
            pixels: pixels.to_vec(),
            footprints,
            mlp_inputs,
            mlp_outputs,
            logits: h,
        })
    }

    /// Backpropagates `grad_logits` through the cached pass, accumulating into
    /// every parameter's gradient buffer.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &[f64], want_input_grad: bool) -> BackwardResult {
        let n_mlp = self.mlp.len();
        let mut g = grad_logits.to_vec();
        for i in (0..n_mlp).rev() {
            if i + 1 < n_mlp {
                g = layers::relu_backward(cache.mlp_outputs[i].values(), &g);
            }
            let dense = &mut self.mlp[i];
            g = layers::linear_backward(&cache.mlp_inputs[i], &mut dense.w, &mut dense.b, &g);
        }

        let tap_dims: Vec<Dims4> = self
            .spec
            .hypercolumn_taps
            .iter()
            .map(|&i| Dims4::from_shape(cache.blocks[i].activation.shape()).expect("4D"))
            .collect();
        let tap_grads = layers::hypercolumn_backward(&tap_dims, &cache.footprints, &cache.pixels, &g);

        // Gradient w.r.t. each block's output (post-pool), flowing backward.
        let mut carried: Option<Vec<f64>> = None;
        let mut input_grad = None;
        for i in (0..self.blocks.len()).rev() {
            let bc = &cache.blocks[i];
            // d activation = pool-backward(carried) + tap gradient
            let mut ga = match (&bc.pool, carried.take()) {
                (Some((len, arg)), Some(c)) => layers::maxpool2_backward(*len, arg, &c),
                (None, Some(c)) => c,
                (_, None) => vec![0.0; bc.activation.len()],
            };
            if let Some(k) = self.spec.hypercolumn_taps.iter().position(|&t| t == i) {
                for (a, t) in ga.iter_mut().zip(&tap_grads[k]) {
                    *a += t;
                }
            }
            let mut gz = layers::relu_backward(bc.activation.values(), &ga);
            let blk = &mut self.blocks[i];
            if let (Some(state), Some(bn)) = (blk.bn.as_mut(), bc.bn.as_ref()) {
                gz = layers::batchnorm_backward(bc.pre_bn_dims, state, bn, &gz);
            }
            let need_input = i > 0 || want_input_grad;
            let gi = layers::conv2d_backward(&bc.input, &mut blk.conv_w, &mut blk.conv_b, &gz, need_input);
            if i == 0 {
                input_grad = gi;
            } else {
                carried = gi;
            }
        }
        BackwardResult { input_grad }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_bn_stats(&mut self, cache: &ForwardCache) {
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let (Some(state), Some(c)) = (blk.bn.as_mut(), bc.bn.as_ref()) {
                if c.mode == BnMode::Train {
                    state.update_running(c);
                }
            }
        }
    }

    /// Logits for the given pixels, batch norm in eval mode.
    pub fn predict_logits(&self, input: &Tensor, pixels: &[PixelRef]) -> Result<Tensor, NetError> {
        if !self.bn_ready() {
            return Err(NetError::Untrained(
                "batch-norm running statistics are uninitialized; train the model first".into(),
            ));
        }
        Ok(self.forward(input, pixels, BnMode::Eval)?.logits)
    }
}

/// Mean softmax cross-entropy of a pass together with its logit gradient.
pub fn loss_and_grad(cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Vec<f64>), NetError> {
    layers::softmax_xent(&cache.logits, labels)
}
