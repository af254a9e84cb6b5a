//! Forward/backward kernels. Activations are NCHW f64 buffers; every backward
//! takes the cache its forward produced.

use super::tensor::Tensor;
use super::NetError;

/// Extents of an NCHW activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub fn from_shape(shape: &[usize]) -> Result<Self, NetError> {
        match *shape {
            [b, c, h, w] => Ok(Self { b, c, h, w }),
            _ => Err(NetError::Shape(format!("expected a 4D tensor, got {shape:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.b, self.c, self.h, self.w]
    }
}

/// Valid output span for a kernel tap at offset `d ∈ {-1, 0, 1}` along an axis of length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// 3×3 cross-correlation, stride 1, zero padding 1. Weights are `(cout, cin, 3, 3)`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    let d = Dims4::from_shape(input.shape())?;
    let (cout, cin) = match *weights.shape() {
        [co, ci, 3, 3] => (co, ci),
        ref s => return Err(NetError::Shape(format!("conv weights must be (cout, cin, 3, 3), got {s:?}"))),
    };
    if cin != d.c {
        return Err(NetError::Shape(format!(
            "conv expects {cin} input channels, input has {}",
            d.c
        )));
    }
    if bias.len() != cout {
        return Err(NetError::Shape(format!("conv bias has {} entries, expected {cout}", bias.len())));
    }
    let od = Dims4::new(d.b, cout, d.h, d.w);
    let mut out = vec![0.0; od.len()];
    let x = input.values();
    let wt = weights.values();
    let plane = d.plane();
    for b in 0..d.b {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bias.values()[co]);
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * plane..][..plane];
                let k = &wt[(co * cin + ci) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, d.h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, d.w);
                        let kv = k[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * d.w + x0..y * d.w + x1];
                            let irow = &xin[sy * d.w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += kv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(od.shape(), out)
}

/// Gradients of a 3×3 same-padding convolution. Returns `d input` when
/// `want_input` is set; weight and bias gradients are accumulated into the tensors.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &mut Tensor,
    bias: &mut Tensor,
    grad_out: &[f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let d = Dims4::from_shape(input.shape()).expect("validated in forward");
    let cout = weights.shape()[0];
    let cin = d.c;
    let plane = d.plane();
    let x = input.values();
    let mut gin = want_input.then(|| vec![0.0; d.len()]);
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; cout];
    let wt = weights.values().to_vec();
    for b in 0..d.b {
        for co in 0..cout {
            let go = &grad_out[(b * cout + co) * plane..][..plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * plane..][..plane];
                let kidx = (co * cin + ci) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, d.h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, d.w);
                        let kv = wt[kidx + ky * 3 + kx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &go[y * d.w + x0..y * d.w + x1];
                            let off = sy * d.w + (x0 as isize + dx) as usize;
                            let irow = &xin[off..off + (x1 - x0)];
                            acc += grow.iter().zip(irow).map(|(g, i)| g * i).sum::<f64>();
                            if let Some(gi) = gin.as_mut() {
                                let girow = &mut gi[(b * cin + ci) * plane + off..][..x1 - x0];
                                for (gv, g) in girow.iter_mut().zip(grow) {
                                    *gv += kv * g;
                                }
                            }
                        }
                        gw[kidx + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    weights.accumulate_grad(&gw);
    bias.accumulate_grad(&gb);
    gin
}

/// Batch-normalization parameters and inference statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    /// Whether running statistics hold usable values (after training or explicit init).
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Marks the current running statistics as usable without any training update.
    pub fn init_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        self.running_mean = mean;
        self.running_var = var;
        self.initialized = true;
    }

    /// Exponential moving average update from a training batch's statistics.
    /// Variance is stored unbiased (n / (n − 1)).
    pub fn update_running(&mut self, cache: &BnCache) {
        let n = cache.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let var = cache.var[c] * unbias;
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * cache.mean[c];
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * var;
        }
        self.initialized = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values needed by the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
    pub mode: BnMode,
}

pub fn batchnorm_forward(input: &Tensor, state: &BatchNormState, mode: BnMode) -> Result<(Tensor, BnCache), NetError> {
    let d = Dims4::from_shape(input.shape())?;
    if d.c != state.channels() {
        return Err(NetError::Shape(format!(
            "batch norm has {} channels, input has {}",
            state.channels(),
            d.c
        )));
    }
    let count = d.b * d.plane();
    let x = input.values();
    let plane = d.plane();
    let (mean, var) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(NetError::Shape(
                    "train-mode batch norm needs at least 2 values per channel".into(),
                ));
            }
            let mut mean = vec![0.0; d.c];
            let mut var = vec![0.0; d.c];
            for c in 0..d.c {
                let vals = (0..d.b).flat_map(|b| &x[(b * d.c + c) * plane..][..plane]);
                let m = vals.clone().sum::<f64>() / count as f64;
                let v = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                mean[c] = m;
                var[c] = v;
            }
            (mean, var)
        }
        BnMode::Eval => {
            if !state.initialized {
                return Err(NetError::Untrained(
                    "batch-norm running statistics were never updated or initialized".into(),
                ));
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut out = vec![0.0; d.len()];
    let (g, bt) = (state.gamma.values(), state.beta.values());
    for b in 0..d.b {
        for c in 0..d.c {
            let base = (b * d.c + c) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                out[i] = g[c] * xh + bt[c];
            }
        }
    }
    Ok((
        Tensor::new(d.shape(), out)?,
        BnCache {
            xhat,
            mean,
            var,
            inv_std,
            count,
            mode,
        },
    ))
}

/// Batch-norm backward. In train mode the batch statistics depend on the input,
/// which couples every element of a channel.
pub fn batchnorm_backward(dims: Dims4, state: &mut BatchNormState, cache: &BnCache, grad_out: &[f64]) -> Vec<f64> {
    let plane = dims.plane();
    let n = cache.count as f64;
    let mut gin = vec![0.0; dims.len()];
    let mut dgamma = vec![0.0; dims.c];
    let mut dbeta = vec![0.0; dims.c];
    let gamma = state.gamma.values().to_vec();
    for c in 0..dims.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..dims.b {
            let base = (b * dims.c + c) * plane;
            for i in base..base + plane {
                sum_dy += grad_out[i];
                sum_dy_xhat += grad_out[i] * cache.xhat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gamma[c];
        let is = cache.inv_std[c];
        for b in 0..dims.b {
            let base = (b * dims.c + c) * plane;
            for i in base..base + plane {
                gin[i] = match cache.mode {
                    BnMode::Train => g * is * (grad_out[i] - sum_dy / n - cache.xhat[i] * sum_dy_xhat / n),
                    BnMode::Eval => g * is * grad_out[i],
                };
            }
        }
    }
    state.gamma.accumulate_grad(&dgamma);
    state.beta.accumulate_grad(&dbeta);
    gin
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let vals = input.values().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    Tensor::new(input.shape().to_vec(), vals).expect("same shape")
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2×2 max-pool with stride 2 (odd trailing rows/columns dropped).
/// Returns the pooled tensor and, per output, the flat input index it came from.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>), NetError> {
    let d = Dims4::from_shape(input.shape())?;
    let (oh, ow) = (d.h / 2, d.w / 2);
    if oh == 0 || ow == 0 {
        return Err(NetError::Shape(format!("cannot pool a {}×{} map", d.h, d.w)));
    }
    let od = Dims4::new(d.b, d.c, oh, ow);
    let x = input.values();
    let mut out = Vec::with_capacity(od.len());
    let mut argmax = Vec::with_capacity(od.len());
    for bc in 0..d.b * d.c {
        let base = bc * d.plane();
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * d.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * d.w + 2 * xo + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(od.shape(), out)?, argmax))
}

pub fn maxpool2_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gin[i] += g;
    }
    gin
}

/// Interpolation footprint of one sample on one map: four flat offsets within a
/// plane and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub idx: [usize; 4],
    pub weight: [f64; 4],
}

/// Bilinear footprint at map-space coordinate (`row`, `col`), clamped to the map.
pub fn bilinear_footprint(h: usize, w: usize, row: f64, col: f64) -> Bilinear {
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    Bilinear {
        idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        weight: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
    }
}

/// Bilinear value of a single `h × w` plane at map-space (`row`, `col`).
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, row: f64, col: f64) -> f64 {
    let fp = bilinear_footprint(h, w, row, col);
    fp.idx.iter().zip(fp.weight).map(|(&i, wt)| plane[i] * wt).sum()
}

/// Maps an input-resolution pixel coordinate onto a map downscaled by `factor`
/// (half-pixel-centre convention).
#[inline]
pub fn to_map_coord(coord: f64, factor: usize) -> f64 {
    (coord + 0.5) / factor as f64 - 0.5
}

/// Sampling positions for one hypercolumn pass: `(image index, row, col)` in
/// input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRef {
    pub image: usize,
    pub row: f64,
    pub col: f64,
}

/// Builds `(P, ΣC)` hypercolumns by sampling every tapped map at every pixel.
/// `maps[k]` must be downscaled by `factors[k]` relative to an `h × w` input.
pub fn hypercolumn_forward(
    maps: &[&Tensor],
    factors: &[usize],
    pixels: &[PixelRef],
    input_hw: (usize, usize),
) -> Result<(Tensor, Vec<Vec<Bilinear>>), NetError> {
    let dims: Vec<Dims4> = maps.iter().map(|m| Dims4::from_shape(m.shape())).collect::<Result<_, _>>()?;
    let width: usize = dims.iter().map(|d| d.c).sum();
    let (h, w) = input_hw;
    for p in pixels {
        if !(p.row >= 0.0 && p.row <= (h - 1) as f64 && p.col >= 0.0 && p.col <= (w - 1) as f64) {
            return Err(NetError::Coordinate(format!(
                "pixel ({}, {}) lies outside the {h}×{w} image",
                p.row, p.col
            )));
        }
        if let Some(d) = dims.first() {
            if p.image >= d.b {
                return Err(NetError::Coordinate(format!("image index {} out of range", p.image)));
            }
        }
    }
    let mut out = vec![0.0; pixels.len() * width];
    let mut footprints = Vec::with_capacity(maps.len());
    let mut offset = 0;
    for ((map, d), &factor) in maps.iter().zip(&dims).zip(factors) {
        let vals = map.values();
        let fps: Vec<Bilinear> = pixels
            .iter()
            .map(|p| bilinear_footprint(d.h, d.w, to_map_coord(p.row, factor), to_map_coord(p.col, factor)))
            .collect();
        for (pi, (p, fp)) in pixels.iter().zip(&fps).enumerate() {
            let row = &mut out[pi * width + offset..][..d.c];
            for (c, slot) in row.iter_mut().enumerate() {
                let plane = &vals[(p.image * d.c + c) * d.plane()..][..d.plane()];
                *slot = fp.idx.iter().zip(fp.weight).map(|(&i, wt)| plane[i] * wt).sum();
            }
        }
        footprints.push(fps);
        offset += d.c;
    }
    Ok((Tensor::new(vec![pixels.len(), width], out)?, footprints))
}

/// Scatters hypercolumn gradients back onto each tapped map.
pub fn hypercolumn_backward(
    map_dims: &[Dims4],
    footprints: &[Vec<Bilinear>],
    pixels: &[PixelRef],
    grad_out: &[f64],
) -> Vec<Vec<f64>> {
    let width: usize = map_dims.iter().map(|d| d.c).sum();
    let mut grads: Vec<Vec<f64>> = map_dims.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut offset = 0;
    for ((d, fps), g) in map_dims.iter().zip(footprints).zip(grads.iter_mut()) {
        for (pi, (p, fp)) in pixels.iter().zip(fps).enumerate() {
            let gr = &grad_out[pi * width + offset..][..d.c];
            for (c, &gv) in gr.iter().enumerate() {
                let base = (p.image * d.c + c) * d.plane();
                for (&i, wt) in fp.idx.iter().zip(fp.weight) {
                    g[base + i] += gv * wt;
                }
            }
        }
        offset += d.c;
    }
    grads
}

/// Fully connected layer; weights stored `(in, out)`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    let (p, fin) = match *input.shape() {
        [p, f] => (p, f),
        ref s => return Err(NetError::Shape(format!("dense input must be 2D, got {s:?}"))),
    };
    let (win, wout) = match *weights.shape() {
        [i, o] => (i, o),
        ref s => return Err(NetError::Shape(format!("dense weights must be 2D, got {s:?}"))),
    };
    if win != fin || bias.len() != wout {
        return Err(NetError::Shape(format!(
            "dense layer expects {win} inputs and {wout} biases, got {fin} inputs and {} biases",
            bias.len()
        )));
    }
    let x = input.values();
    let wt = weights.values();
    let mut out = vec![0.0; p * wout];
    for (xi, orow) in x.chunks_exact(fin).zip(out.chunks_exact_mut(wout)) {
        orow.copy_from_slice(bias.values());
        for (f, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, w) in orow.iter_mut().zip(&wt[f * wout..(f + 1) * wout]) {
                *o += xv * w;
            }
        }
    }
    Tensor::new(vec![p, wout], out)
}

/// Returns `d input`; accumulates weight and bias gradients.
pub fn linear_backward(input: &Tensor, weights: &mut Tensor, bias: &mut Tensor, grad_out: &[f64]) -> Vec<f64> {
    let fin = input.shape()[1];
    let wout = weights.shape()[1];
    let x = input.values();
    let mut gin = vec![0.0; x.len()];
    let mut gb = vec![0.0; wout];
    {
        let (wv, gw) = weights.values_and_grad_mut();
        for ((xi, gi), go) in x
            .chunks_exact(fin)
            .zip(gin.chunks_exact_mut(fin))
            .zip(grad_out.chunks_exact(wout))
        {
            for (b, g) in gb.iter_mut().zip(go) {
                *b += g;
            }
            for f in 0..fin {
                let wrow = &wv[f * wout..(f + 1) * wout];
                gi[f] = wrow.iter().zip(go).map(|(w, g)| w * g).sum();
                let xv = xi[f];
                if xv != 0.0 {
                    for (gwv, g) in gw[f * wout..(f + 1) * wout].iter_mut().zip(go) {
                        *gwv += xv * g;
                    }
                }
            }
        }
    }
    bias.accumulate_grad(&gb);
    gin
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>), NetError> {
    let (p, k) = match *logits.shape() {
        [p, k] => (p, k),
        ref s => return Err(NetError::Shape(format!("logits must be 2D, got {s:?}"))),
    };
    if labels.len() != p {
        return Err(NetError::Shape(format!("{} labels for {p} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NetError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = vec![0.0; p * k];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.values().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() / p as f64;
        }
        g[label] -= 1.0 / p as f64;
    }
    Ok((loss / p as f64, grad))
}
