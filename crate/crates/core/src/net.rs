//! The trainable restoration model: a small residual convolutional network
//! (1 -> 16 -> 16 -> 1 channels, 3x3 kernels, leaky-ReLU 0.1, reflect
//! padding) with hand-rolled forward/backward passes and an AdamW optimizer.
//!
//! The last conv layer is zero-initialized, so an untrained net is exactly
//! the identity map through the residual skip.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{load_tensor, save_tensor};
use crate::synth::PairedDataset;

pub const HIDDEN: usize = 16;
pub const KSIZE: usize = 3;
const KK: usize = KSIZE * KSIZE;
const LEAKY_SLOPE: f64 = 0.1;

/// All learnable weights; also reused as the gradient/moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub w1: Vec<f64>, // [HIDDEN][1][3][3]
    pub b1: Vec<f64>, // [HIDDEN]
    pub w2: Vec<f64>, // [HIDDEN][HIDDEN][3][3]
    pub b2: Vec<f64>, // [HIDDEN]
    pub w3: Vec<f64>, // [1][HIDDEN][3][3]
    pub b3: Vec<f64>, // [1]
}

impl NetParams {
    pub fn zeros() -> Self {
        Self {
            w1: vec![0.0; HIDDEN * KK],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN * HIDDEN * KK],
            b2: vec![0.0; HIDDEN],
            w3: vec![0.0; HIDDEN * KK],
            b3: vec![0.0; 1],
        }
    }

    /// He initialization scaled for the leaky slope on the first two layers;
    /// the output layer starts at zero so the net begins as the identity.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let std1 = (gain / KK as f64).sqrt();
        for w in p.w1.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *w = std1 * n;
        }
        let std2 = (gain / (KK * HIDDEN) as f64).sqrt();
        for w in p.w2.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *w = std2 * n;
        }
        p
    }

    fn groups(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// `self += scale * other`, elementwise over every parameter group.
    pub fn axpy(&mut self, scale: f64, other: &NetParams) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().into_iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn n_values() -> usize {
        HIDDEN * KK + HIDDEN + HIDDEN * HIDDEN * KK + HIDDEN + HIDDEN * KK + 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::n_values());
        for g in self.groups() {
            out.extend_from_slice(g);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::n_values() {
            return Err(Error::Dimension(format!(
                "flat parameter buffer has {} values, expected {}",
                flat.len(),
                Self::n_values()
            )));
        }
        let mut p = Self::zeros();
        let mut offset = 0;
        for g in p.groups_mut() {
            let len = g.len();
            g.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(p)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Reflect-pad one channel by 1 pixel into `out` of size (h+2)*(w+2).
fn pad_reflect(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let pw = w + 2;
    for pi in 0..h + 2 {
        let si = reflect(pi as isize - 1, h);
        let row = &src[si * w..(si + 1) * w];
        out[pi * pw] = row[reflect(-1, w)];
        out[pi * pw + 1..pi * pw + 1 + w].copy_from_slice(row);
        out[pi * pw + w + 1] = row[reflect(w as isize, w)];
    }
}

/// Adjoint of `pad_reflect`: fold padded-buffer gradients back onto sources.
fn fold_reflect(d_padded: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = w + 2;
    for pi in 0..h + 2 {
        let si = reflect(pi as isize - 1, h);
        for pj in 0..w + 2 {
            let sj = reflect(pj as isize - 1, w);
            dst[si * w + sj] += d_padded[pi * pw + pj];
        }
    }
}

/// `out += conv(padded, w9)` for one (in-channel, out-channel) pair.
fn conv_acc(padded: &[f64], w9: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let pw = w + 2;
    for (idx, &kw) in w9.iter().enumerate() {
        if kw == 0.0 {
            continue;
        }
        let (di, dj) = (idx / KSIZE, idx % KSIZE);
        for i in 0..h {
            let src = &padded[(i + di) * pw + dj..(i + di) * pw + dj + w];
            let dst = &mut out[i * w..(i + 1) * w];
            for (o, &p) in dst.iter_mut().zip(src) {
                *o += kw * p;
            }
        }
    }
}

/// `dw9[idx] += sum_px g[px] * padded[px + off]` for one channel pair.
/// Four independent accumulators fix the summation order while letting the
/// reduction vectorize.
fn weight_grad(padded: &[f64], g: &[f64], h: usize, w: usize, dw9: &mut [f64]) {
    let pw = w + 2;
    for (idx, dw) in dw9.iter_mut().enumerate() {
        let (di, dj) = (idx / KSIZE, idx % KSIZE);
        let mut acc = [0.0f64; 4];
        for i in 0..h {
            let src = &padded[(i + di) * pw + dj..(i + di) * pw + dj + w];
            let gr = &g[i * w..(i + 1) * w];
            let chunks = w / 4;
            for c in 0..chunks {
                let s = &src[c * 4..c * 4 + 4];
                let gg = &gr[c * 4..c * 4 + 4];
                acc[0] += gg[0] * s[0];
                acc[1] += gg[1] * s[1];
                acc[2] += gg[2] * s[2];
                acc[3] += gg[3] * s[3];
            }
            for j in chunks * 4..w {
                acc[0] += gr[j] * src[j];
            }
        }
        *dw += (acc[0] + acc[1]) + (acc[2] + acc[3]);
    }
}

/// Scatter `g` through the kernel into the padded-gradient buffer.
fn scatter_grad(g: &[f64], w9: &[f64], h: usize, w: usize, d_padded: &mut [f64]) {
    let pw = w + 2;
    for (idx, &kw) in w9.iter().enumerate() {
        if kw == 0.0 {
            continue;
        }
        let (di, dj) = (idx / KSIZE, idx % KSIZE);
        for i in 0..h {
            let dst = &mut d_padded[(i + di) * pw + dj..(i + di) * pw + dj + w];
            let gr = &g[i * w..(i + 1) * w];
            for (d, &gv) in dst.iter_mut().zip(gr) {
                *d += kw * gv;
            }
        }
    }
}

struct ForwardCache {
    h: usize,
    w: usize,
    p0: Vec<f64>,        // padded input, 1 channel
    z1: Vec<f64>,        // pre-activation, HIDDEN channels
    p1: Vec<f64>,        // padded a1, HIDDEN channels
    z2: Vec<f64>,        // pre-activation, HIDDEN channels
    p2: Vec<f64>,        // padded a2, HIDDEN channels
    out: Vec<f64>,       // residual output, 1 channel
}

fn lrelu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn lrelu_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn forward_cached(params: &NetParams, y: &Image) -> ForwardCache {
    let (h, w) = (y.height(), y.width());
    let n = h * w;
    let pn = (h + 2) * (w + 2);

    let mut p0 = vec![0.0; pn];
    pad_reflect(y.pixels(), h, w, &mut p0);

    let mut z1 = vec![0.0; HIDDEN * n];
    for oc in 0..HIDDEN {
        let out = &mut z1[oc * n..(oc + 1) * n];
        out.fill(params.b1[oc]);
        conv_acc(&p0, &params.w1[oc * KK..(oc + 1) * KK], h, w, out);
    }

    let mut p1 = vec![0.0; HIDDEN * pn];
    for c in 0..HIDDEN {
        let a1: Vec<f64> = z1[c * n..(c + 1) * n].iter().map(|&z| lrelu(z)).collect();
        pad_reflect(&a1, h, w, &mut p1[c * pn..(c + 1) * pn]);
    }

    let mut z2 = vec![0.0; HIDDEN * n];
    for oc in 0..HIDDEN {
        let out = &mut z2[oc * n..(oc + 1) * n];
        out.fill(params.b2[oc]);
        for ic in 0..HIDDEN {
            conv_acc(
                &p1[ic * pn..(ic + 1) * pn],
                &params.w2[(oc * HIDDEN + ic) * KK..(oc * HIDDEN + ic + 1) * KK],
                h,
                w,
                out,
            );
        }
    }

    let mut p2 = vec![0.0; HIDDEN * pn];
    for c in 0..HIDDEN {
        let a2: Vec<f64> = z2[c * n..(c + 1) * n].iter().map(|&z| lrelu(z)).collect();
        pad_reflect(&a2, h, w, &mut p2[c * pn..(c + 1) * pn]);
    }

    let mut out = vec![params.b3[0]; n];
    for ic in 0..HIDDEN {
        conv_acc(&p2[ic * pn..(ic + 1) * pn], &params.w3[ic * KK..(ic + 1) * KK], h, w, &mut out);
    }
    for (o, &yv) in out.iter_mut().zip(y.pixels()) {
        *o += yv;
    }

    ForwardCache { h, w, p0, z1, p1, z2, p2, out }
}

/// Restore an image: `y + conv3(lrelu(conv2(lrelu(conv1(y)))))`.
pub fn forward(params: &NetParams, y: &Image) -> Image {
    let cache = forward_cached(params, y);
    Image::new(cache.w, cache.h, cache.out).expect("forward preserves dimensions")
}

/// Mean squared error of the restored image against the target.
pub fn loss_restore(params: &NetParams, y: &Image, x: &Image) -> Result<f64> {
    if !y.same_dims(x) {
        return Err(Error::Dimension("input and target dimensions differ".into()));
    }
    let cache = forward_cached(params, y);
    let n = (cache.h * cache.w) as f64;
    Ok(cache
        .out
        .iter()
        .zip(x.pixels())
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / n)
}

/// Exact gradients of one example's MSE with respect to every parameter.
pub fn backward_example(params: &NetParams, y: &Image, x: &Image) -> Result<(f64, NetParams)> {
    if !y.same_dims(x) {
        return Err(Error::Dimension("input and target dimensions differ".into()));
    }
    let cache = forward_cached(params, y);
    let (h, w) = (cache.h, cache.w);
    let n = h * w;
    let pn = (h + 2) * (w + 2);
    let mut grads = NetParams::zeros();

    let mut loss = 0.0;
    let mut g_out = vec![0.0; n];
    for i in 0..n {
        let diff = cache.out[i] - x.pixels()[i];
        loss += diff * diff;
        g_out[i] = 2.0 * diff / n as f64;
    }
    loss /= n as f64;

    // conv3: out channel 0 over HIDDEN inputs.
    grads.b3[0] = g_out.iter().sum();
    let mut d_p2 = vec![0.0; HIDDEN * pn];
    for ic in 0..HIDDEN {
        weight_grad(
            &cache.p2[ic * pn..(ic + 1) * pn],
            &g_out,
            h,
            w,
            &mut grads.w3[ic * KK..(ic + 1) * KK],
        );
        scatter_grad(&g_out, &params.w3[ic * KK..(ic + 1) * KK], h, w, &mut d_p2[ic * pn..(ic + 1) * pn]);
    }

    // Through pad + lrelu into dz2.
    let mut dz2 = vec![0.0; HIDDEN * n];
    for c in 0..HIDDEN {
        let mut da2 = vec![0.0; n];
        fold_reflect(&d_p2[c * pn..(c + 1) * pn], h, w, &mut da2);
        for i in 0..n {
            dz2[c * n + i] = da2[i] * lrelu_grad(cache.z2[c * n + i]);
        }
    }

    // conv2.
    let mut d_p1 = vec![0.0; HIDDEN * pn];
    for oc in 0..HIDDEN {
        let g = &dz2[oc * n..(oc + 1) * n];
        grads.b2[oc] = g.iter().sum();
        for ic in 0..HIDDEN {
            weight_grad(
                &cache.p1[ic * pn..(ic + 1) * pn],
                g,
                h,
                w,
                &mut grads.w2[(oc * HIDDEN + ic) * KK..(oc * HIDDEN + ic + 1) * KK],
            );
            scatter_grad(
                g,
                &params.w2[(oc * HIDDEN + ic) * KK..(oc * HIDDEN + ic + 1) * KK],
                h,
                w,
                &mut d_p1[ic * pn..(ic + 1) * pn],
            );
        }
    }

    let mut dz1 = vec![0.0; HIDDEN * n];
    for c in 0..HIDDEN {
        let mut da1 = vec![0.0; n];
        fold_reflect(&d_p1[c * pn..(c + 1) * pn], h, w, &mut da1);
        for i in 0..n {
            dz1[c * n + i] = da1[i] * lrelu_grad(cache.z1[c * n + i]);
        }
    }

    // conv1.
    for oc in 0..HIDDEN {
        let g = &dz1[oc * n..(oc + 1) * n];
        grads.b1[oc] = g.iter().sum();
        weight_grad(&cache.p0, g, h, w, &mut grads.w1[oc * KK..(oc + 1) * KK]);
    }

    Ok((loss, grads))
}

/// Per-example losses and gradients, computed in parallel but collected in
/// input order so downstream reductions stay bitwise deterministic.
pub fn example_grads(
    params: &NetParams,
    examples: &[(&Image, &Image)],
) -> Result<Vec<(f64, NetParams)>> {
    examples
        .par_iter()
        .map(|(y, x)| backward_example(params, y, x))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW state: first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub step: u64,
    pub m: NetParams,
    pub v: NetParams,
    pub cfg: OptConfig,
}

impl OptState {
    pub fn new(cfg: OptConfig) -> Self {
        Self { step: 0, m: NetParams::zeros(), v: NetParams::zeros(), cfg }
    }

    /// Decoupled-weight-decay Adam update with bias correction.
    pub fn step(&mut self, params: &mut NetParams, grads: &NetParams) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .groups_mut()
            .into_iter()
            .zip(grads.groups())
            .zip(self.m.groups_mut())
            .zip(self.v.groups_mut())
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }
}

/// Training outcome: final parameters plus the per-iteration loss log.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: NetParams,
    pub loss_curve: Vec<f64>,
}

/// Uniform-with-replacement batches, AdamW updates; deterministic per seed.
pub fn train<R: Rng + ?Sized>(
    params: &NetParams,
    dataset: &PairedDataset,
    iters: usize,
    batch_size: usize,
    opt_cfg: OptConfig,
    rng: &mut R,
) -> Result<TrainResult> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut params = params.clone();
    let mut opt = OptState::new(opt_cfg);
    let mut loss_curve = Vec::with_capacity(iters);
    let n = dataset.len();
    for iter in 0..iters {
        let batch: Vec<(&Image, &Image)> = (0..batch_size)
            .map(|_| {
                let i = rng.random_range(0..n);
                let (y, x) = &dataset.pairs()[i];
                (y, x)
            })
            .collect();
        let per_example = example_grads(&params, &batch)?;
        let mut grads = NetParams::zeros();
        let mut loss = 0.0;
        let scale = 1.0 / batch_size as f64;
        for (l, g) in &per_example {
            loss += scale * l;
            grads.axpy(scale, g);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step: iter, context: "train".into() });
        }
        opt.step(&mut params, &grads);
        loss_curve.push(loss);
    }
    Ok(TrainResult { params, loss_curve })
}

/// JSON header for a network checkpoint; the flat parameter block (order
/// w1, b1, w2, b2, w3, b3) lives in a sibling tensor file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetHeader {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub seed: u64,
    pub iterations: usize,
    pub params_path: String,
}

fn params_sibling(json_path: &Path) -> Result<(PathBuf, String)> {
    let stem = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {json_path:?}")))?;
    let name = format!("{stem}.params.lgt");
    Ok((json_path.with_file_name(&name), name))
}

pub fn save_net(
    json_path: &Path,
    params: &NetParams,
    height: usize,
    width: usize,
    seed: u64,
    iterations: usize,
) -> Result<()> {
    let flat: Vec<f32> = params.flatten().iter().map(|&v| v as f32).collect();
    let (ppath, pname) = params_sibling(json_path)?;
    save_tensor(&ppath, &[flat.len() as u32], &flat)?;
    let header = NetHeader {
        height,
        width,
        hidden: HIDDEN,
        kernel: KSIZE,
        seed,
        iterations,
        params_path: pname,
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::InvalidArgument(format!("serialize net header: {e}")))?;
    std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
}

pub fn load_net(json_path: &Path) -> Result<(NetParams, NetHeader)> {
    if !json_path.exists() {
        return Err(Error::MissingArtifact { path: json_path.to_path_buf() });
    }
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let header: NetHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.hidden != HIDDEN || header.kernel != KSIZE {
        return Err(Error::Format {
            path: json_path.to_path_buf(),
            reason: format!(
                "checkpoint architecture {}ch/{}k does not match build ({HIDDEN}ch/{KSIZE}k)",
                header.hidden, header.kernel
            ),
        });
    }
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let (_, flat) = load_tensor(&dir.join(&header.params_path))?;
    let params = NetParams::from_flat(&flat.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Fully independent per-pixel reference forward pass.
    fn naive_forward(params: &NetParams, y: &Image) -> Vec<f64> {
        let (h, w) = (y.height(), y.width());
        let at = |buf: &Vec<Vec<f64>>, c: usize, i: isize, j: isize| {
            buf[c][reflect(i, h) * w + reflect(j, w)]
        };
        let lr = |z: f64| if z >= 0.0 { z } else { 0.1 * z };
        let input = vec![y.pixels().to_vec()];
        let mut a1 = vec![vec![0.0; h * w]; HIDDEN];
        for oc in 0..HIDDEN {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = params.b1[oc];
                    for di in 0..3isize {
                        for dj in 0..3isize {
                            acc += params.w1[oc * 9 + (di * 3 + dj) as usize]
                                * at(&input, 0, i as isize + di - 1, j as isize + dj - 1);
                        }
                    }
                    a1[oc][i * w + j] = lr(acc);
                }
            }
        }
        let mut a2 = vec![vec![0.0; h * w]; HIDDEN];
        for oc in 0..HIDDEN {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = params.b2[oc];
                    for ic in 0..HIDDEN {
                        for di in 0..3isize {
                            for dj in 0..3isize {
                                acc += params.w2[(oc * HIDDEN + ic) * 9 + (di * 3 + dj) as usize]
                                    * at(&a1, ic, i as isize + di - 1, j as isize + dj - 1);
                            }
                        }
                    }
                    a2[oc][i * w + j] = lr(acc);
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = params.b3[0] + y.get(i, j);
                for ic in 0..HIDDEN {
                    for di in 0..3isize {
                        for dj in 0..3isize {
                            acc += params.w3[ic * 9 + (di * 3 + dj) as usize]
                                * at(&a2, ic, i as isize + di - 1, j as isize + dj - 1);
                        }
                    }
                }
                out[i * w + j] = acc;
            }
        }
        out
    }

    #[test]
    fn zero_params_are_the_identity() {
        let params = NetParams::zeros();
        let y = random_image(16, 16, 1);
        let out = forward(&params, &y);
        assert!(y
            .pixels()
            .iter()
            .zip(out.pixels())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_init_last_layer_is_identity_after_he_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = NetParams::init(&mut rng);
        let y = random_image(16, 16, 3);
        let out = forward(&params, &y);
        for (a, b) in y.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut params = NetParams::init(&mut rng);
        for w in params.w3.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *w = 0.2 * n;
        }
        params.b3[0] = 0.05;
        for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
            let n: f64 = rng.sample(StandardNormal);
            *b = 0.1 * n;
        }
        let y = random_image(8, 8, 5);
        let fast = forward(&params, &y);
        let slow = naive_forward(&params, &y);
        for (a, b) in fast.pixels().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(fast.width(), y.width());
        assert_eq!(fast.height(), y.height());
    }

    #[test]
    fn loss_closed_forms() {
        let params = NetParams::zeros();
        let y = random_image(8, 8, 6);
        assert_eq!(loss_restore(&params, &y, &y).unwrap(), 0.0);
        let mut shifted = y.clone();
        for p in shifted.pixels_mut() {
            *p += 0.1;
        }
        let l = loss_restore(&params, &y, &shifted).unwrap();
        assert!((l - 0.01).abs() < 1e-12, "loss {l}");
    }

    #[test]
    fn gradient_vanishes_at_the_minimum() {
        let params = NetParams::zeros();
        let y = random_image(8, 8, 7);
        let (loss, grads) = backward_example(&params, &y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.groups().into_iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut params = NetParams::init(&mut rng);
        for w in params.w3.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *w = 0.3 * n;
        }
        let y = random_image(8, 8, 9);
        let x = random_image(8, 8, 10);
        let (_, grads) = backward_example(&params, &y, &x).unwrap();
        let h = 1e-5;
        // A few coordinates from each group.
        let probes: &[(usize, usize)] = &[(0, 3), (1, 5), (2, 100), (3, 2), (4, 77), (5, 0)];
        for &(gi, idx) in probes {
            let analytic = grads.groups()[gi][idx];
            let mut plus = params.clone();
            plus.groups_mut()[gi][idx] += h;
            let mut minus = params.clone();
            minus.groups_mut()[gi][idx] -= h;
            let fd = (loss_restore(&plus, &y, &x).unwrap() - loss_restore(&minus, &y, &x).unwrap())
                / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "group {gi} idx {idx}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = NetParams::init(&mut rng);
        let pairs: Vec<(Image, Image)> = (0..4)
            .map(|i| (random_image(8, 8, 20 + i), random_image(8, 8, 30 + i)))
            .collect();
        let refs: Vec<(&Image, &Image)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let per = example_grads(&params, &refs).unwrap();
        let mut mean = NetParams::zeros();
        for (_, g) in &per {
            mean.axpy(0.25, g);
        }
        // Same reduction computed serially in one pass.
        let mut serial = NetParams::zeros();
        for (y, x) in &refs {
            let (_, g) = backward_example(&params, y, x).unwrap();
            serial.axpy(0.25, &g);
        }
        for (a, b) in mean.groups().into_iter().zip(serial.groups()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_identities() {
        // Zero gradient, zero decay: parameters unchanged.
        let mut params = NetParams::zeros();
        params.w1[0] = 0.5;
        let mut opt = OptState::new(OptConfig { weight_decay: 0.0, ..Default::default() });
        let before = params.clone();
        opt.step(&mut params, &NetParams::zeros());
        assert_eq!(params, before);

        // First step with gradient g: -lr * g / (|g| + eps).
        let cfg = OptConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut params = NetParams::zeros();
        let mut opt = OptState::new(cfg);
        let mut grads = NetParams::zeros();
        grads.w1[3] = 0.7;
        grads.w2[10] = -0.2;
        opt.step(&mut params, &grads);
        let expect = |g: f64| -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((params.w1[3] - expect(0.7)).abs() < 1e-12);
        assert!((params.w2[10] - expect(-0.2)).abs() < 1e-12);

        // Decay only: shrink by (1 - lr * wd) per step.
        let cfg = OptConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut params = NetParams::zeros();
        params.w3[5] = 2.0;
        let mut opt = OptState::new(cfg);
        opt.step(&mut params, &NetParams::zeros());
        assert!((params.w3[5] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn train_is_deterministic_and_zero_iters_is_noop() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let params = NetParams::init(&mut rng);
        let pairs: Vec<(Image, Image)> = (0..8)
            .map(|i| (random_image(8, 8, 50 + i), random_image(8, 8, 60 + i)))
            .collect();
        let ds = PairedDataset::new(pairs).unwrap();
        let mut r0 = ChaCha12Rng::seed_from_u64(1);
        let out0 = train(&params, &ds, 0, 4, OptConfig::default(), &mut r0).unwrap();
        assert_eq!(out0.params, params);
        assert!(out0.loss_curve.is_empty());

        let mut ra = ChaCha12Rng::seed_from_u64(2);
        let mut rb = ChaCha12Rng::seed_from_u64(2);
        let a = train(&params, &ds, 20, 4, OptConfig::default(), &mut ra).unwrap();
        let b = train(&params, &ds, 20, 4, OptConfig::default(), &mut rb).unwrap();
        for (ga, gb) in a.params.groups().into_iter().zip(b.params.groups()) {
            assert!(ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn checkpoint_round_trips_at_f32_resolution() {
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let params = NetParams::init(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_net(&path, &params, 32, 32, 70, 123).unwrap();
        let (loaded, header) = load_net(&path).unwrap();
        assert_eq!(header.iterations, 123);
        for (a, b) in loaded.flatten().iter().zip(params.flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            load_net(&dir.path().join("missing.json")),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
