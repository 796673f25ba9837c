//! Procedural clean-image synthesis and the weak/strong synthetic
//! degradation pipelines that define the ID and OOD domains.
//!
//! Degradation is blur followed by additive Gaussian noise followed by
//! signal-dependent shot noise; every random draw is recorded so a dataset
//! manifest can reproduce the exact pipeline.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode, Basis, Image};
use crate::oracle::{Condition, GmmComponent, GmmPrior};

/// Parameter ranges for one degradation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kernel_sizes: Vec<usize>,
    pub blur_sigma_range: [f64; 2],
    pub gauss_noise_range: [f64; 2],
    pub poisson_scale_range: [f64; 2],
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::InvalidArgument("kernel size set is empty".into()));
        }
        for &k in &self.kernel_sizes {
            if k < 3 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("kernel size {k} must be odd and >= 3")));
            }
        }
        for (name, r) in [
            ("blur_sigma_range", self.blur_sigma_range),
            ("gauss_noise_range", self.gauss_noise_range),
            ("poisson_scale_range", self.poisson_scale_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::InvalidArgument(format!("{name} has lo > hi: {r:?}")));
            }
            if r[0] < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative: {r:?}")));
            }
        }
        if self.blur_sigma_range[0] <= 0.0 {
            return Err(Error::InvalidArgument("blur sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Weak (in-distribution) degradation parameters.
pub fn preset_weak() -> DegradationSpec {
    DegradationSpec {
        kernel_sizes: vec![7, 9, 11],
        blur_sigma_range: [0.5, 1.5],
        gauss_noise_range: [1.0 / 255.0, 20.0 / 255.0],
        poisson_scale_range: [0.05, 2.0],
    }
}

/// Strong (out-of-distribution) degradation parameters: larger kernels,
/// heavier noise.
pub fn preset_strong() -> DegradationSpec {
    DegradationSpec {
        kernel_sizes: vec![17, 19, 21],
        blur_sigma_range: [2.0, 3.0],
        gauss_noise_range: [20.0 / 255.0, 30.0 / 255.0],
        poisson_scale_range: [0.15, 3.0],
    }
}

/// Square 2-D kernel, odd side length, entries summing to 1.
#[derive(Debug, Clone)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn delta(size: usize) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {size} must be odd and >= 3")));
        }
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Ok(Self { size, weights })
    }
}

/// Isotropic Gaussian kernel normalized to sum exactly 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {size} must be odd and >= 3")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel sigma {sigma} must be positive")));
    }
    let c = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size as isize {
        for j in 0..size as isize {
            let di = (i - c) as f64;
            let dj = (j - c) as f64;
            weights.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(Kernel { size, weights })
}

/// Mirror index without repeating the edge sample: -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // One fold suffices for kernels smaller than the image.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// 2-D correlation with reflect padding; preserves image dimensions.
pub fn convolve(img: &Image, kernel: &Kernel) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let ks = kernel.size();
    if ks >= h || ks >= w {
        return Err(Error::Dimension(format!(
            "kernel size {ks} must be smaller than the {w}x{h} image"
        )));
    }
    let r = (ks / 2) as isize;
    // Pad once, then run a dense inner loop over the padded buffer.
    let (ph, pw) = (h + ks - 1, w + ks - 1);
    let mut padded = vec![0.0; ph * pw];
    for i in 0..ph {
        let si = reflect(i as isize - r, h);
        for j in 0..pw {
            let sj = reflect(j as isize - r, w);
            padded[i * pw + j] = img.get(si, sj);
        }
    }
    let mut out = vec![0.0; h * w];
    for (idx, &kw) in kernel.weights().iter().enumerate() {
        let (di, dj) = (idx / ks, idx % ks);
        for i in 0..h {
            let src = &padded[(i + di) * pw + dj..(i + di) * pw + dj + w];
            let dst = &mut out[i * w..(i + 1) * w];
            for (o, &p) in dst.iter_mut().zip(src) {
                *o += kw * p;
            }
        }
    }
    Image::new(w, h, out)
}

/// The parameters actually drawn for one degraded image; recorded in the
/// dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationDraw {
    pub kernel_size: usize,
    pub blur_sigma: f64,
    pub gauss_sigma: f64,
    pub shot_scale: f64,
}

/// Blur, then Gaussian noise, then signal-dependent shot noise
/// `x += scale * sqrt(max(x, 0) / 255) * n`. Pure function of (img, spec,
/// rng state); the draws are returned for the manifest.
pub fn degrade<R: Rng + ?Sized>(
    img: &Image,
    spec: &DegradationSpec,
    rng: &mut R,
) -> Result<(Image, DegradationDraw)> {
    spec.validate()?;
    let kernel_size = spec.kernel_sizes[rng.random_range(0..spec.kernel_sizes.len())];
    let blur_sigma = draw_uniform(rng, spec.blur_sigma_range);
    let kernel = gaussian_kernel(kernel_size, blur_sigma)?;
    let mut out = convolve(img, &kernel)?;

    let gauss_sigma = draw_uniform(rng, spec.gauss_noise_range);
    if gauss_sigma > 0.0 {
        for p in out.pixels_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *p += gauss_sigma * n;
        }
    }

    let shot_scale = draw_uniform(rng, spec.poisson_scale_range);
    if shot_scale > 0.0 {
        for p in out.pixels_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *p += shot_scale * (p.max(0.0) / 255.0).sqrt() * n;
        }
    }

    Ok((out, DegradationDraw { kernel_size, blur_sigma, gauss_sigma, shot_scale }))
}

fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    // Consume exactly one draw even for a collapsed range, so the stream
    // layout does not depend on the spec values.
    let u = rng.random::<f64>();
    range[0] + (range[1] - range[0]) * u
}

/// Fixed affine remap `x -> scale * x + offset` shared by a whole clean set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: 0.0 }
    }

    pub fn apply(&self, img: &mut Image) {
        for p in img.pixels_mut() {
            *p = self.scale * *p + self.offset;
        }
    }
}

/// Decode `n` samples from the clean-conditioned prior and squeeze the whole
/// set into [0.1, 0.9] with one shared affine map (returned for the
/// manifest).
pub fn make_clean_set<R: Rng + ?Sized>(
    prior: &GmmPrior,
    basis: &Basis,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Image>, AffineMap)> {
    if prior.d() != basis.d() {
        return Err(Error::Dimension(format!(
            "prior dimension {} does not match basis d={}",
            prior.d(),
            basis.d()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let z = prior.sample(Condition::Clean, rng);
        images.push(decode(&z, basis)?);
    }
    if images.is_empty() {
        return Ok((images, AffineMap::identity()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for img in &images {
        for &p in img.pixels() {
            lo = lo.min(p);
            hi = hi.max(p);
        }
    }
    let map = if hi - lo > 1e-9 {
        let scale = 0.8 / (hi - lo);
        AffineMap { scale, offset: 0.1 - scale * lo }
    } else {
        AffineMap { scale: 1.0, offset: 0.5 - lo }
    };
    for img in images.iter_mut() {
        map.apply(img);
    }
    Ok((images, map))
}

/// Procedural generator prior over basis coefficients: `n_modes` "template"
/// modes whose spectra fall off with zigzag frequency as
/// `(1 + i)^-spectrum_decay`. `mode_spread` sets the within-mode standard
/// deviation as a fraction of the spectrum envelope; small values keep each
/// mode recognizable after degradation.
pub fn generator_prior(
    d: usize,
    n_modes: usize,
    mode_spread: f64,
    spectrum_decay: f64,
    seed: u64,
) -> Result<GmmPrior> {
    if n_modes == 0 {
        return Err(Error::InvalidArgument("generator needs at least one mode".into()));
    }
    if !(mode_spread > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mode spread {mode_spread} must be positive"
        )));
    }
    if !(spectrum_decay > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spectrum decay {spectrum_decay} must be positive"
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut components = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        let mut mean = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        for i in 0..d {
            let envelope = 4.0 / (1.0 + i as f64).powf(spectrum_decay);
            let g: f64 = rng.sample(StandardNormal);
            if i == 0 {
                // DC: brightness of the mode.
                mean.push(8.0 + 2.0 * g);
                var.push(1.0);
            } else {
                mean.push(envelope * g);
                var.push(
                    (mode_spread * envelope)
                        .powi(2)
                        .max(crate::oracle::VARIANCE_FLOOR),
                );
            }
        }
        components.push(GmmComponent { weight: 1.0 / n_modes as f64, mean, var });
    }
    GmmPrior::single_class(d, components)
}

/// Labeled in-distribution data: aligned (degraded, clean) pairs.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pairs: Vec<(Image, Image)>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<(Image, Image)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyPool("paired dataset is empty".into()));
        }
        let (w, h) = (pairs[0].0.width(), pairs[0].0.height());
        for (y, x) in &pairs {
            if y.width() != w || y.height() != h || !y.same_dims(x) {
                return Err(Error::Dimension("paired dataset has mixed dimensions".into()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(Image, Image)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Unlabeled out-of-distribution inputs.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    inputs: Vec<Image>,
}

impl UnlabeledSet {
    pub fn new(inputs: Vec<Image>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyPool("unlabeled set is empty".into()));
        }
        let (w, h) = (inputs[0].width(), inputs[0].height());
        if inputs.iter().any(|i| i.width() != w || i.height() != h) {
            return Err(Error::Dimension("unlabeled set has mixed dimensions".into()));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &[Image] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// On-disk description of one dataset split. Tensor paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
    pub inputs_path: String,
    /// Clean references; absent for truly unlabeled splits.
    pub clean_path: Option<String>,
    /// Clean halves are for metric computation only, never for training.
    pub clean_eval_only: bool,
    pub affine: AffineMap,
    pub degradation: Option<DegradationSpec>,
    /// Per-image parameter draws, aligned with the tensor stack.
    pub draws: Vec<Option<DegradationDraw>>,
}
