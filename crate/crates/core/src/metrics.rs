//! Evaluation: PSNR, SSIM, and a Fréchet distance between Gaussians fitted
//! to latent coefficients (the pipeline's FID stand-in).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{encode, Basis, Image};
use crate::net::{forward, NetParams};
use crate::oracle::{Condition, GmmPrior};
use crate::synth::PairedDataset;

const PSNR_CAP_DB: f64 = 100.0;
const COV_FLOOR: f64 = 1e-8;

/// Peak signal-to-noise ratio in dB with peak 1.0, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Dimension("psnr inputs differ in size".into()));
    }
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2, L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window_weights() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW as isize {
        for j in 0..SSIM_WINDOW as isize {
            let d2 = ((i - c) * (i - c) + (j - c) * (j - c)) as f64;
            w.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Per-window luminance and contrast-structure terms, averaged over valid
/// window positions (no padding).
#[cfg(test)]
fn ssim_terms(a: &Image, b: &Image) -> Result<(f64, f64)> {
    if !a.same_dims(b) {
        return Err(Error::Dimension("ssim inputs differ in size".into()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let weights = ssim_window_weights();
    let mut lum_acc = 0.0;
    let mut cs_acc = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(h - SSIM_WINDOW) {
        for j0 in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let wv = weights[wi * SSIM_WINDOW + wj];
                    let x = a.get(i0 + wi, j0 + wj);
                    let y = b.get(i0 + wi, j0 + wj);
                    mx += wv * x;
                    my += wv * y;
                    xx += wv * x * x;
                    yy += wv * y * y;
                    xy += wv * x * y;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            lum_acc += (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
            cs_acc += (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
            count += 1;
        }
    }
    Ok((lum_acc / count as f64, cs_acc / count as f64))
}

/// Mean local SSIM with an 11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Dimension("ssim inputs differ in size".into()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let weights = ssim_window_weights();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(h - SSIM_WINDOW) {
        for j0 in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let wv = weights[wi * SSIM_WINDOW + wj];
                    let x = a.get(i0 + wi, j0 + wj);
                    let y = b.get(i0 + wi, j0 + wj);
                    mx += wv * x;
                    my += wv * y;
                    xx += wv * x * x;
                    yy += wv * y * y;
                    xy += wv * x * y;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from numerical asymmetry are clipped to zero.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let q = sym.eigenvectors;
    let sqrt_vals: Vec<f64> = sym.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut scaled = q.clone();
    for (c, &s) in sqrt_vals.iter().enumerate() {
        scaled.column_mut(c).scale_mut(s);
    }
    &scaled * q.transpose()
}

fn latent_moments(set: &[Image], basis: &Basis) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let latents: Vec<Vec<f64>> = set
        .par_iter()
        .map(|img| encode(img, basis).map(|z| z.into_vec()))
        .collect::<Result<_>>()?;
    let d = basis.d();
    let n = latents.len();
    let mut mean = DMatrix::zeros(d, 1);
    for z in &latents {
        for (i, &v) in z.iter().enumerate() {
            mean[(i, 0)] += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for z in &latents {
            for i in 0..d {
                let di = z[i] - mean[(i, 0)];
                for j in i..d {
                    let dj = z[j] - mean[(j, 0)];
                    cov[(i, j)] += di * dj / (n - 1) as f64;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
    }
    for i in 0..d {
        cov[(i, i)] += COV_FLOOR;
    }
    Ok((mean, cov))
}

/// Fréchet distance between Gaussians fitted to the two sets' latent
/// coefficients: `|m1-m2|^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2)`.
pub fn frechet_distance(set_a: &[Image], set_b: &[Image], basis: &Basis) -> Result<f64> {
    let (mean_term, trace_term) = frechet_parts(set_a, set_b, basis)?;
    Ok((mean_term + trace_term).max(0.0))
}

/// The squared-mean-difference and covariance-transport terms separately.
pub fn frechet_parts(set_a: &[Image], set_b: &[Image], basis: &Basis) -> Result<(f64, f64)> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptyPool("frechet distance needs nonempty sets".into()));
    }
    let (m1, c1) = latent_moments(set_a, basis)?;
    let (m2, c2) = latent_moments(set_b, basis)?;
    let sqrt_c1 = spd_sqrt(&c1);
    let inner = &sqrt_c1 * &c2 * &sqrt_c1;
    let sqrt_inner = spd_sqrt(&inner);
    let diff = &m1 - &m2;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let trace_term = c1.trace() + c2.trace() - 2.0 * sqrt_inner.trace();
    Ok((mean_term, trace_term))
}

/// Evaluation artifact for one model on one paired test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub frechet: f64,
    /// Mean clean-conditioned log-density of the restored set; diagnostic.
    pub mean_restored_log_density: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the model over the test inputs and compare against the clean halves.
pub fn evaluate(
    params: &NetParams,
    test: &PairedDataset,
    prior: &GmmPrior,
    basis: &Basis,
) -> Result<MetricReport> {
    let restored: Vec<Image> = test
        .pairs()
        .par_iter()
        .map(|(y, _)| forward(params, y))
        .collect();
    let clean: Vec<Image> = test.pairs().iter().map(|(_, x)| x.clone()).collect();
    let psnr_db: Vec<f64> = restored
        .iter()
        .zip(&clean)
        .map(|(r, c)| psnr(r, c))
        .collect::<Result<_>>()?;
    let ssim_vals: Vec<f64> = restored
        .par_iter()
        .zip(clean.par_iter())
        .map(|(r, c)| ssim(r, c))
        .collect::<Result<_>>()?;
    let frechet = frechet_distance(&restored, &clean, basis)?;
    let density: Vec<f64> = restored
        .par_iter()
        .map(|img| encode(img, basis).map(|z| prior.log_density(&z, Condition::Clean, 0.0)))
        .collect::<Result<_>>()?;
    let (psnr_mean, psnr_std) = mean_std(&psnr_db);
    let (ssim_mean, ssim_std) = mean_std(&ssim_vals);
    let (density_mean, _) = mean_std(&density);
    Ok(MetricReport {
        count: test.len(),
        psnr_db,
        ssim: ssim_vals,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        frechet,
        mean_restored_log_density: density_mean,
    })
}

/// Flat CSV companion to the JSON report: one row per image, then summary
/// rows (mean, std, frechet, count).
pub fn metric_report_csv(report: &MetricReport) -> String {
    let mut out = String::from("row,psnr_db,ssim\n");
    for i in 0..report.count {
        out.push_str(&format!("{},{},{}\n", i, report.psnr_db[i], report.ssim[i]));
    }
    out.push_str(&format!("mean,{},{}\n", report.psnr_mean, report.ssim_mean));
    out.push_str(&format!("std,{},{}\n", report.psnr_std, report.ssim_std));
    out.push_str(&format!("frechet,{},\n", report.frechet));
    out.push_str(&format!("count,{},\n", report.count));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::build_dct_basis;
    use crate::synth::generator_prior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_identities() {
        let a = random_image(16, 16, 0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let mut b = a.clone();
        for p in b.pixels_mut() {
            *p += 0.1;
        }
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr {v}");
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = random_image(8, 8, 1);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identities() {
        let a = random_image(16, 16, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(16, 16, 3);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = random_image(8, 8, 4);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let mut pixels = vec![0.0; 16 * 16];
        for i in 0..16 {
            for j in 0..16 {
                pixels[i * 16 + j] = ((i + j) % 2) as f64;
            }
        }
        let a = Image::new(16, 16, pixels.clone()).unwrap();
        let inv = Image::new(16, 16, pixels.iter().map(|p| 1.0 - p).collect()).unwrap();
        let v = ssim(&a, &inv).unwrap();
        assert!(v < 0.0, "ssim {v}");
    }

    #[test]
    fn structural_term_is_shift_invariant() {
        let a = random_image(16, 16, 5);
        let b = random_image(16, 16, 6);
        let (_, cs) = ssim_terms(&a, &b).unwrap();
        let shift = |img: &Image| {
            let mut s = img.clone();
            for p in s.pixels_mut() {
                *p += 0.37;
            }
            s
        };
        let (_, cs_shifted) = ssim_terms(&shift(&a), &shift(&b)).unwrap();
        assert!((cs - cs_shifted).abs() < 1e-6);
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for d in [4usize, 16, 64] {
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let spd = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let root = spd_sqrt(&spd);
            let back = &root * &root;
            let num = (&back - &spd).norm();
            let den = spd.norm();
            assert!(num / den < 1e-6, "d={d}: relative error {}", num / den);
        }
    }

    #[test]
    fn frechet_identities_and_monte_carlo() {
        let basis = build_dct_basis(16, 16, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        // Build image sets whose latents are N(0, I) and N(m, I) by decoding
        // sampled latents through the orthonormal basis.
        let shift = [0.8, -0.5, 0.3, 1.1];
        let mut set_a = Vec::new();
        let mut set_b = Vec::new();
        for _ in 0..5000 {
            let za: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let zb: Vec<f64> = (0..4)
                .map(|i| shift[i] + rng.sample::<f64, _>(StandardNormal))
                .collect();
            set_a.push(crate::image::decode(&crate::image::LatentVec::new(za), &basis).unwrap());
            set_b.push(crate::image::decode(&crate::image::LatentVec::new(zb), &basis).unwrap());
        }
        let self_dist = frechet_distance(&set_a, &set_a, &basis).unwrap();
        assert!(self_dist < 1e-6, "self distance {self_dist}");
        let ab = frechet_distance(&set_a, &set_b, &basis).unwrap();
        let ba = frechet_distance(&set_b, &set_a, &basis).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        assert!(
            (ab - expect).abs() / expect < 0.1,
            "distance {ab} vs closed form {expect}"
        );
        assert!(frechet_distance(&[], &set_a, &basis).is_err());
    }

    #[test]
    fn evaluate_identity_on_clean_pairs() {
        let basis = build_dct_basis(16, 16, 8).unwrap();
        let prior = generator_prior(8, 2, 0.35, 0.7, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (clean, _) = crate::synth::make_clean_set(&prior, &basis, 12, &mut rng).unwrap();
        let pairs: Vec<(Image, Image)> = clean.iter().map(|c| (c.clone(), c.clone())).collect();
        let test = PairedDataset::new(pairs).unwrap();
        let report = evaluate(&NetParams::zeros(), &test, &prior, &basis).unwrap();
        assert_eq!(report.count, 12);
        assert!((report.psnr_mean - 100.0).abs() < 1e-12);
        assert!((report.ssim_mean - 1.0).abs() < 1e-9);
        assert!(report.frechet < 1e-6);
        // Summary values recompute from the per-image lists.
        let mean = report.psnr_db.iter().sum::<f64>() / report.count as f64;
        assert!((mean - report.psnr_mean).abs() < 1e-12);
        let csv = metric_report_csv(&report);
        assert!(csv.lines().count() == report.count + 5);
    }
}
