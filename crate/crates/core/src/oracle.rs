//! The generative oracle: a Gaussian-mixture prior over latent coefficients
//! with an exact closed-form marginal velocity field for the straight
//! interpolation path `x_tau = (1-tau) * x0 + tau * eps`, `eps ~ N(0, I)`.
//!
//! Time runs from data (tau = 0) to noise (tau = 1). Conditioning is a
//! component-subset restriction: the null condition sees every component,
//! `clean` and `degraded` see their own class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LatentVec;
use crate::io::{load_tensor, save_tensor};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Responsibility mass below this marks a component as degenerate.
const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Null,
    Clean,
    Degraded,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Null => "null",
            Condition::Clean => "clean",
            Condition::Degraded => "degraded",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(Condition::Null),
            "clean" => Ok(Condition::Clean),
            "degraded" => Ok(Condition::Degraded),
            other => Err(Error::InvalidArgument(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Immutable mixture prior plus the condition -> component-subset map.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    d: usize,
    components: Vec<GmmComponent>,
    clean: Vec<usize>,
    degraded: Vec<usize>,
    all: Vec<usize>,
}

impl GmmPrior {
    pub fn new(
        d: usize,
        components: Vec<GmmComponent>,
        clean: Vec<usize>,
        degraded: Vec<usize>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("prior needs at least one component".into()));
        }
        let wsum: f64 = components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {wsum}, expected 1"
            )));
        }
        for (k, c) in components.iter().enumerate() {
            if c.weight <= 0.0 {
                return Err(Error::InvalidArgument(format!("component {k} has weight {}", c.weight)));
            }
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::Dimension(format!("component {k} does not match d={d}")));
            }
            if c.var.iter().any(|&v| v < VARIANCE_FLOOR * (1.0 - 1e-12)) {
                return Err(Error::InvalidArgument(format!(
                    "component {k} has variance below the floor {VARIANCE_FLOOR}"
                )));
            }
        }
        if clean.is_empty() || degraded.is_empty() {
            return Err(Error::InvalidArgument("every condition subset must be nonempty".into()));
        }
        for &i in clean.iter().chain(&degraded) {
            if i >= components.len() {
                return Err(Error::InvalidArgument(format!("condition index {i} out of range")));
            }
        }
        let all = (0..components.len()).collect();
        Ok(Self { d, components, clean, degraded, all })
    }

    /// A prior whose every condition selects all components; used for
    /// procedural generator priors that have no degraded class.
    pub fn single_class(d: usize, components: Vec<GmmComponent>) -> Result<Self> {
        let n = components.len();
        Self::new(d, components, (0..n).collect(), (0..n).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn indices(&self, cond: Condition) -> &[usize] {
        match cond {
            Condition::Null => &self.all,
            Condition::Clean => &self.clean,
            Condition::Degraded => &self.degraded,
        }
    }

    pub fn condition_map(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map = BTreeMap::new();
        map.insert("null".to_string(), self.all.clone());
        map.insert("clean".to_string(), self.clean.clone());
        map.insert("degraded".to_string(), self.degraded.clone());
        map
    }

    /// Mean of the mixture restricted to `cond` (weights renormalized).
    pub fn mixture_mean(&self, cond: Condition) -> Vec<f64> {
        let idx = self.indices(cond);
        let wsum: f64 = idx.iter().map(|&k| self.components[k].weight).sum();
        let mut mean = vec![0.0; self.d];
        for &k in idx {
            let c = &self.components[k];
            for (m, &mu) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight / wsum * mu;
            }
        }
        mean
    }

    /// Log density of the time-tau marginal restricted to `cond`:
    /// `log sum_k pi_k N(z; (1-tau) mu_k, (1-tau)^2 var_k + tau^2 I)`
    /// with the subset weights renormalized. `tau = 0` is the data density.
    pub fn log_density(&self, z: &LatentVec, cond: Condition, tau: f64) -> f64 {
        assert_eq!(z.len(), self.d, "latent dimension mismatch");
        assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
        let idx = self.indices(cond);
        let ln_wsum = idx
            .iter()
            .map(|&k| self.components[k].weight)
            .sum::<f64>()
            .ln();
        let terms: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                c.weight.ln() - ln_wsum + log_normal_diag(z.as_slice(), &c.mean, &c.var, tau)
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Posterior component responsibilities at time tau under `cond`;
    /// nonnegative, summing to 1 over the condition subset.
    pub fn responsibilities(&self, z: &LatentVec, tau: f64, cond: Condition) -> Vec<f64> {
        assert_eq!(z.len(), self.d, "latent dimension mismatch");
        let idx = self.indices(cond);
        let logs: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                c.weight.ln() + log_normal_diag(z.as_slice(), &c.mean, &c.var, tau)
            })
            .collect();
        softmax(&logs)
    }

    /// Exact marginal velocity `v(z, tau) = (z - E[x0 | x_tau = z]) / tau`
    /// where the posterior mean conditions on the subset selected by `cond`.
    pub fn velocity(&self, z: &LatentVec, tau: f64, cond: Condition) -> Result<LatentVec> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "velocity is singular at tau = {tau}; need 0 < tau <= 1"
            )));
        }
        if !z.is_finite() {
            return Err(Error::InvalidArgument("velocity input latent is not finite".into()));
        }
        let r = self.responsibilities(z, tau, cond);
        let idx = self.indices(cond);
        let omt = 1.0 - tau;
        let mut e0 = vec![0.0; self.d];
        for (&k, &rk) in idx.iter().zip(&r) {
            let c = &self.components[k];
            for i in 0..self.d {
                let a = omt * omt * c.var[i] + tau * tau;
                let cond_mean = c.mean[i] + omt * c.var[i] / a * (z.as_slice()[i] - omt * c.mean[i]);
                e0[i] += rk * cond_mean;
            }
        }
        let v = z
            .as_slice()
            .iter()
            .zip(&e0)
            .map(|(&zi, &ei)| (zi - ei) / tau)
            .collect();
        Ok(LatentVec::new(v))
    }

    /// Draw a latent from the condition-restricted mixture.
    pub fn sample<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> LatentVec {
        let idx = self.indices(cond);
        let wsum: f64 = idx.iter().map(|&k| self.components[k].weight).sum();
        let u = rng.random::<f64>() * wsum;
        let mut acc = 0.0;
        let mut chosen = idx[idx.len() - 1];
        for &k in idx {
            acc += self.components[k].weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let coeffs = (0..self.d)
            .map(|i| {
                let n: f64 = rng.sample(StandardNormal);
                c.mean[i] + c.var[i].sqrt() * n
            })
            .collect();
        LatentVec::new(coeffs)
    }
}

/// `log N(z; (1-tau) mu, (1-tau)^2 var + tau^2 I)` for diagonal `var`.
fn log_normal_diag(z: &[f64], mean: &[f64], var: &[f64], tau: f64) -> f64 {
    let omt = 1.0 - tau;
    let mut acc = 0.0;
    for i in 0..z.len() {
        let a = omt * omt * var[i] + tau * tau;
        let dz = z[i] - omt * mean[i];
        acc += -0.5 * ((2.0 * std::f64::consts::PI * a).ln() + dz * dz / a);
    }
    acc
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn softmax(logs: &[f64]) -> Vec<f64> {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// EM fit outcome; the log-likelihood trace is the mean per-point value at
/// each iteration and is non-decreasing absent component reseeds.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub components: Vec<GmmComponent>,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

/// Fit a diagonal-covariance mixture by EM with k-means++ initialization.
pub fn fit_gmm<R: Rng + ?Sized>(
    latents: &[LatentVec],
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<FitResult> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("fit_gmm needs at least one latent".into()));
    }
    if k == 0 || k > latents.len() {
        return Err(Error::InvalidArgument(format!(
            "component count {k} outside 1..={}",
            latents.len()
        )));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::Dimension("latents have mixed dimensions".into()));
    }
    let n = latents.len();

    // Global per-dimension variance; also the reseed variance.
    let mut global_mean = vec![0.0; d];
    for z in latents {
        for (m, &v) in global_mean.iter_mut().zip(z.as_slice()) {
            *m += v / n as f64;
        }
    }
    let mut global_var = vec![0.0; d];
    for z in latents {
        for (g, (&v, &m)) in global_var.iter_mut().zip(z.as_slice().iter().zip(&global_mean)) {
            *g += (v - m) * (v - m) / n as f64;
        }
    }
    for g in global_var.iter_mut() {
        *g = g.max(VARIANCE_FLOOR);
    }

    let centers = kmeanspp_centers(latents, k, rng);
    let mut components: Vec<GmmComponent> = centers
        .into_iter()
        .map(|mean| GmmComponent { weight: 1.0 / k as f64, mean, var: global_var.clone() })
        .collect();

    let mut trace = Vec::new();
    let mut reseeded = vec![false; k];
    let mut resp = vec![0.0; n * k];
    let mut iterations = 0;

    for _iter in 0..max_iters {
        iterations += 1;

        // E-step
        let mut total_ll = 0.0;
        for (i, z) in latents.iter().enumerate() {
            let logs: Vec<f64> = components
                .iter()
                .map(|c| c.weight.ln() + log_normal_diag(z.as_slice(), &c.mean, &c.var, 0.0))
                .collect();
            let lse = log_sum_exp(&logs);
            total_ll += lse;
            for (j, l) in logs.iter().enumerate() {
                resp[i * k + j] = (l - lse).exp();
            }
        }
        let mean_ll = total_ll / n as f64;

        // M-step with one reseed allowance per component.
        let mut mass = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                mass[j] += resp[i * k + j];
            }
        }
        let mut did_reseed = false;
        for j in 0..k {
            if mass[j] < DEGENERATE_MASS {
                if reseeded[j] {
                    return Err(Error::DegenerateCluster { component: j });
                }
                reseeded[j] = true;
                did_reseed = true;
                let pick = rng.random_range(0..n);
                components[j].mean = latents[pick].as_slice().to_vec();
                components[j].var = global_var.clone();
                components[j].weight = 1.0 / n as f64;
                log::warn!("reseeded degenerate mixture component {j}");
            }
        }
        if did_reseed {
            // Renormalize weights and redo the iteration from the E-step.
            let wsum: f64 = components.iter().map(|c| c.weight).sum();
            for c in components.iter_mut() {
                c.weight /= wsum;
            }
            continue;
        }

        for j in 0..k {
            let mut mean = vec![0.0; d];
            for (i, z) in latents.iter().enumerate() {
                let r = resp[i * k + j];
                for (m, &v) in mean.iter_mut().zip(z.as_slice()) {
                    *m += r * v;
                }
            }
            for m in mean.iter_mut() {
                *m /= mass[j];
            }
            let mut var = vec![0.0; d];
            for (i, z) in latents.iter().enumerate() {
                let r = resp[i * k + j];
                for (g, (&v, &m)) in var.iter_mut().zip(z.as_slice().iter().zip(&mean)) {
                    *g += r * (v - m) * (v - m);
                }
            }
            for g in var.iter_mut() {
                *g = (*g / mass[j]).max(VARIANCE_FLOOR);
            }
            components[j] = GmmComponent { weight: mass[j] / n as f64, mean, var };
        }

        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (mean_ll - prev).abs() < tol);
        trace.push(mean_ll);
        if converged {
            break;
        }
    }

    // Exact renormalization so downstream invariants hold bit-tightly.
    let wsum: f64 = components.iter().map(|c| c.weight).sum();
    for c in components.iter_mut() {
        c.weight /= wsum;
    }

    Ok(FitResult { components, log_likelihood: trace, iterations })
}

fn kmeanspp_centers<R: Rng + ?Sized>(
    latents: &[LatentVec],
    k: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let n = latents.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(latents[rng.random_range(0..n)].as_slice().to_vec());
    let mut dist2: Vec<f64> = latents
        .iter()
        .map(|z| sq_dist(z.as_slice(), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                acc += d2;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(latents[pick].as_slice().to_vec());
        let latest = centers.last().unwrap();
        for (d2, z) in dist2.iter_mut().zip(latents) {
            *d2 = d2.min(sq_dist(z.as_slice(), latest));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fit one mixture per class and assemble the conditioned prior: the null
/// condition sees all `2K` components with each class's weights halved.
pub fn build_oracle<R: Rng + ?Sized>(
    clean_latents: &[LatentVec],
    degraded_latents: &[LatentVec],
    k_per_class: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<GmmPrior> {
    if clean_latents.is_empty() || degraded_latents.is_empty() {
        return Err(Error::InvalidArgument("build_oracle needs both latent sets nonempty".into()));
    }
    let d = clean_latents[0].len();
    let clean_fit = fit_gmm(clean_latents, k_per_class, max_iters, tol, rng)?;
    let degraded_fit = fit_gmm(degraded_latents, k_per_class, max_iters, tol, rng)?;
    let mut components = Vec::with_capacity(2 * k_per_class);
    for mut c in clean_fit.components {
        c.weight *= 0.5;
        components.push(c);
    }
    for mut c in degraded_fit.components {
        c.weight *= 0.5;
        components.push(c);
    }
    let clean_idx: Vec<usize> = (0..k_per_class).collect();
    let degraded_idx: Vec<usize> = (k_per_class..2 * k_per_class).collect();
    GmmPrior::new(d, components, clean_idx, degraded_idx)
}

/// JSON header for an oracle checkpoint; the tensor blocks live in sibling
/// files referenced by relative paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleHeader {
    pub d: usize,
    pub n_components: usize,
    pub condition_map: BTreeMap<String, Vec<usize>>,
    pub variance_floor: f64,
    pub fit_seed: u64,
    pub weights_path: String,
    pub means_path: String,
    pub vars_path: String,
}

fn sibling(json_path: &Path, suffix: &str) -> Result<(PathBuf, String)> {
    let stem = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {json_path:?}")))?;
    let name = format!("{stem}.{suffix}.lgt");
    Ok((json_path.with_file_name(&name), name))
}

pub fn save_oracle(json_path: &Path, prior: &GmmPrior, fit_seed: u64) -> Result<()> {
    let d = prior.d();
    let n = prior.components().len();
    let weights: Vec<f32> = prior.components().iter().map(|c| c.weight as f32).collect();
    let mut means = Vec::with_capacity(n * d);
    let mut vars = Vec::with_capacity(n * d);
    for c in prior.components() {
        means.extend(c.mean.iter().map(|&v| v as f32));
        vars.extend(c.var.iter().map(|&v| v as f32));
    }
    let (wpath, wname) = sibling(json_path, "weights")?;
    let (mpath, mname) = sibling(json_path, "means")?;
    let (vpath, vname) = sibling(json_path, "vars")?;
    save_tensor(&wpath, &[n as u32], &weights)?;
    save_tensor(&mpath, &[n as u32, d as u32], &means)?;
    save_tensor(&vpath, &[n as u32, d as u32], &vars)?;
    let header = OracleHeader {
        d,
        n_components: n,
        condition_map: prior.condition_map(),
        variance_floor: VARIANCE_FLOOR,
        fit_seed,
        weights_path: wname,
        means_path: mname,
        vars_path: vname,
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::InvalidArgument(format!("serialize oracle header: {e}")))?;
    std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
}

pub fn load_oracle(json_path: &Path) -> Result<GmmPrior> {
    if !json_path.exists() {
        return Err(Error::MissingArtifact { path: json_path.to_path_buf() });
    }
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let header: OracleHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let (wdims, weights) = load_tensor(&dir.join(&header.weights_path))?;
    let (mdims, means) = load_tensor(&dir.join(&header.means_path))?;
    let (vdims, vars) = load_tensor(&dir.join(&header.vars_path))?;
    let n = header.n_components;
    let d = header.d;
    if wdims != [n as u32] || mdims != [n as u32, d as u32] || vdims != [n as u32, d as u32] {
        return Err(Error::Format {
            path: json_path.to_path_buf(),
            reason: "oracle tensor blocks do not match header dims".into(),
        });
    }
    // f32 storage can nudge weights off exact normalization; renormalize.
    let wsum: f64 = weights.iter().map(|&w| f64::from(w)).sum();
    let components = (0..n)
        .map(|k| GmmComponent {
            weight: f64::from(weights[k]) / wsum,
            mean: means[k * d..(k + 1) * d].iter().map(|&v| f64::from(v)).collect(),
            var: vars[k * d..(k + 1) * d]
                .iter()
                .map(|&v| f64::from(v).max(header.variance_floor))
                .collect(),
        })
        .collect();
    let clean = header.condition_map.get("clean").cloned().unwrap_or_default();
    let degraded = header.condition_map.get("degraded").cloned().unwrap_or_default();
    GmmPrior::new(d, components, clean, degraded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn single_component(d: usize, mean: f64, var: f64) -> GmmPrior {
        GmmPrior::single_class(
            d,
            vec![GmmComponent { weight: 1.0, mean: vec![mean; d], var: vec![var; d] }],
        )
        .unwrap()
    }

    #[test]
    fn k1_fit_matches_sample_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let latents: Vec<LatentVec> = (0..200)
            .map(|_| {
                LatentVec::new(vec![
                    3.0 + rng.sample::<f64, _>(StandardNormal) * 2.0,
                    -1.0 + rng.sample::<f64, _>(StandardNormal) * 0.5,
                ])
            })
            .collect();
        let fit = fit_gmm(&latents, 1, 50, 1e-10, &mut rng).unwrap();
        let c = &fit.components[0];
        let n = latents.len() as f64;
        let mean0: f64 = latents.iter().map(|z| z.as_slice()[0]).sum::<f64>() / n;
        let var0: f64 =
            latents.iter().map(|z| (z.as_slice()[0] - mean0).powi(2)).sum::<f64>() / n;
        assert!((c.mean[0] - mean0).abs() < 1e-9);
        assert!((c.var[0] - var0.max(VARIANCE_FLOOR)).abs() < 1e-9);
        assert!((c.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut latents = Vec::new();
        for _ in 0..500 {
            latents.push(LatentVec::new(vec![
                5.0 + rng.sample::<f64, _>(StandardNormal),
                5.0 + rng.sample::<f64, _>(StandardNormal),
            ]));
        }
        for _ in 0..500 {
            latents.push(LatentVec::new(vec![
                -5.0 + rng.sample::<f64, _>(StandardNormal),
                -5.0 + rng.sample::<f64, _>(StandardNormal),
            ]));
        }
        let fit = fit_gmm(&latents, 2, 100, 1e-9, &mut rng).unwrap();
        let mut means: Vec<f64> = fit.components.iter().map(|c| c.mean[0]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] - -5.0).abs() < 0.2, "recovered mean {}", means[0]);
        assert!((means[1] - 5.0).abs() < 0.2, "recovered mean {}", means[1]);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let latents: Vec<LatentVec> = (0..300)
            .map(|_| {
                let c = if rng.random::<f64>() < 0.5 { 2.0 } else { -2.0 };
                LatentVec::new(vec![c + rng.sample::<f64, _>(StandardNormal) * 0.7])
            })
            .collect();
        let fit = fit_gmm(&latents, 2, 60, 0.0, &mut rng).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn build_oracle_condition_structure() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let clean: Vec<LatentVec> = (0..100)
            .map(|_| LatentVec::new(vec![1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal); 3]))
            .collect();
        let degraded: Vec<LatentVec> = (0..100)
            .map(|_| LatentVec::new(vec![-1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal); 3]))
            .collect();
        let prior = build_oracle(&clean, &degraded, 2, 50, 1e-8, &mut rng).unwrap();
        assert_eq!(prior.indices(Condition::Null).len(), 4);
        assert_eq!(prior.indices(Condition::Clean), &[0, 1]);
        assert_eq!(prior.indices(Condition::Degraded), &[2, 3]);
        let wsum: f64 = prior.components().iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_density_univariate_standard_normal() {
        let prior = single_component(1, 0.0, 1.0);
        let got = prior.log_density(&LatentVec::new(vec![0.0]), Condition::Null, 0.0);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - expect).abs() < 1e-12, "got {got}, expected {expect}");
    }

    #[test]
    fn tau_one_density_forgets_the_mean() {
        for mean in [-3.0, 0.0, 7.5] {
            let prior = single_component(2, mean, 0.5);
            let z = LatentVec::new(vec![0.3, -1.2]);
            let got = prior.log_density(&z, Condition::Null, 1.0);
            let expect: f64 = z
                .as_slice()
                .iter()
                .map(|&v| -0.5 * ((2.0 * std::f64::consts::PI).ln() + v * v))
                .sum();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_components_collapse_in_log_sum_exp() {
        let comp = GmmComponent { weight: 0.5, mean: vec![1.0, -2.0], var: vec![0.3, 0.8] };
        let dup = GmmPrior::single_class(2, vec![comp.clone(), comp.clone()]).unwrap();
        let single = GmmPrior::single_class(
            2,
            vec![GmmComponent { weight: 1.0, mean: comp.mean.clone(), var: comp.var.clone() }],
        )
        .unwrap();
        let z = LatentVec::new(vec![0.1, 0.4]);
        for tau in [0.0, 0.3, 0.9] {
            let a = dup.log_density(&z, Condition::Null, tau);
            let b = single.log_density(&z, Condition::Null, tau);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_gaussian_velocity_closed_form() {
        let prior = single_component(3, 0.0, 1.0);
        for &tau in &[0.05, 0.3, 0.5, 0.77, 1.0] {
            let z = LatentVec::new(vec![0.7, -1.9, 2.4]);
            let v = prior.velocity(&z, tau, Condition::Null).unwrap();
            let scale = (2.0 * tau - 1.0) / ((1.0 - tau) * (1.0 - tau) + tau * tau);
            for (got, &zi) in v.as_slice().iter().zip(z.as_slice()) {
                assert!(
                    (got - zi * scale).abs() < 1e-12,
                    "tau={tau}: got {got}, expected {}",
                    zi * scale
                );
            }
        }
    }

    #[test]
    fn tau_one_velocity_subtracts_prior_mean() {
        let components = vec![
            GmmComponent { weight: 0.25, mean: vec![2.0, 0.0], var: vec![0.5, 0.5] },
            GmmComponent { weight: 0.75, mean: vec![-1.0, 4.0], var: vec![1.5, 0.1] },
        ];
        let prior = GmmPrior::single_class(2, components).unwrap();
        let z = LatentVec::new(vec![0.4, -0.9]);
        let v = prior.velocity(&z, 1.0, Condition::Null).unwrap();
        let mixture_mean = [0.25 * 2.0 + 0.75 * -1.0, 0.25 * 0.0 + 0.75 * 4.0];
        for i in 0..2 {
            assert!((v.as_slice()[i] - (z.as_slice()[i] - mixture_mean[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_rejects_the_singularity() {
        let prior = single_component(1, 0.0, 1.0);
        let z = LatentVec::new(vec![1.0]);
        assert!(prior.velocity(&z, 0.0, Condition::Null).is_err());
        assert!(prior.velocity(&z, -0.1, Condition::Null).is_err());
        assert!(prior.velocity(&z, 1.1, Condition::Null).is_err());
        assert!(prior.velocity(&LatentVec::new(vec![f64::NAN]), 0.5, Condition::Null).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_concentrated() {
        let prior = single_component(4, 2.0, VARIANCE_FLOOR);
        let mut a = ChaCha12Rng::seed_from_u64(9);
        let mut b = ChaCha12Rng::seed_from_u64(9);
        let za = prior.sample(Condition::Clean, &mut a);
        let zb = prior.sample(Condition::Clean, &mut b);
        assert_eq!(za, zb);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let sigma = VARIANCE_FLOOR.sqrt();
        let mut within = 0usize;
        let mut total = 0usize;
        for _ in 0..1000 {
            let z = prior.sample(Condition::Clean, &mut rng);
            for &c in z.as_slice() {
                total += 1;
                if (c - 2.0).abs() <= 3.0 * sigma {
                    within += 1;
                }
            }
        }
        assert!(within as f64 / total as f64 > 0.99);
    }

    #[test]
    fn monte_carlo_sample_mean_matches_mixture_mean() {
        let components = vec![
            GmmComponent { weight: 0.3, mean: vec![3.0, -1.0], var: vec![1.0, 2.0] },
            GmmComponent { weight: 0.7, mean: vec![-2.0, 2.0], var: vec![0.5, 0.5] },
        ];
        let prior = GmmPrior::new(2, components, vec![0, 1], vec![0, 1]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 10_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let z = prior.sample(Condition::Clean, &mut rng);
            acc[0] += z.as_slice()[0];
            acc[1] += z.as_slice()[1];
        }
        let expect = prior.mixture_mean(Condition::Clean);
        // Component spread dominates: per-dim sd is < 2.6, bound with 5 sd / sqrt(n).
        for i in 0..2 {
            let tol = 5.0 * 2.6 / (n as f64).sqrt();
            assert!(
                (acc[i] / n as f64 - expect[i]).abs() < tol,
                "dim {i}: {} vs {}",
                acc[i] / n as f64,
                expect[i]
            );
        }
    }

    #[test]
    fn oracle_checkpoint_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let clean: Vec<LatentVec> = (0..64)
            .map(|_| LatentVec::new(vec![1.0 + rng.sample::<f64, _>(StandardNormal) * 0.3, 0.0]))
            .collect();
        let degraded: Vec<LatentVec> = (0..64)
            .map(|_| LatentVec::new(vec![-1.0 + rng.sample::<f64, _>(StandardNormal) * 0.3, 0.5]))
            .collect();
        let prior = build_oracle(&clean, &degraded, 2, 40, 1e-8, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        save_oracle(&path, &prior, 21).unwrap();
        let loaded = load_oracle(&path).unwrap();
        assert_eq!(loaded.d(), prior.d());
        assert_eq!(loaded.indices(Condition::Clean), prior.indices(Condition::Clean));
        // f32 storage: moments agree to f32 resolution.
        for (a, b) in loaded.components().iter().zip(prior.components()) {
            assert!((a.weight - b.weight).abs() < 1e-6);
            for (x, y) in a.mean.iter().zip(&b.mean) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert!(matches!(
            load_oracle(&dir.path().join("absent.json")),
            Err(Error::MissingArtifact { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn responsibilities_are_a_distribution(
            seed in 0u64..500,
            tau in 0.0f64..1.0,
            cond_pick in 0usize..3,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let components = (0..4)
                .map(|k| GmmComponent {
                    weight: 0.25,
                    mean: vec![k as f64 - 1.5, -(k as f64)],
                    var: vec![0.2 + 0.1 * k as f64, 0.5],
                })
                .collect();
            let prior = GmmPrior::new(2, components, vec![0, 1], vec![2, 3]).unwrap();
            let cond = [Condition::Null, Condition::Clean, Condition::Degraded][cond_pick];
            let z = LatentVec::new(vec![
                rng.random::<f64>() * 8.0 - 4.0,
                rng.random::<f64>() * 8.0 - 4.0,
            ]);
            let r = prior.responsibilities(&z, tau, cond);
            prop_assert_eq!(r.len(), prior.indices(cond).len());
            prop_assert!(r.iter().all(|&x| x >= 0.0));
            let sum: f64 = r.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
