//! Stage-1 numerical machinery: explicit-Euler inversion to the noise
//! latent, classifier-free-guided velocity composition, and backward
//! generation on the shared uniform grid `tau_j = tau_min + j * dtau`,
//! `dtau = (1 - tau_min) / N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode, encode, Basis, Image, LatentVec};
use crate::oracle::{Condition, GmmPrior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub guidance_w: f64,
    pub tau_min: f64,
    pub condition: Condition,
    /// Convex blend of the generated latent with the input latent applied at
    /// the end of `refine`; 1.0 keeps the generated latent untouched.
    pub blend: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            guidance_w: 3.5,
            tau_min: 1e-3,
            condition: Condition::Clean,
            blend: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("solver needs n_steps >= 1".into()));
        }
        if self.guidance_w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be nonnegative",
                self.guidance_w
            )));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau_min {} must lie in (0, 1)",
                self.tau_min
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::InvalidArgument(format!(
                "blend {} must lie in [0, 1]",
                self.blend
            )));
        }
        Ok(())
    }

    fn dtau(&self) -> f64 {
        (1.0 - self.tau_min) / self.n_steps as f64
    }
}

fn check_finite(z: &LatentVec, step: usize, context: &str) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, context: context.to_string() })
    }
}

/// Integrate the flow ODE forward from `tau_min` to 1 under null
/// conditioning: `z <- z + dtau * v(z, tau_j, null)` for j = 0..N-1.
pub fn invert(prior: &GmmPrior, z0: &LatentVec, cfg: &SolverConfig) -> Result<LatentVec> {
    cfg.validate()?;
    check_finite(z0, 0, "invert input")?;
    let dtau = cfg.dtau();
    let mut z = z0.clone();
    for j in 0..cfg.n_steps {
        let tau = cfg.tau_min + j as f64 * dtau;
        let v = prior.velocity(&z, tau, Condition::Null)?;
        for (zi, vi) in z.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *zi += dtau * vi;
        }
        check_finite(&z, j, "invert")?;
    }
    Ok(z)
}

/// Classifier-free-guided velocity `v_null + w * (v_cond - v_null)`.
/// `w = 0` returns the null velocity and `w = 1` the conditional velocity
/// without recombination, so those identities hold bitwise.
pub fn cfg_velocity(
    prior: &GmmPrior,
    z: &LatentVec,
    tau: f64,
    w: f64,
    cond: Condition,
) -> Result<LatentVec> {
    let v_null = prior.velocity(z, tau, Condition::Null)?;
    if w == 0.0 {
        return Ok(v_null);
    }
    let v_cond = prior.velocity(z, tau, cond)?;
    if w == 1.0 {
        return Ok(v_cond);
    }
    let combined = v_null
        .as_slice()
        .iter()
        .zip(v_cond.as_slice())
        .map(|(&vn, &vc)| vn + w * (vc - vn))
        .collect();
    Ok(LatentVec::new(combined))
}

/// Integrate backward from tau = 1 down to `tau_min` on the same grid as
/// `invert`: `z <- z - dtau * v_cfg(z, tau_j)` for j = N-1..0. Each step is
/// the algebraic mirror of the corresponding inversion step, anchored at the
/// identical evaluation nodes, so a w = 0 round trip cancels to first order.
pub fn generate(prior: &GmmPrior, z_noise: &LatentVec, cfg: &SolverConfig) -> Result<LatentVec> {
    cfg.validate()?;
    check_finite(z_noise, 0, "generate input")?;
    let dtau = cfg.dtau();
    let mut z = z_noise.clone();
    for j in (0..cfg.n_steps).rev() {
        let tau = cfg.tau_min + j as f64 * dtau;
        let v = cfg_velocity(prior, &z, tau, cfg.guidance_w, cfg.condition)?;
        for (zi, vi) in z.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *zi -= dtau * vi;
        }
        check_finite(&z, j, "generate")?;
    }
    Ok(z)
}

/// The full pseudo-target map: encode, invert under null conditioning,
/// regenerate under guidance, optionally blend with the input latent,
/// decode.
pub fn refine(prior: &GmmPrior, basis: &Basis, img: &Image, cfg: &SolverConfig) -> Result<Image> {
    let z_in = encode(img, basis)?;
    let z_noise = invert(prior, &z_in, cfg)?;
    let mut z_out = generate(prior, &z_noise, cfg)?;
    if cfg.blend < 1.0 {
        for (o, &i) in z_out.as_mut_slice().iter_mut().zip(z_in.as_slice()) {
            *o = cfg.blend * *o + (1.0 - cfg.blend) * i;
        }
    }
    decode(&z_out, basis)
}

/// One line of the Stage-1 audit log (JSON-lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: usize,
    pub input_ref: String,
    pub n_steps: usize,
    pub guidance_w: f64,
    pub tau_min: f64,
    pub condition: Condition,
    pub input_score: f64,
    pub output_score: Option<f64>,
    pub divergent: bool,
}
