//! Stage orchestration: Stage 0 batch inference, Stage 1 pseudo-pair
//! construction (refine + gate), Stage 2 mixed-supervised fine-tuning, and
//! the filtering/mixing ablation protocols.
//!
//! The fine-tuning loss is the sum of two separately normalized group means:
//! `L = mean(L_restore over B_id) + mean(L_restore over B_ood)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{refine, AuditRecord, SolverConfig};
use crate::gate::{quality_score, select, GateConfig, GateReport, PseudoPair};
use crate::image::{Basis, Image};
use crate::metrics::{evaluate, MetricReport};
use crate::net::{example_grads, forward, NetParams, OptConfig, OptState};
use crate::oracle::GmmPrior;
use crate::synth::{PairedDataset, UnlabeledSet};

/// Stage-2 mixing configuration: `ratio` is the in-distribution fraction of
/// every batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub ratio: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub opt: OptConfig,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            ratio: 0.9,
            batch_size: 32,
            iters: 1000,
            opt: OptConfig { lr: 5e-4, ..Default::default() },
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidArgument(format!(
                "mix ratio {} must lie in [0, 1]",
                self.ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// `B_id = round(ratio * B)`, rounding half away from zero.
    pub fn id_count(&self) -> usize {
        (self.ratio * self.batch_size as f64).round() as usize
    }
}

/// Stage 0: run the pre-trained model over every unlabeled input,
/// order-preserving.
pub fn stage0_infer(params: &NetParams, ood: &UnlabeledSet) -> Vec<Image> {
    ood.inputs().par_iter().map(|y| forward(params, y)).collect()
}

/// Everything Stage 1 produces: the surviving candidate pool (divergent
/// refinements dropped), the gated selection, the gate report over the
/// candidate pool, and the per-input audit log.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    /// Indices into the original input list for each kept candidate.
    pub kept_indices: Vec<usize>,
    /// OOD inputs aligned with `candidates`.
    pub inputs: Vec<Image>,
    /// Refined pseudo-targets aligned with `inputs`.
    pub candidates: Vec<Image>,
    pub selected: Vec<PseudoPair>,
    pub report: GateReport,
    pub audit: Vec<AuditRecord>,
}

/// Stage 1: refine every initial restoration into a pseudo-target, score it,
/// and keep the pairs passing the gate. Divergent refinements are logged and
/// treated as gate failures.
pub fn stage1_build(
    prior: &GmmPrior,
    basis: &Basis,
    x_tilde: &[Image],
    y: &[Image],
    solver: &SolverConfig,
    gate_cfg: &GateConfig,
) -> Result<Stage1Result> {
    if x_tilde.len() != y.len() {
        return Err(Error::Dimension(format!(
            "stage 1 got {} restorations for {} inputs",
            x_tilde.len(),
            y.len()
        )));
    }
    if x_tilde.is_empty() {
        return Err(Error::EmptyPool("stage 1 received no inputs".into()));
    }
    solver.validate()?;
    gate_cfg.validate()?;

    let refined: Vec<std::result::Result<Image, Error>> = x_tilde
        .par_iter()
        .map(|img| refine(prior, basis, img, solver))
        .collect();
    let input_scores: Vec<f64> = x_tilde
        .par_iter()
        .map(|img| quality_score(prior, basis, img, gate_cfg))
        .collect::<Result<_>>()?;

    let mut kept_indices = Vec::new();
    let mut inputs = Vec::new();
    let mut candidates = Vec::new();
    let mut audit = Vec::with_capacity(x_tilde.len());
    for (i, outcome) in refined.into_iter().enumerate() {
        match outcome {
            Ok(x_hat) => {
                let out_score = quality_score(prior, basis, &x_hat, gate_cfg)?;
                audit.push(AuditRecord {
                    index: i,
                    input_ref: format!("ood#{i}"),
                    n_steps: solver.n_steps,
                    guidance_w: solver.guidance_w,
                    tau_min: solver.tau_min,
                    condition: solver.condition,
                    input_score: input_scores[i],
                    output_score: Some(out_score),
                    divergent: false,
                });
                kept_indices.push(i);
                inputs.push(y[i].clone());
                candidates.push(x_hat);
            }
            Err(Error::Divergence { .. }) => {
                log::warn!("stage 1 refinement diverged on input {i}; treated as gate failure");
                audit.push(AuditRecord {
                    index: i,
                    input_ref: format!("ood#{i}"),
                    n_steps: solver.n_steps,
                    guidance_w: solver.guidance_w,
                    tau_min: solver.tau_min,
                    condition: solver.condition,
                    input_score: input_scores[i],
                    output_score: None,
                    divergent: true,
                });
            }
            Err(other) => return Err(other),
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptyPool("every stage-1 refinement diverged".into()));
    }

    let pairs: Vec<(Image, Image)> = inputs
        .iter()
        .zip(&candidates)
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    let (selected, stats) = select(&pairs, prior, basis, gate_cfg)?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|img| quality_score(prior, basis, img, gate_cfg))
        .collect::<Result<_>>()?;
    let passed: Vec<bool> = scores.iter().map(|&s| s >= gate_cfg.alpha).collect();
    let report = GateReport {
        alpha: gate_cfg.alpha,
        cal_a: gate_cfg.cal_a,
        cal_b: gate_cfg.cal_b,
        sharpness_weight: gate_cfg.sharpness_weight,
        scores,
        passed,
        stats,
    };
    Ok(Stage1Result { kept_indices, inputs, candidates, selected, report, audit })
}

/// One composed batch: borrowed (input, target) pairs per group.
pub struct ComposedBatch<'a> {
    pub id: Vec<(&'a Image, &'a Image)>,
    pub ood: Vec<(&'a Image, &'a Image)>,
}

/// Sample `round(ratio*B)` in-distribution pairs and the rest pseudo-pairs,
/// uniformly with replacement within each pool.
pub fn compose_batch<'a, R: Rng + ?Sized>(
    d_id: &'a PairedDataset,
    d_sel: &'a [PseudoPair],
    mix: &MixConfig,
    rng: &mut R,
) -> Result<ComposedBatch<'a>> {
    mix.validate()?;
    let b_id = mix.id_count();
    let b_ood = mix.batch_size - b_id;
    if b_ood > 0 && d_sel.is_empty() {
        return Err(Error::EmptyPool(format!(
            "batch needs {b_ood} pseudo-pairs but the selected pool is empty"
        )));
    }
    let mut id = Vec::with_capacity(b_id);
    for _ in 0..b_id {
        let (y, x) = &d_id.pairs()[rng.random_range(0..d_id.len())];
        id.push((y, x));
    }
    let mut ood = Vec::with_capacity(b_ood);
    for _ in 0..b_ood {
        let p = &d_sel[rng.random_range(0..d_sel.len())];
        ood.push((&p.y_ood, &p.x_hat));
    }
    Ok(ComposedBatch { id, ood })
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: NetParams,
    /// Per-iteration group means; `loss_ood` is zero when the batch has no
    /// pseudo-pairs.
    pub loss_id: Vec<f64>,
    pub loss_ood: Vec<f64>,
    /// True when an empty selection forced the ratio back to 1.0.
    pub fallback_rho1: bool,
}

/// Stage 2: fine-tune from the pre-trained weights on the mixed objective.
/// An empty pseudo-pool with ratio < 1 falls back to ratio 1.0 with a
/// warning instead of failing.
pub fn stage2_finetune<R: Rng + ?Sized>(
    params_id: &NetParams,
    d_id: &PairedDataset,
    d_sel: &[PseudoPair],
    mix: &MixConfig,
    rng: &mut R,
) -> Result<FinetuneResult> {
    mix.validate()?;
    let mut mix = *mix;
    let mut fallback_rho1 = false;
    if d_sel.is_empty() && mix.ratio < 1.0 {
        log::warn!(
            "selected pseudo-pool is empty; falling back to ratio 1.0 from {}",
            mix.ratio
        );
        mix.ratio = 1.0;
        fallback_rho1 = true;
    }

    let mut params = params_id.clone();
    let mut opt = OptState::new(mix.opt);
    let mut loss_id = Vec::with_capacity(mix.iters);
    let mut loss_ood = Vec::with_capacity(mix.iters);
    for iter in 0..mix.iters {
        let batch = compose_batch(d_id, d_sel, &mix, rng)?;
        let examples: Vec<(&Image, &Image)> =
            batch.id.iter().chain(batch.ood.iter()).copied().collect();
        let per_example = example_grads(&params, &examples)?;

        let b_id = batch.id.len();
        let b_ood = batch.ood.len();
        let mut grads = NetParams::zeros();
        let mut l_id = 0.0;
        let mut l_ood = 0.0;
        for (i, (loss, g)) in per_example.iter().enumerate() {
            if i < b_id {
                l_id += loss / b_id as f64;
                grads.axpy(1.0 / b_id as f64, g);
            } else {
                l_ood += loss / b_ood as f64;
                grads.axpy(1.0 / b_ood as f64, g);
            }
        }
        let total = l_id + l_ood;
        if !total.is_finite() {
            return Err(Error::Divergence { step: iter, context: "stage2_finetune".into() });
        }
        opt.step(&mut params, &grads);
        loss_id.push(l_id);
        loss_ood.push(l_ood);
    }
    Ok(FinetuneResult { params, loss_id, loss_ood, fallback_rho1 })
}

/// One arm of the filtering ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterArm {
    pub pool_size: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterAblationReport {
    pub with_filter: FilterArm,
    pub without_filter: FilterArm,
}

/// Run Stage 2 twice from identical seeds: once on the gated pool, once with
/// the gate bypassed (every surviving candidate kept). The filtered pool is
/// a subset of the unfiltered pool by identity.
#[allow(clippy::too_many_arguments)]
pub fn ablate_filter(
    params_id: &NetParams,
    d_id: &PairedDataset,
    candidates: &[PseudoPair],
    alpha: f64,
    mix: &MixConfig,
    ood_test: &PairedDataset,
    prior: &GmmPrior,
    basis: &Basis,
    seed: u64,
) -> Result<FilterAblationReport> {
    let filtered: Vec<PseudoPair> =
        candidates.iter().filter(|p| p.score >= alpha).cloned().collect();
    let arm = |pool: &[PseudoPair]| -> Result<FilterArm> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let run = stage2_finetune(params_id, d_id, pool, mix, &mut rng)?;
        let report = evaluate(&run.params, ood_test, prior, basis)?;
        Ok(FilterArm { pool_size: pool.len(), report })
    };
    Ok(FilterAblationReport {
        with_filter: arm(&filtered)?,
        without_filter: arm(candidates)?,
    })
}

/// One row of the mixing-ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSweepRow {
    pub ratio: f64,
    pub ood_psnr: f64,
    pub ood_ssim: f64,
    pub ood_frechet: f64,
    pub id_psnr: f64,
    pub id_ssim: f64,
    pub fallback_rho1: bool,
}

/// One Stage-2 run per ratio with shared seed and pools; rows are returned
/// sorted by ratio descending.
#[allow(clippy::too_many_arguments)]
pub fn ablate_mix(
    params_id: &NetParams,
    d_id: &PairedDataset,
    d_sel: &[PseudoPair],
    ratios: &[f64],
    mix_base: &MixConfig,
    ood_test: &PairedDataset,
    id_test: &PairedDataset,
    prior: &GmmPrior,
    basis: &Basis,
    seed: u64,
) -> Result<Vec<MixSweepRow>> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("mix sweep needs at least one ratio".into()));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mix = MixConfig { ratio, ..*mix_base };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let run = stage2_finetune(params_id, d_id, d_sel, &mix, &mut rng)?;
        let ood_report = evaluate(&run.params, ood_test, prior, basis)?;
        let id_report = evaluate(&run.params, id_test, prior, basis)?;
        rows.push(MixSweepRow {
            ratio,
            ood_psnr: ood_report.psnr_mean,
            ood_ssim: ood_report.ssim_mean,
            ood_frechet: ood_report.frechet,
            id_psnr: id_report.psnr_mean,
            id_ssim: id_report.ssim_mean,
            fallback_rho1: run.fallback_rho1,
        });
    }
    rows.sort_by(|a, b| b.ratio.partial_cmp(&a.ratio).unwrap());
    Ok(rows)
}

/// Fixed-schema CSV for the mixing sweep.
pub fn mix_sweep_csv(rows: &[MixSweepRow]) -> String {
    let mut out = String::from("ratio,ood_psnr,ood_ssim,ood_frechet,id_psnr,id_ssim,fallback_rho1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.ratio, r.ood_psnr, r.ood_ssim, r.ood_frechet, r.id_psnr, r.id_ssim, r.fallback_rho1
        ));
    }
    out
}

/// Run manifest tying together every artifact of one adaptation run; paths
/// are workdir-relative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_manifests: Vec<String>,
    pub oracle_checkpoint: String,
    pub pretrained_checkpoint: String,
    pub adapted_checkpoint: String,
    pub gate_report: String,
    pub stage1_audit: String,
    pub finetune_loss_curve: String,
    pub fallback_rho1: bool,
}
