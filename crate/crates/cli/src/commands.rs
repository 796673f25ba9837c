//! Command implementations. Each command acquires the workdir lock, checks
//! its upstream artifacts via manifests, computes, and writes its outputs
//! idempotently: re-running with the same config and seed produces
//! byte-identical files. Nothing here records wall-clock time.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lego_core::adapt::{
    ablate_filter, ablate_mix, mix_sweep_csv, stage0_infer, stage1_build, stage2_finetune,
    FilterAblationReport, MixSweepRow, RunManifest,
};
use lego_core::error::{Error, Result};
use lego_core::gate::{calibrate, GateConfig, GateReport, PseudoPair};
use lego_core::image::{build_dct_basis, encode, Basis, Image};
use lego_core::io::{load_image_stack, save_image_stack};
use lego_core::metrics::{evaluate, metric_report_csv, MetricReport};
use lego_core::net::{load_net, save_net, train, NetParams, OptConfig};
use lego_core::oracle::{build_oracle, load_oracle, save_oracle, GmmPrior};
use lego_core::seed::derive_seed;
use lego_core::synth::{
    degrade, generator_prior, make_clean_set, AffineMap, DatasetManifest, DegradationDraw,
    DegradationSpec, PairedDataset, UnlabeledSet,
};

use crate::config::RunConfig;
use crate::paths;

/// Exclusive workdir lock; prevents concurrent runs from interleaving
/// artifacts. A stale lock after a crash must be removed manually.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = paths::lock_file(workdir);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::InvalidArgument(format!(
                    "workdir is locked by another run ({}); remove the file if stale",
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Resolved execution context shared by all commands.
pub struct Ctx {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: RunConfig, workdir: PathBuf) -> Self {
        let hash = cfg.hash();
        Self { cfg, workdir, hash }
    }

    fn basis(&self) -> Result<Basis> {
        build_dct_basis(self.cfg.image.height, self.cfg.image.width, self.cfg.basis_d)
    }

    fn seed(&self, label: &str, index: u64) -> u64 {
        derive_seed(self.cfg.seed, label, index)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path })
    }
}

fn degrade_split(
    ctx: &Ctx,
    clean: &[Image],
    spec: &DegradationSpec,
    label: &str,
) -> Result<(Vec<Image>, Vec<DegradationDraw>)> {
    let out: Vec<(Image, DegradationDraw)> = clean
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed(label, i as u64));
            degrade(img, spec, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

struct SplitSpec<'a> {
    name: &'a str,
    count: usize,
    spec: Option<&'a DegradationSpec>,
    keep_clean: bool,
    clean_eval_only: bool,
}

fn write_split(
    ctx: &Ctx,
    name: &str,
    inputs: &[Image],
    clean: Option<&[Image]>,
    clean_eval_only: bool,
    affine: AffineMap,
    spec: Option<&DegradationSpec>,
    draws: Vec<Option<DegradationDraw>>,
) -> Result<()> {
    save_image_stack(&paths::split_inputs(&ctx.workdir, name), inputs)?;
    let clean_path = match clean {
        Some(images) => {
            save_image_stack(&paths::split_clean(&ctx.workdir, name), images)?;
            Some(format!("{name}.clean.lgt"))
        }
        None => None,
    };
    let manifest = DatasetManifest {
        split: name.to_string(),
        count: inputs.len(),
        height: ctx.cfg.image.height,
        width: ctx.cfg.image.width,
        master_seed: ctx.cfg.seed,
        inputs_path: format!("{name}.lgt"),
        clean_path,
        clean_eval_only,
        affine,
        degradation: spec.cloned(),
        draws,
    };
    write_json(&paths::split_manifest(&ctx.workdir, name), &manifest)
}

/// Synthesize every dataset split: paired weak-domain train/test, unlabeled
/// strong-domain adaptation inputs, held-out strong-domain test pairs
/// (clean halves for metrics only), and the oracle fitting splits.
pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let basis = ctx.basis()?;
    let d = ctx.cfg.data.clone();
    let generator = generator_prior(
        ctx.cfg.basis_d,
        d.generator_modes,
        d.generator_spread,
        d.generator_decay,
        ctx.seed("generator", 0),
    )?;
    let total = d.n_id_train
        + d.n_id_test
        + d.n_ood_train
        + d.n_ood_test
        + d.n_oracle_clean
        + d.n_oracle_degraded;
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed("clean-pool", 0));
    let (pool, affine) = make_clean_set(&generator, &basis, total, &mut rng)?;

    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let slice = pool[cursor..cursor + n].to_vec();
        cursor += n;
        slice
    };
    let id_train_clean = take(d.n_id_train);
    let id_test_clean = take(d.n_id_test);
    let ood_train_clean = take(d.n_ood_train);
    let ood_test_clean = take(d.n_ood_test);
    let oracle_clean = take(d.n_oracle_clean);
    let oracle_degraded_src = take(d.n_oracle_degraded);

    let splits = [
        SplitSpec {
            name: "id_train",
            count: d.n_id_train,
            spec: Some(&d.weak),
            keep_clean: true,
            clean_eval_only: false,
        },
        SplitSpec {
            name: "id_test",
            count: d.n_id_test,
            spec: Some(&d.weak),
            keep_clean: true,
            clean_eval_only: true,
        },
        SplitSpec {
            name: "ood_train",
            count: d.n_ood_train,
            spec: Some(&d.strong),
            keep_clean: false,
            clean_eval_only: false,
        },
        SplitSpec {
            name: "ood_test",
            count: d.n_ood_test,
            spec: Some(&d.strong),
            keep_clean: true,
            clean_eval_only: true,
        },
    ];
    let clean_by_split: [&[Image]; 4] =
        [&id_train_clean, &id_test_clean, &ood_train_clean, &ood_test_clean];
    for (split, clean) in splits.iter().zip(clean_by_split) {
        let spec = split.spec.expect("degraded split");
        let (inputs, draws) = degrade_split(ctx, clean, spec, &format!("degrade-{}", split.name))?;
        debug_assert_eq!(inputs.len(), split.count);
        write_split(
            ctx,
            split.name,
            &inputs,
            split.keep_clean.then_some(clean),
            split.clean_eval_only,
            affine,
            Some(spec),
            draws.into_iter().map(Some).collect(),
        )?;
    }

    // Oracle splits: the clean class verbatim, the degraded class half weak
    // half strong, sources discarded.
    write_split(
        ctx,
        "oracle_clean",
        &oracle_clean,
        None,
        false,
        affine,
        None,
        vec![None; oracle_clean.len()],
    )?;
    let half = oracle_degraded_src.len() / 2;
    let (weak_inputs, weak_draws) =
        degrade_split(ctx, &oracle_degraded_src[..half], &d.weak, "degrade-oracle-weak")?;
    let (strong_inputs, strong_draws) =
        degrade_split(ctx, &oracle_degraded_src[half..], &d.strong, "degrade-oracle-strong")?;
    write_split(
        ctx,
        "oracle_degraded_weak",
        &weak_inputs,
        None,
        false,
        affine,
        Some(&d.weak),
        weak_draws.into_iter().map(Some).collect(),
    )?;
    write_split(
        ctx,
        "oracle_degraded_strong",
        &strong_inputs,
        None,
        false,
        affine,
        Some(&d.strong),
        strong_draws.into_iter().map(Some).collect(),
    )?;
    log::info!("gen-data: wrote {} images across 7 splits", total);
    Ok(())
}

fn load_split_inputs(ctx: &Ctx, split: &str) -> Result<Vec<Image>> {
    let manifest: DatasetManifest =
        read_json(&require(paths::split_manifest(&ctx.workdir, split))?)?;
    load_image_stack(&paths::data_dir(&ctx.workdir).join(&manifest.inputs_path))
}

fn load_split_paired(ctx: &Ctx, split: &str) -> Result<PairedDataset> {
    let manifest: DatasetManifest =
        read_json(&require(paths::split_manifest(&ctx.workdir, split))?)?;
    let inputs = load_image_stack(&paths::data_dir(&ctx.workdir).join(&manifest.inputs_path))?;
    let clean_rel = manifest.clean_path.ok_or_else(|| Error::MissingArtifact {
        path: paths::split_clean(&ctx.workdir, split),
    })?;
    let clean = load_image_stack(&paths::data_dir(&ctx.workdir).join(&clean_rel))?;
    PairedDataset::new(inputs.into_iter().zip(clean).collect())
}

/// Calibration artifact mapping oracle log-density onto the quality scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub cal_a: f64,
    pub cal_b: f64,
    pub config_hash: String,
}

fn gate_config(ctx: &Ctx, cal: &Calibration) -> GateConfig {
    GateConfig {
        alpha: ctx.cfg.gate.alpha,
        cal_a: cal.cal_a,
        cal_b: cal.cal_b,
        sharpness_weight: ctx.cfg.gate.sharpness_weight,
    }
}

/// Fit the two-class mixture oracle on the dedicated splits and calibrate
/// the quality scale on the clean split.
pub fn cmd_fit_oracle(ctx: &Ctx) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let basis = ctx.basis()?;
    let clean_imgs = load_split_inputs(ctx, "oracle_clean")?;
    let mut degraded_imgs = load_split_inputs(ctx, "oracle_degraded_weak")?;
    degraded_imgs.extend(load_split_inputs(ctx, "oracle_degraded_strong")?);

    let clean_latents: Vec<_> = clean_imgs
        .par_iter()
        .map(|img| encode(img, &basis))
        .collect::<Result<_>>()?;
    let degraded_latents: Vec<_> = degraded_imgs
        .par_iter()
        .map(|img| encode(img, &basis))
        .collect::<Result<_>>()?;

    let fit_seed = ctx.seed("fit-oracle", 0);
    let mut rng = ChaCha12Rng::seed_from_u64(fit_seed);
    let prior = build_oracle(
        &clean_latents,
        &degraded_latents,
        ctx.cfg.oracle.k_per_class,
        ctx.cfg.oracle.em_max_iters,
        ctx.cfg.oracle.em_tol,
        &mut rng,
    )?;
    let ckpt = paths::oracle_checkpoint(&ctx.workdir);
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_oracle(&ckpt, &prior, fit_seed)?;

    let (cal_a, cal_b) = calibrate(&prior, &basis, &clean_imgs)?;
    write_json(
        &paths::calibration(&ctx.workdir),
        &Calibration { cal_a, cal_b, config_hash: ctx.hash.clone() },
    )?;
    log::info!("fit-oracle: {} components, calibration a={cal_a:.4} b={cal_b:.4}", 2 * ctx.cfg.oracle.k_per_class);
    Ok(())
}

fn loss_csv(header: &str, curves: &[&[f64]]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    let n = curves.first().map_or(0, |c| c.len());
    for i in 0..n {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain(curves.iter().map(|c| c[i].to_string()))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Pre-train the restoration model on the weak-domain pairs.
pub fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let id_train = load_split_paired(ctx, "id_train")?;
    let init = {
        let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed("net-init", 0));
        NetParams::init(&mut rng)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed("pretrain", 0));
    let opt = OptConfig {
        lr: ctx.cfg.pretrain.lr,
        weight_decay: ctx.cfg.pretrain.weight_decay,
        ..Default::default()
    };
    let result = train(
        &init,
        &id_train,
        ctx.cfg.pretrain.iters,
        ctx.cfg.pretrain.batch_size,
        opt,
        &mut rng,
    )?;
    save_net(
        &paths::pretrained_checkpoint(&ctx.workdir),
        &result.params,
        ctx.cfg.image.height,
        ctx.cfg.image.width,
        ctx.cfg.seed,
        ctx.cfg.pretrain.iters,
    )?;
    write_text(
        &paths::pretrain_loss_csv(&ctx.workdir),
        &loss_csv("iter,loss", &[&result.loss_curve]),
    )?;
    let first = result.loss_curve.first().copied().unwrap_or(0.0);
    let last = result.loss_curve.last().copied().unwrap_or(0.0);
    log::info!("pretrain: loss {first:.5} -> {last:.5} over {} iters", ctx.cfg.pretrain.iters);
    Ok(())
}

fn load_oracle_and_gate(ctx: &Ctx) -> Result<(GmmPrior, GateConfig)> {
    let prior = load_oracle(&paths::oracle_checkpoint(&ctx.workdir))?;
    let cal: Calibration = read_json(&paths::calibration(&ctx.workdir))?;
    let gate = gate_config(ctx, &cal);
    gate.validate()?;
    Ok((prior, gate))
}

/// Reload the Stage-1 candidate pool (all surviving candidates with scores)
/// from its artifacts.
fn load_candidate_pool(ctx: &Ctx) -> Result<(Vec<PseudoPair>, GateReport)> {
    let report: GateReport = read_json(&require(paths::gate_report(&ctx.workdir))?)?;
    let inputs = load_image_stack(&require(paths::stage1_inputs(&ctx.workdir))?)?;
    let candidates = load_image_stack(&require(paths::stage1_candidates(&ctx.workdir))?)?;
    if inputs.len() != candidates.len() || inputs.len() != report.scores.len() {
        return Err(Error::Format {
            path: paths::gate_report(&ctx.workdir),
            reason: "stage-1 artifacts are inconsistent".into(),
        });
    }
    let pool = inputs
        .into_iter()
        .zip(candidates)
        .zip(report.scores.iter())
        .map(|((y, x), &score)| PseudoPair { y_ood: y, x_hat: x, score })
        .collect();
    Ok((pool, report))
}

/// The full adaptation chain: Stage 0 inference, Stage 1 pseudo-target
/// generation and gating, Stage 2 mixed-supervised fine-tuning.
pub fn cmd_adapt(ctx: &Ctx) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let basis = ctx.basis()?;
    let (prior, gate) = load_oracle_and_gate(ctx)?;
    let (params_id, _) = load_net(&paths::pretrained_checkpoint(&ctx.workdir))?;
    let id_train = load_split_paired(ctx, "id_train")?;
    let ood_inputs = UnlabeledSet::new(load_split_inputs(ctx, "ood_train")?)?;

    let x_tilde = stage0_infer(&params_id, &ood_inputs);
    let stage1 = stage1_build(&prior, &basis, &x_tilde, ood_inputs.inputs(), &ctx.cfg.solver, &gate)?;

    save_image_stack(&paths::stage1_inputs(&ctx.workdir), &stage1.inputs)?;
    save_image_stack(&paths::stage1_candidates(&ctx.workdir), &stage1.candidates)?;
    write_json(&paths::gate_report(&ctx.workdir), &stage1.report)?;
    let mut audit = String::new();
    for record in &stage1.audit {
        audit.push_str(&serde_json::to_string(record).expect("audit serializes"));
        audit.push('\n');
    }
    write_text(&paths::stage1_audit(&ctx.workdir), &audit)?;

    let mix = ctx.cfg.finetune.mix_config();
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed("finetune", 0));
    let run = stage2_finetune(&params_id, &id_train, &stage1.selected, &mix, &mut rng)?;
    save_net(
        &paths::adapted_checkpoint(&ctx.workdir),
        &run.params,
        ctx.cfg.image.height,
        ctx.cfg.image.width,
        ctx.cfg.seed,
        mix.iters,
    )?;
    write_text(
        &paths::finetune_loss_csv(&ctx.workdir),
        &loss_csv("iter,loss_id,loss_ood", &[&run.loss_id, &run.loss_ood]),
    )?;
    let manifest = RunManifest {
        config_hash: ctx.hash.clone(),
        master_seed: ctx.cfg.seed,
        dataset_manifests: [
            "id_train",
            "id_test",
            "ood_train",
            "ood_test",
            "oracle_clean",
            "oracle_degraded_weak",
            "oracle_degraded_strong",
        ]
        .iter()
        .map(|s| format!("data/{s}.json"))
        .collect(),
        oracle_checkpoint: "oracle/oracle.json".into(),
        pretrained_checkpoint: "checkpoints/pretrained.json".into(),
        adapted_checkpoint: "checkpoints/adapted.json".into(),
        gate_report: "stage1/gate_report.json".into(),
        stage1_audit: "stage1/audit.jsonl".into(),
        finetune_loss_curve: "checkpoints/finetune_loss.csv".into(),
        fallback_rho1: run.fallback_rho1,
    };
    write_json(&paths::run_manifest(&ctx.workdir), &manifest)?;
    log::info!(
        "adapt: pass rate {:.3}, {} selected pairs, fallback={}",
        stage1.report.stats.pass_rate,
        stage1.selected.len(),
        run.fallback_rho1
    );
    Ok(())
}

/// Evaluation report: the pre-trained baseline on both test domains, plus
/// the adapted model when its checkpoint exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub baseline_id: MetricReport,
    pub baseline_ood: MetricReport,
    pub adapted_id: Option<MetricReport>,
    pub adapted_ood: Option<MetricReport>,
}

pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let basis = ctx.basis()?;
    let (prior, _) = load_oracle_and_gate(ctx)?;
    let (params_id, _) = load_net(&paths::pretrained_checkpoint(&ctx.workdir))?;
    let id_test = load_split_paired(ctx, "id_test")?;
    let ood_test = load_split_paired(ctx, "ood_test")?;

    let baseline_id = evaluate(&params_id, &id_test, &prior, &basis)?;
    let baseline_ood = evaluate(&params_id, &ood_test, &prior, &basis)?;
    write_text(&paths::eval_csv(&ctx.workdir, "baseline_id"), &metric_report_csv(&baseline_id))?;
    write_text(&paths::eval_csv(&ctx.workdir, "baseline_ood"), &metric_report_csv(&baseline_ood))?;

    let adapted_path = paths::adapted_checkpoint(&ctx.workdir);
    let (adapted_id, adapted_ood) = if adapted_path.exists() {
        let (params, _) = load_net(&adapted_path)?;
        let a_id = evaluate(&params, &id_test, &prior, &basis)?;
        let a_ood = evaluate(&params, &ood_test, &prior, &basis)?;
        write_text(&paths::eval_csv(&ctx.workdir, "adapted_id"), &metric_report_csv(&a_id))?;
        write_text(&paths::eval_csv(&ctx.workdir, "adapted_ood"), &metric_report_csv(&a_ood))?;
        (Some(a_id), Some(a_ood))
    } else {
        (None, None)
    };

    let report = EvalReport {
        config_hash: ctx.hash.clone(),
        config: ctx.cfg.clone(),
        baseline_id,
        baseline_ood,
        adapted_id,
        adapted_ood,
    };
    write_json(&paths::eval_report(&ctx.workdir), &report)?;
    log::info!(
        "eval: baseline OOD {:.2} dB, adapted OOD {}",
        report.baseline_ood.psnr_mean,
        report
            .adapted_ood
            .as_ref()
            .map_or("absent".to_string(), |r| format!("{:.2} dB", r.psnr_mean))
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateWhich {
    Filter,
    Mix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterAblationArtifact {
    pub config_hash: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub report: FilterAblationReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixAblationArtifact {
    pub config_hash: String,
    pub config: RunConfig,
    pub rows: Vec<MixSweepRow>,
}

/// Filtering ablation (gate on vs bypassed) or mixing-ratio sweep; both
/// reuse the frozen Stage-1 pool and the adaptation seed.
pub fn cmd_ablate(ctx: &Ctx, which: AblateWhich) -> Result<()> {
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let basis = ctx.basis()?;
    let (prior, gate) = load_oracle_and_gate(ctx)?;
    let (params_id, _) = load_net(&paths::pretrained_checkpoint(&ctx.workdir))?;
    let id_train = load_split_paired(ctx, "id_train")?;
    let id_test = load_split_paired(ctx, "id_test")?;
    let ood_test = load_split_paired(ctx, "ood_test")?;
    let (pool, _) = load_candidate_pool(ctx)?;
    let mix = ctx.cfg.finetune.mix_config();
    let seed = ctx.seed("finetune", 0);

    match which {
        AblateWhich::Filter => {
            let report = ablate_filter(
                &params_id, &id_train, &pool, gate.alpha, &mix, &ood_test, &prior, &basis, seed,
            )?;
            let csv = format!(
                "arm,pool_size,ood_psnr,ood_ssim,ood_frechet\nwith_filter,{},{},{},{}\nwithout_filter,{},{},{},{}\n",
                report.with_filter.pool_size,
                report.with_filter.report.psnr_mean,
                report.with_filter.report.ssim_mean,
                report.with_filter.report.frechet,
                report.without_filter.pool_size,
                report.without_filter.report.psnr_mean,
                report.without_filter.report.ssim_mean,
                report.without_filter.report.frechet,
            );
            write_text(&paths::ablate_filter_csv(&ctx.workdir), &csv)?;
            write_json(
                &paths::ablate_filter_report(&ctx.workdir),
                &FilterAblationArtifact {
                    config_hash: ctx.hash.clone(),
                    config: ctx.cfg.clone(),
                    report,
                },
            )?;
            log::info!("ablate filter: report written");
        }
        AblateWhich::Mix => {
            let selected: Vec<PseudoPair> =
                pool.iter().filter(|p| p.score >= gate.alpha).cloned().collect();
            let rows = ablate_mix(
                &params_id,
                &id_train,
                &selected,
                &ctx.cfg.ablate_ratios,
                &mix,
                &ood_test,
                &id_test,
                &prior,
                &basis,
                seed,
            )?;
            write_text(&paths::ablate_mix_csv(&ctx.workdir), &mix_sweep_csv(&rows))?;
            write_json(
                &paths::ablate_mix_report(&ctx.workdir),
                &MixAblationArtifact {
                    config_hash: ctx.hash.clone(),
                    config: ctx.cfg.clone(),
                    rows,
                },
            )?;
            log::info!("ablate mix: {} rows written", ctx.cfg.ablate_ratios.len());
        }
    }
    Ok(())
}

/// Stable exit codes: 0 success, 2 config error, 3 missing artifact,
/// 4 numerical divergence, 1 anything else (I/O, format).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}
