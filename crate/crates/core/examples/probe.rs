// Temporary tuning probe; not part of the deliverable.

use lego_core::adapt::{ablate_filter, ablate_mix, stage0_infer, stage1_build, MixConfig};
use lego_core::flow::SolverConfig;
use lego_core::gate::{calibrate, GateConfig, PseudoPair};
use lego_core::image::{build_dct_basis, encode, Image};
use lego_core::metrics::{evaluate, psnr};
use lego_core::net::{forward, train, NetParams, OptConfig};
use lego_core::oracle::build_oracle;
use lego_core::seed::derive_seed;
use lego_core::synth::{
    degrade, generator_prior, make_clean_set, preset_strong, preset_weak, DegradationSpec,
    PairedDataset, UnlabeledSet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const H: usize = 24;
const W: usize = 24;
const D: usize = 28;

fn degrade_split(clean: &[Image], spec: &DegradationSpec, label: &str, master: u64) -> Vec<Image> {
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master, label, i as u64));
            degrade(img, spec, &mut rng).unwrap().0
        })
        .collect()
}

fn run(master: u64, spread: f64, blend: f64) {
    let basis = build_dct_basis(H, W, D).unwrap();
    let generator = generator_prior(D, 4, spread, 0.7, derive_seed(master, "generator", 0)).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master, "clean", 0));
    let (pool, _) = make_clean_set(&generator, &basis, 96 + 48 + 48 + 48 + 128 + 128, &mut rng).unwrap();
    let (id_train_clean, rest) = pool.split_at(96);
    let (id_test_clean, rest) = rest.split_at(48);
    let (ood_train_clean, rest) = rest.split_at(48);
    let (ood_test_clean, rest) = rest.split_at(48);
    let (oracle_clean, oracle_degr_src) = rest.split_at(128);

    let weak = preset_weak();
    let strong = preset_strong();
    let id_train = PairedDataset::new(
        degrade_split(id_train_clean, &weak, "d-id-train", master)
            .into_iter()
            .zip(id_train_clean.iter().cloned())
            .collect(),
    )
    .unwrap();
    let id_test = PairedDataset::new(
        degrade_split(id_test_clean, &weak, "d-id-test", master)
            .into_iter()
            .zip(id_test_clean.iter().cloned())
            .collect(),
    )
    .unwrap();
    let ood_train =
        UnlabeledSet::new(degrade_split(ood_train_clean, &strong, "d-ood-train", master)).unwrap();
    let ood_test = PairedDataset::new(
        degrade_split(ood_test_clean, &strong, "d-ood-test", master)
            .into_iter()
            .zip(ood_test_clean.iter().cloned())
            .collect(),
    )
    .unwrap();

    let clean_latents: Vec<_> = oracle_clean.iter().map(|i| encode(i, &basis).unwrap()).collect();
    let degraded_imgs: Vec<Image> = {
        let half = oracle_degr_src.len() / 2;
        let mut v = degrade_split(&oracle_degr_src[..half], &weak, "d-oracle-weak", master);
        v.extend(degrade_split(&oracle_degr_src[half..], &strong, "d-oracle-strong", master));
        v
    };
    let degraded_latents: Vec<_> = degraded_imgs.iter().map(|i| encode(i, &basis).unwrap()).collect();
    let mut fit_rng = ChaCha12Rng::seed_from_u64(derive_seed(master, "oracle", 0));
    let oracle = build_oracle(&clean_latents, &degraded_latents, 4, 200, 1e-7, &mut fit_rng).unwrap();
    let (cal_a, cal_b) = calibrate(&oracle, &basis, oracle_clean).unwrap();
    let gate_cfg = GateConfig { cal_a, cal_b, ..Default::default() };

    let init = {
        let mut r = ChaCha12Rng::seed_from_u64(derive_seed(master, "net-init", 0));
        NetParams::init(&mut r)
    };
    let mut train_rng = ChaCha12Rng::seed_from_u64(derive_seed(master, "pretrain", 0));
    let pretrained = train(&init, &id_train, 800, 16, OptConfig { lr: 1e-3, ..Default::default() }, &mut train_rng)
        .unwrap()
        .params;

    let x_tilde = stage0_infer(&pretrained, &ood_train);
    let solver = SolverConfig { blend, ..Default::default() };
    let s1 = stage1_build(&oracle, &basis, &x_tilde, ood_train.inputs(), &solver, &gate_cfg).unwrap();

    let mean_psnr = |imgs: &[(usize, &Image)]| -> f64 {
        imgs.iter()
            .map(|(orig, img)| psnr(img, &ood_train_clean[*orig]).unwrap())
            .sum::<f64>()
            / imgs.len() as f64
    };
    let tilde_list: Vec<(usize, &Image)> =
        s1.kept_indices.iter().map(|&i| (i, &x_tilde[i])).collect();
    let pseudo_list: Vec<(usize, &Image)> = s1
        .kept_indices
        .iter()
        .zip(&s1.candidates)
        .map(|(&i, c)| (i, c))
        .collect();
    let tilde_psnr = mean_psnr(&tilde_list);
    let pseudo_psnr = mean_psnr(&pseudo_list);

    let mix = MixConfig { iters: 400, batch_size: 16, ..Default::default() };
    let mut ft_rng = ChaCha12Rng::seed_from_u64(derive_seed(master, "finetune", 0));
    let run =
        lego_core::adapt::stage2_finetune(&pretrained, &id_train, &s1.selected, &mix, &mut ft_rng)
            .unwrap();
    let base = evaluate(&pretrained, &ood_test, &oracle, &basis).unwrap();
    let adapted = evaluate(&run.params, &ood_test, &oracle, &basis).unwrap();
    let id_base = id_test
        .pairs()
        .iter()
        .map(|(y, x)| psnr(&forward(&pretrained, y), x).unwrap())
        .sum::<f64>()
        / id_test.len() as f64;
    let id_adapted = id_test
        .pairs()
        .iter()
        .map(|(y, x)| psnr(&forward(&run.params, y), x).unwrap())
        .sum::<f64>()
        / id_test.len() as f64;

    // Frechet decomposition of baseline vs adapted restorations.
    let restored = |p: &NetParams| -> Vec<Image> {
        ood_test.pairs().iter().map(|(y, _)| forward(p, y)).collect()
    };
    let clean_refs: Vec<Image> = ood_test.pairs().iter().map(|(_, x)| x.clone()).collect();
    let parts_base =
        lego_core::metrics::frechet_parts(&restored(&pretrained), &clean_refs, &basis).unwrap();
    let parts_adapt =
        lego_core::metrics::frechet_parts(&restored(&run.params), &clean_refs, &basis).unwrap();
    println!(
        "  frechet parts (mean/trace): base {:.3}/{:.3} adapted {:.3}/{:.3}; density base {:.2} adapted {:.2}",
        parts_base.0, parts_base.1, parts_adapt.0, parts_adapt.1,
        base.mean_restored_log_density, adapted.mean_restored_log_density,
    );

    let all: Vec<PseudoPair> = s1
        .inputs
        .iter()
        .zip(&s1.candidates)
        .zip(&s1.report.scores)
        .map(|((y, x), &score)| PseudoPair { y_ood: y.clone(), x_hat: x.clone(), score })
        .collect();
    let filt = ablate_filter(
        &pretrained, &id_train, &all, gate_cfg.alpha, &mix, &ood_test, &oracle, &basis,
        derive_seed(master, "ab-filter", 0),
    )
    .unwrap();
    let rows = ablate_mix(
        &pretrained, &id_train, &s1.selected, &[1.0, 0.9, 0.0], &mix, &ood_test, &id_test,
        &oracle, &basis, derive_seed(master, "ab-mix", 0),
    )
    .unwrap();

    println!(
        "seed {master} spread {spread} blend {blend}: pass {:.2} | x~ {tilde_psnr:.2} x^ {pseudo_psnr:.2} | ood {:.2}->{:.2} dB, fr {:.3}->{:.3} | id {id_base:.2}->{id_adapted:.2} | filt fr {:.3}/{:.3} (n {} vs {}) | mix fr 1.0:{:.3} 0.9:{:.3} 0.0:{:.3} psnr 1.0:{:.2} 0.9:{:.2}",
        s1.report.stats.pass_rate,
        base.psnr_mean,
        adapted.psnr_mean,
        base.frechet,
        adapted.frechet,
        filt.with_filter.report.frechet,
        filt.without_filter.report.frechet,
        filt.with_filter.pool_size,
        filt.without_filter.pool_size,
        rows[0].ood_frechet,
        rows[1].ood_frechet,
        rows[2].ood_frechet,
        rows[0].ood_psnr,
        rows[1].ood_psnr,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let spreads: Vec<f64> = args
        .get(1)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.35, 0.18]);
    let blends: Vec<f64> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1.0, 0.7, 0.5]);
    let seeds: Vec<u64> = args
        .get(3)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![88]);
    for &spread in &spreads {
        for &blend in &blends {
            for &seed in &seeds {
                run(seed, spread, blend);
            }
        }
    }
}
