//! Gradient correctness of the hand-rolled backward pass against central
//! finite differences, over random nets and random parameter coordinates.

use lego_core::image::Image;
use lego_core::net::{backward_example, forward, loss_restore, train, NetParams, OptConfig};
use lego_core::metrics::psnr;
use lego_core::synth::PairedDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn random_image(w: usize, h: usize, rng: &mut ChaCha12Rng) -> Image {
    Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_net(rng: &mut ChaCha12Rng) -> NetParams {
    let mut p = NetParams::init(rng);
    // Randomize the zero-initialized output layer and the biases, otherwise
    // the chain below conv3 carries no gradient signal.
    for w in p.w3.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *w = 0.25 * n;
    }
    for b in p.b1.iter_mut().chain(p.b2.iter_mut()).chain(p.b3.iter_mut()) {
        let n: f64 = rng.sample(StandardNormal);
        *b = 0.05 * n;
    }
    p
}

struct Coord {
    group: usize,
    index: usize,
}

fn group_lens(p: &NetParams) -> [usize; 6] {
    [p.w1.len(), p.b1.len(), p.w2.len(), p.b2.len(), p.w3.len(), p.b3.len()]
}

fn get(p: &NetParams, c: &Coord) -> f64 {
    match c.group {
        0 => p.w1[c.index],
        1 => p.b1[c.index],
        2 => p.w2[c.index],
        3 => p.b2[c.index],
        4 => p.w3[c.index],
        _ => p.b3[c.index],
    }
}

fn bump(p: &mut NetParams, c: &Coord, delta: f64) {
    match c.group {
        0 => p.w1[c.index] += delta,
        1 => p.b1[c.index] += delta,
        2 => p.w2[c.index] += delta,
        3 => p.b2[c.index] += delta,
        4 => p.w3[c.index] += delta,
        _ => p.b3[c.index] += delta,
    }
}

#[test]
fn gradients_match_central_differences_over_random_nets() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _net in 0..10 {
        let params = random_net(&mut rng);
        let y = random_image(32, 32, &mut rng);
        let x = random_image(32, 32, &mut rng);
        let (_, grads) = backward_example(&params, &y, &x).unwrap();
        let lens = group_lens(&params);
        for _probe in 0..50 {
            let group = rng.random_range(0..6);
            let coord = Coord { group, index: rng.random_range(0..lens[group]) };
            let analytic = get(&grads, &coord);
            // Small step keeps central differences off leaky-ReLU kinks;
            // f64 arithmetic leaves plenty of headroom below it.
            let h = 1e-6;
            let mut plus = params.clone();
            bump(&mut plus, &coord, h);
            let mut minus = params.clone();
            bump(&mut minus, &coord, -h);
            let fd = (loss_restore(&plus, &y, &x).unwrap()
                - loss_restore(&minus, &y, &x).unwrap())
                / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "group {} index {}: analytic {analytic} vs fd {fd} (rel {rel})",
                coord.group,
                coord.index
            );
        }
    }
    println!("worst relative gradient error over 10 nets x 50 coords: {worst:.3e}");
}

#[test]
fn training_beats_identity_on_its_own_distribution() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    // Structured clean images plus noise; local smoothing is learnable.
    let basis = lego_core::image::build_dct_basis(16, 16, 12).unwrap();
    let prior = lego_core::synth::generator_prior(12, 3, 0.35, 0.7, 7).unwrap();
    let (clean_set, _) = lego_core::synth::make_clean_set(&prior, &basis, 32, &mut rng).unwrap();
    let pairs: Vec<(Image, Image)> = clean_set
        .into_iter()
        .map(|clean| {
            let mut noisy = clean.clone();
            for p in noisy.pixels_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *p += 0.08 * n;
            }
            (noisy, clean)
        })
        .collect();
    let ds = PairedDataset::new(pairs).unwrap();
    let init = NetParams::init(&mut rng);
    let mut train_rng = ChaCha12Rng::seed_from_u64(8);
    let result = train(&init, &ds, 400, 16, OptConfig::default(), &mut train_rng).unwrap();

    let mean_psnr = |params: &NetParams| -> f64 {
        ds.pairs()
            .iter()
            .map(|(y, x)| psnr(&forward(params, y), x).unwrap())
            .sum::<f64>()
            / ds.len() as f64
    };
    let identity = mean_psnr(&NetParams::zeros());
    let trained = mean_psnr(&result.params);
    assert!(
        trained >= identity,
        "trained {trained} dB below identity {identity} dB on the training distribution"
    );
    let early = result.loss_curve[..20].iter().sum::<f64>() / 20.0;
    let late = result.loss_curve[result.loss_curve.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(late < 0.5 * early, "loss did not drop: {early} -> {late}");
}
