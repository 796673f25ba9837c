// Temporary diagnostics over an existing full-scale run directory.

use lego_core::image::{build_dct_basis, encode, Image};
use lego_core::io::load_image_stack;
use lego_core::metrics::frechet_parts;
use lego_core::net::{forward, load_net};
use std::path::Path;

fn band_stats(latents: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, &v) in mean.iter_mut().zip(z) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for z in latents {
        for i in 0..d {
            var[i] += (z[i] - mean[i]).powi(2) / (n - 1.0);
        }
    }
    (mean, var)
}

fn main() {
    let wd = std::env::args().nth(1).expect("workdir");
    let wd = Path::new(&wd);
    let basis = build_dct_basis(32, 32, 48).unwrap();
    let inputs = load_image_stack(&wd.join("data/ood_test.lgt")).unwrap();
    let clean = load_image_stack(&wd.join("data/ood_test.clean.lgt")).unwrap();
    let (base, _) = load_net(&wd.join("checkpoints/pretrained.json")).unwrap();
    let (adapted, _) = load_net(&wd.join("checkpoints/adapted.json")).unwrap();

    let restore = |p: &lego_core::net::NetParams| -> Vec<Image> {
        inputs.iter().map(|y| forward(p, y)).collect()
    };
    let base_out = restore(&base);
    let adapted_out = restore(&adapted);

    let enc = |imgs: &[Image]| -> Vec<Vec<f64>> {
        imgs.iter().map(|i| encode(i, &basis).unwrap().into_vec()).collect()
    };
    let zc = enc(&clean);
    let zb = enc(&base_out);
    let za = enc(&adapted_out);
    let zi = enc(&inputs);

    let (mc, vc) = band_stats(&zc, 48);
    let (mb, vb) = band_stats(&zb, 48);
    let (ma, va) = band_stats(&za, 48);
    let (_, vi) = band_stats(&zi, 48);

    println!("dim | clean var | input var | base var | adapted var | mean c/b/a");
    for band in [(0usize, 1usize), (1, 6), (6, 15), (15, 28), (28, 48)] {
        let avg = |v: &[f64]| v[band.0..band.1].iter().sum::<f64>() / (band.1 - band.0) as f64;
        println!(
            "{:>2}-{:>2} | {:>9.4} | {:>9.4} | {:>8.4} | {:>11.4} | {:+.3}/{:+.3}/{:+.3}",
            band.0,
            band.1,
            avg(&vc),
            avg(&vi),
            avg(&vb),
            avg(&va),
            avg(&mc),
            avg(&mb),
            avg(&ma),
        );
    }
    let pb = frechet_parts(&base_out, &clean, &basis).unwrap();
    let pa = frechet_parts(&adapted_out, &clean, &basis).unwrap();
    println!("frechet parts mean/trace: base {:.4}/{:.4} adapted {:.4}/{:.4}", pb.0, pb.1, pa.0, pa.1);

    // Mean-term decomposition by band.
    for band in [(0usize, 1usize), (1, 6), (6, 15), (15, 28), (28, 48)] {
        let mt_b: f64 = (band.0..band.1).map(|i| (mb[i] - mc[i]).powi(2)).sum();
        let mt_a: f64 = (band.0..band.1).map(|i| (ma[i] - mc[i]).powi(2)).sum();
        println!("band {:>2}-{:>2}: mean-term base {:.4} adapted {:.4}", band.0, band.1, mt_b, mt_a);
    }
}
