use gsvr::init::{gradient_magnitude, sample_init_pixels, InitConfig};
use gsvr::motion::SliceStack;
use nalgebra::Matrix4;

fn stack(nx: usize, ny: usize, f: impl Fn(usize, usize) -> f64) -> SliceStack {
    let data = (0..nx * ny).map(|p| f(p % nx, p / nx)).collect();
    SliceStack::new([nx, ny, 1], Matrix4::identity(), data, vec![true; nx * ny], 1.0, 1.0).unwrap()
}

fn counts(stacks: &[SliceStack], cfg: &InitConfig, bins: usize) -> Vec<f64> {
    let mut c = vec![0.0; bins];
    for p in sample_init_pixels(stacks, cfg).unwrap() {
        c[p.index] += 1.0;
    }
    c
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn uniform_weight_passes_chi_square() {
    // Structured image, but lambda = 1 ignores its gradients.
    let s = stack(10, 10, |i, j| ((i * 7 + j * 3) % 5) as f64);
    let cfg = InitConfig {
        n_gaussians: 100_000,
        lambda_init: 1.0,
        seed: 11,
        ..InitConfig::default()
    };
    let c = counts(&[s], &cfg, 100);
    let expected = 1000.0;
    let chi2: f64 = c.iter().map(|o| (o - expected).powi(2) / expected).sum();
    // 99 degrees of freedom at the 1% level.
    assert!(chi2 < 134.6416, "chi2 = {chi2}");
}

#[test]
fn sample_density_tracks_gradient_rank() {
    // A ramp whose slope grows along x, plus a bump.
    let s = stack(20, 20, |i, j| {
        let x = i as f64 / 19.0;
        let y = j as f64 / 19.0;
        x * x * x + 0.5 * (-((x - 0.3).powi(2) + (y - 0.6).powi(2)) / 0.02).exp()
    });
    let grad = gradient_magnitude(&s);
    let cfg = InitConfig {
        n_gaussians: 20_000,
        lambda_init: 0.1,
        seed: 5,
        ..InitConfig::default()
    };
    let c = counts(&[s], &cfg, 400);
    let rho = pearson(&ranks(&grad), &ranks(&c));
    assert!(rho > 0.5, "spearman rho = {rho}");
}
