use permon_core::belief::{matern32, matern32_profile, KernelParams, TargetBelief, EVICTION_FACTOR};
use permon_core::env::TimestampedLocation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, t_max: f64) -> Vec<TimestampedLocation> {
    (0..n)
        .map(|_| TimestampedLocation::new(rng.gen(), rng.gen(), rng.gen::<f64>() * t_max))
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                if f != 0.0 {
                    for j in 0..n {
                        a[r][j] -= f * a[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
    }
    inv
}

/// Posterior mean and std from an explicit inverse of the jittered Gram matrix.
fn dense_oracle(
    xs: &[TimestampedLocation],
    zs: &[f64],
    qs: &[TimestampedLocation],
    k: &KernelParams,
) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| matern32(&xs[i], &xs[j], k) + if i == j { 1e-8 } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = invert(gram);
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for q in qs {
        let ks: Vec<f64> = xs.iter().map(|x| matern32(x, q, k)).collect();
        let mut mean = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                mean += ks[i] * inv[i][j] * zs[j];
                quad += ks[i] * inv[i][j] * ks[j];
            }
        }
        means.push(mean);
        stds.push((1.0 - quad).clamp(0.0, 1.0).sqrt());
    }
    (means, stds)
}

#[test]
fn regression_matches_dense_oracle() {
    let params = KernelParams::default();
    for (seed, n) in [(1u64, 1usize), (2, 10), (3, 30), (4, 60), (5, 100)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = random_points(&mut rng, n, 5.0);
        let zs: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let qs = random_points(&mut rng, 50, 5.0);
        let mut belief = TargetBelief::new(params);
        belief.update(xs.iter().copied().zip(zs.iter().copied()), 0.0).unwrap();
        let field = belief.regress(&qs);
        let (m, s) = dense_oracle(&xs, &zs, &qs, &params);
        for j in 0..qs.len() {
            assert!((field.mean[j] - m[j]).abs() < 1e-8, "mean n={n} j={j}");
            assert!((field.std[j] - s[j]).abs() < 1e-8, "std n={n} j={j}");
        }
    }
}

#[test]
fn eviction_constant_from_root_solve() {
    // sqrt(1 - k^2) = 0.99 along time only; bisection on x = sqrt(3) dt / l3.
    let target = (1.0f64 - 0.99 * 0.99).sqrt();
    let (mut lo, mut hi) = (0.0f64, 20.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (1.0 + mid) * (-mid).exp() > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ratio = lo / 3f64.sqrt();
    assert!((ratio - EVICTION_FACTOR).abs() < 0.01, "ratio {ratio}");
    let k = matern32_profile(EVICTION_FACTOR);
    assert!((k - 0.1411).abs() < 1e-3);
    assert!(((1.0 - k * k).sqrt() - 0.99).abs() < 1e-3);
}

#[test]
fn posterior_std_bounded_and_monotone() {
    let params = KernelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let qs = random_points(&mut rng, 80, 3.0);
    let mut belief = TargetBelief::new(params);
    let mut prev = belief.regress(&qs).std;
    for _ in 0..40 {
        let x = random_points(&mut rng, 1, 3.0)[0];
        belief.add(x, if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
        let now = belief.regress(&qs).std;
        for (a, b) in prev.iter().zip(&now) {
            assert!(*b <= 1.0 + 1e-9);
            assert!(*b <= a + 1e-9);
        }
        prev = now;
    }
}

#[test]
fn regression_is_exchangeable() {
    let params = KernelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs = random_points(&mut rng, 40, 4.0);
    let zs: Vec<f64> = (0..40).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let qs = random_points(&mut rng, 30, 4.0);
    let mut a = TargetBelief::new(params);
    a.update(xs.iter().copied().zip(zs.iter().copied()), 0.0).unwrap();
    let mut b = TargetBelief::new(params);
    b.update(xs.iter().copied().zip(zs.iter().copied()).rev(), 0.0).unwrap();
    let (fa, fb) = (a.regress(&qs), b.regress(&qs));
    for j in 0..qs.len() {
        assert!((fa.mean[j] - fb.mean[j]).abs() < 1e-9);
        assert!((fa.std[j] - fb.std[j]).abs() < 1e-9);
    }
}

#[test]
fn active_set_stays_bounded() {
    let params = KernelParams::default();
    let mut belief = TargetBelief::new(params);
    let bound = (params.eviction_horizon() / 0.1).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for step in 1..=1000 {
        let t = step as f64 * 0.1;
        let loc = TimestampedLocation::new(rng.gen(), rng.gen(), t);
        belief.update([(loc, 0.0)], t).unwrap();
        assert!(belief.len() <= bound, "step {step}: {}", belief.len());
        assert!(belief.active().all(|(l, _)| t - l.t < params.eviction_horizon()));
    }
}

#[test]
fn future_peak_stays_at_stationary_target() {
    let params = KernelParams::default();
    let mut belief = TargetBelief::new(params);
    let p = (0.37, 0.61);
    for step in 0..20 {
        let t = step as f64 * 0.1;
        belief.add(TimestampedLocation::new(p.0, p.1, t), 1.0).unwrap();
    }
    let now = 1.9;
    let mut grid: Vec<TimestampedLocation> = (0..30)
        .flat_map(|i| (0..30).map(move |j| TimestampedLocation::new(i as f64 / 29.0, j as f64 / 29.0, now)))
        .collect();
    grid.push(TimestampedLocation::new(p.0, p.1, now));
    let future = belief.predict_future(&grid, 2.0);
    let (arg, _) = future
        .mean
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    assert_eq!(arg, grid.len() - 1);

    let same = belief.predict_future(&grid, 0.0);
    assert_eq!(same, belief.regress(&grid));
}
