use collectivity::collectivity::collectivity_measures;
use collectivity::ensemble::{build_population, ensemble_mean_check, BlockSpec};
use collectivity::spectral::{eigendecompose, split_market_mode};
use collectivity::Execution;

/// Asymptotic Kolmogorov distribution tail P(D_n > d) with the usual
/// small-sample correction.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes erfcc, relative error below 1.2e-7
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

fn ks_statistic(mut z: Vec<f64>) -> f64 {
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    z.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn kolmogorov_reference_values() {
    // P(D > d) at the classic 5% and 1% critical points for large n
    assert!((kolmogorov_p(1.358 / 1e4f64.sqrt(), 10_000) - 0.05).abs() < 2e-3);
    assert!((kolmogorov_p(1.628 / 1e4f64.sqrt(), 10_000) - 0.01).abs() < 1e-3);
    assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
}

#[test]
fn pooled_ensemble_z_scores_look_standard_normal() {
    let specs = [
        BlockSpec {
            block_sizes: vec![3, 3],
            block_values: vec![0.4, 0.4],
            market_offset: 0.1,
            diagonal_value: 1.0,
        },
        BlockSpec::equal_blocks(8, 4, 0.3, 0.2, 1.0),
        BlockSpec {
            block_sizes: vec![2, 3, 4],
            block_values: vec![0.6, 0.2, 0.0],
            market_offset: 0.05,
            diagonal_value: 2.0,
        },
    ];
    let mut pooled = Vec::new();
    for (n, spec) in specs.iter().enumerate() {
        let r = ensemble_mean_check(spec, 42, 4000, 100 + n as u64, Execution::Parallel).unwrap();
        pooled.extend(r.z_scores());
        assert!(r.scalar_z().abs() < 5.0);
    }
    let d = ks_statistic(pooled.clone());
    let p = kolmogorov_p(d, pooled.len());
    assert!(
        p > 0.001,
        "KS D = {d}, p = {p} over {} z-scores",
        pooled.len()
    );
}

/// With a unit diagonal the residual off-diagonal sum is −(K − λ_max) < 0, so
/// the relative market share sits above 1 and approaches it as the offset grows.
#[test]
fn residual_share_shrinks_with_offset() {
    let mut last = f64::INFINITY;
    for step in 1..=10 {
        let offset = 0.05 * step as f64;
        let pop = build_population(&BlockSpec::equal_blocks(30, 10, 0.3, offset, 1.0)).unwrap();
        let d = eigendecompose(&pop).unwrap();
        let split = split_market_mode(&d).unwrap();
        let rec =
            collectivity_measures(&split, &split, &pop, &pop, chrono::NaiveDate::MIN).unwrap();
        let excess = rec.rel_cov_ble.unwrap() - 1.0;
        assert!(
            excess > 0.0 && excess < last,
            "offset {offset}: {excess} vs {last}"
        );
        last = excess;
    }
}
