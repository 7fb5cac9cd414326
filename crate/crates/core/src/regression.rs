//! Partial-correlation baselines: each stock is regressed on a mediating
//! series, `G_i(t) = α_i + β_i I(t) + ε_i(t)`, and the off-diagonal mean of the
//! residual correlation matrix is reported.

use std::collections::HashMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DMatrixView, DVector};
use thiserror::Error;

use crate::ingest::{ReturnMatrix, WindowView, DATE_FORMAT};
use crate::matrices::{correlation, mean_offdiagonal, standardize_rows};

/// Mediator variance (1/T) at or below which the slope is not identifiable.
pub const DEGENERATE_MEDIATOR_VARIANCE: f64 = 1e-15;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("index series has no return for {}", fmt_dates(.0))]
    MissingIndexDates(Vec<NaiveDate>),

    #[error("mediator has {mediator} points but the window has {window}")]
    LengthMismatch { mediator: usize, window: usize },

    #[error("index file must hold exactly one series, found {0}")]
    IndexColumns(usize),
}

fn fmt_dates(dates: &[NaiveDate]) -> String {
    const SHOWN: usize = 5;
    let mut s: Vec<String> = dates
        .iter()
        .take(SHOWN)
        .map(|d| d.format(DATE_FORMAT).to_string())
        .collect();
    if dates.len() > SHOWN {
        s.push(format!("... ({} dates in total)", dates.len()));
    }
    s.join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum MediatorKind {
    /// Cross-sectional mean return.
    #[default]
    #[value(name = "avg")]
    Average,
    /// Returns of a separately supplied index.
    Index,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediatorSeries {
    pub kind: MediatorKind,
    pub values: DVector<f64>,
}

/// Index returns addressable by date.
#[derive(Debug, Clone)]
pub struct IndexSeries {
    by_date: HashMap<NaiveDate, f64>,
}

impl IndexSeries {
    pub fn from_returns(returns: &ReturnMatrix) -> Result<Self, RegressionError> {
        if returns.num_instruments() != 1 {
            return Err(RegressionError::IndexColumns(returns.num_instruments()));
        }
        let by_date = returns
            .dates()
            .iter()
            .zip(returns.values().row(0).iter())
            .map(|(d, v)| (*d, *v))
            .collect();
        Ok(Self { by_date })
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.by_date.get(&date).copied()
    }
}

/// I₁(t) = (1/K) Σ_i G_i(t).
pub fn mediator_average(data: DMatrixView<'_, f64>) -> MediatorSeries {
    let k = data.nrows().max(1) as f64;
    let values = DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.sum() / k));
    MediatorSeries {
        kind: MediatorKind::Average,
        values,
    }
}

/// I₂(t): the index returns on the window's dates.
pub fn mediator_index(
    index: &IndexSeries,
    window: &WindowView<'_>,
) -> Result<MediatorSeries, RegressionError> {
    let mut missing = Vec::new();
    let values: Vec<f64> = window
        .dates()
        .iter()
        .map(|d| {
            index.get(*d).unwrap_or_else(|| {
                missing.push(*d);
                0.0
            })
        })
        .collect();
    if !missing.is_empty() {
        return Err(RegressionError::MissingIndexDates(missing));
    }
    Ok(MediatorSeries {
        kind: MediatorKind::Index,
        values: DVector::from_vec(values),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// K×T residuals ε_i(t).
    pub residuals: DMatrix<f64>,
    /// Mediator variance was too small: β = 0 and residuals are the demeaned returns.
    pub degenerate_mediator: bool,
}

/// Per-stock ordinary least squares with β = cov(G_i, I) / var(I).
pub fn regress_residuals(
    data: DMatrixView<'_, f64>,
    mediator: &MediatorSeries,
) -> Result<RegressionFit, RegressionError> {
    let (k, t) = data.shape();
    if mediator.values.len() != t {
        return Err(RegressionError::LengthMismatch {
            mediator: mediator.values.len(),
            window: t,
        });
    }
    let tf = t as f64;
    let i_mean = mediator.values.mean();
    let i_dev = mediator.values.add_scalar(-i_mean);
    let i_ss = i_dev.norm_squared();
    let i_var = i_ss / tf;
    let degenerate_mediator = i_var.is_nan() || i_var <= DEGENERATE_MEDIATOR_VARIANCE;

    let mut alpha = DVector::zeros(k);
    let mut beta = DVector::zeros(k);
    let mut residuals = DMatrix::zeros(k, t);
    for i in 0..k {
        let row = data.row(i);
        let g_mean = row.sum() / tf;
        let b = if degenerate_mediator {
            0.0
        } else {
            row.iter()
                .zip(i_dev.iter())
                .map(|(g, d)| (g - g_mean) * d)
                .sum::<f64>()
                / i_ss
        };
        beta[i] = b;
        alpha[i] = g_mean - b * i_mean;
        for s in 0..t {
            residuals[(i, s)] = (row[s] - g_mean) - b * i_dev[s];
        }
    }
    Ok(RegressionFit {
        alpha,
        beta,
        residuals,
        degenerate_mediator,
    })
}

/// Off-diagonal mean of the residual correlation matrix; `None` when every
/// residual row is flat or there are fewer than two stocks.
pub fn residual_collectivity(fit: &RegressionFit, sigma_floor: f64) -> Option<f64> {
    let k = fit.residuals.nrows();
    if k < 2 {
        return None;
    }
    let st = standardize_rows(fit.residuals.as_view(), sigma_floor);
    if st.degenerate.len() == k {
        return None;
    }
    mean_offdiagonal(&correlation(&st)).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::DEFAULT_SIGMA_FLOOR;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn normal_matrix(k: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(k, t, |_, _| StandardNormal.sample(&mut rng))
    }

    fn dates(n: usize) -> Vec<NaiveDate> {
        (0..n)
            .map(|i| NaiveDate::from_ymd_opt(2001, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect()
    }

    #[test]
    fn average_mediator() {
        let m = mediator_average(mat(&[&[1.0, 3.0], &[3.0, 1.0]]).as_view());
        assert_eq!(m.values.as_slice(), &[2.0, 2.0]);
        let single = mat(&[&[0.5, -0.25, 1.0]]);
        assert_eq!(
            mediator_average(single.as_view()).values.as_slice(),
            &[0.5, -0.25, 1.0]
        );
        let r = normal_matrix(5, 9, 1);
        let m = mediator_average(r.as_view());
        for t in 0..9 {
            let brute = (0..5).map(|i| r[(i, t)]).sum::<f64>() / 5.0;
            assert!((m.values[t] - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn index_mediator_slices_and_errors() {
        let d = dates(10);
        let mut vals = DMatrix::from_fn(1, 10, |_, j| j as f64 * 0.01);
        vals[(0, 4)] = 0.0;
        let idx = IndexSeries::from_returns(
            &ReturnMatrix::new(vec!["IDX".into()], d.clone(), vals.clone()).unwrap(),
        )
        .unwrap();

        let stocks = ReturnMatrix::new(vec!["A".into()], d.clone(), DMatrix::zeros(1, 10)).unwrap();
        let w = WindowView::new(&stocks, 0, 2, 5).unwrap();
        let m = mediator_index(&idx, &w).unwrap();
        assert_eq!(m.values.as_slice(), &[0.02, 0.03, 0.0, 0.05, 0.06]);

        let later = ReturnMatrix::new(vec!["A".into()], dates(14), DMatrix::zeros(1, 14)).unwrap();
        let w = WindowView::new(&later, 0, 8, 6).unwrap();
        let err = mediator_index(&idx, &w).unwrap_err();
        match &err {
            RegressionError::MissingIndexDates(missing) => assert_eq!(missing.len(), 4),
            e => panic!("{e:?}"),
        }
        assert!(err.to_string().contains("2001-01-11"));

        let two = ReturnMatrix::new(vec!["A".into(), "B".into()], dates(2), DMatrix::zeros(2, 2))
            .unwrap();
        assert_eq!(
            IndexSeries::from_returns(&two).unwrap_err(),
            RegressionError::IndexColumns(2)
        );
    }

    #[test]
    fn perfect_fit() {
        let i = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.3]);
        let g = DMatrix::from_fn(1, 4, |_, t| 2.0 * i[t]);
        let fit = regress_residuals(
            g.as_view(),
            &MediatorSeries {
                kind: MediatorKind::Index,
                values: i,
            },
        )
        .unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-14);
        assert!(fit.residuals.amax() < 1e-15);
    }

    #[test]
    fn orthogonal_returns_have_zero_slope() {
        let i = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let g = mat(&[&[2.0, 2.0, 0.0, 0.0]]);
        let fit = regress_residuals(
            g.as_view(),
            &MediatorSeries {
                kind: MediatorKind::Index,
                values: i,
            },
        )
        .unwrap();
        assert_eq!(fit.beta[0], 0.0);
        assert_eq!(fit.residuals, mat(&[&[1.0, 1.0, -1.0, -1.0]]));
    }

    #[test]
    fn degenerate_mediator_path() {
        let g = normal_matrix(3, 6, 2);
        let flat = MediatorSeries {
            kind: MediatorKind::Index,
            values: DVector::from_element(6, 0.01),
        };
        let fit = regress_residuals(g.as_view(), &flat).unwrap();
        assert!(fit.degenerate_mediator);
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        assert_eq!(fit.residuals, crate::matrices::demean_rows(g.as_view()));
    }

    #[test]
    fn length_mismatch() {
        let g = normal_matrix(2, 5, 3);
        let m = MediatorSeries {
            kind: MediatorKind::Index,
            values: DVector::zeros(4),
        };
        assert_eq!(
            regress_residuals(g.as_view(), &m).unwrap_err(),
            RegressionError::LengthMismatch {
                mediator: 4,
                window: 5
            }
        );
    }

    #[test]
    fn slopes_match_closed_form_oracle() {
        for seed in 0..20 {
            let g = normal_matrix(5, 42, seed);
            let m = mediator_average(g.as_view());
            let fit = regress_residuals(g.as_view(), &m).unwrap();
            let n = 42.0;
            let im = m.values.iter().sum::<f64>() / n;
            let var_i = m.values.iter().map(|x| (x - im).powi(2)).sum::<f64>() / n;
            let sd_i = var_i.sqrt();
            for i in 0..5 {
                let gm = (0..42).map(|t| g[(i, t)]).sum::<f64>() / n;
                let cov = (0..42)
                    .map(|t| (g[(i, t)] - gm) * (m.values[t] - im))
                    .sum::<f64>()
                    / n;
                assert!((fit.beta[i] - cov / var_i).abs() < 1e-10);
                assert!((fit.alpha[i] - (gm - cov / var_i * im)).abs() < 1e-10);
                let eps = fit.residuals.row(i);
                let sd_e = (eps.norm_squared() / n).sqrt();
                let dot: f64 = (0..42).map(|t| eps[t] * (m.values[t] - im)).sum();
                assert!(dot.abs() <= 1e-8 * n * sd_i * sd_e);
                assert!(eps.mean().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn proportional_stocks_leave_undefined_collectivity() {
        let i = DVector::from_vec(vec![0.01, -0.02, 0.015, 0.0, 0.03]);
        let g = DMatrix::from_fn(2, 5, |r, t| (r as f64 + 1.5) * i[t]);
        let fit = regress_residuals(
            g.as_view(),
            &MediatorSeries {
                kind: MediatorKind::Index,
                values: i,
            },
        )
        .unwrap();
        assert_eq!(residual_collectivity(&fit, DEFAULT_SIGMA_FLOOR), None);
    }

    #[test]
    fn orthogonal_residuals_give_zero() {
        let fit = RegressionFit {
            alpha: DVector::zeros(2),
            beta: DVector::zeros(2),
            residuals: mat(&[&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]]),
            degenerate_mediator: false,
        };
        assert_eq!(residual_collectivity(&fit, DEFAULT_SIGMA_FLOOR), Some(0.0));
    }

    /// Textbook partial correlation: r_ij·I = (r_ij − r_iI r_jI) / sqrt((1 − r_iI²)(1 − r_jI²)).
    fn partial_correlation_oracle(g: &DMatrix<f64>, med: &DVector<f64>) -> f64 {
        let pearson = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            c / (va * vb).sqrt()
        };
        let k = g.nrows();
        let rows: Vec<Vec<f64>> = (0..k).map(|i| g.row(i).iter().copied().collect()).collect();
        let m = med.as_slice();
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let (rij, ri, rj) = (
                        pearson(&rows[i], &rows[j]),
                        pearson(&rows[i], m),
                        pearson(&rows[j], m),
                    );
                    sum += (rij - ri * rj) / ((1.0 - ri * ri) * (1.0 - rj * rj)).sqrt();
                }
            }
        }
        sum / (k * (k - 1)) as f64
    }

    #[test]
    fn two_block_market_matches_partial_correlation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (k, t) = (8, 42);
        let market: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sectors: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..t).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let g = DMatrix::from_fn(k, t, |i, s| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            0.01 * (market[s] + 0.7 * sectors[i / 4][s] + 0.5 * noise)
        });
        let m = mediator_average(g.as_view());
        let fit = regress_residuals(g.as_view(), &m).unwrap();
        let got = residual_collectivity(&fit, DEFAULT_SIGMA_FLOOR).unwrap();
        let oracle = partial_correlation_oracle(&g, &m.values);
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn equal_betas_give_zero_cross_sectional_residual_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, t) = (6, 42);
        let factor: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        // noise rows sum to zero at each t so every stock has the same slope on I₁
        let mut noise = normal_matrix(k, t, 9);
        for s in 0..t {
            let mean = noise.column(s).mean();
            noise.column_mut(s).add_scalar_mut(-mean);
        }
        let g = DMatrix::from_fn(k, t, |i, s| {
            0.3 + 1.2 * factor[s] + 0.01 * i as f64 + noise[(i, s)]
        });
        let fit = regress_residuals(g.as_view(), &mediator_average(g.as_view())).unwrap();
        for s in 0..t {
            assert!(fit.residuals.column(s).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn single_factor_market_has_small_residual_collectivity() {
        let mut values: Vec<f64> = (0..100)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (k, t) = (50, 42);
                let factor: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
                let betas: Vec<f64> = (0..k).map(|i| 0.5 + i as f64 / k as f64).collect();
                let g = DMatrix::from_fn(k, t, |i, s| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    betas[i] * factor[s] + e
                });
                let fit = regress_residuals(g.as_view(), &mediator_average(g.as_view())).unwrap();
                residual_collectivity(&fit, DEFAULT_SIGMA_FLOOR)
                    .unwrap()
                    .abs()
            })
            .collect();
        values.sort_by(f64::total_cmp);
        let median = 0.5 * (values[49] + values[50]);
        assert!(median < 0.05, "median {median}");
    }

    proptest! {
        #[test]
        fn residual_collectivity_ignores_stock_scale(seed in any::<u64>(), row in 0usize..5, c in 0.01f64..100.0) {
            let g = normal_matrix(5, 42, seed);
            let mut scaled = g.clone();
            scaled.row_mut(row).scale_mut(c);
            // the index mediator is fixed, so rescaling one stock only rescales its residual
            let med = MediatorSeries { kind: MediatorKind::Index, values: normal_matrix(1, 42, seed ^ 1).row(0).transpose() };
            let a = residual_collectivity(&regress_residuals(g.as_view(), &med).unwrap(), DEFAULT_SIGMA_FLOOR).unwrap();
            let b = residual_collectivity(&regress_residuals(scaled.as_view(), &med).unwrap(), DEFAULT_SIGMA_FLOOR).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
