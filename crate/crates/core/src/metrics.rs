//! Global and local attack-effect metrics in raw speed units.
//!
//! Global metrics compare predictions on attacked inputs against ground
//! truth; local metrics compare attacked predictions against clean
//! predictions. All four are plain means over every
//! (sample, horizon step, node) entry, so values are comparable across
//! horizon lengths.

use crate::error::{Result, StadvError};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    pub g_mae: f64,
    pub l_mae: f64,
    pub g_rmse: f64,
    pub l_rmse: f64,
    pub sample_count: usize,
    pub node_count: usize,
    pub degradation_pct: Option<f64>,
}

fn check_pairs(name: &'static str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(StadvError::ShapeMismatch {
            primitive: name,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(StadvError::invalid(format!("{} over zero samples", name)));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(StadvError::ShapeMismatch {
                primitive: name,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn mean_abs(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            acc += (u - v).abs();
            count += 1.0;
        }
    }
    acc / count
}

fn root_mean_square(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            acc += (u - v) * (u - v);
            count += 1.0;
        }
    }
    (acc / count).sqrt()
}

/// Mean absolute error between attacked predictions and ground truth.
pub fn g_mae(predictions_on_adv: &[Tensor], true_labels: &[Tensor]) -> Result<f64> {
    check_pairs("g_mae", predictions_on_adv, true_labels)?;
    Ok(mean_abs(predictions_on_adv, true_labels))
}

/// Mean absolute error between attacked and clean predictions.
pub fn l_mae(predictions_on_adv: &[Tensor], predictions_on_clean: &[Tensor]) -> Result<f64> {
    check_pairs("l_mae", predictions_on_adv, predictions_on_clean)?;
    Ok(mean_abs(predictions_on_adv, predictions_on_clean))
}

pub fn g_rmse(predictions_on_adv: &[Tensor], true_labels: &[Tensor]) -> Result<f64> {
    check_pairs("g_rmse", predictions_on_adv, true_labels)?;
    Ok(root_mean_square(predictions_on_adv, true_labels))
}

pub fn l_rmse(predictions_on_adv: &[Tensor], predictions_on_clean: &[Tensor]) -> Result<f64> {
    check_pairs("l_rmse", predictions_on_adv, predictions_on_clean)?;
    Ok(root_mean_square(predictions_on_adv, predictions_on_clean))
}

/// Percentage degradation `100 (1 - clean/attacked)`.
pub fn degradation_pct(clean_metric: f64, attacked_metric: f64) -> Result<f64> {
    if attacked_metric <= 0.0 {
        return Err(StadvError::invalid(format!(
            "degradation needs attacked metric > 0, got {}",
            attacked_metric
        )));
    }
    Ok(100.0 * (1.0 - clean_metric / attacked_metric))
}

/// Assemble the full report for one attack evaluation.
pub fn metrics_report(
    predictions_on_adv: &[Tensor],
    predictions_on_clean: &[Tensor],
    true_labels: &[Tensor],
    clean_g_mae: Option<f64>,
) -> Result<MetricsReport> {
    let g_mae_v = g_mae(predictions_on_adv, true_labels)?;
    let report = MetricsReport {
        g_mae: g_mae_v,
        l_mae: l_mae(predictions_on_adv, predictions_on_clean)?,
        g_rmse: g_rmse(predictions_on_adv, true_labels)?,
        l_rmse: l_rmse(predictions_on_adv, predictions_on_clean)?,
        sample_count: predictions_on_adv.len(),
        node_count: predictions_on_adv[0].shape()[1],
        degradation_pct: match clean_g_mae {
            Some(clean) if g_mae_v > 0.0 => Some(degradation_pct(clean, g_mae_v)?),
            _ => None,
        },
    };
    Ok(report)
}

/// Comparison table over methods, ordered by G-MAE descending (stronger
/// attacks first), ties broken by method name.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<(String, MetricsReport)>,
}

pub fn compare(reports: &BTreeMap<String, MetricsReport>) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(StadvError::invalid("compare needs at least one report"));
    }
    let mut rows: Vec<(String, MetricsReport)> = reports
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    rows.sort_by(|a, b| {
        b.1.g_mae
            .partial_cmp(&a.1.g_mae)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,g_mae,l_mae,g_rmse,l_rmse,degradation_pct\n");
        for (name, r) in &self.rows {
            let deg = r
                .degradation_pct
                .map(|d| format!("{:.4}", d))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                name, r.g_mae, r.l_mae, r.g_rmse, r.l_rmse, deg
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let name_width = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>8}\n",
            "method",
            "G-MAE",
            "L-MAE",
            "G-RMSE",
            "L-RMSE",
            "deg%",
            width = name_width
        );
        for (name, r) in &self.rows {
            let deg = r
                .degradation_pct
                .map(|d| format!("{:8.2}", d))
                .unwrap_or_else(|| format!("{:>8}", "-"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {}",
                name,
                r.g_mae,
                r.l_mae,
                r.g_rmse,
                r.l_rmse,
                deg,
                width = name_width
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identical_arrays_give_zero() {
        let a = vec![t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])];
        assert_eq!(g_mae(&a, &a).unwrap(), 0.0);
        assert_eq!(g_rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(l_mae(&a, &a).unwrap(), 0.0);
        assert_eq!(l_rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_offset() {
        let a = vec![t(&[2, 3], vec![1.0; 6])];
        let b = vec![t(&[2, 3], vec![3.5; 6])];
        assert!((g_mae(&a, &b).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn hand_arithmetic_mae() {
        // Residuals {1, -1, 2, 0} over 2 samples x 1 step x 2 nodes.
        let preds = vec![t(&[1, 2], vec![2.0, 0.0]), t(&[1, 2], vec![5.0, 1.0])];
        let truth = vec![t(&[1, 2], vec![1.0, 1.0]), t(&[1, 2], vec![3.0, 1.0])];
        assert!((g_mae(&preds, &truth).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn l_mae_two_residuals() {
        let a = vec![t(&[1, 2], vec![4.0, 2.0])];
        let b = vec![t(&[1, 2], vec![1.0, 1.0])];
        assert!((l_mae(&a, &b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_hand_arithmetic() {
        // Residuals {3, 4}: sqrt((9+16)/2) = sqrt(12.5)
        let a = vec![t(&[1, 2], vec![3.0, 4.0])];
        let b = vec![t(&[1, 2], vec![0.0, 0.0])];
        assert!((g_rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = vec![Tensor::from_fn(&[3, 4], |_| rng.random_range(-5.0..5.0))];
            let b = vec![Tensor::from_fn(&[3, 4], |_| rng.random_range(-5.0..5.0))];
            assert!(g_rmse(&a, &b).unwrap() >= g_mae(&a, &b).unwrap() - 1e-12);
        }
    }

    #[test]
    fn triangle_inequality_of_means() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..20 {
            let adv = vec![Tensor::from_fn(&[2, 3], |_| rng.random_range(-5.0..5.0))];
            let clean = vec![Tensor::from_fn(&[2, 3], |_| rng.random_range(-5.0..5.0))];
            let truth = vec![Tensor::from_fn(&[2, 3], |_| rng.random_range(-5.0..5.0))];
            let lhs = l_mae(&adv, &clean).unwrap();
            let rhs = g_mae(&adv, &truth).unwrap() + g_mae(&clean, &truth).unwrap();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn degradation_reference_values() {
        assert!((degradation_pct(1.975, 6.1329).unwrap() - 67.79).abs() < 0.01);
        assert!((degradation_pct(2.0288, 6.4709).unwrap() - 68.65).abs() < 0.01);
        assert!((degradation_pct(1.9774, 4.5636).unwrap() - 56.67).abs() < 0.01);
        assert_eq!(degradation_pct(3.0, 3.0).unwrap(), 0.0);
        assert!(degradation_pct(1.0, 0.0).is_err());
    }

    #[test]
    fn degradation_monotone_in_attacked() {
        let base = degradation_pct(2.0, 4.0).unwrap();
        assert!(degradation_pct(2.0, 5.0).unwrap() > base);
        assert!(degradation_pct(2.0, 3.0).unwrap() < base);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = vec![t(&[1, 2], vec![0.0; 2])];
        let b = vec![t(&[2, 1], vec![0.0; 2])];
        assert!(g_mae(&a, &b).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[2, 3], |_| rng.random_range(0.0..9.0)))
            .collect();
        let b: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[2, 3], |_| rng.random_range(0.0..9.0)))
            .collect();
        let direct = g_mae(&a, &b).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ap: Vec<Tensor> = perm.iter().map(|&i| a[i].clone()).collect();
        let bp: Vec<Tensor> = perm.iter().map(|&i| b[i].clone()).collect();
        assert!((g_mae(&ap, &bp).unwrap() - direct).abs() < 1e-15);
    }

    /// Naive double-loop oracle over explicit indices.
    fn naive_mae(a: &[Tensor], b: &[Tensor]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (x, y) in a.iter().zip(b) {
            let s = x.shape();
            for h in 0..s[0] {
                for i in 0..s[1] {
                    acc += (x.get(&[h, i]) - y.get(&[h, i])).abs();
                    count += 1.0;
                }
            }
        }
        acc / count
    }

    fn naive_rmse(a: &[Tensor], b: &[Tensor]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (x, y) in a.iter().zip(b) {
            let s = x.shape();
            for h in 0..s[0] {
                for i in 0..s[1] {
                    let d = x.get(&[h, i]) - y.get(&[h, i]);
                    acc += d * d;
                    count += 1.0;
                }
            }
        }
        (acc / count).sqrt()
    }

    #[test]
    fn metrics_match_naive_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..20 {
            let m = rng.random_range(1..=10);
            let a: Vec<Tensor> = (0..m)
                .map(|_| Tensor::from_fn(&[12, 10], |_| rng.random_range(0.0..80.0)))
                .collect();
            let b: Vec<Tensor> = (0..m)
                .map(|_| Tensor::from_fn(&[12, 10], |_| rng.random_range(0.0..80.0)))
                .collect();
            assert!((g_mae(&a, &b).unwrap() - naive_mae(&a, &b)).abs() < 1e-12);
            assert!((g_rmse(&a, &b).unwrap() - naive_rmse(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn compare_orders_by_gmae_descending() {
        let mk = |g: f64| MetricsReport {
            g_mae: g,
            l_mae: 0.0,
            g_rmse: g,
            l_rmse: 0.0,
            sample_count: 1,
            node_count: 1,
            degradation_pct: None,
        };
        let mut reports = BTreeMap::new();
        reports.insert("stpgd-tdns".to_string(), mk(6.1329));
        reports.insert("pgd-random".to_string(), mk(4.9876));
        let table = compare(&reports).unwrap();
        assert_eq!(table.rows[0].0, "stpgd-tdns");
        assert_eq!(table.rows[1].0, "pgd-random");
        let single = compare(&BTreeMap::from([("only".to_string(), mk(1.0))])).unwrap();
        assert_eq!(single.rows.len(), 1);
        let csv = table.to_csv();
        assert!(csv.starts_with("method,g_mae,l_mae,g_rmse,l_rmse,degradation_pct\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with("stpgd-tdns,"));
    }
}
