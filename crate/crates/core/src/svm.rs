//! Soft-margin SVM dual with per-sample box constraints, solved by
//! sequential minimal optimization with maximal-violating-pair selection.
//!
//! Dual: `min 1/2 a'Qa - e'a` s.t. `y'a = 0`, `0 <= a_i <= C_i`, where
//! `Q_ij = y_i y_j K(x_i, x_j)`.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once the maximal KKT violation `m(a) - M(a)` drops below this.
    pub tolerance: f64,
    /// Iteration cap as a multiple of the sample count.
    pub max_iter_per_sample: usize,
    /// Kernel row cache budget in bytes.
    pub cache_bytes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-3,
            max_iter_per_sample: 1000,
            cache_bytes: 256 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision function `f(x) = sum_i alpha_i y_i K(x_i, x) + bias`.
    pub bias: f64,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub gap: f64,
    pub objective: f64,
}

const TAU: f64 = 1e-12;

/// Kernel rows `Q_i.` computed on demand, kept in a FIFO cache.
struct RowCache<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    kernel: Kernel,
    rows: HashMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> RowCache<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [f64], kernel: Kernel, bytes: usize) -> Self {
        let row_bytes = (x.len() * 8).max(1);
        RowCache {
            x,
            y,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity: (bytes / row_bytes).max(2),
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let (xi, yi) = (&self.x[i], self.y[i]);
            let row = self
                .x
                .iter()
                .zip(self.y)
                .map(|(xj, &yj)| yi * yj * self.kernel.eval(xi, xj))
                .collect();
            self.rows.insert(i, row);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

fn validate(x: &[Vec<f64>], y: &[f64], c: &[f64]) -> Result<usize> {
    let n = x.len();
    if n == 0 || y.len() != n || c.len() != n {
        return Err(Error::Shape(format!(
            "{} samples, {} labels, {} bounds",
            n,
            y.len(),
            c.len()
        )));
    }
    let dim = x[0].len();
    if let Some(bad) = x.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape(format!(
            "feature dimension {} vs {}",
            bad.len(),
            dim
        )));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Config("labels must be +1 or -1".into()));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(Error::Config(
            "need at least one sample of each class".into(),
        ));
    }
    if c.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Config(
            "box bounds must be positive and finite".into(),
        ));
    }
    Ok(n)
}

pub fn solve_dual(
    x: &[Vec<f64>],
    y: &[f64],
    c: &[f64],
    kernel: Kernel,
    cfg: &SolverConfig,
) -> Result<DualSolution> {
    let n = validate(x, y, c)?;
    let mut cache = RowCache::new(x, y, kernel, cfg.cache_bytes);
    let diag: Vec<f64> = (0..n).map(|i| kernel.eval(&x[i], &x[i])).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = cfg.max_iter_per_sample.saturating_mul(n);

    let up = |a: f64, yi: f64, ci: f64| if yi > 0.0 { a < ci } else { a > 0.0 };
    let low = |a: f64, yi: f64, ci: f64| if yi > 0.0 { a > 0.0 } else { a < ci };

    let mut iterations = 0;
    let gap = loop {
        // Maximal violating pair.
        let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t], c[t]) && v > gmax {
                i = t;
                gmax = v;
            }
            if low(alpha[t], y[t], c[t]) && v < gmin {
                j = t;
                gmin = v;
            }
        }
        let gap = if i == usize::MAX || j == usize::MAX {
            0.0
        } else {
            gmax - gmin
        };
        if gap < cfg.tolerance {
            break gap;
        }
        if iterations >= max_iter {
            return Err(Error::Convergence { iterations, gap });
        }
        iterations += 1;

        let q_ij = cache.row(i)[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (c[i], c[j]);
        if y[i] != y[j] {
            let quad = (diag[i] + diag[j] + 2.0 * q_ij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * q_ij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        // The clipped partner is recomputed as a difference, which can miss
        // the box by one rounding step after a near-singular update.
        alpha[i] = alpha[i].clamp(0.0, ci);
        alpha[j] = alpha[j].clamp(0.0, cj);

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        let row_i = cache.row(i).to_vec();
        let row_j = cache.row(j);
        for t in 0..n {
            grad[t] += row_i[t] * di + row_j[t] * dj;
        }
    };

    let bias = -rho(&alpha, &grad, y, c);
    // (Qa)_i = G_i + 1, so the objective needs no extra kernel pass.
    let objective = alpha
        .iter()
        .zip(&grad)
        .map(|(a, g)| 0.5 * a * (g + 1.0) - a)
        .sum();
    Ok(DualSolution {
        alpha,
        bias,
        iterations,
        gap,
        objective,
    })
}

/// Offset `rho` (bias = -rho): the mean of `y_i G_i` over free variables,
/// or the midpoint of the feasible interval when none is free.
fn rho(alpha: &[f64], grad: &[f64], y: &[f64], c: &[f64]) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c[t] {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Dual objective `1/2 a'Qa - e'a` evaluated from scratch.
pub fn dual_objective(x: &[Vec<f64>], y: &[f64], alpha: &[f64], kernel: Kernel) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel.eval(&x[i], &x[j]);
        }
    }
    0.5 * quad - alpha.iter().sum::<f64>()
}

/// Largest complementary-slackness violation of a solution, using the
/// margins `m_i = y_i f(x_i)`: `m_i >= 1` at `a_i = 0`, `m_i = 1` when free,
/// `m_i <= 1` at `a_i = C_i`.
pub fn kkt_residual(
    x: &[Vec<f64>],
    y: &[f64],
    c: &[f64],
    sol: &DualSolution,
    kernel: Kernel,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let f: f64 = (0..x.len())
            .map(|j| sol.alpha[j] * y[j] * kernel.eval(&x[j], &x[i]))
            .sum::<f64>()
            + sol.bias;
        let m = y[i] * f;
        let r = if sol.alpha[i] <= 0.0 {
            (1.0 - m).max(0.0)
        } else if sol.alpha[i] >= c[i] {
            (m - 1.0).max(0.0)
        } else {
            (m - 1.0).abs()
        };
        worst = worst.max(r);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_separable_pairs() {
        let x = vec![
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![-1.0, -1.0],
            vec![-2.0, -2.0],
        ];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let c = vec![1e3; 4];
        let sol = solve_dual(&x, &y, &c, Kernel::Linear, &SolverConfig::default()).unwrap();
        let w: Vec<f64> = (0..2)
            .map(|d| (0..4).map(|i| sol.alpha[i] * y[i] * x[i][d]).sum())
            .collect();
        assert!((w[0] - w[1]).abs() < 1e-9 && w[0] > 0.0);
        assert!(
            (w[0] - 0.5).abs() < 1e-6,
            "margin fixed by the inner pair: {w:?}"
        );
        assert!(sol.bias.abs() < 1e-9);
        assert!((sol.objective - dual_objective(&x, &y, &sol.alpha, Kernel::Linear)).abs() < 1e-12);
    }

    #[test]
    fn equality_and_box_constraints_hold() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let y: Vec<f64> = (0..20)
            .map(|i| if i % 3 == 0 { 1.0 } else { -1.0 })
            .collect();
        let c: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 2.0 } else { 1.0 }).collect();
        for kernel in [Kernel::Linear, Kernel::Rbf { gamma: 0.5 }] {
            let sol = solve_dual(&x, &y, &c, kernel, &SolverConfig::default()).unwrap();
            let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
            assert!(eq.abs() < 1e-6);
            assert!(sol.alpha.iter().zip(&c).all(|(a, c)| *a >= 0.0 && a <= c));
            assert!(kkt_residual(&x, &y, &c, &sol, kernel) < 1e-3);
        }
    }

    #[test]
    fn iteration_cap_reports_gap() {
        let x: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64).sin(), (i as f64).cos()])
            .collect();
        let y: Vec<f64> = (0..12)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let cfg = SolverConfig {
            tolerance: 1e-12,
            max_iter_per_sample: 1,
            ..SolverConfig::default()
        };
        match solve_dual(&x, &y, &[10.0; 12], Kernel::Rbf { gamma: 1.0 }, &cfg) {
            Err(Error::Convergence { iterations, gap }) => {
                assert_eq!(iterations, 12);
                assert!(gap > 0.0);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        let x = vec![vec![1.0], vec![2.0, 3.0]];
        assert!(matches!(
            solve_dual(
                &x,
                &[1.0, -1.0],
                &[1.0, 1.0],
                Kernel::Linear,
                &SolverConfig::default()
            ),
            Err(Error::Shape(_))
        ));
        let x = vec![vec![1.0], vec![2.0]];
        assert!(solve_dual(
            &x,
            &[1.0, 1.0],
            &[1.0, 1.0],
            Kernel::Linear,
            &SolverConfig::default()
        )
        .is_err());
    }

    #[test]
    fn tiny_cache_gives_same_answer() {
        let x: Vec<Vec<f64>> = (0..15)
            .map(|i| vec![(i as f64 * 0.9).sin(), i as f64 * 0.1])
            .collect();
        let y: Vec<f64> = (0..15).map(|i| if i < 5 { 1.0 } else { -1.0 }).collect();
        let c = vec![3.0; 15];
        let k = Kernel::Rbf { gamma: 2.0 };
        let big = solve_dual(&x, &y, &c, k, &SolverConfig::default()).unwrap();
        let small = solve_dual(
            &x,
            &y,
            &c,
            k,
            &SolverConfig {
                cache_bytes: 1,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        assert_eq!(big, small);
    }
}
