//! Convex quadratic testbed for the descent-with-perturbed-gradients theory.
//!
//! f(x) = ½xᵀQx − bᵀx with Q symmetric positive definite, so the minimizer
//! x* = Q⁻¹b is known analytically and the gradient's Lipschitz constant is
//! the largest eigenvalue of Q. Descent runs use a perturbed gradient
//! ∇f′ = ∇f + δ with a controllable δ policy and check, per step, the
//! decrease condition, and at the end the 1/(2ηk) gap bound.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Array;
use rand::Rng;
use serde::Serialize;

/// Quadratic objective with a known minimizer.
#[derive(Clone, Debug)]
pub struct ConvexTestbed {
    /// Symmetric positive definite `[d, d]`.
    pub q: Array,
    pub b: Vec<f64>,
    pub x_star: Vec<f64>,
    /// Largest eigenvalue of Q (gradient Lipschitz constant).
    pub l1: f64,
}

impl ConvexTestbed {
    /// Random SPD instance: Q = AᵀA + ½I.
    pub fn random_spd(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "testbed", 0, 0);
        let data: Vec<f64> = (0..dim * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let a = Array::from_vec(&[dim, dim], data).expect("sized data");
        let mut q = a.transpose().matmul(&a).expect("square");
        for i in 0..dim {
            q.set2(i, i, q.at2(i, i) + 0.5);
        }
        let b: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x_star = cholesky_solve(&q, &b);
        let l1 = power_iteration(&q, 200);
        ConvexTestbed { q, b, x_star, l1 }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += x[i] * self.q.at2(i, j) * x[j];
            }
        }
        0.5 * quad - self.b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                (0..d).map(|j| self.q.at2(i, j) * x[j]).sum::<f64>() - self.b[i]
            })
            .collect()
    }
}

/// Solve Qx = b for SPD Q via Cholesky.
fn cholesky_solve(q: &Array, b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = q.at2(i, j);
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + j] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    // forward substitution L y = b
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    // back substitution Lᵀ x = y
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in (i + 1)..d {
            sum -= l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    x
}

/// Largest eigenvalue by power iteration (Q is SPD, so this converges to L1).
fn power_iteration(q: &Array, iters: usize) -> f64 {
    let d = q.rows();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut w = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                w[i] += q.at2(i, j) * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        lambda = norm;
        v = w;
    }
    lambda
}

/// How the gradient perturbation is produced at each step.
#[derive(Clone, Copy, Debug)]
pub enum DeltaPolicy {
    Zero,
    /// δ = c·∇f.
    PropGradF(f64),
    /// δ = c·∇f′, realized as δ = (c/(1−c))·∇f; requires c < 1.
    PropGradFPrime(f64),
}

impl DeltaPolicy {
    fn delta(&self, grad: &[f64]) -> Vec<f64> {
        match *self {
            DeltaPolicy::Zero => vec![0.0; grad.len()],
            DeltaPolicy::PropGradF(c) => grad.iter().map(|g| c * g).collect(),
            DeltaPolicy::PropGradFPrime(c) => {
                let factor = c / (1.0 - c);
                grad.iter().map(|g| factor * g).collect()
            }
        }
    }
}

/// Step-by-step log of one perturbed descent run.
#[derive(Clone, Debug, Serialize)]
pub struct DescentReport {
    pub objective: Vec<f64>,
    /// Steps where the appendix condition held but f failed to strictly decrease.
    pub decrease_violations: usize,
    /// Whether the main-text condition ‖δ‖² < ½‖∇f‖² held at every step.
    pub cond_main_all: bool,
    /// Whether the appendix condition ‖δ‖² < ½‖∇f′‖² held at every step.
    pub cond_appendix_all: bool,
    /// Σ η‖δ‖² and Σ⟨δ, x−x*⟩ (the inner-product condition).
    pub inner_lhs: f64,
    pub inner_rhs: f64,
    /// Final optimality gap f(x_k) − f(x*).
    pub gap: f64,
    /// ‖x₀−x*‖²/(2ηk).
    pub gap_bound: f64,
    /// Some(ok) when both conditions held over the run, so the bound applies.
    pub bound_satisfied: Option<bool>,
}

/// Run x⁺ = x − η(∇f + δ) for `k` steps from `x0`.
pub fn convex_descent_experiment(
    testbed: &ConvexTestbed,
    eta: f64,
    k: usize,
    policy: DeltaPolicy,
    x0: &[f64],
) -> Result<DescentReport> {
    if eta <= 0.0 || eta > 1.0 / testbed.l1 {
        return Err(Error::contract(
            "convex_descent_experiment",
            format!("step size {eta} outside (0, 1/L1 = {}]", 1.0 / testbed.l1),
        ));
    }
    if x0.len() != testbed.dim() {
        return Err(Error::contract(
            "convex_descent_experiment",
            "x0 dimension mismatch",
        ));
    }
    if let DeltaPolicy::PropGradFPrime(c) = policy {
        if c >= 1.0 {
            return Err(Error::contract(
                "convex_descent_experiment",
                "PropGradFPrime requires c < 1",
            ));
        }
    }
    let mut x = x0.to_vec();
    let mut objective = vec![testbed.f(&x)];
    let mut decrease_violations = 0usize;
    let mut cond_main_all = true;
    let mut cond_appendix_all = true;
    let mut inner_lhs = 0.0;
    let mut inner_rhs = 0.0;
    for _ in 0..k {
        let grad = testbed.grad(&x);
        let delta = policy.delta(&grad);
        let grad_prime: Vec<f64> = grad.iter().zip(&delta).map(|(g, d)| g + d).collect();
        let delta_sq: f64 = delta.iter().map(|d| d * d).sum();
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let grad_prime_sq: f64 = grad_prime.iter().map(|g| g * g).sum();
        let cond_main = delta_sq < 0.5 * grad_sq;
        let cond_appendix = delta_sq < 0.5 * grad_prime_sq;
        cond_main_all &= cond_main;
        cond_appendix_all &= cond_appendix;
        inner_lhs += eta * delta_sq;
        inner_rhs += delta
            .iter()
            .zip(x.iter().zip(&testbed.x_star))
            .map(|(d, (xi, si))| d * (xi - si))
            .sum::<f64>();
        let f_before = *objective.last().expect("seeded");
        for (xi, g) in x.iter_mut().zip(&grad_prime) {
            *xi -= eta * g;
        }
        let f_after = testbed.f(&x);
        // Strict decrease, up to a few ulps of f: near the minimizer the true
        // decrease shrinks below the resolution of f64 evaluation.
        let tol = 4.0 * f64::EPSILON * f_before.abs().max(f_after.abs()).max(1.0);
        if cond_appendix && f_after > f_before + tol {
            decrease_violations += 1;
        }
        objective.push(f_after);
    }
    let f_star = testbed.f(&testbed.x_star);
    let gap = objective.last().expect("non-empty") - f_star;
    let x0_dist_sq: f64 = x0
        .iter()
        .zip(&testbed.x_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let gap_bound = x0_dist_sq / (2.0 * eta * k as f64);
    let bound_satisfied = if cond_main_all && inner_lhs <= inner_rhs {
        Some(gap <= gap_bound)
    } else {
        None
    };
    Ok(DescentReport {
        objective,
        decrease_violations,
        cond_main_all,
        cond_appendix_all,
        inner_lhs,
        inner_rhs,
        gap,
        gap_bound,
        bound_satisfied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_x0(dim: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "x0", 0, 0);
        (0..dim).map(|_| r.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn minimizer_has_zero_gradient_and_l1_dominates() {
        for seed in 0..10u64 {
            let tb = ConvexTestbed::random_spd(5, seed);
            let g = tb.grad(&tb.x_star);
            assert!(g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-9);
            // Rayleigh quotients never exceed the power-iteration eigenvalue.
            let mut r = rng::stream(seed, "rayleigh", 0, 0);
            for _ in 0..20 {
                let v: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
                let qv = tb.grad(&v.iter().zip(&tb.x_star).map(|(a, b)| a + b).collect::<Vec<_>>());
                // grad(x* + v) = Qv, so ‖Qv‖ ≤ L1‖v‖.
                let qv_norm = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(qv_norm <= tb.l1 * v_norm * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn exact_descent_satisfies_the_classical_bound() {
        let tb = ConvexTestbed::random_spd(5, 1);
        let x0 = random_x0(5, 2);
        let report =
            convex_descent_experiment(&tb, 1.0 / tb.l1, 100, DeltaPolicy::Zero, &x0).unwrap();
        assert_eq!(report.decrease_violations, 0);
        assert!(report.cond_main_all);
        assert_eq!(report.bound_satisfied, Some(true));
        assert!(report.gap <= report.gap_bound);
    }

    #[test]
    fn proportional_perturbation_strictly_decreases() {
        // δ = 0.4·∇f′ satisfies the appendix condition (0.16 < 0.5).
        let tb = ConvexTestbed::random_spd(5, 3);
        let x0 = random_x0(5, 4);
        let report = convex_descent_experiment(
            &tb,
            1.0 / tb.l1,
            80,
            DeltaPolicy::PropGradFPrime(0.4),
            &x0,
        )
        .unwrap();
        assert!(report.cond_appendix_all);
        assert_eq!(report.decrease_violations, 0);
        // Away from the numerical floor, every step strictly decreases.
        for w in report.objective.windows(2) {
            let tol = 4.0 * f64::EPSILON * w[0].abs().max(w[1].abs()).max(1.0);
            assert!(w[1] <= w[0] + tol, "objective rose: {} -> {}", w[0], w[1]);
        }
        assert!(report.objective[10] < report.objective[0]);
    }

    #[test]
    fn oversized_perturbation_increases_f_somewhere() {
        // δ = 2·∇f violates the condition; over 20 starts at η = 1/L1 the
        // effective step 3η overshoots and f must rise at least once.
        let mut any_increase = false;
        for seed in 0..20u64 {
            let tb = ConvexTestbed::random_spd(5, 100 + seed);
            let x0 = random_x0(5, 200 + seed);
            let report = convex_descent_experiment(
                &tb,
                1.0 / tb.l1,
                30,
                DeltaPolicy::PropGradF(2.0),
                &x0,
            )
            .unwrap();
            if report.objective.windows(2).any(|w| w[1] > w[0]) {
                any_increase = true;
            }
        }
        assert!(any_increase);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let tb = ConvexTestbed::random_spd(4, 9);
        let x0 = random_x0(4, 10);
        assert!(
            convex_descent_experiment(&tb, 2.0 / tb.l1, 10, DeltaPolicy::Zero, &x0).is_err()
        );
    }
}
