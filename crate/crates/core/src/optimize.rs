//! Simplex-constrained least squares.
//!
//! * [`project_to_simplex`]: Euclidean projection by sort and threshold.
//! * [`solve_qp_simplex`]: projected gradient descent with step `1/L`,
//!   `L = σ_max(X)² + λ`, on `½‖y − Xw‖² + ½λ‖w‖²`.
//! * [`solve_combined`]: projected subgradient on
//!   `ν·q_avg(w) + (1 − ν)·q_cat(w)` (a sum of RMSE terms, non-smooth).
//! * [`brute_force_simplex`]: exhaustive lattice search used as a test oracle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Euclidean projection of `v` onto `{w : w ≥ 0, Σw = 1}`.
pub fn project_to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite entry in simplex projection input"));
    }
    Ok(project_unchecked(v))
}

fn project_unchecked(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Absorb rounding so the sum is 1 to machine precision.
    let s: f64 = w.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// `min_{w∈Δ} ‖y − Xw‖² + λ‖w‖²`.
#[derive(Debug, Clone)]
pub struct SimplexQP {
    design: DMatrix<f64>,
    target: DVector<f64>,
    ridge: f64,
}

impl SimplexQP {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>, ridge: f64) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::invalid("design must have at least one row and one column"));
        }
        if design.nrows() != target.len() {
            return Err(Error::shape(format!(
                "design has {} rows, target has {}",
                design.nrows(),
                target.len()
            )));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        if design.iter().chain(target.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite entry in design or target"));
        }
        Ok(Self { design, target, ridge })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n_donors(&self) -> usize {
        self.design.ncols()
    }

    /// Root mean squared residual `√(‖y − Xw‖² / rows)`.
    pub fn rmse(&self, w: &[f64]) -> f64 {
        (self.sse(w) / self.design.nrows() as f64).sqrt()
    }

    pub fn sse(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        (&self.target - &self.design * w).norm_squared()
    }

    /// Penalized objective `‖y − Xw‖² + λ‖w‖²`.
    pub fn penalized(&self, w: &[f64]) -> f64 {
        self.sse(w) + self.ridge * w.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Simplex weights plus solver metadata. `objective_value` is the RMSE form
/// of the objective the solver was asked to minimize.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
            objective_value: f64::NAN,
            iterations: 0,
            converged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Fixed step size; defaults to `1/L`.
    pub step: Option<f64>,
    /// Relative iterate-change tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            step: None,
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Largest singular value; SVD first, power iteration on `XᵀX` if that fails.
pub fn spectral_norm(x: &DMatrix<f64>) -> f64 {
    if let Some(svd) = x.clone().try_svd(false, false, f64::EPSILON, 10_000) {
        let s = svd.singular_values.max();
        if s.is_finite() {
            return s;
        }
    }
    power_iteration(&(x.transpose() * x), 1_000).sqrt()
}

fn power_iteration(g: &DMatrix<f64>, iters: usize) -> f64 {
    let n = g.ncols();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = g * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw;
        v = w / nw;
        if (next - lambda).abs() <= 1e-14 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Projected gradient state over a precomputed Gram matrix.
struct Pgd {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    step: f64,
}

impl Pgd {
    fn new(problem: &SimplexQP, step: Option<f64>) -> Self {
        let x = &problem.design;
        let mut gram = x.transpose() * x;
        for j in 0..gram.ncols() {
            gram[(j, j)] += problem.ridge;
        }
        let xty = x.transpose() * &problem.target;
        let step = step.unwrap_or_else(|| {
            let s = spectral_norm(x);
            let l = s * s + problem.ridge;
            if l > 0.0 {
                1.0 / l
            } else {
                1.0
            }
        });
        Self { gram, xty, step }
    }

    fn step_from(&self, w: &DVector<f64>) -> DVector<f64> {
        let grad = &self.gram * w - &self.xty;
        let v = w - grad * self.step;
        DVector::from_vec(project_unchecked(v.as_slice()))
    }
}

/// Accelerated projected gradient descent from uniform weights. A momentum
/// step that would raise the objective is replaced by a plain projected step
/// and the momentum is reset.
pub fn solve_qp_simplex(problem: &SimplexQP, opts: &SolveOptions) -> WeightVector {
    solve_qp_simplex_traced(problem, opts, |_| {})
}

/// Same as [`solve_qp_simplex`], calling `trace` with the penalized
/// objective after every iteration.
pub fn solve_qp_simplex_traced(
    problem: &SimplexQP,
    opts: &SolveOptions,
    mut trace: impl FnMut(f64),
) -> WeightVector {
    let n = problem.n_donors();
    if n == 1 {
        return WeightVector {
            weights: vec![1.0],
            objective_value: problem.rmse(&[1.0]),
            iterations: 0,
            converged: true,
        };
    }
    let pgd = Pgd::new(problem, opts.step);
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut y = w.clone();
    let mut theta = 1.0f64;
    let mut f = problem.penalized(w.as_slice());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        let mut next = pgd.step_from(&y);
        let mut f_next = problem.penalized(next.as_slice());
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if f_next > f {
            next = pgd.step_from(&w);
            f_next = problem.penalized(next.as_slice());
            theta = 1.0;
            y = next.clone();
        } else {
            y = &next + (&next - &w) * ((theta - 1.0) / theta_next);
            theta = theta_next;
        }
        let change = (&next - &w).norm() / w.norm().max(f64::MIN_POSITIVE);
        w = next;
        f = f_next;
        iterations = it;
        trace(f);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let weights = w.as_slice().to_vec();
    WeightVector {
        objective_value: problem.rmse(&weights),
        weights,
        iterations,
        converged,
    }
}

/// `ν·q_avg(w) + (1 − ν)·q_cat(w)` with each term an RMSE.
#[derive(Debug, Clone)]
pub struct CombinedObjective<'a> {
    pub averaged: &'a SimplexQP,
    pub concatenated: &'a SimplexQP,
    pub nu: f64,
}

impl CombinedObjective<'_> {
    pub fn value(&self, w: &[f64]) -> f64 {
        self.nu * self.averaged.rmse(w) + (1.0 - self.nu) * self.concatenated.rmse(w)
    }
}

struct RmseTerm {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    rows: f64,
}

impl RmseTerm {
    fn new(p: &SimplexQP) -> Self {
        Self {
            gram: p.design.transpose() * &p.design,
            xty: p.design.transpose() * &p.target,
            yty: p.target.norm_squared(),
            rows: p.design.nrows() as f64,
        }
    }

    /// RMSE and its gradient (zero gradient where the residual vanishes).
    fn eval(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let gw = &self.gram * w;
        let sse = (w.dot(&gw) - 2.0 * w.dot(&self.xty) + self.yty).max(0.0);
        let q = (sse / self.rows).sqrt();
        if q > 0.0 {
            (q, (gw - &self.xty) / (self.rows * q))
        } else {
            (0.0, DVector::zeros(w.len()))
        }
    }

    fn curvature(&self, q: f64) -> f64 {
        spectral_norm(&self.gram) / (self.rows * q)
    }
}

/// Minimizes the ν-combined objective over the simplex by projected
/// subgradient with steps `η₀/√(k+1)`, warm-started from the better of the
/// two single-objective PGD solutions and returning the best iterate seen.
pub fn solve_combined(
    averaged: &SimplexQP,
    concatenated: &SimplexQP,
    nu: f64,
    opts: &SolveOptions,
) -> Result<WeightVector> {
    if !(0.0..=1.0).contains(&nu) {
        return Err(Error::invalid(format!("nu must lie in [0, 1], got {nu}")));
    }
    if averaged.n_donors() != concatenated.n_donors() {
        return Err(Error::shape("averaged and concatenated designs differ in donor count"));
    }
    let objective = CombinedObjective {
        averaged,
        concatenated,
        nu,
    };
    let n = averaged.n_donors();
    let qp_opts = SolveOptions { step: None, ..*opts };
    let wa = solve_qp_simplex(averaged, &qp_opts);
    let wc = solve_qp_simplex(concatenated, &qp_opts);
    let (fa, fc) = (objective.value(&wa.weights), objective.value(&wc.weights));
    let start = if fa <= fc { wa } else { wc };
    let mut best = start.weights.clone();
    let mut best_f = objective.value(&best);
    if n == 1 || nu == 0.0 || nu == 1.0 || best_f == 0.0 {
        return Ok(WeightVector {
            weights: best,
            objective_value: best_f,
            iterations: start.iterations,
            converged: start.converged,
        });
    }

    let ta = RmseTerm::new(averaged);
    let tc = RmseTerm::new(concatenated);
    let mut w = DVector::from_column_slice(&best);
    let (qa, _) = ta.eval(&w);
    let (qc, _) = tc.eval(&w);
    let mut curvature = 0.0;
    if qa > 0.0 {
        curvature += nu * ta.curvature(qa);
    }
    if qc > 0.0 {
        curvature += (1.0 - nu) * tc.curvature(qc);
    }
    let eta0 = if curvature > 0.0 { 1.0 / curvature } else { 1.0 };

    let mut converged = false;
    let mut iterations = 0;
    for k in 0..opts.max_iter {
        let (_, ga) = ta.eval(&w);
        let (_, gc) = tc.eval(&w);
        let g = ga * nu + gc * (1.0 - nu);
        let eta = eta0 / ((k + 1) as f64).sqrt();
        let next = DVector::from_vec(project_unchecked((&w - g * eta).as_slice()));
        let change = (&next - &w).norm() / w.norm().max(f64::MIN_POSITIVE);
        w = next;
        iterations = k + 1;
        let f = objective.value(w.as_slice());
        if f < best_f {
            best_f = f;
            best.copy_from_slice(w.as_slice());
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(WeightVector {
        weights: best,
        objective_value: best_f,
        iterations,
        converged,
    })
}

/// Exhaustive search over the simplex lattice `{c·step : Σc = 1/step}`.
///
/// Lattice points are enumerated with the first coordinate descending from
/// 1, then the second, and so on; only strict improvements replace the
/// incumbent, so ties resolve to the earliest point (`[1, 0, …]` first).
pub fn brute_force_simplex(
    n_donors: usize,
    grid_step: f64,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> Result<WeightVector> {
    if n_donors == 0 || n_donors > 4 {
        return Err(Error::invalid(format!(
            "brute-force search supports 1..=4 donors, got {n_donors}"
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::invalid("grid_step must lie in (0, 1]"));
    }
    let m = (1.0 / grid_step).round() as usize;
    let mut counts = vec![0usize; n_donors];
    let mut w = vec![0.0; n_donors];
    let mut best = vec![0.0; n_donors];
    let mut best_f = f64::INFINITY;
    let mut evaluated = 0usize;

    fn rec(
        pos: usize,
        remaining: usize,
        m: usize,
        counts: &mut [usize],
        w: &mut [f64],
        f: &mut dyn FnMut(&[f64]) -> f64,
        best: &mut [f64],
        best_f: &mut f64,
        evaluated: &mut usize,
    ) {
        let n = counts.len();
        if pos == n - 1 {
            counts[pos] = remaining;
            for (wi, &c) in w.iter_mut().zip(counts.iter()) {
                *wi = c as f64 / m as f64;
            }
            *evaluated += 1;
            let v = f(w);
            if v < *best_f {
                *best_f = v;
                best.copy_from_slice(w);
            }
            return;
        }
        for c in (0..=remaining).rev() {
            counts[pos] = c;
            rec(pos + 1, remaining - c, m, counts, w, f, best, best_f, evaluated);
        }
    }
    rec(0, m, m, &mut counts, &mut w, &mut objective, &mut best, &mut best_f, &mut evaluated);
    Ok(WeightVector {
        weights: best,
        objective_value: best_f,
        iterations: evaluated,
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feasible(w: &[f64], tol: f64) -> bool {
        w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_simplex(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let w = project_to_simplex(&[0.6, 0.6, -0.6]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15 && w[2] == 0.0);
        assert!(project_to_simplex(&[1.0, f64::NAN]).is_err());
    }

    /// Exact projection by enumerating every support set and solving the
    /// KKT system restricted to it.
    fn kkt_projection(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let s: f64 = support.iter().map(|&i| v[i]).sum();
            let tau = (s - 1.0) / support.len() as f64;
            let mut w = vec![0.0; n];
            let mut ok = true;
            for &i in &support {
                w[i] = v[i] - tau;
                if w[i] < 0.0 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let d: f64 = w.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, w));
            }
        }
        best.unwrap().1
    }

    proptest! {
        #[test]
        fn projection_matches_kkt_oracle(v in prop::collection::vec(-3.0f64..3.0, 1..7)) {
            let w = project_to_simplex(&v).unwrap();
            let o = kkt_projection(&v);
            for (a, b) in w.iter().zip(&o) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(feasible(&w, 1e-12));
            let again = project_to_simplex(&w).unwrap();
            for (a, b) in w.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_problem(rows: usize, cols: usize, seed: u64) -> SimplexQP {
        let mut s = seed;
        let x = DMatrix::from_fn(rows, cols, |_, _| lcg(&mut s));
        let y = DVector::from_fn(rows, |_, _| lcg(&mut s));
        SimplexQP::new(x, y, 0.0).unwrap()
    }

    #[test]
    fn identity_design_hits_vertex() {
        let p = SimplexQP::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0]), 0.0).unwrap();
        let w = solve_qp_simplex(&p, &SolveOptions::default());
        assert!((w.weights[0] - 1.0).abs() < 1e-8);
        assert!(w.converged);
    }

    #[test]
    fn duplicate_columns_reach_minimum() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let p = SimplexQP::new(x, y, 0.0).unwrap();
        let w = solve_qp_simplex(&p, &SolveOptions::default());
        assert!(w.objective_value < 1e-10);
    }

    #[test]
    fn random_problem_matches_grid() {
        let p = random_problem(12, 3, 7);
        let w = solve_qp_simplex(&p, &SolveOptions::default());
        let g = brute_force_simplex(3, 0.005, |w| p.rmse(w)).unwrap();
        assert!(w.objective_value <= g.objective_value + 1e-12);
        assert!((w.objective_value - g.objective_value).abs() < 1e-4);
    }

    #[test]
    fn pgd_objective_is_monotone() {
        for seed in 0..20 {
            let p = random_problem(15, 4, seed);
            let mut hist = Vec::new();
            solve_qp_simplex_traced(&p, &SolveOptions::default(), |f| hist.push(f));
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn solution_beats_random_feasible_points() {
        let p = random_problem(20, 5, 11);
        let w = solve_qp_simplex(&p, &SolveOptions::default());
        let mut s = 99u64;
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| -(lcg(&mut s) * 0.5 + 0.5).max(1e-12).ln()).collect();
            let tot: f64 = raw.iter().sum();
            let cand: Vec<f64> = raw.iter().map(|r| r / tot).collect();
            assert!(p.rmse(&w.weights) <= p.rmse(&cand) + 1e-9);
        }
        assert!(feasible(&w.weights, 1e-9));
    }

    #[test]
    fn small_ridge_changes_little() {
        let p = random_problem(60, 4, 5);
        let w0 = solve_qp_simplex(&p, &SolveOptions::default());
        let pr = SimplexQP::new(p.design().clone(), p.target().clone(), 1.0).unwrap();
        let w1 = solve_qp_simplex(&pr, &SolveOptions::default());
        let rel = (pr.rmse(&w1.weights) - w0.objective_value) / w0.objective_value;
        assert!(rel >= -1e-12 && rel < 1e-3, "relative change {rel}");
    }

    #[test]
    fn max_iter_reports_non_convergence() {
        let p = random_problem(12, 4, 3);
        let w = solve_qp_simplex(&p, &SolveOptions { max_iter: 2, ..Default::default() });
        assert!(!w.converged);
        assert_eq!(w.iterations, 2);
    }

    #[test]
    fn combined_endpoints_and_grid() {
        let a = random_problem(12, 3, 21);
        let c = random_problem(48, 3, 22);
        let opts = SolveOptions::default();
        let w1 = solve_combined(&a, &c, 1.0, &opts).unwrap();
        let wa = solve_qp_simplex(&a, &opts);
        assert!((w1.objective_value - wa.objective_value).abs() < 1e-4);
        let w0 = solve_combined(&a, &c, 0.0, &opts).unwrap();
        let wc = solve_qp_simplex(&c, &opts);
        assert!((w0.objective_value - wc.objective_value).abs() < 1e-4);

        let obj = CombinedObjective { averaged: &a, concatenated: &c, nu: 0.5 };
        let wm = solve_combined(&a, &c, 0.5, &opts).unwrap();
        let g = brute_force_simplex(3, 0.005, |w| obj.value(w)).unwrap();
        assert!(wm.objective_value <= obj.value(&wa.weights).min(obj.value(&wc.weights)) + 1e-12);
        assert!((wm.objective_value - g.objective_value).abs() < 1e-3);
        assert!(solve_combined(&a, &c, 1.5, &opts).is_err());
    }

    #[test]
    fn brute_force_conventions() {
        let g = brute_force_simplex(3, 0.1, |w| (w[0] - 1.0).powi(2) + w[1] * w[1] + w[2] * w[2]).unwrap();
        assert!((g.weights[0] - 1.0).abs() < 1e-12);
        let c = brute_force_simplex(4, 0.25, |_| 1.0).unwrap();
        assert_eq!(c.weights, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(brute_force_simplex(5, 0.1, |_| 0.0).is_err());
    }

    #[test]
    fn lattice_and_pgd_agree_on_quadratic() {
        let p = random_problem(10, 3, 42);
        let w = solve_qp_simplex(&p, &SolveOptions::default());
        let g = brute_force_simplex(3, 0.01, |x| p.rmse(x)).unwrap();
        let dist = w.weights.iter().zip(&g.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // The lattice optimum sits within one grid cell unless the problem is flat.
        assert!(dist <= 0.02 || (g.objective_value - w.objective_value).abs() < 1e-4);
    }
}
