//! Horizon problem solver for the rolling-horizon benchmark and for
//! perfect-foresight runs.
//!
//! The problem is
//!
//! ```text
//! minimize    Σ_t (net_t + p_t)²
//! subject to  p_min ≤ p_t ≤ p_max
//!             e_min ≤ e0 + dt · Σ_{τ≤t} p_τ ≤ e_max
//! ```
//!
//! solved with an ADMM operator-splitting iteration
//! (`min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u`, A = [I; cumulative sum]).
//! For unit efficiency the x-update system `(P + σI + ρAᵀA)` factors as
//! `Lᵀ(a·DᵀD + ρI)L` with `L` the cumulative-sum operator and `D = L⁻¹` the
//! difference operator, so each iteration costs O(horizon). With η < 1 the
//! battery power is split into charge and discharge parts, which makes the
//! energy rows linear; that form uses a small dense Cholesky factor and a
//! post-hoc complementarity audit.
//!
//! After convergence an active-set polish solves the reduced KKT system
//! exactly. Every candidate iterate is mapped to a feasible dispatch by a
//! forward pass through [`feasible_set`], and the best feasible dispatch seen
//! is what gets returned, so the recorded objective never increases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::battery::{feasible_set, project, step_soc, BatterySpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProblem {
    /// Forecast `demand - pv` per interval, kW.
    pub net_base_kw: Vec<f64>,
    pub e0_kwh: f64,
    pub dt_hours: f64,
    pub spec: BatterySpec,
}

impl HorizonProblem {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.net_base_kw.is_empty() {
            return Err(Error::InvalidProfile("horizon problem has no intervals".into()));
        }
        if self.net_base_kw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProfile("non-finite net demand in horizon problem".into()));
        }
        if !(self.dt_hours > 0.0 && self.dt_hours.is_finite()) {
            return Err(Error::InvalidProfile(format!("dt_hours must be > 0, got {}", self.dt_hours)));
        }
        if !self.spec.soc_in_bounds(self.e0_kwh) {
            return Err(Error::SocViolation {
                step: 0,
                e_kwh: self.e0_kwh,
                e_min: self.spec.e_min_kwh,
                e_max: self.spec.e_max_kwh,
            });
        }
        Ok(())
    }

    /// `Σ (net + p)²` for an arbitrary dispatch.
    pub fn objective(&self, p_b: &[f64]) -> f64 {
        self.net_base_kw.iter().zip(p_b).map(|(n, p)| (n + p) * (n + p)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Absolute and relative KKT residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial ADMM penalty.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Residuals are evaluated every `check_every` iterations.
    pub check_every: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50_000,
            rho: 1.0,
            sigma: 1e-6,
            relaxation: 1.6,
            check_every: 10,
            adaptive_rho: true,
            polish: true,
        }
    }
}

/// Primal/dual iterate used to start a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    /// Feasible battery dispatch, kW.
    pub p_b_kw: Vec<f64>,
    /// `Σ (net + p_b)²` of `p_b_kw`.
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best feasible objective after each residual check (non-increasing).
    pub objective_trace: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    /// Split form only: some interval both charges and discharges (product > tol).
    pub complementarity_violation: bool,
    horizon: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl HorizonSolution {
    /// Warm start for the next receding-horizon solve: every block of the
    /// primal and dual iterate is shifted one interval forward, repeating the
    /// last entry.
    pub fn shifted_warm_start(&self) -> WarmStart {
        WarmStart { x: shift_blocks(&self.x, self.horizon), y: shift_blocks(&self.y, self.horizon) }
    }
}

fn shift_blocks(v: &[f64], block: usize) -> Vec<f64> {
    v.chunks(block).flat_map(|c| c.iter().skip(1).copied().chain(c.last().copied())).collect()
}

/// Problem data in the generic `½xᵀPx + qᵀx, l ≤ Ax ≤ u` shape with a
/// structure-aware linear solve.
trait QpForm {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn q(&self) -> &[f64];
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn mul_p(&self, x: &[f64], out: &mut [f64]);
    fn mul_a(&self, x: &[f64], out: &mut [f64]);
    fn mul_at(&self, y: &[f64], out: &mut [f64]);
    /// Prepares `solve` for `P + σI + ρAᵀA`.
    fn factor(&mut self, sigma: f64, rho: f64);
    fn solve(&self, rhs: &mut [f64]);
    /// Battery power per interval encoded by `x`.
    fn dispatch(&self, x: &[f64]) -> Vec<f64>;
}

fn energy_bounds(problem: &HorizonProblem) -> (f64, f64) {
    let s = &problem.spec;
    ((s.e_min_kwh - problem.e0_kwh) / problem.dt_hours, (s.e_max_kwh - problem.e0_kwh) / problem.dt_hours)
}

/// Unit efficiency: x = p, rows = [p; cumsum(p)].
struct DirectForm {
    h: usize,
    q: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    // Thomas factors of a·DᵀD + ρI.
    diag: Vec<f64>,
    off: f64,
}

impl DirectForm {
    fn new(problem: &HorizonProblem) -> Self {
        let h = problem.net_base_kw.len();
        let s = &problem.spec;
        let (elo, ehi) = energy_bounds(problem);
        let mut l = vec![s.p_min_kw; h];
        let mut u = vec![s.p_max_kw; h];
        l.extend(std::iter::repeat_n(elo, h));
        u.extend(std::iter::repeat_n(ehi, h));
        Self { h, q: problem.net_base_kw.iter().map(|v| 2.0 * v).collect(), l, u, diag: Vec::new(), off: 0.0 }
    }
}

impl QpForm for DirectForm {
    fn n(&self) -> usize {
        self.h
    }
    fn m(&self) -> usize {
        2 * self.h
    }
    fn q(&self) -> &[f64] {
        &self.q
    }
    fn lower(&self) -> &[f64] {
        &self.l
    }
    fn upper(&self) -> &[f64] {
        &self.u
    }
    fn mul_p(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * v;
        }
    }
    fn mul_a(&self, x: &[f64], out: &mut [f64]) {
        let (boxed, energy) = out.split_at_mut(self.h);
        boxed.copy_from_slice(x);
        let mut acc = 0.0;
        for (o, v) in energy.iter_mut().zip(x) {
            acc += v;
            *o = acc;
        }
    }
    fn mul_at(&self, y: &[f64], out: &mut [f64]) {
        let (boxed, energy) = y.split_at(self.h);
        let mut acc = 0.0;
        for i in (0..self.h).rev() {
            acc += energy[i];
            out[i] = boxed[i] + acc;
        }
    }
    fn factor(&mut self, sigma: f64, rho: f64) {
        let a = 2.0 + sigma + rho;
        let h = self.h;
        // Tridiagonal T: main diagonal 2a + ρ (last a + ρ), off-diagonal -a.
        // Stored as the pivots of its LDLᵀ factorization.
        self.off = -a;
        self.diag = Vec::with_capacity(h);
        for i in 0..h {
            let d = if i + 1 == h { a + rho } else { 2.0 * a + rho };
            let pivot = if i == 0 { d } else { d - a * a / self.diag[i - 1] };
            self.diag.push(pivot);
        }
    }
    fn solve(&self, rhs: &mut [f64]) {
        let h = self.h;
        // w = Dᵀ v
        for i in 0..h {
            let next = if i + 1 < h { rhs[i + 1] } else { 0.0 };
            rhs[i] -= next;
        }
        // T u = w (forward elimination then back substitution)
        for i in 1..h {
            rhs[i] -= self.off / self.diag[i - 1] * rhs[i - 1];
        }
        rhs[h - 1] /= self.diag[h - 1];
        for i in (0..h - 1).rev() {
            rhs[i] = (rhs[i] - self.off * rhs[i + 1]) / self.diag[i];
        }
        // x = D u
        for i in (1..h).rev() {
            rhs[i] -= rhs[i - 1];
        }
    }
    fn dispatch(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// η < 1: x = [charge; discharge], rows = [charge; discharge; cumsum(η·c − d/η)].
struct SplitForm {
    h: usize,
    eta: f64,
    q: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl SplitForm {
    fn new(problem: &HorizonProblem) -> Self {
        let h = problem.net_base_kw.len();
        let s = &problem.spec;
        let (elo, ehi) = energy_bounds(problem);
        let mut q: Vec<f64> = problem.net_base_kw.iter().map(|v| 2.0 * v).collect();
        q.extend(problem.net_base_kw.iter().map(|v| -2.0 * v));
        let l = [vec![0.0; 2 * h], vec![elo; h]].concat();
        let u = [vec![s.p_max_kw; h], vec![-s.p_min_kw; h], vec![ehi; h]].concat();
        Self { h, eta: s.eta, q, l, u, chol: None }
    }
}

impl QpForm for SplitForm {
    fn n(&self) -> usize {
        2 * self.h
    }
    fn m(&self) -> usize {
        3 * self.h
    }
    fn q(&self) -> &[f64] {
        &self.q
    }
    fn lower(&self) -> &[f64] {
        &self.l
    }
    fn upper(&self) -> &[f64] {
        &self.u
    }
    fn mul_p(&self, x: &[f64], out: &mut [f64]) {
        let h = self.h;
        for i in 0..h {
            let diff = 2.0 * (x[i] - x[h + i]);
            out[i] = diff;
            out[h + i] = -diff;
        }
    }
    fn mul_a(&self, x: &[f64], out: &mut [f64]) {
        let h = self.h;
        out[..2 * h].copy_from_slice(x);
        let mut acc = 0.0;
        for i in 0..h {
            acc += self.eta * x[i] - x[h + i] / self.eta;
            out[2 * h + i] = acc;
        }
    }
    fn mul_at(&self, y: &[f64], out: &mut [f64]) {
        let h = self.h;
        let mut acc = 0.0;
        for i in (0..h).rev() {
            acc += y[2 * h + i];
            out[i] = y[i] + self.eta * acc;
            out[h + i] = y[h + i] - acc / self.eta;
        }
    }
    fn factor(&mut self, sigma: f64, rho: f64) {
        let p = dense_p(self);
        let a = dense_a(self);
        let n = self.n();
        let k = p + DMatrix::identity(n, n) * sigma + a.transpose() * &a * rho;
        self.chol = Some(k.cholesky().expect("P + σI + ρAᵀA is positive definite"));
    }
    fn solve(&self, rhs: &mut [f64]) {
        let chol = self.chol.as_ref().expect("factor() before solve()");
        let x = chol.solve(&DVector::from_column_slice(rhs));
        rhs.copy_from_slice(x.as_slice());
    }
    fn dispatch(&self, x: &[f64]) -> Vec<f64> {
        (0..self.h).map(|i| x[i] - x[self.h + i]).collect()
    }
}

fn dense_from_op(rows: usize, cols: usize, op: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        e[j] = 1.0;
        op(&e, &mut col);
        m.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    m
}

fn dense_p(form: &dyn QpForm) -> DMatrix<f64> {
    dense_from_op(form.n(), form.n(), |x, o| form.mul_p(x, o))
}

fn dense_a(form: &dyn QpForm) -> DMatrix<f64> {
    dense_from_op(form.m(), form.n(), |x, o| form.mul_a(x, o))
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Residuals {
    primal: f64,
    dual: f64,
    eps_primal: f64,
    eps_dual: f64,
    /// Scale-normalised residuals for the penalty update.
    primal_rel: f64,
    dual_rel: f64,
}

impl Residuals {
    fn compute(form: &dyn QpForm, x: &[f64], z: &[f64], y: &[f64], tol: f64) -> Self {
        let (n, m) = (form.n(), form.m());
        let mut ax = vec![0.0; m];
        form.mul_a(x, &mut ax);
        let mut px = vec![0.0; n];
        form.mul_p(x, &mut px);
        let mut aty = vec![0.0; n];
        form.mul_at(y, &mut aty);
        let primal = ax.iter().zip(z).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        let dual = (0..n).fold(0.0f64, |acc, i| acc.max((px[i] + form.q()[i] + aty[i]).abs()));
        let prim_scale = norm_inf(&ax).max(norm_inf(z));
        let dual_scale = norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(form.q()));
        Self {
            primal,
            dual,
            eps_primal: tol + tol * prim_scale,
            eps_dual: tol + tol * dual_scale,
            primal_rel: primal / prim_scale.max(1e-12),
            dual_rel: dual / dual_scale.max(1e-12),
        }
    }

    fn converged(&self) -> bool {
        self.primal <= self.eps_primal && self.dual <= self.eps_dual
    }
}

/// Maps any candidate dispatch onto a feasible one by clamping each
/// interval into the energy-aware feasible interval of the running state.
fn repair(problem: &HorizonProblem, p_b: &mut [f64]) {
    let mut e = problem.e0_kwh;
    for p in p_b.iter_mut() {
        *p = project(*p, &feasible_set(e, problem.dt_hours, &problem.spec));
        e = step_soc(e, *p, problem.dt_hours, &problem.spec);
    }
}

struct Incumbent {
    p_b: Vec<f64>,
    objective: f64,
}

impl Incumbent {
    fn offer(&mut self, problem: &HorizonProblem, mut p_b: Vec<f64>) {
        repair(problem, &mut p_b);
        let objective = problem.objective(&p_b);
        if objective < self.objective {
            self.objective = objective;
            self.p_b = p_b;
        }
    }
}

/// Active-set polish: solve the equality-constrained QP on the constraints
/// the ADMM dual marks active, with iterative refinement.
fn polish(form: &dyn QpForm, z: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (form.n(), form.m());
    let (l, u) = (form.lower(), form.upper());
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..m {
        if z[i] - l[i] < -y[i] {
            active.push(i);
            target.push(l[i]);
        } else if u[i] - z[i] < y[i] {
            active.push(i);
            target.push(u[i]);
        }
    }
    let p = dense_p(form);
    let a = dense_a(form);
    let k = n + active.len();
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(k, k);
    let mut exact = DMatrix::zeros(k, k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p);
    for (r, &row) in active.iter().enumerate() {
        for c in 0..n {
            let v = a[(row, c)];
            kkt[(n + r, c)] = v;
            kkt[(c, n + r)] = v;
        }
    }
    exact.copy_from(&kkt);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for r in 0..active.len() {
        kkt[(n + r, n + r)] -= delta;
    }
    let mut rhs = DVector::zeros(k);
    for i in 0..n {
        rhs[i] = -form.q()[i];
    }
    for (r, t) in target.iter().enumerate() {
        rhs[n + r] = *t;
    }
    let lu = kkt.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &exact * &sol;
        sol += lu.solve(&resid)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).iter().copied().collect::<Vec<_>>();
    let mut y_full = vec![0.0; m];
    for (r, &row) in active.iter().enumerate() {
        y_full[row] = sol[n + r];
    }
    Some((x, y_full))
}

/// The split objective only sees `charge - discharge`, so simultaneous
/// charge and discharge is a zero-cost degeneracy unless the energy rows
/// need the extra losses. Nets each pair when the netted iterate still
/// satisfies the constraints.
fn net_split_pairs(form: &dyn QpForm, x: &mut [f64], tol: f64) {
    let h = form.n() / 2;
    let netted: Vec<f64> =
        (0..h).map(|i| (x[i] - x[h + i]).max(0.0)).chain((0..h).map(|i| (x[h + i] - x[i]).max(0.0))).collect();
    let mut ax = vec![0.0; form.m()];
    form.mul_a(&netted, &mut ax);
    let (l, u) = (form.lower(), form.upper());
    if ax.iter().zip(l.iter().zip(u)).all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol) {
        x.copy_from_slice(&netted);
    }
}

fn clip_into(v: &[f64], l: &[f64], u: &[f64]) -> Vec<f64> {
    v.iter().zip(l.iter().zip(u)).map(|(x, (lo, hi))| x.clamp(*lo, *hi)).collect()
}

/// Solves the horizon problem. Non-convergence is reported through
/// `converged = false`, not as an error; the returned dispatch is still the
/// best feasible one found.
pub fn solve_horizon(
    problem: &HorizonProblem,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<HorizonSolution> {
    problem.validate()?;
    if problem.spec.eta >= 1.0 {
        run_admm(problem, DirectForm::new(problem), settings, warm)
    } else {
        run_admm(problem, SplitForm::new(problem), settings, warm)
    }
}

fn run_admm<F: QpForm>(
    problem: &HorizonProblem,
    mut form: F,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<HorizonSolution> {
    let h = problem.net_base_kw.len();
    let (n, m) = (form.n(), form.m());
    let tol = settings.tol;
    let alpha = settings.relaxation;
    let sigma = settings.sigma;
    let check_every = settings.check_every.max(1);
    let mut rho = settings.rho;
    form.factor(sigma, rho);

    let (mut x, mut y) = match warm {
        Some(w) if w.x.len() == n && w.y.len() == m => (w.x.clone(), w.y.clone()),
        _ => (vec![0.0; n], vec![0.0; m]),
    };
    let mut z = vec![0.0; m];
    form.mul_a(&x, &mut z);
    let mut z = clip_into(&z, form.lower(), form.upper());

    let mut incumbent = Incumbent { p_b: vec![0.0; h], objective: f64::INFINITY };
    incumbent.offer(problem, form.dispatch(&x));
    let mut trace = vec![incumbent.objective];

    let mut rhs = vec![0.0; n];
    let mut aty = vec![0.0; n];
    let mut z_tilde = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;
    let mut res = Residuals::compute(&form, &x, &z, &y, tol);

    for k in 1..=settings.max_iter {
        iterations = k;
        for i in 0..m {
            w[i] = rho * z[i] - y[i];
        }
        form.mul_at(&w, &mut aty);
        for i in 0..n {
            rhs[i] = sigma * x[i] - form.q()[i] + aty[i];
        }
        form.solve(&mut rhs);
        form.mul_a(&rhs, &mut z_tilde);
        for i in 0..n {
            x[i] = alpha * rhs[i] + (1.0 - alpha) * x[i];
        }
        let (l, u) = (form.lower(), form.upper());
        for i in 0..m {
            let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (relaxed + y[i] / rho).clamp(l[i], u[i]);
            y[i] += rho * (relaxed - z_new);
            z[i] = z_new;
        }

        if k % check_every == 0 || k == settings.max_iter {
            res = Residuals::compute(&form, &x, &z, &y, tol);
            incumbent.offer(problem, form.dispatch(&x));
            trace.push(incumbent.objective);
            if res.converged() {
                converged = true;
                break;
            }
            if settings.adaptive_rho && res.dual_rel > 0.0 {
                let ratio = (res.primal_rel / res.dual_rel).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho = (rho * ratio).clamp(1e-6, 1e6);
                    form.factor(sigma, rho);
                }
            }
        }
    }

    let mut polished = false;
    if converged && settings.polish {
        if let Some((xp, yp)) = polish(&form, &z, &y) {
            let mut ax = vec![0.0; m];
            form.mul_a(&xp, &mut ax);
            let zp = clip_into(&ax, form.lower(), form.upper());
            let pres = Residuals::compute(&form, &xp, &zp, &yp, tol);
            if pres.converged() && pres.primal <= res.primal.max(tol * 1e-3) {
                x = xp;
                y = yp;
                res = pres;
                polished = true;
                incumbent.offer(problem, form.dispatch(&x));
                trace.push(incumbent.objective);
            }
        }
    }

    let complementarity_violation = n == 2 * h && {
        net_split_pairs(&form, &mut x, tol);
        (0..h).any(|i| x[i] * x[h + i] > tol)
    };
    Ok(HorizonSolution {
        p_b_kw: incumbent.p_b,
        objective_value: incumbent.objective,
        iterations,
        converged,
        objective_trace: trace,
        primal_residual: res.primal,
        dual_residual: res.dual,
        polished,
        complementarity_violation,
        horizon: h,
        x,
        y,
    })
}
