//! Toda Lattice in Flaschka variables: conserved functionals, the
//! tridiagonal Lax operators L+/L-, their Green's functions, the
//! renormalized densities gamma_n / rho_n with currents, and checks of the
//! algebraic identities the densities rest on.

use std::collections::BTreeMap;

use crate::error::{LatticeError, Result};
use crate::linalg::{self, BandedMatrix, DenseKernel};
use crate::series::Series;
use crate::window::LatticeWindow;

/// Default ball radius for B_delta^kappa. The theory only asserts existence
/// of a workable delta; 0.1 keeps the Green's function bounds and the series
/// contraction comfortable across the test corpus.
pub const DEFAULT_DELTA: f64 = 0.1;

/// Spectral parameter kappa >= 1; cosh(kappa) is the diagonal shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralKappa(f64);

impl SpectralKappa {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa >= 1.0) {
            return Err(LatticeError::DomainError(format!(
                "kappa must be >= 1, got {kappa}"
            )));
        }
        Ok(SpectralKappa(kappa))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Choice between the two Lax operators L+ and L-.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaxSign {
    Plus,
    Minus,
}

impl LaxSign {
    /// The +/-1 carried by the b-terms and the conservation identities.
    pub fn factor(&self) -> f64 {
        match self {
            LaxSign::Plus => 1.0,
            LaxSign::Minus => -1.0,
        }
    }

    pub fn both() -> [LaxSign; 2] {
        [LaxSign::Plus, LaxSign::Minus]
    }

    pub fn flipped(&self) -> LaxSign {
        match self {
            LaxSign::Plus => LaxSign::Minus,
            LaxSign::Minus => LaxSign::Plus,
        }
    }
}

/// Positions and momenta (q_n, p_n) on a window.
#[derive(Debug, Clone)]
pub struct TodaPhase {
    window: LatticeWindow,
    q: Vec<f64>,
    p: Vec<f64>,
}

impl TodaPhase {
    pub fn new(window: LatticeWindow, q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), window.len());
        assert_eq!(p.len(), window.len());
        TodaPhase { window, q, p }
    }

    pub fn q(&self, n: i64) -> f64 {
        self.window.index_of(n).map_or(0.0, |i| self.q[i])
    }

    pub fn p(&self, n: i64) -> f64 {
        self.window.index_of(n).map_or(0.0, |i| self.p[i])
    }
}

/// Flaschka variables (a_n, b_n); vacuum a = 1/2, b = 0 outside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct TodaState {
    window: LatticeWindow,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl TodaState {
    pub fn new(window: LatticeWindow, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), window.len());
        assert_eq!(b.len(), window.len());
        if let Some(bad) = a.iter().find(|v| !(**v > 0.0)) {
            return Err(LatticeError::DomainError(format!(
                "a_n must be positive, got {bad}"
            )));
        }
        Ok(TodaState { window, a, b })
    }

    pub fn vacuum(window: LatticeWindow) -> Self {
        TodaState {
            window,
            a: vec![0.5; window.len()],
            b: vec![0.0; window.len()],
        }
    }

    pub fn window(&self) -> &LatticeWindow {
        &self.window
    }

    pub fn a(&self, n: i64) -> f64 {
        self.window.index_of(n).map_or(0.5, |i| self.a[i])
    }

    pub fn b(&self, n: i64) -> f64 {
        self.window.index_of(n).map_or(0.0, |i| self.b[i])
    }

    pub fn log2a(&self, n: i64) -> f64 {
        (2.0 * self.a(n)).ln()
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b
    }

    pub fn set_a(&mut self, n: i64, v: f64) {
        let i = self.window.offset(n);
        self.a[i] = v;
    }

    pub fn set_b(&mut self, n: i64, v: f64) {
        let i = self.window.offset(n);
        self.b[i] = v;
    }

    /// Copy of the state on a larger window (vacuum fill).
    pub fn on_window(&self, window: LatticeWindow) -> Self {
        let mut a = vec![0.5; window.len()];
        let mut b = vec![0.0; window.len()];
        for (i, n) in window.sites().enumerate() {
            a[i] = self.a(n);
            b[i] = self.b(n);
        }
        TodaState { window, a, b }
    }
}

/// Toda interaction potential V(x) = e^{-x} + x - 1, written with expm1
/// since the naive form loses precision near x = 0.
fn potential_stable(x: f64) -> f64 {
    (-x).exp_m1() + x
}

/// a_n = (1/2) e^{(q_n - q_{n+1})/2}, b_n = -p_n / 2.
pub fn flaschka_forward(phase: &TodaPhase) -> TodaState {
    let window = phase.window;
    let a = window
        .sites()
        .map(|n| 0.5 * (0.5 * (phase.q(n) - phase.q(n + 1))).exp())
        .collect();
    let b = window.sites().map(|n| -0.5 * phase.p(n)).collect();
    TodaState { window, a, b }
}

/// da_n/dt = a_n (b_{n+1} - b_n), db_n/dt = 2 (a_n^2 - a_{n-1}^2), on the
/// window padded by one site (the vector field can be nonzero there).
pub fn toda_vector_field(s: &TodaState) -> (Series<f64>, Series<f64>) {
    let w = s.window.padded(1);
    let da = Series::from_fn(w, |n| s.a(n) * (s.b(n + 1) - s.b(n)));
    let db = Series::from_fn(w, |n| 2.0 * (s.a(n).powi(2) - s.a(n - 1).powi(2)));
    (da, db)
}

/// H = sum 2 b_n^2 + V(-2 log 2a_n); zero exactly at vacuum.
pub fn energy(s: &TodaState) -> f64 {
    s.window
        .sites()
        .map(|n| 2.0 * s.b(n).powi(2) + potential_stable(-2.0 * s.log2a(n)))
        .sum()
}

/// Casimirs: net lattice expansion M and total momentum P.
pub fn casimirs(s: &TodaState) -> (f64, f64) {
    let m = -2.0 * s.window.sites().map(|n| s.log2a(n)).sum::<f64>();
    let p = -2.0 * s.window.sites().map(|n| s.b(n)).sum::<f64>();
    (m, p)
}

/// Ball test H < delta^2 kappa.
pub fn in_ball(s: &TodaState, kappa: SpectralKappa, delta: f64) -> bool {
    energy(s) < delta * delta * kappa.get()
}

/// Padding beyond the state's support for the operator truncation; the
/// Green's function decays like e^{-kappa |n - m|}, so the boundary error is
/// around e^{-40}.
pub fn pad_width(kappa: SpectralKappa) -> usize {
    (40.0 / kappa.get()).ceil() as usize
}

/// Margin around the support on which densities are evaluated and summed;
/// tails beyond it are below e^{-32}.
pub fn eval_margin(kappa: SpectralKappa) -> usize {
    (16.0 / kappa.get()).ceil() as usize
}

pub fn solve_window(s: &TodaState, kappa: SpectralKappa) -> LatticeWindow {
    s.window.padded(pad_width(kappa))
}

pub fn report_window(s: &TodaState, kappa: SpectralKappa) -> LatticeWindow {
    s.window.padded(eval_margin(kappa))
}

fn lax_on(
    s: &TodaState,
    window: LatticeWindow,
    kappa: SpectralKappa,
    sign: LaxSign,
) -> BandedMatrix<f64> {
    let ch = kappa.get().cosh();
    let f = sign.factor();
    let mut mat = BandedMatrix::zeros(window, 1, 1, false);
    let len = window.len();
    for (r, n) in window.sites().enumerate() {
        mat.set(r, 0, ch - f * s.b(n));
        if r + 1 < len {
            mat.set(r, 1, -s.a(n));
        }
        if r > 0 {
            mat.set(r, -1, -s.a(n - 1));
        }
    }
    mat
}

/// Symmetric tridiagonal truncation of L+/L- on the padded window.
pub fn lax_matrix(s: &TodaState, kappa: SpectralKappa, sign: LaxSign) -> BandedMatrix<f64> {
    lax_on(s, solve_window(s, kappa), kappa, sign)
}

/// Vacuum Green's function G_0(n, m) = e^{-kappa |n-m|} / sinh(kappa).
pub fn free_green(n: i64, m: i64, kappa: SpectralKappa) -> f64 {
    let k = kappa.get();
    (-k * (n - m).abs() as f64).exp() / k.sinh()
}

/// Green's function of L+/L- as a dense kernel on the padded window.
pub fn green_table(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
) -> Result<DenseKernel<f64>> {
    linalg::invert_window(&lax_matrix(s, kappa, sign))
}

fn decay(kappa: f64, dist: f64) -> f64 {
    (-2.0 * kappa * dist.abs()).exp()
}

/// gamma_n = G(n,n) - 1/sinh(kappa) - renormalization, the trace-side
/// conserved density.
pub fn gamma_density(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    g: &DenseKernel<f64>,
) -> Series<f64> {
    let k = kappa.get();
    let sh2 = k.sinh().powi(2);
    let f = sign.factor();
    let supp = s.window.padded(1);
    Series::from_fn(report_window(s, kappa), |n| {
        let mut renorm = 0.0;
        for m in supp.sites() {
            renorm += s.log2a(m) * decay(k, (m - n) as f64 + 0.5) / sh2
                + f * s.b(m) * decay(k, (m - n) as f64) / sh2;
        }
        g.entry(n, n) - 1.0 / k.sinh() - renorm
    })
}

fn rho_renorm(s: &TodaState, kappa: SpectralKappa, sign: LaxSign, n: i64) -> f64 {
    let k = kappa.get();
    let f = sign.factor();
    let mut acc = 0.0;
    for m in s.window.padded(1).sites() {
        acc += s.log2a(m) * decay(k, (n - m) as f64)
            + f * s.b(m) * decay(k, (n - m) as f64 + 0.5);
    }
    acc
}

/// The three equivalent expressions for the determinant-side density rho_n:
/// the defining log form, the arcsinh form, and the log-ratio form.
pub struct RhoForms {
    pub original: Series<f64>,
    pub arcsinh: Series<f64>,
    pub log_ratio: Series<f64>,
}

pub fn rho_density_forms(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    g: &DenseKernel<f64>,
) -> Result<RhoForms> {
    let k = kappa.get();
    let w = report_window(s, kappa);
    let mut original = Vec::with_capacity(w.len());
    let mut arcsinh = Vec::with_capacity(w.len());
    let mut log_ratio = Vec::with_capacity(w.len());
    for n in w.sites() {
        let gnn1 = g.entry(n, n + 1);
        if gnn1 <= 0.0 {
            return Err(LatticeError::DegenerateGreen {
                site: n,
                detail: format!("G(n, n+1) = {gnn1} is not positive"),
            });
        }
        let an = s.a(n);
        let r = an * gnn1;
        let renorm = rho_renorm(s, kappa, sign, n);
        original.push(k - 0.5 * (1.0 + 1.0 / r).ln() - renorm);
        let gd = g.entry(n, n) * g.entry(n + 1, n + 1);
        arcsinh.push(k - (1.0 / (4.0 * an * an * gd).sqrt()).asinh() - renorm);
        log_ratio.push(k - 0.5 * (gd / (gnn1 * gnn1)).ln() - renorm);
    }
    Ok(RhoForms {
        original: Series::new(w, original),
        arcsinh: Series::new(w, arcsinh),
        log_ratio: Series::new(w, log_ratio),
    })
}

/// rho_n in its numerically preferred log-ratio form.
pub fn rho_density(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    g: &DenseKernel<f64>,
) -> Result<Series<f64>> {
    Ok(rho_density_forms(s, kappa, sign, g)?.log_ratio)
}

/// Currents (gamma_current, rho_current) paired with the densities.
pub fn currents(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    g: &DenseKernel<f64>,
) -> Result<(Series<f64>, Series<f64>)> {
    let k = kappa.get();
    let sh = k.sinh();
    let f = sign.factor();
    let w = report_window(s, kappa);
    let supp = s.window.padded(1);

    let gamma_current = Series::from_fn(w, |n| {
        let mut renorm = 0.0;
        for m in supp.sites() {
            renorm += (4.0 * s.a(m - 1).powi(2) - 1.0) * decay(k, (m - n) as f64) / (2.0 * sh * sh)
                + f * s.b(m) * decay(k, (m - n) as f64 + 0.5) / (sh * sh);
        }
        2.0 * s.a(n - 1) * g.entry(n, n - 1) - (-k).exp() / sh - renorm
    });

    let mut rho_current = Vec::with_capacity(w.len());
    for n in w.sites() {
        let gnn = g.entry(n, n);
        if gnn <= 0.0 {
            return Err(LatticeError::DegenerateGreen {
                site: n,
                detail: format!("G(n, n) = {gnn} is not positive"),
            });
        }
        let mut renorm = 0.0;
        // the a-term sits at the bond m - 1/2, i.e. weight e^{-2k|n+1/2-m|};
        // pairing 4a_{m-1}^2 - 1 with |n-1/2-m| fails to cancel the linear
        // part of 1/G(n,n) and breaks the discrete conservation law
        for m in supp.sites() {
            renorm += (4.0 * s.a(m - 1).powi(2) - 1.0) * decay(k, (n - m) as f64 + 0.5) / 2.0
                + f * s.b(m) * decay(k, (n - m) as f64);
        }
        rho_current.push(sh - 1.0 / gnn - renorm);
    }
    Ok((gamma_current, Series::new(w, rho_current)))
}

/// dG(n, m)/dt from the Lax evolution, valid entrywise.
fn green_dot(s: &TodaState, sign: LaxSign, g: &DenseKernel<f64>, n: i64, m: i64) -> f64 {
    sign.factor()
        * (s.a(n) * g.entry(n + 1, m) - s.a(n - 1) * g.entry(n - 1, m)
            + s.a(m) * g.entry(n, m + 1)
            - s.a(m - 1) * g.entry(n, m - 1))
}

/// Analytic d/dt of (rho_n, gamma_n): the Lax equation gives dG/dt entrywise
/// and the equations of motion give the derivative of the renormalization
/// sums. No time stepping is involved.
pub fn density_time_derivative(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
) -> Result<(Series<f64>, Series<f64>)> {
    let g = green_table(s, kappa, sign)?;
    let k = kappa.get();
    let sh2 = k.sinh().powi(2);
    let f = sign.factor();
    let w = report_window(s, kappa);
    let supp = s.window.padded(1);
    let u_dot = |m: i64| s.b(m + 1) - s.b(m); // d/dt log(2 a_m)
    let b_dot = |m: i64| 2.0 * (s.a(m).powi(2) - s.a(m - 1).powi(2));

    let mut drho = Vec::with_capacity(w.len());
    let mut dgamma = Vec::with_capacity(w.len());
    for n in w.sites() {
        let gd_nn = green_dot(s, sign, &g, n, n);
        let gd_n1 = green_dot(s, sign, &g, n + 1, n + 1);
        let gd_off = green_dot(s, sign, &g, n, n + 1);
        let mut renorm_rho = 0.0;
        let mut renorm_gamma = 0.0;
        for m in supp.sites() {
            renorm_rho += u_dot(m) * decay(k, (n - m) as f64)
                + f * b_dot(m) * decay(k, (n - m) as f64 + 0.5);
            renorm_gamma += u_dot(m) * decay(k, (m - n) as f64 + 0.5) / sh2
                + f * b_dot(m) * decay(k, (m - n) as f64) / sh2;
        }
        drho.push(
            -0.5 * (gd_nn / g.entry(n, n) + gd_n1 / g.entry(n + 1, n + 1)
                - 2.0 * gd_off / g.entry(n, n + 1))
                - renorm_rho,
        );
        dgamma.push(gd_nn - renorm_gamma);
    }
    Ok((Series::new(w, drho), Series::new(w, dgamma)))
}

fn parity(n: i64) -> f64 {
    if n.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Residuals of the Green's-function identities, the unitary involution
/// relating L+ and L-, and the n <-> m symmetry.
pub fn check_identities(
    s: &TodaState,
    kappa: SpectralKappa,
    g: &DenseKernel<f64>,
) -> BTreeMap<String, f64> {
    let w = report_window(s, kappa);
    let mut quadratic: f64 = 0.0;
    let mut d1: f64 = 0.0;
    let mut u1: f64 = 0.0;
    let mut middle: f64 = 0.0;

    for n in w.sites() {
        if !w.contains(n + 1) {
            continue;
        }
        let an = s.a(n);
        let gnn1 = g.entry(n, n + 1);
        quadratic = quadratic.max(
            (gnn1 * (1.0 + an * gnn1) - an * g.entry(n, n) * g.entry(n + 1, n + 1)).abs(),
        );
        let inv = 1.0 / (an * gnn1);
        for kk in w.sites() {
            let ind_gt = if kk > n { inv } else { 0.0 };
            d1 = d1.max(
                (g.entry(n + 1, kk) / g.entry(n + 1, n)
                    - g.entry(n, kk) / g.entry(n, n) * (1.0 + ind_gt))
                .abs(),
            );
            let ind_le = if kk <= n { inv } else { 0.0 };
            u1 = u1.max(
                (g.entry(n, kk) / gnn1
                    - g.entry(n + 1, kk) / g.entry(n + 1, n + 1) * (1.0 + ind_le))
                .abs(),
            );
        }
        for kk in w.sites().filter(|&kk| kk <= n) {
            for l in w.sites().filter(|&l| l > n) {
                middle = middle.max(
                    (g.entry(kk, l)
                        - g.entry(kk, n + 1) * g.entry(n, l) / g.entry(n + 1, n))
                    .abs(),
                );
            }
        }
    }

    // involution: L+ - 2 cosh(kappa) = -U L- U with (U f)_n = (-1)^n f_n
    let lp = lax_matrix(s, kappa, LaxSign::Plus);
    let lm = lax_matrix(s, kappa, LaxSign::Minus);
    let ch2 = 2.0 * kappa.get().cosh();
    let mut involution: f64 = 0.0;
    let sw = *lp.window();
    for (r, n) in sw.sites().enumerate() {
        for off in -1isize..=1 {
            if lp.col_of(r, off).is_none() {
                continue;
            }
            let m = n + off as i64;
            let lhs = lp.get(r, off) - if off == 0 { ch2 } else { 0.0 };
            let rhs = -parity(n) * parity(m) * lm.get(r, off);
            involution = involution.max((lhs - rhs).abs());
        }
    }

    let mut symmetry: f64 = 0.0;
    let gv = g.values();
    for i in 0..gv.nrows() {
        for j in (i + 1)..gv.ncols() {
            symmetry = symmetry.max((gv[(i, j)] - gv[(j, i)]).abs());
        }
    }

    let mut out = BTreeMap::new();
    out.insert("quadratic_id".into(), quadratic);
    out.insert("d1".into(), d1);
    out.insert("u1".into(), u1);
    out.insert("middle".into(), middle);
    out.insert("involution".into(), involution);
    out.insert("green_symmetry".into(), symmetry);
    out
}

/// Both sides of the macroscopic determinant and trace ledgers.
#[derive(Debug, Clone, Copy)]
pub struct MacroscopicCheck {
    pub lhs_rho: f64,
    pub rhs_rho: f64,
    pub lhs_gamma: f64,
    pub rhs_gamma: f64,
    pub log_det: f64,
    pub trace_diff: f64,
}

/// sum rho = -log det[L/L0] +/- P/(2 sinh k) + e^{-k} M/(2 sinh k) and
/// sum gamma = tr(L^-1 - L0^-1) +/- cosh(k) P/(2 sinh^3 k) + M/(2 sinh^3 k).
pub fn macroscopic_check(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
) -> Result<MacroscopicCheck> {
    let k = kappa.get();
    let f = sign.factor();
    let sw = solve_window(s, kappa);
    let lax = lax_matrix(s, kappa, sign);
    let vac = TodaState::vacuum(s.window);
    let lax0 = lax_on(&vac, sw, kappa, sign);

    let log_det = linalg::log_det_ratio(&lax, &lax0)?.value().re;
    let g = linalg::invert_window(&lax)?;
    // subtract the truncated vacuum Green's function (not 1/sinh k): the
    // hard cutoff perturbs both diagonals near the boundary identically,
    // so the boundary contributions cancel in the difference
    let g0 = linalg::invert_window(&lax0)?;
    let trace_diff: f64 = sw.sites().map(|n| g.entry(n, n) - g0.entry(n, n)).sum();

    let (m, p) = casimirs(s);
    let lhs_rho = rho_density(s, kappa, sign, &g)?.sum();
    let lhs_gamma = gamma_density(s, kappa, sign, &g).sum();
    let rhs_rho = -log_det + f * p / (2.0 * k.sinh()) + (-k).exp() * m / (2.0 * k.sinh());
    let rhs_gamma =
        trace_diff + f * k.cosh() * p / (2.0 * k.sinh().powi(3)) + m / (2.0 * k.sinh().powi(3));
    Ok(MacroscopicCheck {
        lhs_rho,
        rhs_rho,
        lhs_gamma,
        rhs_gamma,
        log_det,
        trace_diff,
    })
}

/// Evaluate (rho_n, gamma_n) at a single site for probe purposes.
fn rho_gamma_at(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    n: i64,
) -> Result<(f64, f64)> {
    let g = green_table(s, kappa, sign)?;
    let rho = rho_density(s, kappa, sign, &g)?;
    let gamma = gamma_density(s, kappa, sign, &g);
    Ok((rho.at(n), gamma.at(n)))
}

/// Direction (c_m, d_m) for convexity probes: a_m -> a_m e^{s c_m},
/// b_m -> b_m + s d_m.
#[derive(Debug, Clone)]
pub struct Direction {
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl Direction {
    pub fn norm_sq(&self) -> f64 {
        self.c.iter().chain(self.d.iter()).map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvexityProbe {
    pub second_diff_rho: f64,
    pub second_diff_gamma: f64,
    pub first_diff_rho: f64,
    pub first_diff_gamma: f64,
    /// Central difference of rho_n in a_n alone; vanishes identically.
    pub a_gradient: f64,
}

fn perturbed(s: &TodaState, dir: &Direction, h: f64) -> TodaState {
    let mut a = s.a.clone();
    let mut b = s.b.clone();
    for i in 0..a.len() {
        a[i] *= (h * dir.c[i]).exp();
        b[i] += h * dir.d[i];
    }
    TodaState {
        window: s.window,
        a,
        b,
    }
}

/// Symmetric second differences of rho_n and gamma_n along a direction in
/// (log 2a, b), plus the a_n-gradient of rho_n.
pub fn convexity_probe(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
    dir: &Direction,
    n: i64,
    h: f64,
) -> Result<ConvexityProbe> {
    assert!(
        (1e-4..=1e-2).contains(&h),
        "probe step h must lie in [1e-4, 1e-2]"
    );
    assert_eq!(dir.c.len(), s.window.len());
    assert_eq!(dir.d.len(), s.window.len());
    let plus = perturbed(s, dir, h);
    let minus = perturbed(s, dir, -h);
    for st in [&plus, &minus] {
        if !in_ball(st, kappa, DEFAULT_DELTA) {
            return Err(LatticeError::OutOfBall {
                detail: format!(
                    "perturbed state energy {} >= {}",
                    energy(st),
                    DEFAULT_DELTA * DEFAULT_DELTA * kappa.get()
                ),
            });
        }
    }
    let (r0, g0) = rho_gamma_at(s, kappa, sign, n)?;
    let (rp, gp) = rho_gamma_at(&plus, kappa, sign, n)?;
    let (rm, gm) = rho_gamma_at(&minus, kappa, sign, n)?;

    let mut sa = s.clone();
    sa.set_a(n, s.a(n) + h);
    let (ra_p, _) = rho_gamma_at(&sa, kappa, sign, n)?;
    sa.set_a(n, s.a(n) - h);
    let (ra_m, _) = rho_gamma_at(&sa, kappa, sign, n)?;

    Ok(ConvexityProbe {
        second_diff_rho: (rp + rm - 2.0 * r0) / (h * h),
        second_diff_gamma: (gp + gm - 2.0 * g0) / (h * h),
        first_diff_rho: (rp - rm) / (2.0 * h),
        first_diff_gamma: (gp - gm) / (2.0 * h),
        a_gradient: (ra_p - ra_m) / (2.0 * h),
    })
}

/// Everything the verification sweep wants for one (state, kappa, sign).
#[derive(Debug, Clone)]
pub struct TodaDensityReport {
    pub gamma: Series<f64>,
    pub rho: Series<f64>,
    pub gamma_current: Series<f64>,
    pub rho_current: Series<f64>,
    pub residuals: BTreeMap<String, f64>,
    pub macroscopic: MacroscopicCheck,
    pub casimir_m: f64,
    pub casimir_p: f64,
}

pub fn density_report(
    s: &TodaState,
    kappa: SpectralKappa,
    sign: LaxSign,
) -> Result<TodaDensityReport> {
    let g = green_table(s, kappa, sign)?;
    let forms = rho_density_forms(s, kappa, sign, &g)?;
    let gamma = gamma_density(s, kappa, sign, &g);
    let (gamma_current, rho_current) = currents(s, kappa, sign, &g)?;
    let (drho, dgamma) = density_time_derivative(s, kappa, sign)?;
    let f = sign.factor();

    let mut residuals = check_identities(s, kappa, &g);
    let w = *forms.log_ratio.window();
    let mut cons_rho: f64 = 0.0;
    let mut cons_gamma: f64 = 0.0;
    for n in w.sites() {
        cons_rho = cons_rho
            .max((f * drho.at(n) - (rho_current.at(n + 1) - rho_current.at(n))).abs());
        cons_gamma = cons_gamma
            .max((f * dgamma.at(n) - (gamma_current.at(n + 1) - gamma_current.at(n))).abs());
    }
    residuals.insert("rho_conservation".into(), cons_rho);
    residuals.insert("gamma_conservation".into(), cons_gamma);

    let mut form_resid: f64 = 0.0;
    for n in w.sites() {
        form_resid = form_resid
            .max((forms.original.at(n) - forms.log_ratio.at(n)).abs())
            .max((forms.arcsinh.at(n) - forms.log_ratio.at(n)).abs());
    }
    residuals.insert("rho_form_agreement".into(), form_resid);
    residuals.insert("rho_positivity".into(), (-forms.log_ratio.min()).max(0.0));
    residuals.insert("gamma_positivity".into(), (-gamma.min()).max(0.0));
    residuals.insert(
        "green_positivity".into(),
        (-g.values().iter().copied().fold(f64::INFINITY, f64::min)).max(0.0),
    );

    let macroscopic = macroscopic_check(s, kappa, sign)?;
    residuals.insert(
        "ledger_det".into(),
        (macroscopic.lhs_rho - macroscopic.rhs_rho).abs(),
    );
    residuals.insert(
        "ledger_trace".into(),
        (macroscopic.lhs_gamma - macroscopic.rhs_gamma).abs(),
    );

    let (m, p) = casimirs(s);
    Ok(TodaDensityReport {
        gamma,
        rho: forms.log_ratio,
        gamma_current,
        rho_current,
        residuals,
        macroscopic,
        casimir_m: m,
        casimir_p: p,
    })
}

// keep the naive potential around for the doc-free sanity test below
#[allow(dead_code)]
fn potential_naive(x: f64) -> f64 {
    (-x).exp() + x - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kappa(v: f64) -> SpectralKappa {
        SpectralKappa::new(v).unwrap()
    }

    fn single_site_b(b0: f64) -> TodaState {
        let w = LatticeWindow::centered(9);
        let mut s = TodaState::vacuum(w);
        s.set_b(0, b0);
        s
    }

    fn random_in_ball(seed: u64, len: usize, amp: f64) -> TodaState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LatticeWindow::centered(len);
        let a: Vec<f64> = (0..len)
            .map(|_| 0.5 * (amp * rng.gen_range(-1.0..1.0f64)).exp())
            .collect();
        let b: Vec<f64> = (0..len).map(|_| amp * rng.gen_range(-1.0..1.0f64)).collect();
        TodaState::new(w, a, b).unwrap()
    }

    #[test]
    fn potential_forms_agree() {
        for x in [-2.0, -0.3, 0.0, 1e-9, 0.7, 3.0] {
            assert_relative_eq!(potential_stable(x), potential_naive(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn flaschka_vacuum_and_examples() {
        let w = LatticeWindow::new(0, 4);
        let vac = flaschka_forward(&TodaPhase::new(w, vec![0.0; 4], vec![0.0; 4]));
        assert_eq!(vac, TodaState::vacuum(w));

        let q = vec![0.0, 2.0 * 2.0f64.ln(), 0.0, 0.0];
        let phase = TodaPhase::new(w, q, vec![0.0; 4]);
        assert_relative_eq!(flaschka_forward(&phase).a(0), 0.25, epsilon = 1e-15);

        let phase = TodaPhase::new(w, vec![0.0; 4], vec![3.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(flaschka_forward(&phase).b(0), -1.5, epsilon = 1e-15);
    }

    #[test]
    fn vector_field_examples() {
        let w = LatticeWindow::centered(9);
        let vac = TodaState::vacuum(w);
        let (da, db) = toda_vector_field(&vac);
        assert_eq!(da.max_abs(), 0.0);
        assert_eq!(db.max_abs(), 0.0);

        let s = single_site_b(1.0);
        let (da, db) = toda_vector_field(&s);
        assert_relative_eq!(da.at(0), -0.5, epsilon = 1e-15);
        assert_relative_eq!(da.at(-1), 0.5, epsilon = 1e-15);
        assert_eq!(db.max_abs(), 0.0);

        let mut s = TodaState::vacuum(w);
        s.set_a(0, 1.0);
        let (_, db) = toda_vector_field(&s);
        assert_relative_eq!(db.at(0), 1.5, epsilon = 1e-15);
        assert_relative_eq!(db.at(1), -1.5, epsilon = 1e-15);
    }

    #[test]
    fn energy_examples() {
        let w = LatticeWindow::centered(9);
        assert_eq!(energy(&TodaState::vacuum(w)), 0.0);
        assert_relative_eq!(energy(&single_site_b(1.0)), 2.0, epsilon = 1e-15);

        let mut s = TodaState::vacuum(w);
        s.set_a(0, 0.5 / std::f64::consts::E);
        assert_relative_eq!(energy(&s), (-2.0f64).exp() + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn casimir_examples() {
        let w = LatticeWindow::centered(9);
        assert_eq!(casimirs(&TodaState::vacuum(w)), (0.0, 0.0));
        assert_relative_eq!(casimirs(&single_site_b(1.0)).1, -2.0, epsilon = 1e-15);
        let mut s = TodaState::vacuum(w);
        s.set_a(0, 0.25);
        assert_relative_eq!(casimirs(&s).0, 2.0 * 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn ball_test_thresholds() {
        let w = LatticeWindow::centered(5);
        assert!(in_ball(&TodaState::vacuum(w), kappa(1.0), 0.1));
        let s = single_site_b((0.009f64 / 2.0).sqrt());
        assert!(in_ball(&s, kappa(1.0), 0.1));
        let s = single_site_b((0.011f64 / 2.0).sqrt());
        assert!(!in_ball(&s, kappa(1.0), 0.1));
    }

    #[test]
    fn lax_matrix_entries_and_involution() {
        let s = TodaState::vacuum(LatticeWindow::centered(9));
        let k = kappa(1.0);
        let lax = lax_matrix(&s, k, LaxSign::Plus);
        let r = lax.window().offset(0);
        assert_relative_eq!(lax.get(r, 0), 1.0f64.cosh());
        assert_relative_eq!(lax.get(r, 1), -0.5);

        let mut s = s;
        s.set_b(0, 0.1);
        let lax = lax_matrix(&s, k, LaxSign::Plus);
        assert_relative_eq!(lax.get(r, 0), 1.0f64.cosh() - 0.1, epsilon = 1e-15);

        let g = green_table(&s, k, LaxSign::Plus).unwrap();
        let res = check_identities(&s, k, &g);
        assert_eq!(res["involution"], 0.0, "involution holds exactly");
    }

    #[test]
    fn free_green_values() {
        let k = kappa(1.0);
        assert_relative_eq!(free_green(0, 0, k), 1.0 / 1.0f64.sinh(), epsilon = 1e-15);
        assert_relative_eq!(
            free_green(3, 0, k),
            (-3.0f64).exp() / 1.0f64.sinh(),
            epsilon = 1e-15
        );
        assert_eq!(free_green(2, 5, k), free_green(5, 2, k));
    }

    #[test]
    fn green_table_vacuum_matches_free_green() {
        let s = TodaState::vacuum(LatticeWindow::centered(9));
        let k = kappa(1.0);
        let g = green_table(&s, k, LaxSign::Plus).unwrap();
        for n in report_window(&s, k).sites() {
            for m in report_window(&s, k).sites() {
                assert!((g.entry(n, m) - free_green(n, m, k)).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn green_table_first_order_neumann() {
        // L+ - L0 = diag(-b) at b_0 = 0.05, so to first order
        // G - G0 = b_0 G0(n, 0) G0(0, m).
        let s = single_site_b(0.05);
        let k = kappa(1.0);
        let g = green_table(&s, k, LaxSign::Plus).unwrap();
        for n in -3i64..=3 {
            let first = 0.05 * free_green(n, 0, k).powi(2);
            let diff = g.entry(n, n) - free_green(n, n, k);
            assert!((diff - first).abs() < 3.0 * 0.05f64.powi(2));
        }
    }

    #[test]
    fn green_positive_and_symmetric_for_random_states() {
        for seed in 0..20 {
            let s = random_in_ball(seed, 16, 0.02);
            for sign in LaxSign::both() {
                let g = green_table(&s, kappa(1.0), sign).unwrap();
                assert!(g.values().iter().all(|v| *v > 0.0), "positivity, seed {seed}");
            }
        }
    }

    /// Gauss-Jordan dense inverse of the hard-cutoff Lax operator on a wide
    /// window, independent of the linalg path.
    fn dense_green_oracle(
        s: &TodaState,
        k: SpectralKappa,
        sign: LaxSign,
        half_width: i64,
    ) -> (LatticeWindow, Vec<Vec<f64>>) {
        let w = LatticeWindow::new(-half_width, (2 * half_width + 1) as usize);
        let n = w.len();
        let ch = k.get().cosh();
        let f = sign.factor();
        let mut aug = vec![vec![0.0f64; 2 * n]; n];
        for (i, site) in w.sites().enumerate() {
            aug[i][i] = ch - f * s.b(site);
            if i + 1 < n {
                aug[i][i + 1] = -s.a(site);
            }
            if i > 0 {
                aug[i][i - 1] = -s.a(site - 1);
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&r1, &r2| {
                aug[r1][col].abs().partial_cmp(&aug[r2][col].abs()).unwrap()
            });
            let piv = piv.unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for c in 0..2 * n {
                aug[col][c] /= d;
            }
            for r in 0..n {
                if r != col && aug[r][col] != 0.0 {
                    let fac = aug[r][col];
                    for c in 0..2 * n {
                        let v = aug[col][c];
                        aug[r][c] -= fac * v;
                    }
                }
            }
        }
        let inv: Vec<Vec<f64>> = aug.into_iter().map(|row| row[n..].to_vec()).collect();
        (w, inv)
    }

    #[test]
    fn gamma_matches_dense_oracle() {
        let s = single_site_b(0.05);
        let k = kappa(1.0);
        let sign = LaxSign::Plus;
        let g = green_table(&s, k, sign).unwrap();
        let gamma = gamma_density(&s, k, sign, &g);
        assert!(gamma.min() >= -1e-12);

        // 81-site dense inverse (half width 40) with the same renormalization
        let (w, inv) = dense_green_oracle(&s, k, sign, 40);
        let i0 = w.offset(0);
        let sh = 1.0f64.sinh();
        let mut renorm = 0.0;
        for m in s.window().sites() {
            renorm += s.log2a(m) * decay(1.0, m as f64 + 0.5) / (sh * sh)
                + s.b(m) * decay(1.0, m as f64) / (sh * sh);
        }
        let oracle = inv[i0][i0] - 1.0 / sh - renorm;
        assert!((gamma.at(0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn gamma_vacuum_is_zero() {
        let s = TodaState::vacuum(LatticeWindow::centered(9));
        let k = kappa(1.0);
        let g = green_table(&s, k, LaxSign::Minus).unwrap();
        assert!(gamma_density(&s, k, LaxSign::Minus, &g).max_abs() < 1e-12);
    }

    #[test]
    fn rho_vacuum_is_zero_and_forms_agree() {
        let s = TodaState::vacuum(LatticeWindow::centered(9));
        let k = kappa(1.0);
        let g = green_table(&s, k, LaxSign::Plus).unwrap();
        let forms = rho_density_forms(&s, k, LaxSign::Plus, &g).unwrap();
        assert!(forms.original.max_abs() < 1e-12);
        assert!(forms.arcsinh.max_abs() < 1e-12);
        assert!(forms.log_ratio.max_abs() < 1e-12);
    }

    #[test]
    fn rho_matches_dense_oracle() {
        let w = LatticeWindow::centered(9);
        let mut s = TodaState::vacuum(w);
        s.set_a(0, 0.55);
        let k = kappa(1.5);
        let sign = LaxSign::Minus;
        let g = green_table(&s, k, sign).unwrap();
        let rho = rho_density(&s, k, sign, &g).unwrap();
        assert!(rho.min() >= -1e-12);

        let (ow, inv) = dense_green_oracle(&s, k, sign, 40);
        let i0 = ow.offset(0);
        let i1 = ow.offset(1);
        let renorm = rho_renorm(&s, k, sign, 0);
        let oracle =
            1.5 - 0.5 * ((inv[i0][i0] * inv[i1][i1]) / (inv[i0][i1] * inv[i0][i1])).ln() - renorm;
        assert!((rho.at(0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn currents_vanish_at_vacuum_and_decay() {
        let k = kappa(1.0);
        let vac = TodaState::vacuum(LatticeWindow::centered(9));
        let g = green_table(&vac, k, LaxSign::Plus).unwrap();
        let (gj, j) = currents(&vac, k, LaxSign::Plus, &g).unwrap();
        assert!(gj.max_abs() < 1e-11);
        assert!(j.max_abs() < 1e-11);

        let s = single_site_b(0.05);
        let g = green_table(&s, k, LaxSign::Plus).unwrap();
        let (_, j) = currents(&s, k, LaxSign::Plus, &g).unwrap();
        let w = *j.window();
        assert!(j.at(w.start()).abs() < 1e-10);
        assert!(j.at(w.end() - 1).abs() < 1e-10);
        // geometric tail beyond the support
        let total: f64 = j.values().iter().map(|v| v.abs()).sum();
        assert!(total.is_finite());
        for n in 6..w.end() {
            assert!(j.at(n).abs() <= 10.0 * (-2.0 * (n - 5) as f64).exp() * 0.05);
        }
    }

    #[test]
    fn microscopic_conservation_random_state() {
        let s = random_in_ball(7, 16, 0.02);
        for sign in LaxSign::both() {
            for kv in [1.0, 2.0] {
                let k = kappa(kv);
                let f = sign.factor();
                let (drho, dgamma) = density_time_derivative(&s, k, sign).unwrap();
                let g = green_table(&s, k, sign).unwrap();
                let (gj, j) = currents(&s, k, sign, &g).unwrap();
                for n in report_window(&s, k).sites() {
                    assert!(
                        (f * drho.at(n) - (j.at(n + 1) - j.at(n))).abs() < 1e-9,
                        "rho conservation at n={n}, kappa={kv}, sign {sign:?}"
                    );
                    assert!(
                        (f * dgamma.at(n) - (gj.at(n + 1) - gj.at(n))).abs() < 1e-9,
                        "gamma conservation at n={n}, kappa={kv}, sign {sign:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn density_time_derivative_vacuum_is_zero() {
        let vac = TodaState::vacuum(LatticeWindow::centered(9));
        let (drho, dgamma) = density_time_derivative(&vac, kappa(1.0), LaxSign::Plus).unwrap();
        assert!(drho.max_abs() < 1e-12);
        assert!(dgamma.max_abs() < 1e-12);
    }

    #[test]
    fn identities_at_vacuum_and_random() {
        let k = kappa(1.0);
        let vac = TodaState::vacuum(LatticeWindow::centered(9));
        let g = green_table(&vac, k, LaxSign::Plus).unwrap();
        let res = check_identities(&vac, k, &g);
        assert!(res["quadratic_id"] < 1e-12);

        let s = random_in_ball(3, 16, 0.02);
        let g = green_table(&s, k, LaxSign::Minus).unwrap();
        let res = check_identities(&s, k, &g);
        for (name, v) in &res {
            assert!(*v < 1e-9, "{name} residual {v}");
        }
    }

    #[test]
    fn macroscopic_ledgers_hold() {
        let vac = TodaState::vacuum(LatticeWindow::centered(9));
        let c = macroscopic_check(&vac, kappa(1.0), LaxSign::Plus).unwrap();
        assert!(c.lhs_rho.abs() < 1e-10 && c.rhs_rho.abs() < 1e-10);

        let s = random_in_ball(11, 16, 0.02);
        for kv in [1.0, 2.0, 3.0] {
            for sign in LaxSign::both() {
                let c = macroscopic_check(&s, kappa(kv), sign).unwrap();
                assert!(
                    (c.lhs_rho - c.rhs_rho).abs() < 1e-8,
                    "det ledger kappa={kv} {sign:?}: {} vs {}",
                    c.lhs_rho,
                    c.rhs_rho
                );
                assert!(
                    (c.lhs_gamma - c.rhs_gamma).abs() < 1e-8,
                    "trace ledger kappa={kv} {sign:?}: {} vs {}",
                    c.lhs_gamma,
                    c.rhs_gamma
                );
            }
        }
    }

    #[test]
    fn casimir_shift_moves_both_ledger_sides_equally() {
        let s = random_in_ball(5, 12, 0.015);
        let k = kappa(1.0);
        let c0 = macroscopic_check(&s, k, LaxSign::Plus).unwrap();
        let mut shifted = s.clone();
        for n in s.window().sites() {
            shifted.set_b(n, s.b(n) + 0.003);
        }
        let c1 = macroscopic_check(&shifted, k, LaxSign::Plus).unwrap();
        let dlhs = c1.lhs_rho - c0.lhs_rho;
        let drhs = c1.rhs_rho - c0.rhs_rho;
        assert!((dlhs - drhs).abs() < 1e-9);
    }

    #[test]
    fn sign_flip_covariance() {
        let s = random_in_ball(13, 12, 0.02);
        let mut flipped = s.clone();
        for n in s.window().sites() {
            flipped.set_b(n, -s.b(n));
        }
        let k = kappa(1.0);
        let gp = green_table(&s, k, LaxSign::Plus).unwrap();
        let gm = green_table(&flipped, k, LaxSign::Minus).unwrap();
        let rp = rho_density(&s, k, LaxSign::Plus, &gp).unwrap();
        let rm = rho_density(&flipped, k, LaxSign::Minus, &gm).unwrap();
        for n in rp.window().sites() {
            assert!((rp.at(n) - rm.at(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn convexity_probe_at_vacuum_and_random() {
        let w = LatticeWindow::centered(9);
        let vac = TodaState::vacuum(w);
        let k = kappa(1.0);
        let dir = Direction {
            c: vec![0.3; w.len()],
            d: vec![-0.2; w.len()],
        };
        let p = convexity_probe(&vac, k, LaxSign::Plus, &dir, 0, 1e-3).unwrap();
        assert!(p.second_diff_rho >= -1e-6 * dir.norm_sq());
        assert!(p.second_diff_gamma >= -1e-6 * dir.norm_sq());
        assert!(p.first_diff_rho.abs() < 1e-5);
        assert!(p.first_diff_gamma.abs() < 1e-5);
        assert!(p.a_gradient.abs() < 1e-8);

        let s = random_in_ball(17, 9, 0.015);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let dir = Direction {
                c: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                d: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let p = convexity_probe(&s, k, LaxSign::Plus, &dir, 0, 1e-3).unwrap();
            assert!(p.second_diff_rho >= -1e-6 * dir.norm_sq());
            assert!(p.second_diff_gamma >= -1e-6 * dir.norm_sq());
            assert!(p.a_gradient.abs() < 1e-8);
        }
    }

    #[test]
    fn kappa_derivative_relation() {
        // (1/sinh k) d/dk sum rho = -sum gamma, checked by central difference
        let s = random_in_ball(23, 12, 0.015);
        let k0 = 1.5;
        let h = 1e-4;
        let sign = LaxSign::Plus;
        let sum_rho = |kv: f64| {
            let k = kappa(kv);
            let g = green_table(&s, k, sign).unwrap();
            rho_density(&s, k, sign, &g).unwrap().sum()
        };
        let deriv = (sum_rho(k0 + h) - sum_rho(k0 - h)) / (2.0 * h);
        let k = kappa(k0);
        let g = green_table(&s, k, sign).unwrap();
        let sum_gamma = gamma_density(&s, k, sign, &g).sum();
        assert!(
            (deriv / k0.sinh() + sum_gamma).abs() < 1e-6,
            "kappa-derivative relation: {} vs {}",
            deriv / k0.sinh(),
            -sum_gamma
        );
    }

    #[test]
    fn density_report_assembles() {
        let s = random_in_ball(29, 12, 0.02);
        let rep = density_report(&s, kappa(2.0), LaxSign::Minus).unwrap();
        for (name, v) in &rep.residuals {
            let tol = if name.starts_with("ledger") { 1e-8 } else { 1e-9 };
            assert!(*v < tol, "{name} = {v}");
        }
    }
}
