//! Ablowitz-Ladik dynamics, the block Lax operator L = U - S, its
//! matrix-valued Green's function, the conserved densities rho_n / gamma_n
//! with currents, determinant/trace ledgers, and Fourier-side coercivity of
//! the quadratic parts.

use std::collections::BTreeMap;

use nalgebra::Matrix2;
use num_complex::Complex64;

use crate::error::{LatticeError, Result};
use crate::linalg::{self, BandedMatrix, DenseKernel};
use crate::series::Series;
use crate::window::LatticeWindow;

/// Ball radius for B_delta^z; 0.1 keeps the non-degeneracy bounds on
/// G_11(n,n) and 1 + G_11(n+1,n) satisfied with at least 2x margin.
pub const DEFAULT_DELTA: f64 = 0.1;

type C64 = Complex64;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

const I: C64 = C64::new(0.0, 1.0);

/// Defocusing (beta = conj(alpha)) or focusing (beta = -conj(alpha)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FocusingSign {
    Defocusing,
    Focusing,
}

impl FocusingSign {
    pub fn factor(&self) -> f64 {
        match self {
            FocusingSign::Defocusing => 1.0,
            FocusingSign::Focusing => -1.0,
        }
    }

    pub fn both() -> [FocusingSign; 2] {
        [FocusingSign::Defocusing, FocusingSign::Focusing]
    }
}

/// Spectral parameter z. The theorem hypotheses require |z| >= 2; the
/// relaxed constructor admits 1 < |z| < 2 as an explicitly unsupported
/// regime (no invariant guarantees).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralZ(C64);

impl SpectralZ {
    pub fn new(z: C64) -> Result<Self> {
        if !(z.norm() >= 2.0) {
            return Err(LatticeError::DomainError(format!(
                "|z| must be >= 2, got |{z}| = {}",
                z.norm()
            )));
        }
        Ok(SpectralZ(z))
    }

    /// Unsupported regime 1 < |z| < 2: permitted, but none of the density
    /// or ledger guarantees are asserted there.
    pub fn new_relaxed(z: C64) -> Result<Self> {
        if !(z.norm() > 1.0) {
            return Err(LatticeError::DomainError(format!(
                "|z| must exceed 1, got |{z}| = {}",
                z.norm()
            )));
        }
        Ok(SpectralZ(z))
    }

    pub fn get(&self) -> C64 {
        self.0
    }

    pub fn inv(&self) -> C64 {
        1.0 / self.0
    }
}

/// alpha_n on a window (zero outside); beta is always derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ALState {
    window: LatticeWindow,
    alpha: Vec<C64>,
    sign: FocusingSign,
}

impl ALState {
    pub fn new(window: LatticeWindow, alpha: Vec<C64>, sign: FocusingSign) -> Result<Self> {
        assert_eq!(alpha.len(), window.len());
        if sign == FocusingSign::Defocusing {
            if let Some(bad) = alpha.iter().find(|a| a.norm() >= 1.0) {
                return Err(LatticeError::DomainError(format!(
                    "defocusing requires |alpha_n| < 1, got |{bad}| = {}",
                    bad.norm()
                )));
            }
        }
        Ok(ALState {
            window,
            alpha,
            sign,
        })
    }

    pub fn vacuum(window: LatticeWindow, sign: FocusingSign) -> Self {
        ALState {
            window,
            alpha: vec![C64::default(); window.len()],
            sign,
        }
    }

    pub fn window(&self) -> &LatticeWindow {
        &self.window
    }

    pub fn sign(&self) -> FocusingSign {
        self.sign
    }

    pub fn alpha(&self, n: i64) -> C64 {
        self.window.index_of(n).map_or(C64::default(), |i| self.alpha[i])
    }

    pub fn beta(&self, n: i64) -> C64 {
        c(self.sign.factor()) * self.alpha(n).conj()
    }

    pub fn alpha_values(&self) -> &[C64] {
        &self.alpha
    }

    pub fn set_alpha(&mut self, n: i64, v: C64) {
        let i = self.window.offset(n);
        self.alpha[i] = v;
    }

    pub fn norm_sq(&self) -> f64 {
        self.alpha.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Same alpha values under the other reduction beta = +/- conj(alpha).
    pub fn with_sign(&self, sign: FocusingSign) -> Self {
        ALState {
            window: self.window,
            alpha: self.alpha.clone(),
            sign,
        }
    }

    /// Copy of the state on a larger window (zero fill).
    pub fn on_window(&self, window: LatticeWindow) -> Self {
        let alpha = window.sites().map(|n| self.alpha(n)).collect();
        ALState {
            window,
            alpha,
            sign: self.sign,
        }
    }
}

/// d alpha_n/dt = -i[2 alpha_n - (1 - alpha_n beta_n)(alpha_{n+1} + alpha_{n-1})],
/// on the window padded by one site.
pub fn al_vector_field(s: &ALState) -> Series<C64> {
    Series::from_fn(s.window.padded(1), |n| {
        let a = s.alpha(n);
        -I * (2.0 * a - (1.0 - a * s.beta(n)) * (s.alpha(n + 1) + s.alpha(n - 1)))
    })
}

/// Conserved mass M and Hamiltonian H; both real for beta = +/- conj(alpha).
pub fn mass_and_energy(s: &ALState) -> Result<(f64, f64)> {
    let mut m = 0.0;
    let mut h = 0.0;
    for n in s.window.sites() {
        let ab = (s.alpha(n) * s.beta(n)).re; // alpha beta = +/- |alpha|^2
        if 1.0 - ab <= 0.0 {
            return Err(LatticeError::DomainError(format!(
                "1 - alpha_n beta_n = {} <= 0 at n = {n}",
                1.0 - ab
            )));
        }
        let log = (1.0 - ab).ln();
        m -= log;
        h += -2.0 * (s.alpha(n) * s.beta(n + 1)).re - 2.0 * log;
    }
    Ok((m, h))
}

/// Ball test |M| e^{|M|} < delta^2 (|z|^2 - 1)/|z|.
pub fn in_ball_al(s: &ALState, z: SpectralZ, delta: f64) -> Result<bool> {
    let (m, _) = mass_and_energy(s)?;
    let zn = z.get().norm();
    Ok(m.abs() * m.abs().exp() < delta * delta * (zn * zn - 1.0) / zn)
}

/// Per-site zero-curvature matrices U_n and V_n.
#[derive(Debug, Clone, Copy)]
pub struct TransferPair {
    pub u: Matrix2<C64>,
    pub v: Matrix2<C64>,
}

pub fn transfer_u(s: &ALState, z: SpectralZ, n: i64) -> Matrix2<C64> {
    Matrix2::new(z.get(), s.alpha(n), s.beta(n), z.inv())
}

pub fn transfer_v(s: &ALState, z: SpectralZ, n: i64) -> Matrix2<C64> {
    let (zv, zi) = (z.get(), z.inv());
    Matrix2::new(
        zv * zv - 1.0 - s.alpha(n) * s.beta(n - 1),
        zv * s.alpha(n) - zi * s.alpha(n - 1),
        zv * s.beta(n - 1) - zi * s.beta(n),
        1.0 + s.alpha(n - 1) * s.beta(n) - zi * zi,
    ) * I
}

pub fn transfer_pair(s: &ALState, z: SpectralZ, n: i64) -> TransferPair {
    TransferPair {
        u: transfer_u(s, z, n),
        v: transfer_v(s, z, n),
    }
}

fn decay_rate(z: SpectralZ) -> f64 {
    z.get().norm().ln()
}

/// Padding beyond the state's support for the operator truncation.
pub fn pad_width_al(z: SpectralZ) -> usize {
    (40.0 / decay_rate(z)).ceil() as usize
}

/// Margin around the support on which densities are evaluated and summed.
pub fn eval_margin_al(z: SpectralZ) -> usize {
    (16.0 / decay_rate(z)).ceil() as usize
}

pub fn solve_window_al(s: &ALState, z: SpectralZ) -> LatticeWindow {
    s.window.padded(pad_width_al(z))
}

pub fn report_window_al(s: &ALState, z: SpectralZ) -> LatticeWindow {
    s.window.padded(eval_margin_al(z))
}

fn lax_block_on(s: &ALState, window: LatticeWindow, z: SpectralZ) -> BandedMatrix<C64> {
    // Periodic (wrap-around) truncation. A hard cutoff of the upper
    // bidiagonal blocks z - S and z^{-1} - S is triangular and selects the
    // causal inverse for both; the second block then has entries growing
    // like |z|^N instead of the decaying branch in G_0. Wrapping keeps both
    // branches and differs from the whole-line kernel only by O(|z|^{-N}).
    let mut mat = BandedMatrix::zeros(window, 2, 2, true);
    for (r, n) in window.sites().enumerate() {
        mat.set(2 * r, 0, z.get());
        mat.set(2 * r, 1, s.alpha(n));
        mat.set(2 * r, 2, -c(1.0));
        mat.set(2 * r + 1, -1, s.beta(n));
        mat.set(2 * r + 1, 0, z.inv());
        mat.set(2 * r + 1, 2, -c(1.0));
    }
    mat
}

/// Block realization of L = U - S on the padded window.
pub fn lax_block(s: &ALState, z: SpectralZ) -> BandedMatrix<C64> {
    lax_block_on(s, solve_window_al(s, z), z)
}

/// Whole-line vacuum Green's function G_0(n, m; z).
pub fn free_green_al(n: i64, m: i64, z: SpectralZ) -> Matrix2<C64> {
    let mut g = Matrix2::zeros();
    if n <= m {
        g[(0, 0)] = z.get().powi((n - m - 1) as i32);
    } else {
        g[(1, 1)] = -z.get().powi((m - n + 1) as i32);
    }
    g
}

/// Matrix-valued Green's function of L as a block kernel on the padded
/// window; errors on states outside the default ball.
pub fn green_table_al(s: &ALState, z: SpectralZ) -> Result<DenseKernel<C64>> {
    if !in_ball_al(s, z, DEFAULT_DELTA)? {
        let (m, _) = mass_and_energy(s)?;
        return Err(LatticeError::OutOfBall {
            detail: format!("|M| = {} violates the ball bound for z = {}", m.abs(), z.get()),
        });
    }
    linalg::invert_window(&lax_block(s, z))
}

fn block_at(g: &DenseKernel<C64>, n: i64, m: i64) -> Matrix2<C64> {
    Matrix2::new(
        g.block_entry(n, 0, m, 0),
        g.block_entry(n, 0, m, 1),
        g.block_entry(n, 1, m, 0),
        g.block_entry(n, 1, m, 1),
    )
}

fn nondeg_guard(s: &ALState, z: SpectralZ, g: &DenseKernel<C64>, n: i64) -> Result<()> {
    let g11 = g.block_entry(n, 0, n, 0);
    if g11.norm() < 0.1 / z.get().norm() {
        return Err(LatticeError::DegenerateGreen {
            site: n,
            detail: format!("|G11(n,n)| = {} below 0.1/|z|", g11.norm()),
        });
    }
    let a = 1.0 + g.block_entry(n + 1, 0, n, 0);
    if a.norm() < 0.5 {
        return Err(LatticeError::DegenerateGreen {
            site: n,
            detail: format!("|1 + G11(n+1,n)| = {} below 0.5", a.norm()),
        });
    }
    let _ = s;
    Ok(())
}

/// The equivalent expressions for rho_n together with gamma_n.
pub struct AlDensityForms {
    /// Defining two-log form.
    pub defining: Series<C64>,
    /// Continuum-style form through 2 + gamma_n.
    pub alt1: Series<C64>,
    /// Log-ratio form; numerically preferred.
    pub alt: Series<C64>,
    /// gamma_n = G11(n+1,n) - G22(n+1,n) - 1.
    pub gamma: Series<C64>,
    /// gamma_n = 2 G11(n+1,n), equivalent via tr G(n+1,n) = -1.
    pub gamma_doubled: Series<C64>,
}

pub fn densities_al(
    s: &ALState,
    z: SpectralZ,
    g: &DenseKernel<C64>,
) -> Result<AlDensityForms> {
    let w = report_window_al(s, z);
    let zv = z.get();
    let mut defining = Vec::with_capacity(w.len());
    let mut alt1 = Vec::with_capacity(w.len());
    let mut alt = Vec::with_capacity(w.len());
    let mut gamma = Vec::with_capacity(w.len());
    let mut gamma_doubled = Vec::with_capacity(w.len());
    for n in w.sites() {
        nondeg_guard(s, z, g, n)?;
        let g11_n = g.block_entry(n, 0, n, 0);
        let g11_n1 = g.block_entry(n + 1, 0, n + 1, 0);
        let a = g.block_entry(n + 1, 0, n, 0);
        let gam = a - g.block_entry(n + 1, 1, n, 1) - 1.0;
        gamma.push(gam);
        gamma_doubled.push(2.0 * a);

        let p = s.alpha(n) * g.block_entry(n, 1, n, 0);
        let q = s.beta(n + 1) * g.block_entry(n + 1, 0, n + 1, 1);
        defining.push(0.5 * (1.0 + p / (zv * g11_n)).ln() + 0.5 * (1.0 + q / (zv * g11_n1)).ln());
        alt1.push(
            -0.5 * (1.0 - 2.0 * p / (2.0 + gam)).ln() - 0.5 * (1.0 - 2.0 * q / (2.0 + gam)).ln(),
        );
        // (1+A)^2 / (z^2 B C) stays near 1 in-ball, so a single principal
        // log is branch-safe (splitting off log z is not)
        alt.push(0.5 * ((1.0 + a) * (1.0 + a) / (zv * zv * g11_n * g11_n1)).ln());
    }
    Ok(AlDensityForms {
        defining: Series::new(w, defining),
        alt1: Series::new(w, alt1),
        alt: Series::new(w, alt),
        gamma: Series::new(w, gamma),
        gamma_doubled: Series::new(w, gamma_doubled),
    })
}

/// Currents (j, gamma_j) paired with (rho, gamma).
pub fn currents_al(
    s: &ALState,
    z: SpectralZ,
    g: &DenseKernel<C64>,
) -> Result<(Series<C64>, Series<C64>)> {
    let w = report_window_al(s, z);
    let (zv, zi) = (z.get(), z.inv());
    let mut j = Vec::with_capacity(w.len());
    let mut gj = Vec::with_capacity(w.len());
    for n in w.sites() {
        nondeg_guard(s, z, g, n)?;
        let g11 = g.block_entry(n, 0, n, 0);
        j.push(
            0.5 * I * (zv * s.alpha(n) - zi * s.alpha(n - 1)) * g.block_entry(n, 1, n, 0) / g11
                + 0.5 * I * (zv * s.beta(n) - zi * s.beta(n + 1)) * g.block_entry(n, 0, n, 1)
                    / g11
                - 0.5 * I * s.alpha(n) * s.beta(n - 1)
                - 0.5 * I * s.alpha(n + 1) * s.beta(n),
        );
        gj.push(
            2.0 * I * zv * g.block_entry(n + 1, 0, n - 1, 0)
                + 2.0 * I * zi * (g.block_entry(n + 1, 1, n - 1, 1) + zi),
        );
    }
    Ok((Series::new(w, j), Series::new(w, gj)))
}

/// Analytic d/dt of (rho_n, gamma_n) through dG(n,m)/dt = V_n G - G V_{m+1};
/// no time stepping.
pub fn density_time_derivative_al(
    s: &ALState,
    z: SpectralZ,
) -> Result<(Series<C64>, Series<C64>)> {
    let g = green_table_al(s, z)?;
    let w = report_window_al(s, z);
    let dg = |n: i64, m: i64| {
        transfer_v(s, z, n) * block_at(&g, n, m) - block_at(&g, n, m) * transfer_v(s, z, m + 1)
    };
    let mut drho = Vec::with_capacity(w.len());
    let mut dgamma = Vec::with_capacity(w.len());
    for n in w.sites() {
        nondeg_guard(s, z, &g, n)?;
        let a = g.block_entry(n + 1, 0, n, 0);
        let da = dg(n + 1, n)[(0, 0)];
        dgamma.push(2.0 * da);
        let b = g.block_entry(n, 0, n, 0);
        let cc = g.block_entry(n + 1, 0, n + 1, 0);
        drho.push(da / (1.0 + a) - 0.5 * dg(n, n)[(0, 0)] / b - 0.5 * dg(n + 1, n + 1)[(0, 0)] / cc);
    }
    Ok((Series::new(w, drho), Series::new(w, dgamma)))
}

/// Residuals of det G = 0, tr G(n+1,n) = -1, the four propagation
/// identities, the wrap identity U_n G(n,n) = 1 + G(n+1,n) = G(n+1,n+1)
/// U_{n+1}, and the vacuous trace tr{(L^-1 - L0^-1) S}.
pub fn al_identity_checks(
    s: &ALState,
    z: SpectralZ,
    g: &DenseKernel<C64>,
) -> Result<BTreeMap<String, f64>> {
    let w = report_window_al(s, z);
    let mut det_id: f64 = 0.0;
    let mut tr_id: f64 = 0.0;
    let mut nd: f64 = 0.0;
    let mut nu: f64 = 0.0;
    let mut nd2: f64 = 0.0;
    let mut nu2: f64 = 0.0;
    let mut wrap_left: f64 = 0.0;
    let mut wrap_right: f64 = 0.0;

    for n in w.sites() {
        for m in w.sites() {
            det_id = det_id.max(block_at(g, n, m).determinant().norm());
        }
        let gn1n = block_at(g, n + 1, n);
        tr_id = tr_id.max((gn1n[(0, 0)] + gn1n[(1, 1)] + 1.0).norm());

        let wrap = Matrix2::identity() + gn1n;
        wrap_left = wrap_left.max((transfer_u(s, z, n) * block_at(g, n, n) - wrap).norm());
        wrap_right =
            wrap_right.max((block_at(g, n + 1, n + 1) * transfer_u(s, z, n + 1) - wrap).norm());

        let denom = 1.0 + g.block_entry(n + 1, 0, n, 0);
        let g11_n = g.block_entry(n, 0, n, 0);
        let g11_n1 = g.block_entry(n + 1, 0, n + 1, 0);
        let ab_n = 1.0 - s.alpha(n) * s.beta(n);
        let ab_n1 = 1.0 - s.alpha(n + 1) * s.beta(n + 1);
        for k in w.sites() {
            let lt = if k < n { c(1.0) } else { C64::default() };
            let gt = if k > n + 1 { c(1.0) } else { C64::default() };
            let dnk = if n == k { c(1.0) } else { C64::default() };
            let dn1k = if n + 1 == k { c(1.0) } else { C64::default() };
            nd = nd.max(
                (g.block_entry(n + 1, 0, k, 1) / denom
                    - g.block_entry(n, 0, k, 1) / g11_n
                    - lt * s.alpha(n) * g.block_entry(n + 1, 1, k, 1) / (ab_n * denom * g11_n))
                .norm(),
            );
            nu = nu.max(
                (g.block_entry(k, 1, n, 0) / denom
                    - g.block_entry(k, 1, n + 1, 0) / g11_n1
                    - gt * s.beta(n + 1) * g.block_entry(k, 1, n, 1) / (ab_n1 * denom * g11_n1))
                .norm(),
            );
            nd2 = nd2.max(
                ((dnk + g.block_entry(n + 1, 0, k, 0)) / denom
                    - g.block_entry(n, 0, k, 0) / g11_n
                    - lt * s.alpha(n) * g.block_entry(n + 1, 1, k, 0) / (ab_n * g11_n * denom))
                .norm(),
            );
            nu2 = nu2.max(
                ((dn1k + g.block_entry(k, 0, n, 0)) / denom
                    - g.block_entry(k, 0, n + 1, 0) / g11_n1
                    - gt * s.beta(n + 1) * g.block_entry(k, 0, n, 1) / (ab_n1 * g11_n1 * denom))
                .norm(),
            );
        }
    }

    let sw = solve_window_al(s, z);
    let lax0 = lax_block_on(&ALState::vacuum(s.window, s.sign), sw, z);
    let g0 = linalg::invert_window(&lax0)?;
    let mut vacuous = C64::default();
    for n in sw.sites().skip(1) {
        vacuous += g.block_entry(n, 0, n - 1, 0) - g0.block_entry(n, 0, n - 1, 0)
            + g.block_entry(n, 1, n - 1, 1)
            - g0.block_entry(n, 1, n - 1, 1);
    }

    let mut out = BTreeMap::new();
    out.insert("det_id".into(), det_id);
    out.insert("tr_id".into(), tr_id);
    out.insert("prop_nd".into(), nd);
    out.insert("prop_nu".into(), nu);
    out.insert("prop_nd2".into(), nd2);
    out.insert("prop_nu2".into(), nu2);
    out.insert("wrap_left".into(), wrap_left);
    out.insert("wrap_right".into(), wrap_right);
    out.insert("vacuous_trace".into(), vacuous.norm());
    Ok(out)
}

/// Exact Hilbert-Schmidt norms of Lambda = alpha (S - 1/z)^{-1} and
/// Gamma = beta (z - S)^{-1}.
pub fn hs_norms_al(s: &ALState, z: SpectralZ) -> (f64, f64) {
    let zn2 = z.get().norm_sqr();
    let a2 = s.norm_sq();
    (zn2 / (zn2 - 1.0) * a2, a2 / (zn2 - 1.0))
}

/// Both sides of the determinant and weighted-trace ledgers.
#[derive(Debug, Clone, Copy)]
pub struct AlMacroscopic {
    pub sum_rho: C64,
    pub log_det: C64,
    /// -log det via the trace-log series in Gamma Lambda.
    pub series_neg_log_det: C64,
    pub sum_gamma: C64,
    pub weighted_trace: C64,
}

/// tr{(Gamma Lambda)^l} lives entirely on the support of alpha: compress
/// Gamma Lambda to a support-indexed matrix and take exact traces.
fn gamma_lambda_support(s: &ALState, z: SpectralZ) -> nalgebra::DMatrix<C64> {
    let w = *s.window();
    let len = w.len();
    let zv = z.get();
    let mut t = nalgebra::DMatrix::<C64>::zeros(len, len);
    for (i, n) in w.sites().enumerate() {
        for (jx, m) in w.sites().enumerate() {
            let mut acc = C64::default();
            for k in w.sites().filter(|&k| k >= n && k > m) {
                acc += s.beta(n) * s.alpha(k) * zv.powi((n + m - 2 * k) as i32);
            }
            t[(i, jx)] = acc;
        }
    }
    t
}

/// -log det[L L0^{-1}] by the Gamma-Lambda trace-log series, cross-checked
/// against the direct pivot/compression routes, plus both macroscopic
/// ledgers.
pub fn perturbation_determinant_al(s: &ALState, z: SpectralZ) -> Result<AlMacroscopic> {
    let t = gamma_lambda_support(s, z);
    let hs: f64 = t.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if hs >= 1.0 {
        return Err(LatticeError::SeriesDivergence { hs_norm: hs });
    }
    let mut series = C64::default();
    let mut power = t.clone();
    for l in 1..=400usize {
        let tr: C64 = (0..t.nrows()).map(|i| power[(i, i)]).sum();
        let term = tr * ((-1.0f64).powi(l as i32) / l as f64);
        series += term;
        if term.norm() < 1e-15 {
            break;
        }
        power = &power * &t;
    }

    let sw = solve_window_al(s, z);
    let lax = lax_block_on(s, sw, z);
    let lax0 = lax_block_on(&ALState::vacuum(s.window, s.sign), sw, z);
    let log_det = linalg::log_det_ratio(&lax, &lax0)?.value();

    let g = green_table_al(s, z)?;
    let forms = densities_al(s, z, &g)?;
    let g0 = linalg::invert_window(&lax0)?;
    let mut weighted = C64::default();
    for n in sw.sites().skip(1) {
        weighted += g.block_entry(n, 0, n - 1, 0) - g0.block_entry(n, 0, n - 1, 0)
            - (g.block_entry(n, 1, n - 1, 1) - g0.block_entry(n, 1, n - 1, 1));
    }
    Ok(AlMacroscopic {
        sum_rho: forms.alt.sum(),
        log_det,
        series_neg_log_det: series,
        sum_gamma: forms.gamma.sum(),
        weighted_trace: weighted,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ZDerivativeCheck {
    pub lhs: C64,
    pub rhs: C64,
}

/// z d/dz log det[L L0^{-1}] (central difference, h = 1e-5) against
/// tr{(L^-1 - L0^-1) S sigma_3}.
pub fn z_derivative_check(s: &ALState, z: SpectralZ) -> Result<ZDerivativeCheck> {
    let h = 1e-5;
    let log_det_at = |zz: C64| -> Result<C64> {
        let zz = SpectralZ::new_relaxed(zz)?;
        let sw = solve_window_al(s, zz);
        let lax = lax_block_on(s, sw, zz);
        let lax0 = lax_block_on(&ALState::vacuum(s.window, s.sign), sw, zz);
        Ok(linalg::log_det_ratio(&lax, &lax0)?.value())
    };
    let plus = log_det_at(z.get() * (1.0 + h))?;
    let minus = log_det_at(z.get() * (1.0 - h))?;
    let lhs = (plus - minus) / (2.0 * h);
    let rhs = perturbation_determinant_al(s, z)?.weighted_trace;
    Ok(ZDerivativeCheck { lhs, rhs })
}

#[derive(Debug, Clone, Copy)]
pub struct CoercivityCheck {
    pub sum_im_j2: f64,
    pub dft_im: f64,
    pub sum_re_rho2: f64,
    pub dft_re: f64,
}

const QUADRATURE_NODES: usize = 4096;

/// Quadratic parts of sum Im j_n and sum Re rho~_n along a direction,
/// extracted by symmetric eps-scaling and compared against the Fourier-side
/// quadratic forms. Real z only: the paper states the weights with real z^2.
pub fn coercivity_check(
    direction: &Series<C64>,
    z: f64,
    sign: FocusingSign,
    eps: f64,
) -> Result<CoercivityCheck> {
    assert!((1e-3..=1e-2).contains(&eps), "eps must lie in [1e-3, 1e-2]");
    assert!(z >= 2.0, "coercivity requires real z >= 2");
    let zs = SpectralZ::new(c(z))?;
    let w = *direction.window();

    let state = |scale: f64| -> Result<ALState> {
        let alpha = w.sites().map(|n| scale * direction.at(n)).collect();
        ALState::new(w, alpha, sign)
    };
    let evaluate = |st: &ALState| -> Result<(f64, f64)> {
        if !in_ball_al(st, zs, DEFAULT_DELTA)? {
            return Err(LatticeError::OutOfBall {
                detail: "eps * direction leaves the ball".into(),
            });
        }
        let g = green_table_al(st, zs)?;
        let (j, _) = currents_al(st, zs, &g)?;
        let forms = densities_al(st, zs, &g)?;
        let im_j: f64 = j.values().iter().map(|v| v.im).sum();
        let mut re_rho = 0.0;
        for (n, rho) in forms.alt.iter() {
            let ab = st.alpha(n) * st.beta(n);
            re_rho += (rho - 0.5 * (1.0 - ab).ln()).re;
        }
        Ok((im_j, re_rho))
    };
    let (imp, rep) = evaluate(&state(eps)?)?;
    let (imm, rem) = evaluate(&state(-eps)?)?;
    let sum_im_j2 = (imp + imm) / (2.0 * eps * eps);
    let sum_re_rho2 = (rep + rem) / (2.0 * eps * eps);

    let mut int_im = 0.0;
    let mut int_re = 0.0;
    for k in 0..QUADRATURE_NODES {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / QUADRATURE_NODES as f64;
        let hat: C64 = direction
            .iter()
            .map(|(n, d)| d * C64::from_polar(1.0, n as f64 * theta))
            .sum();
        let weight = (c(z * z) - C64::from_polar(1.0, theta)).norm_sqr();
        int_im += 2.0 * z * z * theta.sin().powi(2) / weight * hat.norm_sqr();
        int_re += (z.powi(4) - 1.0) / (2.0 * weight) * hat.norm_sqr();
    }
    int_im /= QUADRATURE_NODES as f64;
    int_re /= QUADRATURE_NODES as f64;

    let f = sign.factor();
    Ok(CoercivityCheck {
        sum_im_j2,
        dft_im: -f * int_im,
        sum_re_rho2,
        dft_re: f * int_re,
    })
}

/// Everything the verification sweep wants for one (state, z).
#[derive(Debug, Clone)]
pub struct ALDensityReport {
    pub rho: Series<C64>,
    pub gamma: Series<C64>,
    pub j: Series<C64>,
    pub gamma_j: Series<C64>,
    pub residuals: BTreeMap<String, f64>,
    pub macroscopic: AlMacroscopic,
    pub mass: f64,
    pub energy: f64,
}

pub fn density_report_al(s: &ALState, z: SpectralZ) -> Result<ALDensityReport> {
    let g = green_table_al(s, z)?;
    let forms = densities_al(s, z, &g)?;
    let (j, gj) = currents_al(s, z, &g)?;
    let (drho, dgamma) = density_time_derivative_al(s, z)?;
    let mut residuals = al_identity_checks(s, z, &g)?;

    let w = *forms.alt.window();
    let mut cons_rho: f64 = 0.0;
    let mut cons_gamma: f64 = 0.0;
    let mut form_resid: f64 = 0.0;
    let mut gamma_resid: f64 = 0.0;
    for n in w.sites() {
        cons_rho = cons_rho.max((drho.at(n) - (j.at(n + 1) - j.at(n))).norm());
        cons_gamma = cons_gamma.max((dgamma.at(n) - (gj.at(n + 1) - gj.at(n))).norm());
        form_resid = form_resid
            .max((forms.defining.at(n) - forms.alt.at(n)).norm())
            .max((forms.alt1.at(n) - forms.alt.at(n)).norm());
        gamma_resid = gamma_resid.max((forms.gamma.at(n) - forms.gamma_doubled.at(n)).norm());
    }
    residuals.insert("rho_conservation".into(), cons_rho);
    residuals.insert("gamma_conservation".into(), cons_gamma);
    residuals.insert("rho_form_agreement".into(), form_resid);
    residuals.insert("gamma_form_agreement".into(), gamma_resid);

    let macroscopic = perturbation_determinant_al(s, z)?;
    residuals.insert(
        "ledger_det".into(),
        (macroscopic.sum_rho - macroscopic.log_det).norm(),
    );
    residuals.insert(
        "ledger_trace".into(),
        (macroscopic.sum_gamma - macroscopic.weighted_trace).norm(),
    );
    residuals.insert(
        "series_vs_log_det".into(),
        (macroscopic.series_neg_log_det + macroscopic.log_det).norm(),
    );

    let (mass, energy) = mass_and_energy(s)?;
    Ok(ALDensityReport {
        rho: forms.alt,
        gamma: forms.gamma,
        j,
        gamma_j: gj,
        residuals,
        macroscopic,
        mass,
        energy,
    })
}
