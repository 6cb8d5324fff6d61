//! Time integration of both lattice flows with conservation monitoring.
//!
//! Deliberately a plain explicit RK4 with step-doubling error control: the
//! conservation laws are the object under test, so the integrator must not
//! conserve them by construction.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::al::{self, ALState, SpectralZ};
use crate::error::{LatticeError, Result};
use crate::toda::{self, LaxSign, SpectralKappa, TodaState};
use crate::window::LatticeWindow;

const MIN_STEP: f64 = 1e-12;
const BOUNDARY_TOL: f64 = 1e-13;
const BOUNDARY_SITES: usize = 5;
const GROW_PAD: usize = 8;

/// A state that can be flattened to real coordinates for time stepping.
pub trait FlowSystem: Clone {
    fn window(&self) -> LatticeWindow;
    fn flatten(&self) -> Vec<f64>;
    /// Same window, new coordinate values.
    fn with_values(&self, values: &[f64]) -> Self;
    /// Vector field restricted to the current window, flattened.
    fn rhs(&self) -> Vec<f64>;
    /// Max deviation from vacuum over the outermost sites on each side.
    fn boundary_deviation(&self, sites: usize) -> f64;
    /// Same state viewed on a larger window (vacuum fill).
    fn promote(&self, window: LatticeWindow) -> Self;
}

impl FlowSystem for TodaState {
    fn window(&self) -> LatticeWindow {
        *TodaState::window(self)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.window().len());
        v.extend_from_slice(self.a_values());
        v.extend_from_slice(self.b_values());
        v
    }

    fn with_values(&self, values: &[f64]) -> Self {
        let len = self.window().len();
        TodaState::new(
            FlowSystem::window(self),
            values[..len].to_vec(),
            values[len..].to_vec(),
        )
        .expect("integrator produced non-positive a_n")
    }

    fn rhs(&self) -> Vec<f64> {
        let (da, db) = toda::toda_vector_field(self);
        let w = self.window();
        w.sites()
            .map(|n| da.at(n))
            .chain(w.sites().map(|n| db.at(n)))
            .collect()
    }

    fn boundary_deviation(&self, sites: usize) -> f64 {
        let w = self.window();
        let mut dev: f64 = 0.0;
        for k in 0..sites.min(w.len()) as i64 {
            for n in [w.start() + k, w.end() - 1 - k] {
                dev = dev.max((self.a(n) - 0.5).abs()).max(self.b(n).abs());
            }
        }
        dev
    }

    fn promote(&self, window: LatticeWindow) -> Self {
        self.on_window(window)
    }
}

impl FlowSystem for ALState {
    fn window(&self) -> LatticeWindow {
        *ALState::window(self)
    }

    fn flatten(&self) -> Vec<f64> {
        self.alpha_values()
            .iter()
            .flat_map(|a| [a.re, a.im])
            .collect()
    }

    fn with_values(&self, values: &[f64]) -> Self {
        let alpha = values
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        ALState::new(FlowSystem::window(self), alpha, self.sign())
            .expect("integrator pushed |alpha_n| to 1")
    }

    fn rhs(&self) -> Vec<f64> {
        let f = al::al_vector_field(self);
        self.window()
            .sites()
            .flat_map(|n| {
                let v = f.at(n);
                [v.re, v.im]
            })
            .collect()
    }

    fn boundary_deviation(&self, sites: usize) -> f64 {
        let w = self.window();
        let mut dev: f64 = 0.0;
        for k in 0..sites.min(w.len()) as i64 {
            for n in [w.start() + k, w.end() - 1 - k] {
                dev = dev.max(self.alpha(n).norm());
            }
        }
        dev
    }

    fn promote(&self, window: LatticeWindow) -> Self {
        self.on_window(window)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub steps: usize,
    pub rejected_steps: usize,
    pub max_step: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub step_stats: StepStats,
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn rk4_step<S: FlowSystem>(s: &S, y: &[f64], h: f64) -> Vec<f64> {
    let k1 = s.rhs();
    let k2 = s.with_values(&axpy(y, 0.5 * h, &k1)).rhs();
    let k3 = s.with_values(&axpy(y, 0.5 * h, &k2)).rhs();
    let k4 = s.with_values(&axpy(y, h, &k3)).rhs();
    y.iter()
        .zip(&k1)
        .zip(&k2)
        .zip(&k3)
        .zip(&k4)
        .map(|((((y, k1), k2), k3), k4)| y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Cubic Hermite value at fraction `theta` of a step from y0 to y1 with
/// endpoint derivatives h*f0, h*f1.
fn hermite(y0: &[f64], y1: &[f64], hf0: &[f64], hf1: &[f64], theta: f64) -> Vec<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let (h00, h10, h01, h11) = (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + theta,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    );
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * hf0[i] + h01 * y1[i] + h11 * hf1[i])
        .collect()
}

/// Integrate from t = 0 to t = t_span, recording snapshots at the requested
/// times (must be sorted, within [0, t_span]).
pub fn integrate<S: FlowSystem>(
    initial: &S,
    t_span: f64,
    tol: f64,
    sample_times: &[f64],
) -> Result<Trajectory<S>> {
    assert!(t_span > 0.0, "t_span must be positive");
    assert!(
        (1e-12..=1e-6).contains(&tol),
        "tol must lie in [1e-12, 1e-6]"
    );
    assert!(
        sample_times.windows(2).all(|w| w[0] < w[1]),
        "sample times must be strictly increasing"
    );
    if let (Some(first), Some(last)) = (sample_times.first(), sample_times.last()) {
        assert!(*first >= 0.0 && *last <= t_span + 1e-12);
    }

    let mut state = initial.clone();
    while state.boundary_deviation(BOUNDARY_SITES) > BOUNDARY_TOL {
        state = state.promote(state.window().padded(GROW_PAD));
    }

    let mut stats = StepStats::default();
    let mut t = 0.0f64;
    let mut h = (t_span / 16.0).min(0.1);
    let mut samples: Vec<S> = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0usize;

    while next_sample < sample_times.len() && sample_times[next_sample] <= t {
        samples.push(state.clone());
        next_sample += 1;
    }

    while t < t_span - 1e-14 {
        h = h.min(t_span - t);
        if h < MIN_STEP {
            return Err(LatticeError::StepUnderflow { h, t });
        }
        let y0 = state.flatten();
        let full = rk4_step(&state, &y0, h);
        let half = rk4_step(&state, &y0, 0.5 * h);
        let mid = state.with_values(&half);
        let two_half = rk4_step(&mid, &half, 0.5 * h);
        let err = max_abs_diff(&full, &two_half) / 15.0;

        if err > tol {
            stats.rejected_steps += 1;
            h *= 0.9 * (tol / err).powf(0.2).clamp(0.1, 1.0);
            continue;
        }

        let f0 = state.rhs();
        let next = state.with_values(&two_half);
        let f1 = next.rhs();
        while next_sample < sample_times.len() && sample_times[next_sample] <= t + h + 1e-14 {
            let theta = ((sample_times[next_sample] - t) / h).clamp(0.0, 1.0);
            let hf0: Vec<f64> = f0.iter().map(|v| v * h).collect();
            let hf1: Vec<f64> = f1.iter().map(|v| v * h).collect();
            samples.push(state.with_values(&hermite(&y0, &two_half, &hf0, &hf1, theta)));
            next_sample += 1;
        }

        state = next;
        t += h;
        stats.steps += 1;
        stats.max_step = stats.max_step.max(h);
        if err > 0.0 {
            h *= 0.9 * (tol / err).powf(0.2).clamp(0.2, 5.0);
        } else {
            h *= 5.0;
        }

        while state.boundary_deviation(BOUNDARY_SITES) > BOUNDARY_TOL {
            state = state.promote(state.window().padded(GROW_PAD));
        }
    }

    // normalize all snapshots to the final (largest) window
    let final_window = state.window();
    let states = samples
        .into_iter()
        .map(|s| {
            if s.window() == final_window {
                s
            } else {
                s.promote(final_window)
            }
        })
        .collect();
    Ok(Trajectory {
        times: sample_times.to_vec(),
        states,
        step_stats: stats,
    })
}

/// `count + 1` evenly spaced times covering [0, t_span].
pub fn uniform_times(t_span: f64, count: usize) -> Vec<f64> {
    (0..=count)
        .map(|i| t_span * i as f64 / count as f64)
        .collect()
}

/// Max drift of selected conserved functionals over a trajectory, plus the
/// indices of any snapshots that left the ball (monitoring continues there).
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub drifts: BTreeMap<String, f64>,
    pub out_of_ball: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TodaFunctional {
    Energy,
    CasimirM,
    CasimirP,
    SumRho,
    SumGamma,
    LogDet,
}

impl TodaFunctional {
    pub fn all() -> Vec<TodaFunctional> {
        use TodaFunctional::*;
        vec![Energy, CasimirM, CasimirP, SumRho, SumGamma, LogDet]
    }

    fn name(&self) -> &'static str {
        match self {
            TodaFunctional::Energy => "energy",
            TodaFunctional::CasimirM => "casimir_m",
            TodaFunctional::CasimirP => "casimir_p",
            TodaFunctional::SumRho => "sum_rho",
            TodaFunctional::SumGamma => "sum_gamma",
            TodaFunctional::LogDet => "log_det",
        }
    }
}

pub fn toda_conservation_monitor(
    traj: &Trajectory<TodaState>,
    kappa: SpectralKappa,
    sign: LaxSign,
    which: &[TodaFunctional],
) -> Result<DriftReport> {
    let mut out_of_ball = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, s) in traj.states.iter().enumerate() {
        if !toda::in_ball(s, kappa, toda::DEFAULT_DELTA) {
            out_of_ball.push(idx);
        }
        let needs_green = which.iter().any(|f| {
            matches!(
                f,
                TodaFunctional::SumRho | TodaFunctional::SumGamma | TodaFunctional::LogDet
            )
        });
        let macroscopic = if needs_green {
            Some(toda::macroscopic_check(s, kappa, sign)?)
        } else {
            None
        };
        let (m, p) = toda::casimirs(s);
        for f in which {
            let v = match f {
                TodaFunctional::Energy => toda::energy(s),
                TodaFunctional::CasimirM => m,
                TodaFunctional::CasimirP => p,
                TodaFunctional::SumRho => macroscopic.as_ref().unwrap().lhs_rho,
                TodaFunctional::SumGamma => macroscopic.as_ref().unwrap().lhs_gamma,
                TodaFunctional::LogDet => macroscopic.as_ref().unwrap().log_det,
            };
            values.entry(f.name().into()).or_default().push(v);
        }
    }
    let drifts = values
        .into_iter()
        .map(|(name, vs)| {
            let v0 = vs[0];
            (
                name,
                vs.iter().fold(0.0f64, |acc, v| acc.max((v - v0).abs())),
            )
        })
        .collect();
    Ok(DriftReport {
        drifts,
        out_of_ball,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlFunctional {
    Mass,
    Energy,
    SumRho,
    SumGamma,
    LogDet,
}

impl AlFunctional {
    pub fn all() -> Vec<AlFunctional> {
        use AlFunctional::*;
        vec![Mass, Energy, SumRho, SumGamma, LogDet]
    }

    fn name(&self) -> &'static str {
        match self {
            AlFunctional::Mass => "mass",
            AlFunctional::Energy => "energy",
            AlFunctional::SumRho => "sum_rho",
            AlFunctional::SumGamma => "sum_gamma",
            AlFunctional::LogDet => "log_det",
        }
    }
}

pub fn al_conservation_monitor(
    traj: &Trajectory<ALState>,
    z: SpectralZ,
    which: &[AlFunctional],
) -> Result<DriftReport> {
    let mut out_of_ball = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, s) in traj.states.iter().enumerate() {
        if !al::in_ball_al(s, z, al::DEFAULT_DELTA)? {
            out_of_ball.push(idx);
        }
        let needs_green = which.iter().any(|f| {
            matches!(
                f,
                AlFunctional::SumRho | AlFunctional::SumGamma | AlFunctional::LogDet
            )
        });
        let macroscopic = if needs_green {
            Some(al::perturbation_determinant_al(s, z)?)
        } else {
            None
        };
        let (m, h) = al::mass_and_energy(s)?;
        for f in which {
            let v = match f {
                AlFunctional::Mass => m,
                AlFunctional::Energy => h,
                AlFunctional::SumRho => macroscopic.as_ref().unwrap().sum_rho.norm(),
                AlFunctional::SumGamma => macroscopic.as_ref().unwrap().sum_gamma.norm(),
                AlFunctional::LogDet => macroscopic.as_ref().unwrap().log_det.norm(),
            };
            values.entry(f.name().into()).or_default().push(v);
        }
    }
    let drifts = values
        .into_iter()
        .map(|(name, vs)| {
            let v0 = vs[0];
            (
                name,
                vs.iter().fold(0.0f64, |acc, v| acc.max((v - v0).abs())),
            )
        })
        .collect();
    Ok(DriftReport {
        drifts,
        out_of_ball,
    })
}
