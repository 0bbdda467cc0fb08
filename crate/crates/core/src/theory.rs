//! Effective theories of representational mergers.
//!
//! Two interacting representations `h1`, `h2` with a locally linear readout
//! are optimized directly by gradient flow. Restricting to motions along the
//! line joining them gives closed low-dimensional systems:
//!
//! * a 3-scalar system in `‖dh‖²`, `⟨‖dy_i‖²⟩` and `⟨w_i⟩`, with a
//!   conserved quantity, three fixed points and a closed-form final
//!   distance;
//! * a 9-scalar system in which the readout is expanded around the initial
//!   representational mean, so representations can first diverge and then
//!   merge.
//!
//! All systems are integrated with fixed-step classical Runge–Kutta.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `‖dh‖²` (or `(h2 − h1)²`) below which a pair counts as merged.
pub const MERGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("squared distance {0:e} is below the merge floor")]
    BelowFloor(f64),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("preset fixture: {0}")]
    Fixture(#[from] serde_json::Error),
}

/// `1/τ = base·n`: the effective representational rate grows with the
/// number of recurrent applications producing the representation.
pub fn effective_rate(n: usize, base: f64) -> f64 {
    assert!(n >= 1, "sequence length must be at least 1");
    base * n as f64
}

/// Time constant of the pair difference, `1/τ_h = 1/τ_h1 + 1/τ_h2`.
pub fn combined_tau(tau_h1: f64, tau_h2: f64) -> f64 {
    1.0 / (1.0 / tau_h1 + 1.0 / tau_h2)
}

// ---------------------------------------------------------------------------
// integration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Merged,
    Converged,
    TMax,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Merged => "merged",
            Termination::Converged => "converged",
            Termination::TMax => "t_max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Converged once `‖ds/dt‖` falls below this.
    pub converge_tol: f64,
    /// Keep every k-th step in the returned trajectory (the final state is
    /// always kept).
    pub record_every: usize,
}

impl IntegrateOptions {
    pub fn new(dt: f64, t_max: f64) -> Self {
        Self {
            dt,
            t_max,
            converge_tol: 1e-12,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const D: usize> {
    pub times: Vec<f64>,
    pub states: Vec<[f64; D]>,
    pub termination: Termination,
}

impl<const D: usize> Trajectory<D> {
    pub fn last(&self) -> &[f64; D] {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

fn axpy<const D: usize>(s: &[f64; D], k: &[f64; D], h: f64) -> [f64; D] {
    std::array::from_fn(|i| s[i] + h * k[i])
}

/// Classical RK4 with a fixed step. Stops when `merged(s)` holds, when the
/// rate of change drops below the tolerance, or at `t_max`. A right-hand
/// side that reports [`TheoryError::BelowFloor`] during a stage also counts
/// as a merger at the current time.
pub fn integrate<const D: usize, F, M>(
    mut rhs: F,
    merged: M,
    s0: [f64; D],
    opts: &IntegrateOptions,
) -> Result<Trajectory<D>, TheoryError>
where
    F: FnMut(&[f64; D]) -> Result<[f64; D], TheoryError>,
    M: Fn(&[f64; D]) -> bool,
{
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(TheoryError::InvalidParams(format!("dt must be positive, got {}", opts.dt)));
    }
    let every = opts.record_every.max(1);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![s0],
        termination: Termination::TMax,
    };
    let mut s = s0;
    let mut t = 0.0;
    let mut step = 0usize;
    let finish = |traj: &mut Trajectory<D>, t: f64, s: [f64; D], why: Termination| {
        if traj.times.last() != Some(&t) {
            traj.times.push(t);
            traj.states.push(s);
        }
        traj.termination = why;
    };
    loop {
        if merged(&s) {
            finish(&mut traj, t, s, Termination::Merged);
            return Ok(traj);
        }
        if t >= opts.t_max {
            finish(&mut traj, t, s, Termination::TMax);
            return Ok(traj);
        }
        let stages = (|| {
            let k1 = rhs(&s)?;
            let speed = k1.iter().map(|x| x * x).sum::<f64>().sqrt();
            if speed < opts.converge_tol {
                return Ok(None);
            }
            let h = opts.dt;
            let k2 = rhs(&axpy(&s, &k1, h / 2.0))?;
            let k3 = rhs(&axpy(&s, &k2, h / 2.0))?;
            let k4 = rhs(&axpy(&s, &k3, h))?;
            Ok(Some(std::array::from_fn(|i| {
                s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            })))
        })();
        let next = match stages {
            Ok(Some(next)) => next,
            Ok(None) => {
                finish(&mut traj, t, s, Termination::Converged);
                return Ok(traj);
            }
            Err(TheoryError::BelowFloor(_)) => {
                finish(&mut traj, t, s, Termination::Merged);
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|x| !x.is_finite()) {
            return Err(TheoryError::NonFinite { t: t + opts.dt });
        }
        s = next;
        step += 1;
        t = step as f64 * opts.dt;
        if step % every == 0 {
            traj.times.push(t);
            traj.states.push(s);
        }
    }
}

// ---------------------------------------------------------------------------
// 3-scalar system

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction3State {
    pub dh2: f64,
    pub dy2: f64,
    pub w: f64,
}

impl Interaction3State {
    pub fn to_array(self) -> [f64; 3] {
        [self.dh2, self.dy2, self.w]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            dh2: a[0],
            dy2: a[1],
            w: a[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction3Params {
    pub tau_h: f64,
    pub tau_y: f64,
    pub n: usize,
    /// `⟨‖y*_{2,i} − y*_{1,i}‖²⟩_i`
    pub target_gap2: f64,
}

impl Interaction3Params {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.tau_h > 0.0 && self.tau_y > 0.0 && self.n >= 1 && self.target_gap2 >= 0.0) {
            return Err(TheoryError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    /// `N·τ_y`
    fn n_tau_y(&self) -> f64 {
        self.n as f64 * self.tau_y
    }

    /// `τ_h / (N τ_y)`, the curvature of `dy2` as a function of `dh2`.
    pub fn coupling(&self) -> f64 {
        self.tau_h / self.n_tau_y()
    }
}

pub fn rhs3(s: &Interaction3State, p: &Interaction3Params) -> Result<Interaction3State, TheoryError> {
    if !(s.dh2 >= MERGE_FLOOR) {
        return Err(TheoryError::BelowFloor(s.dh2));
    }
    let ry = 1.0 / p.n_tau_y();
    let rh = 1.0 / p.tau_h;
    Ok(Interaction3State {
        dh2: -0.5 * rh * s.w,
        dy2: -0.5 * (ry * s.dh2 + rh * s.dy2 / s.dh2) * s.w,
        w: -0.25 * ry * (3.0 * s.w - s.dy2 + p.target_gap2) * s.dh2
            - 0.25 * rh * (s.w / s.dh2) * (s.dy2 + s.w),
    })
}

/// `dy2/dh2 − τ_h/(Nτ_y)·dh2`, constant along the 3-scalar flow.
pub fn conserved3(s: &Interaction3State, p: &Interaction3Params) -> f64 {
    s.dy2 / s.dh2 - p.coupling() * s.dh2
}

/// Step size resolving the fastest local rate of the 3-scalar flow at `s`
/// and at the stable fixed point on its conserved level.
pub fn suggest_dt3(s: &Interaction3State, p: &Interaction3Params) -> f64 {
    let ry = 1.0 / p.n_tau_y();
    let rh = 1.0 / p.tau_h;
    let at_start = rh * (s.dy2.abs() + s.w.abs()) / s.dh2 + ry * s.dh2;
    let fp = fixed_points3(s.dh2, s.dy2, p).positive;
    let at_fixed = if fp.dh2 > 0.0 {
        0.25 * (3.0 * fp.dh2 * ry + p.target_gap2 * rh / fp.dh2)
    } else {
        0.0
    };
    let ah = a_high(s.dh2, s.dy2, p).abs() * ry;
    0.02 / at_start.max(at_fixed).max(ah).max(rh * 1e-3)
}

/// Time horizon long enough for the slowest relaxation mode to decay.
pub fn suggest_t_max3(s: &Interaction3State, p: &Interaction3Params) -> f64 {
    let ry = 1.0 / p.n_tau_y();
    let fps = fixed_points3(s.dh2, s.dy2, p);
    let slow = if fps.positive.dh2 > 0.0 {
        let (tr, det) = (fps.positive.trace.abs(), fps.positive.det);
        // smaller root of λ² + tr λ + det
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        (tr - disc) / 2.0
    } else {
        0.5 * ry * fps.a_high.abs()
    };
    let slow = if slow.is_finite() && slow > 0.0 { slow } else { ry * 1e-3 };
    80.0 / slow
}

pub fn integrate3(
    s0: Interaction3State,
    p: &Interaction3Params,
    opts: &IntegrateOptions,
) -> Result<Trajectory<3>, TheoryError> {
    p.validate()?;
    integrate(
        |a| rhs3(&Interaction3State::from_array(*a), p).map(Interaction3State::to_array),
        |a| a[0] < MERGE_FLOOR,
        s0.to_array(),
        opts,
    )
}

/// `A_high = dh2₀ − (Nτ_y/τ_h)·dy2₀/dh2₀`
pub fn a_high(dh2_0: f64, dy2_0: f64, p: &Interaction3Params) -> f64 {
    dh2_0 - dy2_0 / dh2_0 / p.coupling()
}

/// `A_low = sqrt(Nτ_y/τ_h)·sqrt(gap²)`
pub fn a_low(p: &Interaction3Params) -> f64 {
    (p.target_gap2 / p.coupling()).sqrt()
}

fn final_from(a_high: f64, a_low: f64) -> f64 {
    0.5 * a_high + (0.25 * a_high * a_high + a_low * a_low).sqrt()
}

/// Limit of `‖dh‖²` under the 3-scalar flow.
pub fn final_distance(dh2_0: f64, dy2_0: f64, p: &Interaction3Params) -> f64 {
    final_from(a_high(dh2_0, dy2_0, p), a_low(p))
}

/// Inputs to the merger test. The scaled form uses `c`, `g`, `n_outputs`
/// (`N`), `n` and `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergerInputs {
    pub a_high: f64,
    pub a_low: f64,
    pub c: f64,
    pub g: f64,
    pub n_outputs: usize,
    pub n: usize,
    pub m: usize,
}

impl MergerInputs {
    pub fn exact(a_high: f64, a_low: f64) -> Self {
        Self {
            a_high,
            a_low,
            c: 1.0,
            g: 0.5,
            n_outputs: 1,
            n: 0,
            m: 0,
        }
    }
}

/// Exact form: the final distance vanishes, `A_low = 0` and `A_high < 0`.
/// Scaled form: targets agree (`A_low = 0`) and `C < N·G^(n−m)`.
pub fn merger_condition(inputs: &MergerInputs, scaled: bool) -> bool {
    let agree = inputs.a_low == 0.0;
    if scaled {
        let exponent = inputs.n as f64 - inputs.m as f64;
        agree && inputs.c < inputs.n_outputs as f64 * inputs.g.powf(exponent)
    } else {
        agree && inputs.a_high < 0.0
    }
}

/// Closed-form `‖dh‖²(t)` for an agreeing pair (zero target gap).
pub fn agreeing_pair_solution(t: f64, dh2_0: f64, a_high: f64, n: usize, tau_y: f64) -> f64 {
    let n_tau_y = n as f64 * tau_y;
    if a_high == 0.0 {
        return dh2_0 / (1.0 + dh2_0 * t / (2.0 * n_tau_y));
    }
    a_high / (1.0 + (a_high / dh2_0 - 1.0) * (-0.5 * a_high * t / n_tau_y).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    /// Outside the physical region `dh2 ≥ 0`.
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub dh2: f64,
    pub dy2: f64,
    pub w: f64,
    pub stability: Stability,
    /// Trace and determinant of the Jacobian in the reduced `(dh2, w)`
    /// coordinates; NaN where the flow is singular.
    pub trace: f64,
    pub det: f64,
    /// Real eigenvalues where known in closed form (at the origin).
    pub eigenvalues: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoints3 {
    pub a_high: f64,
    pub a_low: f64,
    pub conserved: f64,
    pub negative: FixedPoint,
    pub positive: FixedPoint,
    pub origin: FixedPoint,
}

/// Jacobian of the flow on a conserved level, in `(dh2, w)` coordinates,
/// at a fixed point `(x, 0)` with `x > 0`.
pub fn reduced_jacobian3(x: f64, p: &Interaction3Params) -> [[f64; 2]; 2] {
    let ry = 1.0 / p.n_tau_y();
    let rh = 1.0 / p.tau_h;
    let g = p.target_gap2;
    let c = p.coupling();
    [
        [0.0, -0.5 * rh],
        [0.25 * ry * (c * x * x + g), -0.25 * (3.0 * x * ry + g * rh / x)],
    ]
}

/// Slopes `w/dh2` of the two invariant directions at the origin, ordered
/// as (unstable, stable), with their growth rates.
pub fn origin_modes3(a_high: f64, a_low: f64, p: &Interaction3Params) -> [(f64, f64); 2] {
    let s = (a_high * a_high + 4.0 * a_low * a_low).sqrt();
    let c = p.coupling();
    let rate = |r: f64| -r / (2.0 * p.tau_h);
    let r_plus = c * (-a_high - s) / 2.0;
    let r_minus = c * (-a_high + s) / 2.0;
    [(r_plus, rate(r_plus)), (r_minus, rate(r_minus))]
}

/// The three fixed points on the conserved level through `(dh2_0, dy2_0)`.
pub fn fixed_points3(dh2_0: f64, dy2_0: f64, p: &Interaction3Params) -> FixedPoints3 {
    let ah = a_high(dh2_0, dy2_0, p);
    let al = a_low(p);
    let k = dy2_0 / dh2_0 - p.coupling() * dh2_0;
    let c = p.coupling();
    let s = (ah * ah + 4.0 * al * al).sqrt();
    let dy2_at = |x: f64| c * x * x + k * x;

    let x_neg = (ah - s) / 2.0;
    let negative = FixedPoint {
        dh2: x_neg,
        dy2: dy2_at(x_neg),
        w: 0.0,
        stability: if x_neg < 0.0 { Stability::Invalid } else { Stability::Stable },
        trace: f64::NAN,
        det: f64::NAN,
        eigenvalues: None,
    };

    let x_pos = final_from(ah, al);
    let positive = if x_pos > 0.0 {
        let j = reduced_jacobian3(x_pos, p);
        let trace = j[0][0] + j[1][1];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        FixedPoint {
            dh2: x_pos,
            dy2: dy2_at(x_pos),
            w: 0.0,
            stability: if trace < 0.0 && det > 0.0 {
                Stability::Stable
            } else {
                Stability::Unstable
            },
            trace,
            det,
            eigenvalues: None,
        }
    } else {
        // coincides with the origin: the merger fixed point
        FixedPoint {
            dh2: 0.0,
            dy2: 0.0,
            w: 0.0,
            stability: Stability::Stable,
            trace: f64::NAN,
            det: f64::NAN,
            eigenvalues: None,
        }
    };

    let modes = origin_modes3(ah, al, p);
    let (lam_plus, lam_minus) = (modes[0].1, modes[1].1);
    let origin = FixedPoint {
        dh2: 0.0,
        dy2: 0.0,
        w: 0.0,
        stability: if lam_plus > 0.0 {
            Stability::Unstable
        } else {
            Stability::Stable
        },
        trace: lam_plus + lam_minus,
        det: lam_plus * lam_minus,
        eigenvalues: Some([lam_minus, lam_plus]),
    };

    FixedPoints3 {
        a_high: ah,
        a_low: al,
        conserved: k,
        negative,
        positive,
        origin,
    }
}

/// State on the conserved level `k` at `dh2 = x` with the given `w`.
pub fn state_on_level3(x: f64, w: f64, k: f64, p: &Interaction3Params) -> Interaction3State {
    Interaction3State {
        dh2: x,
        dy2: p.coupling() * x * x + k * x,
        w,
    }
}

// ---------------------------------------------------------------------------
// vector-level oracle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorOracleConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub n: usize,
    pub tau_h1: f64,
    pub tau_h2: f64,
    pub tau_y: f64,
    pub tau_ybar: f64,
    /// Pair targets agree on every output (`y*_{1,i} = y*_{2,i}`).
    pub agreeing: bool,
    pub initial_distance: f64,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
}

impl Default for VectorOracleConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 4,
            output_dim: 3,
            n: 3,
            tau_h1: 1.0,
            tau_h2: 2.0,
            tau_y: 1.0,
            tau_ybar: 1.0,
            agreeing: false,
            initial_distance: 1.0,
            dt: 1e-4,
            t_end: 5.0,
            record_every: 100,
        }
    }
}

/// Full vector/matrix state of the locally linear pair model
/// `y_{α,i} = ȳ_i + ½ D_i (h_α − h_¬α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPairModel {
    pub h: [Array1<f64>; 2],
    pub d: Vec<Array2<f64>>,
    pub ybar: Vec<Array1<f64>>,
    pub targets: [Vec<Array1<f64>>; 2],
}

impl VectorPairModel {
    /// Random instance on the reduction manifold: `h2 − h1 ∥ u` and every
    /// `D_i = c_i uᵀ` for a shared unit vector `u`.
    pub fn random<R: Rng + ?Sized>(cfg: &VectorOracleConfig, rng: &mut R) -> Self {
        let (hd, od) = (cfg.hidden_dim, cfg.output_dim);
        let mut normal = || -> f64 {
            // Box–Muller keeps the dependency list to `rand`
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut u = Array1::from_shape_fn(hd, |_| normal());
        u /= u.dot(&u).sqrt();
        let centre = Array1::from_shape_fn(hd, |_| normal());
        let half = &u * (cfg.initial_distance / 2.0);
        let h = [&centre - &half, &centre + &half];
        let d = (0..cfg.n)
            .map(|_| {
                let c = Array1::from_shape_fn(od, |_| normal() / (od as f64).sqrt());
                outer(&c, &u)
            })
            .collect();
        let ybar = (0..cfg.n).map(|_| Array1::from_shape_fn(od, |_| normal())).collect();
        let t1: Vec<Array1<f64>> = (0..cfg.n).map(|_| Array1::from_shape_fn(od, |_| normal())).collect();
        let t2 = if cfg.agreeing {
            t1.clone()
        } else {
            (0..cfg.n).map(|_| Array1::from_shape_fn(od, |_| normal())).collect()
        };
        Self {
            h,
            d,
            ybar,
            targets: [t1, t2],
        }
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    fn dh(&self) -> Array1<f64> {
        &self.h[1] - &self.h[0]
    }

    fn target_gap(&self, i: usize) -> Array1<f64> {
        &self.targets[1][i] - &self.targets[0][i]
    }

    /// `½·⟨‖ȳ_i + ½D_i(h_α − h_¬α) − y*_{α,i}‖²⟩_{α,i}`
    pub fn loss(&self) -> f64 {
        let dh = self.dh();
        let mut total = 0.0;
        for i in 0..self.n() {
            let half = self.d[i].dot(&dh) * 0.5;
            let r2 = &self.ybar[i] + &half - &self.targets[1][i];
            let r1 = &self.ybar[i] - &half - &self.targets[0][i];
            total += r1.dot(&r1) + r2.dot(&r2);
        }
        0.5 * total / (2.0 * self.n() as f64)
    }

    /// `(‖dh‖², ⟨‖dy_i‖²⟩, ⟨w_i⟩)`
    pub fn observables(&self) -> Interaction3State {
        let dh = self.dh();
        let n = self.n() as f64;
        let (mut dy2, mut w) = (0.0, 0.0);
        for i in 0..self.n() {
            let dy = self.d[i].dot(&dh);
            let sq = dy.dot(&dy);
            dy2 += sq;
            w += sq - dy.dot(&self.target_gap(i));
        }
        Interaction3State {
            dh2: dh.dot(&dh),
            dy2: dy2 / n,
            w: w / n,
        }
    }

    /// `ȳ_i` minus the mean of the pair's targets for output `i`.
    pub fn mean_offset(&self, i: usize) -> Array1<f64> {
        &self.ybar[i] - &((&self.targets[0][i] + &self.targets[1][i]) * 0.5)
    }

    /// Parameter gradients `(∂L/∂h_1, ∂L/∂h_2, ∂L/∂D_i, ∂L/∂ȳ_i)`.
    pub fn gradients(&self) -> ([Array1<f64>; 2], Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let n = self.n() as f64;
        let dh = self.dh();
        let mut g_h2 = Array1::zeros(dh.len());
        let mut g_d = Vec::with_capacity(self.n());
        let mut g_y = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let e = self.d[i].dot(&dh) - self.target_gap(i);
            g_h2 += &(self.d[i].t().dot(&e) / (4.0 * n));
            g_d.push(outer(&e, &dh) / (4.0 * n));
            g_y.push(self.mean_offset(i) / n);
        }
        let g_h1 = -&g_h2;
        ([g_h1, g_h2], g_d, g_y)
    }

    /// One explicit Euler step of the gradient flow.
    pub fn euler_step(&mut self, cfg: &VectorOracleConfig, dt: f64) {
        let (g_h, g_d, g_y) = self.gradients();
        self.h[0].scaled_add(-dt / cfg.tau_h1, &g_h[0]);
        self.h[1].scaled_add(-dt / cfg.tau_h2, &g_h[1]);
        for i in 0..self.n() {
            self.d[i].scaled_add(-dt / cfg.tau_y, &g_d[i]);
            self.ybar[i].scaled_add(-dt / cfg.tau_ybar, &g_y[i]);
        }
    }

    /// The matching 3-scalar parameters.
    pub fn reduced_params(&self, cfg: &VectorOracleConfig) -> Interaction3Params {
        let gap2 = (0..self.n()).map(|i| self.target_gap(i)).map(|g| g.dot(&g)).sum::<f64>()
            / self.n() as f64;
        Interaction3Params {
            tau_h: combined_tau(cfg.tau_h1, cfg.tau_h2),
            tau_y: cfg.tau_y,
            n: self.n(),
            target_gap2: gap2,
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrajectory {
    pub times: Vec<f64>,
    pub observables: Vec<Interaction3State>,
    /// `‖ȳ_i − mean target_i‖` per output, per recorded time.
    pub mean_offsets: Vec<Vec<f64>>,
    pub params: Interaction3Params,
}

/// Simulates the vector-level gradient flow by explicit Euler and records
/// the three scalar observables of the reduced system.
pub fn vector_oracle<R: Rng + ?Sized>(cfg: &VectorOracleConfig, rng: &mut R) -> OracleTrajectory {
    let model = VectorPairModel::random(cfg, rng);
    run_vector_oracle(model, cfg)
}

pub fn run_vector_oracle(mut model: VectorPairModel, cfg: &VectorOracleConfig) -> OracleTrajectory {
    let params = model.reduced_params(cfg);
    let every = cfg.record_every.max(1);
    let steps = (cfg.t_end / cfg.dt).round() as usize;
    let offsets = |m: &VectorPairModel| {
        (0..m.n())
            .map(|i| {
                let o = m.mean_offset(i);
                o.dot(&o).sqrt()
            })
            .collect::<Vec<_>>()
    };
    let mut out = OracleTrajectory {
        times: vec![0.0],
        observables: vec![model.observables()],
        mean_offsets: vec![offsets(&model)],
        params,
    };
    for step in 1..=steps {
        model.euler_step(cfg, cfg.dt);
        if step % every == 0 || step == steps {
            out.times.push(step as f64 * cfg.dt);
            out.observables.push(model.observables());
            out.mean_offsets.push(offsets(&model));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 9-scalar system

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Interaction9State {
    pub h1: f64,
    pub h2: f64,
    /// `⟨b_iᵀ D_i v⟩`
    pub b_dv: f64,
    /// `⟨b_iᵀ y*_{1,i}⟩`
    pub by1: f64,
    /// `⟨b_iᵀ y*_{2,i}⟩`
    pub by2: f64,
    /// `⟨‖b_i‖²⟩`
    pub b2: f64,
    /// `⟨‖D_i v‖²⟩`
    pub dv2: f64,
    /// `⟨y*_{1,i}ᵀ D_i v⟩`
    pub y_dv1: f64,
    /// `⟨y*_{2,i}ᵀ D_i v⟩`
    pub y_dv2: f64,
}

impl Interaction9State {
    pub fn to_array(self) -> [f64; 9] {
        [
            self.h1, self.h2, self.b_dv, self.by1, self.by2, self.b2, self.dv2, self.y_dv1, self.y_dv2,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            h1: a[0],
            h2: a[1],
            b_dv: a[2],
            by1: a[3],
            by2: a[4],
            b2: a[5],
            dv2: a[6],
            y_dv1: a[7],
            y_dv2: a[8],
        }
    }

    /// `(h2 − h1)²`
    pub fn distance2(&self) -> f64 {
        (self.h2 - self.h1).powi(2)
    }

    /// Uncorrelated start around a zero mean: `h = ∓d/2`, cross terms zero.
    pub fn uncorrelated(distance: f64, b2: f64, dv2: f64) -> Self {
        Self {
            h1: -distance / 2.0,
            h2: distance / 2.0,
            b2,
            dv2,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction9Params {
    pub tau_h1: f64,
    pub tau_h2: f64,
    pub tau_b: f64,
    pub tau_y: f64,
    pub n: usize,
    /// `moments[β][α] = ⟨y*_{β,i}ᵀ y*_{α,i}⟩_i`
    pub moments: [[f64; 2]; 2],
}

impl Interaction9Params {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let m = self.moments;
        let psd = m[0][0] >= 0.0 && m[1][1] >= 0.0 && m[0][0] * m[1][1] - m[0][1] * m[1][0] >= -1e-12;
        if !(self.tau_h1 > 0.0 && self.tau_h2 > 0.0 && self.tau_b > 0.0 && self.tau_y > 0.0 && self.n >= 1)
            || m[0][1] != m[1][0]
            || !psd
        {
            return Err(TheoryError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

struct Residuals9 {
    /// `½(⟨bᵀDv⟩ + h_α⟨‖Dv‖²⟩ − ⟨y*_αᵀDv⟩)`, the `h_α` gradient
    g_h: [f64; 2],
}

fn residuals9(s: &Interaction9State) -> Residuals9 {
    Residuals9 {
        g_h: [
            0.5 * (s.b_dv + s.h1 * s.dv2 - s.y_dv1),
            0.5 * (s.b_dv + s.h2 * s.dv2 - s.y_dv2),
        ],
    }
}

pub fn rhs9(s: &Interaction9State, p: &Interaction9Params) -> Interaction9State {
    let n = p.n as f64;
    let rb = 1.0 / (p.tau_b * n);
    let ry = 1.0 / (p.tau_y * n);
    let m = p.moments;
    let hbar = 0.5 * (s.h1 + s.h2);
    let hsq = 0.5 * (s.h1 * s.h1 + s.h2 * s.h2);
    let h = [s.h1, s.h2];
    let by = [s.by1, s.by2];
    let ydv = [s.y_dv1, s.y_dv2];
    let g = residuals9(s).g_h;

    let mean_ydv = 0.5 * (ydv[0] + ydv[1]);
    let mean_h_by = 0.5 * (h[0] * by[0] + h[1] * by[1]);
    let mean_h_ydv = 0.5 * (h[0] * ydv[0] + h[1] * ydv[1]);
    let d_by = |b: usize| -rb * (by[b] + hbar * ydv[b] - 0.5 * (m[b][0] + m[b][1]));
    let d_ydv =
        |b: usize| -ry * (hsq * ydv[b] + hbar * by[b] - 0.5 * (h[0] * m[b][0] + h[1] * m[b][1]));

    Interaction9State {
        h1: -g[0] / p.tau_h1,
        h2: -g[1] / p.tau_h2,
        b_dv: -rb * (s.b_dv + hbar * s.dv2 - mean_ydv) - ry * (hsq * s.b_dv + hbar * s.b2 - mean_h_by),
        by1: d_by(0),
        by2: d_by(1),
        b2: -2.0 * rb * (s.b2 + hbar * s.b_dv - 0.5 * (by[0] + by[1])),
        dv2: -2.0 * ry * (hsq * s.dv2 + hbar * s.b_dv - mean_h_ydv),
        y_dv1: d_ydv(0),
        y_dv2: d_ydv(1),
    }
}

/// Training loss of the 9-scalar system.
pub fn loss9(s: &Interaction9State, p: &Interaction9Params) -> f64 {
    let m = p.moments;
    let hbar = 0.5 * (s.h1 + s.h2);
    let hsq = 0.5 * (s.h1 * s.h1 + s.h2 * s.h2);
    let target = 0.5 * (m[0][0] + m[1][1]);
    let h_ydv = 0.5 * (s.h1 * s.y_dv1 + s.h2 * s.y_dv2);
    let by = 0.5 * (s.by1 + s.by2);
    0.5 * (s.b2 + hsq * s.dv2 + target + 2.0 * hbar * s.b_dv - 2.0 * h_ydv - 2.0 * by)
}

/// `dL/dt` along the flow, written as minus the rate-weighted squared
/// gradient norms: `−Σ_α g_α²/τ_hα − ⟨‖u_i‖²⟩/(Nτ_b) − ⟨‖q_i‖²⟩/(Nτ_y)`,
/// with `u_i` and `q_i` the `b_i` and `D_i v` residuals.
pub fn dissipation9(s: &Interaction9State, p: &Interaction9Params) -> f64 {
    let n = p.n as f64;
    let m = p.moments;
    let g = residuals9(s).g_h;
    let (h1, h2) = (s.h1, s.h2);
    let hbar = 0.5 * (h1 + h2);
    let hsq = 0.5 * (h1 * h1 + h2 * h2);
    let u2 = s.b2 + hbar * hbar * s.dv2 + 0.25 * (m[0][0] + 2.0 * m[0][1] + m[1][1]) + 2.0 * hbar * s.b_dv
        - (s.by1 + s.by2)
        - hbar * (s.y_dv1 + s.y_dv2);
    let q2 = hsq * hsq * s.dv2
        + hbar * hbar * s.b2
        + 0.25 * (h1 * h1 * m[0][0] + 2.0 * h1 * h2 * m[0][1] + h2 * h2 * m[1][1])
        + 2.0 * hsq * hbar * s.b_dv
        - 2.0 * hsq * 0.5 * (h1 * s.y_dv1 + h2 * s.y_dv2)
        - 2.0 * hbar * 0.5 * (h1 * s.by1 + h2 * s.by2);
    -(g[0] * g[0] / p.tau_h1 + g[1] * g[1] / p.tau_h2) - u2 / (p.tau_b * n) - q2 / (p.tau_y * n)
}

pub fn integrate9(
    s0: Interaction9State,
    p: &Interaction9Params,
    opts: &IntegrateOptions,
) -> Result<Trajectory<9>, TheoryError> {
    p.validate()?;
    integrate(
        |a| Ok(rhs9(&Interaction9State::from_array(*a), p).to_array()),
        |a| (a[1] - a[0]).powi(2) < MERGE_FLOOR,
        s0.to_array(),
        opts,
    )
}

/// A frozen 9-scalar scenario: parameters, initial state and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset9 {
    pub name: String,
    pub description: String,
    pub params: Interaction9Params,
    pub initial: Interaction9State,
    pub dt: f64,
    pub t_max: f64,
}

const PRESETS9: &str = include_str!("../fixtures/ode9_presets.json");

pub fn presets9() -> Result<Vec<Preset9>, TheoryError> {
    Ok(serde_json::from_str(PRESETS9)?)
}

pub fn preset9(name: &str) -> Result<Preset9, TheoryError> {
    presets9()?
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| TheoryError::UnknownPreset(name.to_string()))
}

/// Initial, peak and final `|h2 − h1|` over a trajectory.
pub fn distance_profile9(traj: &Trajectory<9>) -> (f64, f64, f64) {
    let d: Vec<f64> = traj.states.iter().map(|s| (s[1] - s[0]).abs()).collect();
    let peak = d.iter().copied().fold(0.0, f64::max);
    (d[0], peak, *d.last().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(gap2: f64) -> Interaction3Params {
        Interaction3Params {
            tau_h: 0.7,
            tau_y: 1.3,
            n: 3,
            target_gap2: gap2,
        }
    }

    #[test]
    fn rhs3_fixed_point_family_and_signs() {
        let p = params(0.0);
        let z = rhs3(
            &Interaction3State {
                dh2: 0.4,
                dy2: 0.0,
                w: 0.0,
            },
            &p,
        )
        .unwrap();
        assert_eq!(z.to_array(), [0.0; 3]);
        for w in [-0.3, 0.2] {
            let d = rhs3(&Interaction3State { dh2: 0.5, dy2: 0.3, w }, &p).unwrap();
            assert!(d.dh2.signum() == -w.signum());
        }
        assert!(matches!(
            rhs3(&Interaction3State { dh2: 1e-13, dy2: 0.0, w: 0.0 }, &p),
            Err(TheoryError::BelowFloor(_))
        ));
    }

    #[test]
    fn constant_rhs_gives_constant_trajectory() {
        let traj = integrate(|_| Ok([0.0; 2]), |_| false, [1.0, 2.0], &IntegrateOptions::new(0.1, 1.0)).unwrap();
        assert_eq!(traj.termination, Termination::Converged);
        assert_eq!(*traj.last(), [1.0, 2.0]);

        let mut opts = IntegrateOptions::new(0.1, 1.0);
        opts.converge_tol = 0.0;
        let traj = integrate(|_| Ok([0.0; 2]), |_| false, [1.0, 2.0], &opts).unwrap();
        assert_eq!(traj.termination, Termination::TMax);
        assert!(traj.states.iter().all(|s| *s == [1.0, 2.0]));
    }

    #[test]
    fn rk4_self_convergence_is_fourth_order() {
        let p = params(0.4);
        let s0 = Interaction3State {
            dh2: 1.0,
            dy2: 0.8,
            w: 0.5,
        };
        let run = |dt: f64| {
            let mut o = IntegrateOptions::new(dt, 2.0);
            o.converge_tol = 0.0;
            *integrate3(s0, &p, &o).unwrap().last()
        };
        let (a, b, c) = (run(0.04), run(0.02), run(0.01));
        let e1: f64 = (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
        let e2: f64 = (0..3).map(|i| (b[i] - c[i]).abs()).fold(0.0, f64::max);
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }

    #[test]
    fn final_distance_examples() {
        assert_eq!(final_from(2.0, 0.0), 2.0);
        assert_eq!(final_from(-1.0, 0.0), 0.0);
        assert_eq!(final_from(0.0, 3.0), 3.0);
    }

    #[test]
    fn merger_condition_examples() {
        assert!(merger_condition(&MergerInputs::exact(-0.5, 0.0), false));
        assert!(!merger_condition(&MergerInputs::exact(-5.0, 0.1), false));
        let scaled = MergerInputs {
            a_high: 0.0,
            a_low: 0.0,
            c: 1.0,
            g: 0.1,
            n_outputs: 2046,
            n: 0,
            m: 3,
        };
        assert!(merger_condition(&scaled, true));
    }

    #[test]
    fn bernoulli_limits() {
        assert_eq!(agreeing_pair_solution(0.0, 0.3, 1.2, 4, 0.5), 0.3);
        assert!((agreeing_pair_solution(1e4, 0.3, 1.2, 4, 0.5) - 1.2).abs() < 1e-12);
        let eps = 1e-9;
        let near = agreeing_pair_solution(3.0, 0.3, eps, 4, 0.5);
        let at = agreeing_pair_solution(3.0, 0.3, 0.0, 4, 0.5);
        assert!((near - at).abs() < 1e-8);
    }

    #[test]
    fn fixed_point_labels() {
        let p = params(0.0);
        // A_high > 0, A_low = 0
        let fp = fixed_points3(2.0, 0.1, &p);
        assert!(fp.a_high > 0.0);
        assert_eq!(fp.positive.stability, Stability::Stable);
        assert!((fp.positive.dh2 - fp.a_high).abs() < 1e-12);
        assert_eq!(fp.origin.stability, Stability::Unstable);
        let lam = fp.origin.eigenvalues.unwrap()[1];
        assert!((lam - fp.a_high / (2.0 * 3.0 * 1.3)).abs() < 1e-12);

        let p = params(0.5);
        let fp = fixed_points3(0.7, 0.9, &p);
        assert_eq!(fp.negative.stability, Stability::Invalid);
        assert!(fp.positive.trace < 0.0 && fp.positive.det > 0.0);
        let [lo, hi] = fp.origin.eigenvalues.unwrap();
        assert!(lo < 0.0 && hi > 0.0);
    }

    #[test]
    fn reduced_jacobian_matches_finite_differences() {
        let p = params(0.6);
        let fp = fixed_points3(0.9, 0.4, &p);
        let k = fp.conserved;
        let x = fp.positive.dh2;
        let f = |x: f64, w: f64| {
            let d = rhs3(&state_on_level3(x, w, k, &p), &p).unwrap();
            [d.dh2, d.w]
        };
        let j = reduced_jacobian3(x, &p);
        let h = 1e-6;
        for (col, (dx, dw)) in [(h, 0.0), (0.0, h)].into_iter().enumerate() {
            let a = f(x + dx, dw);
            let b = f(x - dx, -dw);
            for row in 0..2 {
                let num = (a[row] - b[row]) / (2.0 * h);
                assert!((num - j[row][col]).abs() < 1e-6, "J[{row}][{col}] {num} vs {}", j[row][col]);
            }
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let expect = (x * x + fp.a_low * fp.a_low) / (8.0 * (3.0 * 1.3f64).powi(2));
        assert!((det - expect).abs() < 1e-12);
    }

    #[test]
    fn origin_modes_are_invariant_directions() {
        let p = params(0.3);
        let fp = fixed_points3(0.5, 0.2, &p);
        for (r, lam) in origin_modes3(fp.a_high, fp.a_low, &p) {
            let x = 1e-7;
            let s = state_on_level3(x, r * x, fp.conserved, &p);
            let d = rhs3(&s, &p).unwrap();
            assert!((d.dh2 / x - lam).abs() < 1e-5 * lam.abs().max(1.0));
            assert!((d.w / (r * x) - lam).abs() < 1e-4 * lam.abs().max(1.0));
        }
    }

    #[test]
    fn oracle_gradients_match_finite_differences() {
        let cfg = VectorOracleConfig::default();
        let m = VectorPairModel::random(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let (g_h, g_d, g_y) = m.gradients();
        let eps = 1e-6;
        let check = |perturb: &dyn Fn(&mut VectorPairModel, f64), analytic: f64| {
            let mut a = m.clone();
            perturb(&mut a, eps);
            let mut b = m.clone();
            perturb(&mut b, -eps);
            let num = (a.loss() - b.loss()) / (2.0 * eps);
            assert!((num - analytic).abs() < 1e-8, "{num} vs {analytic}");
        };
        check(&|m, e| m.h[0][1] += e, g_h[0][1]);
        check(&|m, e| m.h[1][2] += e, g_h[1][2]);
        check(&|m, e| m.d[1][[2, 3]] += e, g_d[1][[2, 3]]);
        check(&|m, e| m.ybar[2][0] += e, g_y[2][0]);
    }

    #[test]
    fn zero_displacement_oracle_stays_zero() {
        let cfg = VectorOracleConfig {
            initial_distance: 0.0,
            agreeing: true,
            t_end: 0.1,
            ..VectorOracleConfig::default()
        };
        let traj = vector_oracle(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for o in &traj.observables {
            assert_eq!(o.to_array(), [0.0; 3]);
        }
    }

    #[test]
    fn rhs9_zero_and_loss_zero() {
        let p = Interaction9Params {
            tau_h1: 1.0,
            tau_h2: 1.0,
            tau_b: 1.0,
            tau_y: 1.0,
            n: 2,
            moments: [[0.0; 2]; 2],
        };
        let z = Interaction9State::default();
        assert_eq!(rhs9(&z, &p).to_array(), [0.0; 9]);
        assert_eq!(loss9(&z, &p), 0.0);
    }

    #[test]
    fn effective_rate_examples() {
        assert_eq!(effective_rate(1, 0.1), 0.1);
        assert!((effective_rate(5, 0.1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn presets_parse() {
        let all = presets9().unwrap();
        assert!(all.len() >= 3);
        for p in &all {
            p.params.validate().unwrap();
        }
        assert!(preset9("no-such").is_err());
    }
}
