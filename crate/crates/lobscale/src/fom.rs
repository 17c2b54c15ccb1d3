//! First-order (law of large numbers) limit.
//!
//! The relative density transports with the price, so the solver works with the
//! absolute density `v(t, z) = u(t, z - (B_t - B_0))`, which obeys the cell-wise ODE
//! `∂_t v(t, z) = f(B_t, Y_t; z - (B_t - B_0))`. The relative frame is recovered by
//! interpolation at save times.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, InterpOrder, TestFunction};
use crate::model::ModelSpec;
use crate::regime::ScalingRegime;
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug)]
pub struct FomOptions<T> {
    pub solver_dt: T,
    /// Store a `v` snapshot every this many solver steps (the last step is always stored).
    pub save_every: usize,
    pub interp: InterpOrder,
}

impl<T: Real> FomOptions<T> {
    pub fn new(solver_dt: T) -> Self {
        Self { solver_dt, save_every: 1, interp: InterpOrder::Linear }
    }

    pub fn save_every(mut self, n: usize) -> Self {
        self.save_every = n.max(1);
        self
    }

    pub fn interp(mut self, interp: InterpOrder) -> Self {
        self.interp = interp;
        self
    }
}

#[derive(Clone, Debug)]
pub struct LimitPath<T> {
    pub times: Vec<T>,
    pub b: Vec<T>,
    pub y: Vec<T>,
    /// Solver step of each stored snapshot.
    pub snapshot_steps: Vec<usize>,
    /// Absolute-frame densities, coordinates relative to `B0`.
    pub v_abs: Vec<GridFunction<T>>,
    pub grid: Grid<T>,
    pub b0: T,
    pub interp: InterpOrder,
}

impl<T: Real> LimitPath<T> {
    pub fn horizon(&self) -> T {
        *self.times.last().expect("non-empty path")
    }

    fn bracket(&self, t: T) -> (usize, T) {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return (0, T::zero());
        }
        if t >= self.times[n - 1] {
            return (n - 2, T::one());
        }
        let dt = self.times[1] - self.times[0];
        let mut i = (t / dt).floor().to_usize().unwrap_or(0).min(n - 2);
        while i > 0 && self.times[i] > t {
            i -= 1;
        }
        while i + 2 < n && self.times[i + 1] <= t {
            i += 1;
        }
        (i, (t - self.times[i]) / (self.times[i + 1] - self.times[i]))
    }

    fn lerp(series: &[T], i: usize, w: T) -> T {
        if series.len() == 1 {
            series[0]
        } else {
            series[i] + (series[i + 1] - series[i]) * w
        }
    }

    pub fn b_at(&self, t: T) -> T {
        let (i, w) = self.bracket(t);
        Self::lerp(&self.b, i, w)
    }

    pub fn y_at(&self, t: T) -> T {
        let (i, w) = self.bracket(t);
        Self::lerp(&self.y, i, w)
    }

    /// Relative-frame density of snapshot `i`.
    pub fn u_snapshot(&self, i: usize) -> GridFunction<T> {
        let step = self.snapshot_steps[i];
        let delta = self.b[step] - self.b0;
        if delta == T::zero() {
            return self.v_abs[i].clone();
        }
        self.v_abs[i].sample_shifted(delta, self.interp)
    }

    /// Relative-frame density at time `t`, linear in time between snapshots.
    pub fn u_at_time(&self, t: T) -> GridFunction<T> {
        let times: Vec<T> = self.snapshot_steps.iter().map(|&s| self.times[s]).collect();
        let n = times.len();
        let j = match times.iter().position(|&s| s >= t) {
            Some(0) => return self.u_snapshot(0),
            None => return self.u_snapshot(n - 1),
            Some(j) => j,
        };
        if times[j] == t {
            return self.u_snapshot(j);
        }
        let w = (t - times[j - 1]) / (times[j] - times[j - 1]);
        let mut v = self.v_abs[j - 1].clone();
        v.scale(T::one() - w);
        v.axpy(w, &self.v_abs[j]);
        let delta = self.b_at(t) - self.b0;
        if delta == T::zero() {
            v
        } else {
            v.sample_shifted(delta, self.interp)
        }
    }
}

struct Rhs<'a, T> {
    spec: &'a ModelSpec<T>,
    grid: Grid<T>,
    transport: bool,
    h_fixed: GridFunction<T>,
}

impl<T: Real> Rhs<'_, T> {
    fn y(&self, b: T, v: &GridFunction<T>) -> Result<T> {
        if self.transport {
            let h = self.spec.h_grid_shifted(b - self.spec.b0, self.grid)?;
            Ok(h.dot(v))
        } else {
            Ok(self.h_fixed.dot(v))
        }
    }

    fn eval(&self, b: T, v: &GridFunction<T>) -> Result<(T, GridFunction<T>)> {
        let y = self.y(b, v)?;
        if !y.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { what: format!("(B, Y) = ({b}, {y})"), location: "first-order state".into() });
        }
        if self.transport {
            let delta = b - self.spec.b0;
            if delta.abs() > self.grid.bound() - self.spec.bound {
                return Err(Error::Range(format!("first-order price {b} left the solver window")));
            }
            let db = self.spec.p_ba(b, y);
            let dv = self.spec.f_grid_shifted(b, y, delta, self.grid)?;
            Ok((db, dv))
        } else {
            Ok((T::zero(), self.spec.f_grid(b, y, self.grid)?))
        }
    }
}

fn offset<T: Real>(v: &GridFunction<T>, a: T, k: &GridFunction<T>) -> GridFunction<T> {
    let mut out = v.clone();
    out.axpy(a, k);
    out
}

/// Integrates the first-order system over the regime horizon with classical RK4.
pub fn solve_first_order<T: Real>(
    spec: &ModelSpec<T>,
    regime: &ScalingRegime<T>,
    options: &FomOptions<T>,
    grid: Grid<T>,
) -> Result<LimitPath<T>> {
    solve_first_order_with(spec, regime, options, grid, |_, _, _, _| Ok(()))
}

/// As [`solve_first_order`], calling `at_step(step, t, &mut B, &mut v)` on the state
/// at every solver node before it is recorded; the stored path is right-continuous
/// at any node the hook modifies.
pub fn solve_first_order_with<T: Real, F>(
    spec: &ModelSpec<T>,
    regime: &ScalingRegime<T>,
    options: &FomOptions<T>,
    grid: Grid<T>,
    mut at_step: F,
) -> Result<LimitPath<T>>
where
    F: FnMut(usize, T, &mut T, &mut GridFunction<T>) -> Result<()>,
{
    if !(options.solver_dt > T::zero()) {
        return Err(Error::Argument(format!("solver_dt must be positive, got {}", options.solver_dt)));
    }
    let horizon = regime.horizon();
    let steps = (horizon / options.solver_dt).round().to_usize().unwrap_or(1).max(1);
    let dt = horizon / lit(steps as f64);
    let rhs = Rhs { spec, grid, transport: regime.transport_active(), h_fixed: spec.h_grid(grid)? };

    let mut b = spec.b0;
    let mut v = spec.u0_grid(grid)?;
    let mut path = LimitPath {
        times: Vec::with_capacity(steps + 1),
        b: Vec::with_capacity(steps + 1),
        y: Vec::with_capacity(steps + 1),
        snapshot_steps: vec![],
        v_abs: vec![],
        grid,
        b0: spec.b0,
        interp: options.interp,
    };
    let half = lit::<T>(0.5);
    let sixth = dt / lit(6.0);
    let two = lit::<T>(2.0);
    for step in 0..=steps {
        at_step(step, dt * lit(step as f64), &mut b, &mut v)?;
        path.times.push(dt * lit(step as f64));
        path.b.push(b);
        path.y.push(rhs.y(b, &v)?);
        if step % options.save_every == 0 || step == steps {
            path.snapshot_steps.push(step);
            path.v_abs.push(v.clone());
        }
        if step == steps {
            break;
        }
        let (k1b, k1) = rhs.eval(b, &v)?;
        let (k2b, k2) = rhs.eval(b + half * dt * k1b, &offset(&v, half * dt, &k1))?;
        let (k3b, k3) = rhs.eval(b + half * dt * k2b, &offset(&v, half * dt, &k2))?;
        let (k4b, k4) = rhs.eval(b + dt * k3b, &offset(&v, dt, &k3))?;
        b += sixth * (k1b + two * k2b + two * k3b + k4b);
        let vals = v.values_mut();
        for i in 0..vals.len() {
            vals[i] += sixth * (k1.values()[i] + two * k2.values()[i] + two * k3.values()[i] + k4.values()[i]);
        }
    }
    Ok(path)
}

/// First-order quantities sampled on a uniform fluctuation-integration grid.
#[derive(Clone, Debug)]
pub struct TrackNode<T> {
    pub t: T,
    pub b: T,
    pub y: T,
    pub u: GridFunction<T>,
    pub dxu: GridFunction<T>,
    pub f: GridFunction<T>,
    pub f_b: GridFunction<T>,
    pub f_y: GridFunction<T>,
    pub g: GridFunction<T>,
    pub p_ba: T,
    pub p_b: T,
    pub p_y: T,
    pub sigma: T,
    /// Rescaled drift `p(B, Y)` when the model supplies it.
    pub mu: Option<T>,
    /// `⟨h, f_y⟩`.
    pub h_fy: T,
    /// `⟨u, h'⟩`.
    pub u_hprime: T,
}

#[derive(Clone, Debug)]
pub struct LimitTrack<T> {
    pub dt: T,
    pub grid: Grid<T>,
    pub nodes: Vec<TrackNode<T>>,
    pub h: GridFunction<T>,
    pub h_prime: GridFunction<T>,
}

impl<T: Real> LimitTrack<T> {
    /// Solves the first-order system with `substeps` RK4 steps per node.
    pub fn build(
        spec: &ModelSpec<T>,
        regime: &ScalingRegime<T>,
        grid: Grid<T>,
        dt_sde: T,
        substeps: usize,
        interp: InterpOrder,
    ) -> Result<Self> {
        let substeps = substeps.max(1);
        let n = (regime.horizon() / dt_sde).round().to_usize().unwrap_or(1).max(1);
        let dt = regime.horizon() / lit(n as f64);
        let options = FomOptions::new(dt / lit(substeps as f64)).save_every(substeps).interp(interp);
        let path = solve_first_order(spec, regime, &options, grid)?;
        Self::from_path(spec, &path, dt)
    }

    pub fn from_path(spec: &ModelSpec<T>, path: &LimitPath<T>, dt: T) -> Result<Self> {
        let grid = path.grid;
        let h = spec.h_grid(grid)?;
        let h_prime = spec.h_prime_grid(grid)?;
        let mut nodes = Vec::with_capacity(path.v_abs.len());
        for (i, &step) in path.snapshot_steps.iter().enumerate() {
            let (b, y) = (path.b[step], path.y[step]);
            let u = path.u_snapshot(i);
            let f_y = spec.f_y_grid(b, y, grid)?;
            nodes.push(TrackNode {
                t: path.times[step],
                b,
                y,
                dxu: u.central_derivative(),
                u_hprime: u.dot(&h_prime),
                u,
                f: spec.f_grid(b, y, grid)?,
                f_b: spec.f_b_grid(b, y, grid)?,
                h_fy: h.dot(&f_y),
                f_y,
                g: spec.g_grid(b, y, grid)?,
                p_ba: spec.p_ba(b, y),
                p_b: spec.p_b_at(b, y),
                p_y: spec.p_y_at(b, y),
                sigma: spec.sigma_b(b, y),
                mu: spec.p_diff.as_ref().map(|p| p(b, y)),
            });
        }
        Ok(Self { dt, grid, nodes, h, h_prime })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Node index of time `t` (nearest node).
    pub fn node_of(&self, t: T) -> usize {
        (t / self.dt).round().to_usize().unwrap_or(0).min(self.steps())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeReport<T> {
    pub sup: T,
    pub at_time: T,
}

/// `sup_t |⟨(T_+ - I)u^(n)(t)/Δx, φ⟩ - ⟨∂_x u(t), φ⟩|` over discrete snapshots.
///
/// The limit pairing is computed as `-⟨u(t), φ'⟩`.
pub fn discrete_derivative_check<T: Real>(
    snapshots: &[(T, GridFunction<T>)],
    phi_discrete: &GridFunction<T>,
    limit: &LimitPath<T>,
    phi_limit: &TestFunction<T>,
) -> Result<DerivativeReport<T>> {
    let mut report = DerivativeReport { sup: T::zero(), at_time: T::zero() };
    for (t, u) in snapshots {
        let discrete = crate::grid::inner_product(&u.forward_difference(), phi_discrete)?;
        let exact = -crate::grid::inner_product(&limit.u_at_time(*t), &phi_limit.dphi)?;
        let gap = (discrete - exact).abs();
        if gap > report.sup {
            report = DerivativeReport { sup: gap, at_time: *t };
        }
    }
    Ok(report)
}
