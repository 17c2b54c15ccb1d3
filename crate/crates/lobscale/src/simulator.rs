//! Event-by-event simulation of the discrete book `S^(n) = (B^(n), u^(n))`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, Shift};
use crate::model::ModelSpec;
use crate::regime::ScalingRegime;
use crate::scalar::{lit, Real};

/// Seed of path `index` under a master seed.
#[inline]
pub fn path_seed(master: u64, index: u64) -> u64 {
    master ^ index
}

pub fn path_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(path_seed(master, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// Market sell order: price down one tick.
    A,
    /// Spread placement: price up one tick.
    B,
    /// Limit order placement or cancellation.
    C,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventDraw<T> {
    pub kind: EventKind,
    pub omega: T,
    pub pi: T,
}

/// Partition of a single uniform draw into event kinds.
#[inline]
pub fn classify<T: Real>(draw: T, p_a: T, p_b: T) -> EventKind {
    if draw < p_a {
        EventKind::A
    } else if draw < p_a + p_b {
        EventKind::B
    } else {
        EventKind::C
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BookState<T> {
    /// Best bid, always `B0 + ticks·Δx`.
    pub b: T,
    pub ticks: i64,
    pub u: GridFunction<T>,
    /// Cached `⟨h, u⟩`.
    pub y: T,
    pub k: usize,
    /// `Δv·Σω` over applied C-events.
    pub placed: T,
    /// Absolute mass pushed out of the window.
    pub lost: T,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathSummary<T> {
    pub events: usize,
    pub counts: [usize; 3],
    pub lost_mass: T,
    /// Largest relative gap between the incremental and recomputed `Y` at checks.
    pub max_y_drift: T,
}

#[derive(Clone, Debug)]
pub struct PathRecord<T> {
    pub b: Vec<T>,
    pub y: Vec<T>,
    pub snapshots: Vec<(usize, GridFunction<T>)>,
    pub summary: PathSummary<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fill<T> {
    pub depth: T,
    /// `∫_{-d}^0 (B + x) u(x) dx`.
    pub revenue: T,
    pub ticks_moved: i64,
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Recompute `Y` from scratch every this many events and record the drift.
    pub verify_every: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { verify_every: Some(10_000) }
    }
}

/// Window half width `M + |B0| + excursion + 5 ticks`.
pub fn window_half_width<T: Real>(spec: &ModelSpec<T>, tick: T, excursion: T) -> T {
    spec.bound + spec.b0.abs() + excursion + lit::<T>(5.0) * tick
}

pub struct Simulator<'a, T> {
    spec: &'a ModelSpec<T>,
    regime: ScalingRegime<T>,
    grid: Grid<T>,
    h: GridFunction<T>,
    h_range: (usize, usize),
    u0: GridFunction<T>,
    options: SimOptions,
}

impl<'a, T: Real> Simulator<'a, T> {
    pub fn new(spec: &'a ModelSpec<T>, regime: ScalingRegime<T>, grid: Grid<T>) -> Result<Self> {
        let dx = regime.dx();
        if (grid.tick() - dx).abs() > lit::<T>(1e-9) * dx {
            return Err(Error::InvalidGrid(format!("simulator grid tick {} differs from Δx = {dx}", grid.tick())));
        }
        spec.validate(&regime, &grid)?;
        let h = spec.h_grid(grid)?;
        let nz: Vec<usize> = (0..grid.len()).filter(|&i| h.values()[i] != T::zero()).collect();
        let h_range = match (nz.first(), nz.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, 0),
        };
        let u0 = spec.u0_grid(grid)?;
        Ok(Self { spec, regime, grid, h, h_range, u0, options: SimOptions::default() })
    }

    /// Builds the window from the model bound and an expected price excursion.
    pub fn with_excursion(spec: &'a ModelSpec<T>, regime: ScalingRegime<T>, excursion: T) -> Result<Self> {
        let dx = regime.dx();
        let grid = Grid::covering(dx, window_half_width(spec, dx, excursion))?;
        Self::new(spec, regime, grid)
    }

    pub fn options(mut self, options: SimOptions) -> Self {
        self.options = options;
        self
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn regime(&self) -> &ScalingRegime<T> {
        &self.regime
    }

    pub fn spec(&self) -> &ModelSpec<T> {
        self.spec
    }

    pub fn h(&self) -> &GridFunction<T> {
        &self.h
    }

    pub fn initial_state(&self) -> BookState<T> {
        let u = self.u0.clone();
        let y = self.full_y(&u);
        BookState { b: self.spec.b0, ticks: 0, u, y, k: 0, placed: T::zero(), lost: T::zero() }
    }

    /// `⟨h, u⟩` summed over the support of `h`.
    pub fn full_y(&self, u: &GridFunction<T>) -> T {
        let (a, b) = self.h_range;
        let mut acc = T::zero();
        for (hv, uv) in self.h.values()[a..b].iter().zip(&u.values()[a..b]) {
            acc += *hv * *uv;
        }
        acc * self.grid.tick()
    }

    pub fn sample_event<R: RngCore>(&self, state: &BookState<T>, rng: &mut R) -> Result<EventDraw<T>> {
        let dp = self.regime.dp();
        let pa = dp * (self.spec.pa_n)(state.b, state.y);
        let pb = dp * (self.spec.pb_n)(state.b, state.y);
        if !(pa >= T::zero() && pb >= T::zero() && pa + pb <= T::one()) {
            return Err(Error::InvalidModel(format!(
                "price event probabilities ({pa}, {pb}) invalid at B={}, Y={}",
                state.b, state.y
            )));
        }
        let draw = lit::<T>(rng.random::<f64>());
        let kind = classify(draw, pa, pb);
        if kind == EventKind::C {
            let (omega, pi) = self.spec.sample_order(state.b, state.y, rng);
            Ok(EventDraw { kind, omega, pi })
        } else {
            Ok(EventDraw { kind, omega: T::zero(), pi: T::zero() })
        }
    }

    fn set_ticks(&self, state: &mut BookState<T>, ticks: i64) -> Result<()> {
        state.ticks = ticks;
        state.b = self.spec.b0 + lit::<T>(ticks as f64) * self.grid.tick();
        let excursion = lit::<T>(ticks.unsigned_abs() as f64) * self.grid.tick();
        if excursion > self.grid.bound() - self.spec.bound {
            return Err(Error::PathAborted(format!(
                "price left the grid window after {} events (B = {})",
                state.k, state.b
            )));
        }
        Ok(())
    }

    pub fn apply_event(&self, state: &mut BookState<T>, ev: &EventDraw<T>) -> Result<()> {
        match ev.kind {
            EventKind::A => {
                state.lost += state.u.shift_in_place(Shift::Minus).abs();
                self.set_ticks(state, state.ticks - 1)?;
                state.y = self.full_y(&state.u);
            }
            EventKind::B => {
                state.lost += state.u.shift_in_place(Shift::Plus).abs();
                self.set_ticks(state, state.ticks + 1)?;
                state.y = self.full_y(&state.u);
            }
            EventKind::C => {
                if ev.omega.abs() > self.spec.bound || ev.pi.abs() > self.spec.bound {
                    return Err(Error::InvalidModel(format!("order ({}, {}) exceeds the bound M", ev.omega, ev.pi)));
                }
                let inc = self.regime.dv() * ev.omega / self.grid.tick();
                match self.grid.index_containing(ev.pi) {
                    Some(i) => {
                        state.u.values_mut()[i] += inc;
                        state.y += self.grid.tick() * self.h.values()[i] * inc;
                    }
                    None => state.lost += (inc * self.grid.tick()).abs(),
                }
                state.placed += self.regime.dv() * ev.omega;
            }
        }
        Ok(())
    }

    /// Runs one path; `hook` sees the state after initialisation and after every event.
    pub fn run<F>(&self, seed: u64, mut hook: F) -> Result<PathSummary<T>>
    where
        F: FnMut(&Self, &mut BookState<T>) -> Result<()>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.initial_state();
        let mut summary = PathSummary { lost_mass: T::zero(), max_y_drift: T::zero(), ..Default::default() };
        hook(self, &mut state)?;
        for k in 1..=self.regime.steps() {
            let ev = self.sample_event(&state, &mut rng)?;
            self.apply_event(&mut state, &ev)?;
            state.k = k;
            summary.counts[ev.kind as usize] += 1;
            if let Some(every) = self.options.verify_every {
                if every > 0 && k % every == 0 {
                    let full = self.full_y(&state.u);
                    let scale = self.y_scale(&state.u).max(T::min_positive_value());
                    summary.max_y_drift = summary.max_y_drift.max((full - state.y).abs() / scale);
                    state.y = full;
                }
            }
            hook(self, &mut state)?;
        }
        summary.events = self.regime.steps();
        summary.lost_mass = state.lost;
        Ok(summary)
    }

    /// `tick·Σ|h_j u_j|`, the natural magnitude of `Y`.
    fn y_scale(&self, u: &GridFunction<T>) -> T {
        let (a, b) = self.h_range;
        let mut acc = T::zero();
        for (hv, uv) in self.h.values()[a..b].iter().zip(&u.values()[a..b]) {
            acc += (*hv * *uv).abs();
        }
        acc * self.grid.tick()
    }

    /// Full `(B, Y)` series and `u` snapshots every `stride` events.
    pub fn simulate_path(&self, seed: u64, stride: Option<usize>) -> Result<PathRecord<T>> {
        let steps = self.regime.steps();
        let stride = stride.unwrap_or((steps / 100).max(1)).max(1);
        let mut b = Vec::with_capacity(steps + 1);
        let mut y = Vec::with_capacity(steps + 1);
        let mut snapshots = Vec::new();
        let summary = self.run(seed, |_, s| {
            b.push(s.b);
            y.push(s.y);
            if s.k % stride == 0 || s.k == steps {
                snapshots.push((s.k, s.u.clone()));
            }
            Ok(())
        })?;
        Ok(PathRecord { b, y, snapshots, summary })
    }

    /// Depth and revenue of selling `theta` into the current book without touching it.
    pub fn quote_sell(&self, state: &BookState<T>, theta: T, index: usize) -> Result<Fill<T>> {
        let depth = state.u.depth_below(T::zero(), theta).map_err(|avail| Error::InfeasibleTrade {
            index,
            requested: theta.to_f64().unwrap_or(f64::NAN),
            available: avail.to_f64().unwrap_or(f64::NAN),
        })?;
        let revenue = state.b * theta + state.u.moment_between(-depth, T::zero());
        Ok(Fill { depth, revenue, ticks_moved: 0 })
    }

    /// Executes a market sell of `theta` shares: the consumed volume disappears and
    /// the best bid drops to the highest level with volume left.
    pub fn execute_sell(&self, state: &mut BookState<T>, theta: T, index: usize) -> Result<Fill<T>> {
        let mut fill = self.quote_sell(state, theta, index)?;
        state.u.remove_between(-fill.depth, T::zero());
        let k = (fill.depth / self.grid.tick() + lit(1e-9)).floor().to_i64().unwrap_or(0);
        state.lost += state.u.shift_cells(k).abs();
        self.set_ticks(state, state.ticks - k)?;
        state.y = self.full_y(&state.u);
        fill.ticks_moved = k;
        Ok(fill)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialShape, ModelParams};
    use std::sync::Arc;

    fn constant_spec(pa: f64, pb: f64, omega: f64) -> ModelSpec<f64> {
        let params = ModelParams {
            p_a: pa,
            p_b: pb,
            omega,
            pi_lo: -2.0,
            pi_hi: 1.0,
            u0: InitialShape::Block { level: 1.0, width: 3.0 },
            ..ModelParams::default()
        };
        ModelSpec::constant_test(&params).unwrap()
    }

    fn first_order(dt: f64) -> ScalingRegime<f64> {
        ScalingRegime::new(dt, 0.6, 0.5, 1.0, crate::RegimeKind::FirstOrderOnly).unwrap()
    }

    #[test]
    fn uniform_draw_partition() {
        let dp = 0.1;
        assert_eq!(classify(0.05, dp * 0.3, dp * 0.5), EventKind::B);
        assert_eq!(classify(0.01, dp * 0.3, dp * 0.5), EventKind::A);
        assert_eq!(classify(0.08, dp * 0.3, dp * 0.5), EventKind::C);
        assert_eq!(classify(0.0, 0.0, 0.0), EventKind::C);
    }

    #[test]
    fn c_event_increment_is_dv_over_dx() {
        let spec = constant_spec(0.0, 0.0, 1.0);
        let regime = ScalingRegime::new(1e-4, 0.6, 0.4, 1.0, crate::RegimeKind::FirstOrderOnly).unwrap();
        let sim = Simulator::with_excursion(&spec, regime, 1.0).unwrap();
        let mut s = sim.initial_state();
        let before = s.u.clone();
        let mass = s.u.integral();
        sim.apply_event(&mut s, &EventDraw { kind: EventKind::C, omega: 1.0, pi: -0.5 }).unwrap();
        let i = sim.grid().index_containing(-0.5).unwrap();
        let inc = s.u.values()[i] - before.values()[i];
        assert!((inc - 1e-4f64.powf(0.4)).abs() < 1e-15);
        assert!((s.u.integral() - (mass + 1e-4)).abs() < 1e-14);
        assert!((s.y - sim.full_y(&s.u)).abs() < 1e-15);
    }

    #[test]
    fn a_then_b_restores_book() {
        let spec = constant_spec(0.3, 0.3, 1.0);
        let sim = Simulator::with_excursion(&spec, first_order(1e-3), 1.0).unwrap();
        let mut s = sim.initial_state();
        let start = s.clone();
        sim.apply_event(&mut s, &EventDraw { kind: EventKind::A, omega: 0.0, pi: 0.0 }).unwrap();
        assert_eq!(s.ticks, -1);
        sim.apply_event(&mut s, &EventDraw { kind: EventKind::B, omega: 0.0, pi: 0.0 }).unwrap();
        assert_eq!(s.b, start.b);
        assert_eq!(s.u, start.u);
    }

    #[test]
    fn zero_flow_keeps_state_constant() {
        let mut spec = constant_spec(0.0, 0.0, 0.0);
        spec.omega = Arc::new(|_, _, _| 0.0);
        let sim = Simulator::with_excursion(&spec, first_order(1e-3), 1.0).unwrap();
        let start = sim.initial_state();
        let rec = sim.simulate_path(3, Some(100)).unwrap();
        assert!(rec.b.iter().all(|&b| b == start.b));
        assert!(rec.y.iter().all(|&y| y == start.y));
        assert!(rec.snapshots.iter().all(|(_, u)| *u == start.u));
    }

    #[test]
    fn mass_grows_by_dv_per_placement() {
        let spec = constant_spec(0.0, 0.0, 1.0);
        let regime = first_order(1e-3);
        let sim = Simulator::with_excursion(&spec, regime, 1.0).unwrap();
        let m0 = sim.initial_state().u.integral();
        let rec = sim.simulate_path(5, None).unwrap();
        let (_, last) = rec.snapshots.last().unwrap();
        let expected = m0 + 1e-3 * regime.steps() as f64;
        assert!((last.integral() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = ModelSpec::<f64>::example_3_10(&ModelParams::default()).unwrap();
        let regime = ScalingRegime::slow(1e-3, 0.4, 1.0).unwrap();
        let sim = Simulator::with_excursion(&spec, regime, 2.0).unwrap();
        let a = sim.simulate_path(42, None).unwrap();
        let b = sim.simulate_path(42, None).unwrap();
        assert_eq!(a.b, b.b);
        assert_eq!(a.y, b.y);
        let c = sim.simulate_path(43, None).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn event_frequencies_match_intensities() {
        let spec = constant_spec(0.3, 0.5, 1.0);
        let regime = ScalingRegime::new(1e-6, 0.5, 0.5, 1.0, crate::RegimeKind::FirstOrderOnly).unwrap();
        let sim = Simulator::with_excursion(&spec, regime, 2.0).unwrap().options(SimOptions { verify_every: None });
        let dp = regime.dp();
        let summary = sim.run(9, |_, _| Ok(())).unwrap();
        let n = summary.events as f64;
        for (count, p) in [(summary.counts[0], dp * 0.3), (summary.counts[1], dp * 0.5)] {
            let se = (n * p * (1.0 - p)).sqrt();
            assert!((count as f64 - n * p).abs() < 4.0 * se, "{count} vs {}", n * p);
        }
    }

    #[test]
    fn execution_removes_shares_and_moves_price() {
        let spec = constant_spec(0.0, 0.0, 0.0);
        let sim = Simulator::with_excursion(&spec, first_order(1e-2), 2.0).unwrap();
        let mut s = sim.initial_state();
        let tick = sim.grid().tick();
        let before = s.u.integral();
        let theta = 0.37;
        let fill = sim.execute_sell(&mut s, theta, 0).unwrap();
        assert!((fill.depth - theta).abs() < 1e-12);
        assert!((before - s.u.integral() - theta).abs() < 1e-12);
        assert_eq!(fill.ticks_moved, (theta / tick).floor() as i64);
        assert!((s.b - (1.0 - fill.ticks_moved as f64 * tick)).abs() < 1e-12);
        assert!((fill.revenue - (theta - theta * theta / 2.0)).abs() < 1e-12);
        assert!(s.u.values()[sim.grid().index_of(0).unwrap()] > 0.0);
    }
}
