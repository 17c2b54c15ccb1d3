//! Liquidation values and their second-order confidence intervals under
//! non-permanent and permanent price impact.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fom::{solve_first_order_with, FomOptions, LimitPath, LimitTrack};
use crate::grid::{Grid, GridFunction, InterpOrder};
use crate::model::ModelSpec;
use crate::regime::{RegimeKind, ScalingRegime};
use crate::scalar::{lit, to_f64, Real};
use crate::simulator::{path_rng, path_seed, Simulator};
use crate::som_fast::{FastLimitState, FastNoise, FastStepper};
use crate::som_slow::{SlowOptions, SlowStepper, ZySource};
use crate::stats;

/// Shares `θ_i ≥ 0` sold at nondecreasing times `t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiquidationSchedule<T> {
    times: Vec<T>,
    shares: Vec<T>,
}

impl<T: Real> LiquidationSchedule<T> {
    pub fn new(times: Vec<T>, shares: Vec<T>) -> Result<Self> {
        if times.len() != shares.len() {
            return Err(Error::Argument(format!("{} trade times but {} share counts", times.len(), shares.len())));
        }
        for (i, (&t, &s)) in times.iter().zip(&shares).enumerate() {
            if !(s >= T::zero()) || !s.is_finite() {
                return Err(Error::Argument(format!("trade {i}: shares must be finite and non-negative, got {s}")));
            }
            if !(t >= T::zero()) || !t.is_finite() {
                return Err(Error::Argument(format!("trade {i}: time must be finite and non-negative, got {t}")));
            }
            if i > 0 && t < times[i - 1] {
                return Err(Error::Argument(format!("trade {i}: times must be nondecreasing")));
            }
        }
        Ok(Self { times, shares })
    }

    pub fn empty() -> Self {
        Self { times: vec![], shares: vec![] }
    }

    /// `n` equal slices of `total` at `T/n, 2T/n, ..., T`; the last slice absorbs rounding.
    pub fn uniform(n: usize, total: T, horizon: T) -> Result<Self> {
        if n == 0 {
            return Ok(Self::empty());
        }
        let nf = lit::<T>(n as f64);
        let slice = total / nf;
        let mut shares = vec![slice; n];
        let head: T = shares[..n - 1].iter().copied().sum();
        shares[n - 1] = total - head;
        let times = (1..=n).map(|i| horizon * lit::<T>(i as f64) / nf).collect();
        Self::new(times, shares)
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn shares(&self) -> &[T] {
        &self.shares
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `X = Σ θ_i`.
    pub fn total(&self) -> T {
        self.shares.iter().copied().sum()
    }

    /// Reads `t,shares` rows; a header line is allowed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut times = vec![];
        let mut shares = vec![];
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(Error::config("schedule", format!("line {}: expected `t,shares`", line_no + 1)));
            }
            match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
                (Ok(t), Ok(s)) => {
                    times.push(lit(t));
                    shares.push(lit(s));
                }
                _ if times.is_empty() && line_no == 0 => continue,
                _ => return Err(Error::config("schedule", format!("line {}: not numeric", line_no + 1))),
            }
        }
        Self::new(times, shares)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,shares\n");
        for (t, s) in self.times.iter().zip(&self.shares) {
            out.push_str(&format!("{:.17e},{:.17e}\n", to_f64(*t), to_f64(*s)));
        }
        out
    }

    /// Index of each trade on a uniform grid of step `dt`; times must sit on nodes.
    pub fn nodes(&self, dt: T) -> Result<Vec<usize>> {
        self.times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let k = (t / dt).round();
                if (k * dt - t).abs() > lit::<T>(1e-9) * dt.max(T::one()) {
                    return Err(Error::Argument(format!("trade {i} at t={t} is not a multiple of the step {dt}")));
                }
                Ok(k.to_usize().unwrap_or(0))
            })
            .collect()
    }
}

/// Smallest `c ≥ 0` with `∫_{-c}^0 u = θ`.
pub fn depth_for_shares<T: Real>(u: &GridFunction<T>, theta: T, index: usize) -> Result<T> {
    u.depth_below(T::zero(), theta).map_err(|avail| Error::InfeasibleTrade {
        index,
        requested: to_f64(theta),
        available: to_f64(avail),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Trade<T> {
    pub index: usize,
    pub t: T,
    pub theta: T,
    /// The trade consumes the book on `[-depth_to, -depth_from]` (relative coordinates).
    pub depth_from: T,
    pub depth_to: T,
    /// Best bid just before the trade.
    pub price: T,
    /// `∫ (B + x) u dx` over the consumed range.
    pub value: T,
}

fn group_end<T: Real>(times: &[T], i: usize) -> bool {
    i + 1 == times.len() || times[i + 1] != times[i]
}

/// `V = B0·X + Σ ∫_{-c_i}^0 x·u(t_i, x) dx` for a book with a constant first-order price.
/// Trades at one timestamp walk the book consecutively.
pub fn value_nonpermanent<T: Real>(schedule: &LiquidationSchedule<T>, path: &LimitPath<T>) -> Result<(T, Vec<Trade<T>>)> {
    if path.b.iter().any(|&b| b != path.b0) {
        return Err(Error::Argument("non-permanent valuation needs a constant first-order price".into()));
    }
    let step_dt = path.times.get(1).map(|&t1| t1 - path.times[0]).unwrap_or(T::one());
    let snap_of_step = |step: usize| path.snapshot_steps.iter().position(|&s| s == step);
    let mut trades = Vec::with_capacity(schedule.len());
    let mut total = T::zero();
    let mut from = T::zero();
    let mut cum = T::zero();
    let mut u: Option<GridFunction<T>> = None;
    for i in 0..schedule.len() {
        let (t, theta) = (schedule.times[i], schedule.shares[i]);
        if u.is_none() {
            let step = schedule_step(t, step_dt, i)?;
            u = Some(match snap_of_step(step) {
                Some(j) => path.u_snapshot(j),
                None => path.u_at_time(t),
            });
        }
        let book = u.as_ref().expect("set above");
        cum += theta;
        let to = depth_for_shares(book, cum, i)?;
        let value = path.b0 * theta + book.moment_between(-to, -from);
        trades.push(Trade { index: i, t, theta, depth_from: from, depth_to: to, price: path.b0, value });
        total += value;
        from = to;
        if group_end(&schedule.times, i) {
            from = T::zero();
            cum = T::zero();
            u = None;
        }
    }
    Ok((total, trades))
}

fn schedule_step<T: Real>(t: T, dt: T, i: usize) -> Result<usize> {
    let k = (t / dt).round();
    if (k * dt - t).abs() > lit::<T>(1e-9) * dt.max(T::one()) {
        return Err(Error::Argument(format!("trade {i} at t={t} is not on the solver grid (step {dt})")));
    }
    Ok(k.to_usize().unwrap_or(0))
}

/// First-order path with the trader's permanent impact: at each trade the consumed
/// volume disappears and the price drops by the depth.
#[derive(Clone, Debug)]
pub struct ImpactedLimitPath<T> {
    /// Right-continuous at trade nodes (post-trade state stored).
    pub path: LimitPath<T>,
    pub trades: Vec<Trade<T>>,
    /// Solver step of each trade.
    pub trade_steps: Vec<usize>,
}

impl<T: Real> ImpactedLimitPath<T> {
    /// `V(θ) = Σ ∫_{-c_i}^0 (B^θ(t_i) + x) u^θ(t_i, x) dx`.
    pub fn value(&self) -> T {
        self.trades.iter().map(|t| t.value).sum()
    }
}

/// Solves the first-order system with jumps at the schedule's trade times. In the
/// absolute frame a trade of depth `c` removes the mass on `(B - c, B]` and moves `B`
/// down by `c`, so the relative book obeys `u^θ(t+, x) = u^θ(t, x - c)` with the
/// consumed part `(0, c]` emptied.
pub fn impacted_first_order<T: Real>(
    schedule: &LiquidationSchedule<T>,
    spec: &ModelSpec<T>,
    regime: &ScalingRegime<T>,
    options: &FomOptions<T>,
    grid: Grid<T>,
) -> Result<ImpactedLimitPath<T>> {
    let horizon = regime.horizon();
    let steps = (horizon / options.solver_dt).round().to_usize().unwrap_or(1).max(1);
    let dt = horizon / lit(steps as f64);
    let trade_steps: Vec<usize> =
        schedule.times.iter().enumerate().map(|(i, &t)| schedule_step(t, dt, i)).collect::<Result<_>>()?;
    if let Some(&last) = trade_steps.last() {
        if last > steps {
            return Err(Error::Argument(format!("trade after the horizon {horizon}")));
        }
    }
    let mut trades = Vec::with_capacity(schedule.len());
    let mut next = 0;
    let path = solve_first_order_with(spec, regime, options, grid, |step, t, b, v| {
        while next < trade_steps.len() && trade_steps[next] == step {
            let theta = schedule.shares[next];
            let delta = *b - spec.b0;
            let c = v.depth_below(delta, theta).map_err(|avail| Error::InfeasibleTrade {
                index: next,
                requested: to_f64(theta),
                available: to_f64(avail),
            })?;
            let moment = v.moment_between(delta - c, delta) - delta * v.integral_between(delta - c, delta);
            trades.push(Trade { index: next, t, theta, depth_from: T::zero(), depth_to: c, price: *b, value: *b * theta + moment });
            v.remove_between(delta - c, delta);
            *b -= c;
            next += 1;
        }
        Ok(())
    })?;
    Ok(ImpactedLimitPath { path, trades, trade_steps })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionKind {
    /// `Σ [Z^B θ_i + ∫_{-c_i}^0 x Z^u dx]` with the first-order depths.
    #[default]
    Standard,
    /// Linearisation that also moves the depth: `∫_{-c}^0 (x + c) Z^u dx` in place of `∫ x Z^u`.
    DepthAdjusted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Interval {
    #[serde(rename = "V")]
    pub v: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub regime: RegimeKind,
    pub correction: CorrectionKind,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Type-7 quantile interval of `V + scale·correction`.
pub fn interval_from(
    v: f64,
    corrections: &[f64],
    scale: f64,
    level: f64,
    regime: RegimeKind,
    correction: CorrectionKind,
) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level {level} outside (0,1)")));
    }
    let values: Vec<f64> = corrections.iter().map(|c| v + scale * c).collect();
    Ok(Interval {
        v,
        lo: stats::quantile(&values, 0.5 * (1.0 - level))?,
        hi: stats::quantile(&values, 0.5 * (1.0 + level))?,
        level,
        m: corrections.len(),
        regime,
        correction,
    })
}

/// Correction terms of one trade from the fluctuation state at the trade time.
fn trade_terms<T: Real>(trade: &Trade<T>, zb: T, zu: &GridFunction<T>) -> (f64, f64) {
    let (a, b) = (trade.depth_from, trade.depth_to);
    let standard = zb * trade.theta + zu.moment_between(-b, -a);
    let g = |c: T| zu.moment_between(-c, T::zero()) + c * zu.integral_between(-c, T::zero());
    let adjusted = zb * trade.theta + g(b) - g(a);
    (to_f64(standard), to_f64(adjusted))
}

/// Per-path unscaled corrections (standard form, depth-adjusted form) from fast-regime limit paths.
pub fn fast_corrections<T: Real>(
    stepper: &FastStepper<'_, T>,
    trades: &[Trade<T>],
    paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let track = stepper.track;
    let times: Vec<T> = trades.iter().map(|t| t.t).collect();
    let nodes = LiquidationSchedule::new(times, trades.iter().map(|t| t.theta).collect())?.nodes(track.dt)?;
    if nodes.iter().any(|&k| k > track.steps()) {
        return Err(Error::Argument("trade after the fluctuation horizon".into()));
    }
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = FastLimitState::zero(track);
            let mut acc = (0.0, 0.0);
            let mut j = 0;
            for k in 0..=track.steps() {
                while j < trades.len() && nodes[j] == k {
                    let (a, b) = trade_terms(&trades[j], state.zb, &state.zu);
                    acc.0 += a;
                    acc.1 += b;
                    j += 1;
                }
                if k < track.steps() {
                    let noise = FastNoise::draw(&mut rng, stepper.cells(), track.dt);
                    stepper.step(&mut state, k, track.dt, &noise);
                }
            }
            Ok(acc)
        })
        .collect()
}

pub struct NonPermanentIntervals {
    pub standard: Interval,
    pub depth_adjusted: Interval,
}

/// `V + √Δt·Σ[Z^B(t_i)θ_i + ∫_{-c_i}^0 x Z^u(t_i, x) dx]` quantiles over fast-regime limit paths.
pub fn ci_nonpermanent<T: Real>(
    v: T,
    trades: &[Trade<T>],
    stepper: &FastStepper<'_, T>,
    regime: &ScalingRegime<T>,
    paths: usize,
    level: f64,
    seed: u64,
) -> Result<NonPermanentIntervals> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level {level} outside (0,1)")));
    }
    let scale = to_f64(regime.dt().sqrt());
    let c = fast_corrections(stepper, trades, paths, seed)?;
    let standard: Vec<f64> = c.iter().map(|x| x.0).collect();
    let adjusted: Vec<f64> = c.iter().map(|x| x.1).collect();
    Ok(NonPermanentIntervals {
        standard: interval_from(to_f64(v), &standard, scale, level, regime.kind(), CorrectionKind::Standard)?,
        depth_adjusted: interval_from(to_f64(v), &adjusted, scale, level, regime.kind(), CorrectionKind::DepthAdjusted)?,
    })
}

/// Limit track of an impacted path; `substeps` solver steps per node.
pub fn impacted_track<T: Real>(spec: &ModelSpec<T>, impacted: &ImpactedLimitPath<T>, substeps: usize) -> Result<LimitTrack<T>> {
    if impacted.trade_steps.iter().any(|&s| s % substeps != 0) {
        return Err(Error::Argument("trade times must fall on fluctuation nodes".into()));
    }
    let dt = (impacted.path.times[1] - impacted.path.times[0]) * lit(substeps as f64);
    LimitTrack::from_path(spec, &impacted.path, dt)
}

/// Per-path unscaled corrections along an impacted path: between trades `(Z^B, Z^u)`
/// follow the slow-regime system; at a trade `Z^u` shifts with the book and loses the
/// consumed range while `Z^B` is continuous.
pub fn slow_corrections<T: Real>(
    stepper: &SlowStepper<'_, T>,
    trades: &[Trade<T>],
    trade_nodes: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if stepper.options.zy_source != ZySource::Grid {
        return Err(Error::Argument("impacted fluctuations need the grid Z^Y source".into()));
    }
    let track = stepper.track;
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = stepper.initial_state();
            let mut acc = (0.0, 0.0);
            let mut j = 0;
            for k in 0..=track.steps() {
                let mut jumped = false;
                while j < trades.len() && trade_nodes[j] == k {
                    let (a, b) = trade_terms(&trades[j], state.zb, &state.zu);
                    acc.0 += a;
                    acc.1 += b;
                    let c = trades[j].depth_to;
                    let mut moved = state.zu.sample_shifted(-c, InterpOrder::Linear);
                    moved.remove_between(T::zero(), c);
                    state.zu = moved;
                    jumped = true;
                    j += 1;
                }
                if jumped {
                    state.zy = state.zu.dot(&track.h);
                }
                if k < track.steps() {
                    let dw = stepper.draw_dw(&mut rng, k);
                    stepper.step(&mut state, dw)?;
                }
            }
            Ok(acc)
        })
        .collect()
}

pub struct PermanentIntervals {
    pub standard: Interval,
    pub depth_adjusted: Interval,
}

/// `V(θ) + √Δx·Σ[Z^{B,θ}(t_i)θ_i + ∫_{-c_i}^0 x Z^{u,θ}(t_i, x) dx]` quantiles.
pub fn ci_permanent<T: Real>(
    impacted: &ImpactedLimitPath<T>,
    stepper: &SlowStepper<'_, T>,
    substeps: usize,
    regime: &ScalingRegime<T>,
    paths: usize,
    level: f64,
    seed: u64,
) -> Result<PermanentIntervals> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level {level} outside (0,1)")));
    }
    let nodes: Vec<usize> = impacted.trade_steps.iter().map(|&s| s / substeps.max(1)).collect();
    let c = slow_corrections(stepper, &impacted.trades, &nodes, paths, seed)?;
    let scale = to_f64(regime.dx().sqrt());
    let v = to_f64(impacted.value());
    let standard: Vec<f64> = c.iter().map(|x| x.0).collect();
    let adjusted: Vec<f64> = c.iter().map(|x| x.1).collect();
    Ok(PermanentIntervals {
        standard: interval_from(v, &standard, scale, level, regime.kind(), CorrectionKind::Standard)?,
        depth_adjusted: interval_from(v, &adjusted, scale, level, regime.kind(), CorrectionKind::DepthAdjusted)?,
    })
}

/// Event index of each trade time on the simulator's step.
fn event_indices<T: Real>(schedule: &LiquidationSchedule<T>, regime: &ScalingRegime<T>) -> Result<Vec<usize>> {
    let idx = schedule.nodes(regime.dt())?;
    if idx.iter().any(|&k| k > regime.steps()) {
        return Err(Error::Argument("trade after the simulated horizon".into()));
    }
    Ok(idx)
}

/// Realized liquidation revenue of one discrete path. Non-permanent trades are quoted
/// against the untouched book (consecutive trades at one timestamp walk it jointly);
/// permanent trades are executed.
pub fn realized_value<T: Real>(
    sim: &Simulator<'_, T>,
    schedule: &LiquidationSchedule<T>,
    permanent: bool,
    seed: u64,
) -> Result<T> {
    let idx = event_indices(schedule, sim.regime())?;
    let mut total = T::zero();
    let mut j = 0;
    sim.run(seed, |sim, state| {
        let mut walked = T::zero();
        let mut walked_value = T::zero();
        while j < idx.len() && idx[j] == state.k {
            let theta = schedule.shares[j];
            if permanent {
                total += sim.execute_sell(state, theta, j)?.revenue;
            } else {
                let fill = sim.quote_sell(state, walked + theta, j)?;
                total += fill.revenue - walked_value;
                walked += theta;
                walked_value = fill.revenue;
            }
            j += 1;
        }
        Ok(())
    })?;
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageReport {
    pub interval: Interval,
    pub depth_adjusted: Interval,
    pub realized: Vec<f64>,
    pub coverage: f64,
    pub coverage_depth_adjusted: f64,
    /// Discrete paths that left the simulation window.
    pub aborted: usize,
}

/// Fraction of `xs` inside the interval.
pub fn coverage_of(interval: &Interval, xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().filter(|&&x| interval.contains(x)).count() as f64 / xs.len() as f64
}

/// Settings shared by both coverage experiments.
#[derive(Clone, Debug)]
pub struct CoverageSetup {
    pub discrete_paths: usize,
    pub limit_paths: usize,
    pub level: f64,
    pub seed: u64,
    /// Step of the fluctuation integration.
    pub dt_sde: f64,
    /// Grid tick of the fluctuation integration (non-permanent case).
    pub limit_tick: f64,
    /// Expected price excursion used to size the discrete window.
    pub excursion: f64,
}

fn realized_many(
    sim: &Simulator<'_, f64>,
    schedule: &LiquidationSchedule<f64>,
    permanent: bool,
    paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let results: Vec<Result<f64>> =
        (0..paths).into_par_iter().map(|p| realized_value(sim, schedule, permanent, path_seed(seed, p as u64))).collect();
    let mut out = Vec::with_capacity(paths);
    let mut aborted = 0;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(Error::PathAborted(msg)) => {
                log::warn!("{msg}");
                aborted += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, aborted))
}

/// Separates the discrete and limit random streams.
const LIMIT_STREAM: u64 = 0x5eed_0f_11_0175;

/// Non-permanent coverage: fast-regime discrete liquidations against the interval.
pub fn coverage_nonpermanent(
    spec: &ModelSpec<f64>,
    regime: &ScalingRegime<f64>,
    schedule: &LiquidationSchedule<f64>,
    setup: &CoverageSetup,
) -> Result<CoverageReport> {
    if regime.kind() != RegimeKind::Fast {
        return Err(Error::config("scaling.regime", "non-permanent coverage runs in the fast regime"));
    }
    let sim = Simulator::with_excursion(spec, *regime, setup.excursion)?;
    // first-order book on the simulator grid for V; fluctuations on a coarser grid
    let fine = crate::fom::solve_first_order(spec, regime, &FomOptions::new(setup.dt_sde).save_every(1), *sim.grid())?;
    let (v, trades) = value_nonpermanent(schedule, &fine)?;
    let coarse = Grid::covering(setup.limit_tick, sim.grid().bound())?;
    let track = LimitTrack::build(spec, regime, coarse, setup.dt_sde, 2, InterpOrder::Linear)?;
    let stepper = FastStepper::new(&track)?;
    let ci = ci_nonpermanent(v, &trades, &stepper, regime, setup.limit_paths, setup.level, setup.seed ^ LIMIT_STREAM)?;
    let (realized, aborted) = realized_many(&sim, schedule, false, setup.discrete_paths, setup.seed)?;
    Ok(CoverageReport {
        coverage: coverage_of(&ci.standard, &realized),
        coverage_depth_adjusted: coverage_of(&ci.depth_adjusted, &realized),
        interval: ci.standard,
        depth_adjusted: ci.depth_adjusted,
        realized,
        aborted,
    })
}

/// Permanent coverage: slow-regime discrete executions against the impacted interval.
pub fn coverage_permanent(
    spec: &ModelSpec<f64>,
    regime: &ScalingRegime<f64>,
    schedule: &LiquidationSchedule<f64>,
    setup: &CoverageSetup,
) -> Result<CoverageReport> {
    if regime.kind() != RegimeKind::Slow {
        return Err(Error::config("scaling.regime", "permanent coverage runs in the slow regime"));
    }
    let sim = Simulator::with_excursion(spec, *regime, setup.excursion)?;
    let substeps = 2;
    let options = FomOptions::new(setup.dt_sde / substeps as f64).save_every(substeps);
    let impacted = impacted_first_order(schedule, spec, regime, &options, *sim.grid())?;
    let track = impacted_track(spec, &impacted, substeps)?;
    let stepper = SlowStepper::new(&track, SlowOptions { zy_source: ZySource::Grid, ..SlowOptions::default() })?;
    let ci = ci_permanent(&impacted, &stepper, substeps, regime, setup.limit_paths, setup.level, setup.seed ^ LIMIT_STREAM)?;
    let (realized, aborted) = realized_many(&sim, schedule, true, setup.discrete_paths, setup.seed)?;
    Ok(CoverageReport {
        coverage: coverage_of(&ci.standard, &realized),
        coverage_depth_adjusted: coverage_of(&ci.depth_adjusted, &realized),
        interval: ci.standard,
        depth_adjusted: ci.depth_adjusted,
        realized,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::solve_first_order;
    use crate::model::{InitialShape, ModelParams};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn block_spec(level: f64, width: f64) -> ModelSpec<f64> {
        let params = ModelParams { u0: InitialShape::Block { level, width }, b0: 2.0, ..ModelParams::default() };
        let mut spec = ModelSpec::constant_test(&params).unwrap();
        spec.f = Arc::new(|_, _, _| 0.0);
        spec.g = Arc::new(|_, _, _| 0.0);
        spec
    }

    fn frozen_path(spec: &ModelSpec<f64>, tick: f64) -> LimitPath<f64> {
        let regime = ScalingRegime::new(1e-3, 0.6, 0.8, 1.0, RegimeKind::FirstOrderOnly).unwrap();
        solve_first_order(spec, &regime, &FomOptions::new(0.1), Grid::covering(tick, 14.0).unwrap()).unwrap()
    }

    #[test]
    fn depth_examples() {
        let grid = Grid::covering(1.0, 12.0).unwrap();
        let block = GridFunction::project(grid, 3, |x: f64| if (-5.0..=0.0).contains(&x) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(depth_for_shares(&block, 2.0, 0).unwrap(), 2.0);
        assert_eq!(depth_for_shares(&block, 0.0, 0).unwrap(), 0.0);
        assert!(matches!(depth_for_shares(&block, 6.0, 3), Err(Error::InfeasibleTrade { index: 3, .. })));
        let stairs = GridFunction::project(grid, 3, |x: f64| if x > 0.0 { 0.0 } else { (-x).floor() + 1.0 }).unwrap();
        let c = depth_for_shares(&stairs, 4.0, 0).unwrap();
        assert!((c - (2.0 + 1.0 / 3.0)).abs() < 1e-12);
        // bisection oracle on the cumulative integral
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if stairs.integral_between(-mid, 0.0) < 4.0 { lo = mid } else { hi = mid }
        }
        assert!((c - hi).abs() < 1e-12);
    }

    #[test]
    fn block_book_value() {
        let spec = block_spec(1.0, 5.0);
        let path = frozen_path(&spec, 0.1);
        let x = 1.7;
        let sched = LiquidationSchedule::new(vec![0.0], vec![x]).unwrap();
        let (v, trades) = value_nonpermanent(&sched, &path).unwrap();
        assert!((v - (2.0 * x - x * x / 2.0)).abs() < 1e-12, "{v}");
        assert!((trades[0].depth_to - x).abs() < 1e-12);
        let empty = LiquidationSchedule::new(vec![0.5], vec![0.0]).unwrap();
        assert_eq!(value_nonpermanent(&empty, &path).unwrap().0, 0.0);
        let too_much = LiquidationSchedule::new(vec![0.0, 0.5], vec![1.0, 9.0]).unwrap();
        assert!(matches!(value_nonpermanent(&too_much, &path), Err(Error::InfeasibleTrade { index: 1, .. })));
    }

    #[test]
    fn example_book_value_matches_fine_quadrature() {
        let regime = ScalingRegime::fast(1e-4, 0.6, 1.0).unwrap();
        let spec = ModelSpec::example_fast(&ModelParams::default(), &regime).unwrap();
        let path = frozen_path_for(&spec, &regime, 0.01);
        let sched = LiquidationSchedule::uniform(10, 0.5, 1.0).unwrap();
        let (v, trades) = value_nonpermanent(&sched, &path).unwrap();
        // oracle: bisection for c on a composite Simpson integral of the interpolated book
        let mut oracle = 0.0;
        for (i, &t) in sched.times().iter().enumerate() {
            let book = path.u_at_time(t);
            let dense = |x: f64| book.at(x);
            let simpson = |a: f64, b: f64, g: &dyn Fn(f64) -> f64| {
                let n = 20_000;
                let h = (b - a) / n as f64;
                (0..n).map(|k| {
                    let (l, m, r) = (a + k as f64 * h, a + (k as f64 + 0.5) * h, a + (k as f64 + 1.0) * h);
                    h / 6.0 * (g(l) + 4.0 * g(m) + g(r))
                }).sum::<f64>()
            };
            let (mut lo, mut hi) = (0.0, 5.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if simpson(-mid, 0.0, &dense) < sched.shares()[i] { lo = mid } else { hi = mid }
            }
            assert!((trades[i].depth_to - hi).abs() < 1e-6);
            oracle += spec.b0 * sched.shares()[i] + simpson(-hi, 0.0, &|x| x * dense(x));
        }
        assert!(((v - oracle) / oracle).abs() < 1e-6, "{v} vs {oracle}");
    }

    fn frozen_path_for(spec: &ModelSpec<f64>, regime: &ScalingRegime<f64>, tick: f64) -> LimitPath<f64> {
        solve_first_order(spec, regime, &FomOptions::new(0.01), Grid::covering(tick, 14.0).unwrap()).unwrap()
    }

    #[test]
    fn splitting_a_trade_leaves_value_unchanged() {
        let regime = ScalingRegime::fast(1e-4, 0.6, 1.0).unwrap();
        let spec = ModelSpec::example_fast(&ModelParams::default(), &regime).unwrap();
        let path = frozen_path_for(&spec, &regime, 0.05);
        let one = LiquidationSchedule::new(vec![0.3, 0.6], vec![0.2, 0.1]).unwrap();
        let split = LiquidationSchedule::new(vec![0.3, 0.3, 0.6], vec![0.12, 0.08, 0.1]).unwrap();
        let (a, _) = value_nonpermanent(&one, &path).unwrap();
        let (b, _) = value_nonpermanent(&split, &path).unwrap();
        assert!((a - b).abs() < 1e-14, "{a} {b}");
    }

    #[test]
    fn schedule_csv_round_trip() {
        let s = LiquidationSchedule::uniform(4, 1.0, 2.0).unwrap();
        assert_eq!(s.total(), 1.0);
        let back = LiquidationSchedule::<f64>::from_csv(&s.to_csv()).unwrap();
        assert_eq!(back, s);
        assert!(LiquidationSchedule::<f64>::from_csv("t,shares\n0.5,-1\n").is_err());
        assert!(LiquidationSchedule::<f64>::from_csv("0.5,1\n0.2,1\n").is_err());
        assert_eq!(s.nodes(0.25).unwrap(), vec![2, 4, 6, 8]);
        assert!(s.nodes(0.3).is_err());
    }

    #[test]
    fn empty_schedule_reproduces_plain_solve() {
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let spec = ModelSpec::example_3_10(&ModelParams::default()).unwrap();
        let grid = Grid::covering(0.1, 14.0).unwrap();
        let opts = FomOptions::new(0.05);
        let plain = solve_first_order(&spec, &regime, &opts, grid).unwrap();
        let imp = impacted_first_order(&LiquidationSchedule::empty(), &spec, &regime, &opts, grid).unwrap();
        assert_eq!(plain.b, imp.path.b);
        assert_eq!(plain.y, imp.path.y);
        assert_eq!(plain.v_abs, imp.path.v_abs);
        assert_eq!(imp.value(), 0.0);
    }

    #[test]
    fn single_trade_without_resilience() {
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let mut spec = block_spec(1.0, 5.0);
        spec.pa = Arc::new(|_, _| 0.0);
        spec.pb = Arc::new(|_, _| 0.0);
        let grid = Grid::covering(0.1, 14.0).unwrap();
        // a depth of whole cells keeps the shifted block exact on the grid
        let sched = LiquidationSchedule::new(vec![0.5], vec![1.2]).unwrap();
        let imp = impacted_first_order(&sched, &spec, &regime, &FomOptions::new(0.1), grid).unwrap();
        let c = imp.trades[0].depth_to;
        assert!((c - 1.2).abs() < 1e-12);
        let last = imp.path.b.len() - 1;
        assert!((imp.path.b[last] - (spec.b0 - c)).abs() < 1e-12);
        assert!((imp.value() - (2.0 * 1.2 - 1.2 * 1.2 / 2.0)).abs() < 1e-12);
        let u = imp.path.u_snapshot(imp.path.v_abs.len() - 1);
        assert!((u.integral() - (5.0 - 1.2)).abs() < 1e-9);
        assert!(u.integral_between(0.0, 1.2).abs() < 1e-9);
        assert!((u.integral_between(-3.8, 0.0) - 3.8).abs() < 1e-9);
    }

    #[test]
    fn impacted_path_converges_in_solver_step() {
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let spec = ModelSpec::example_3_10(&ModelParams::default()).unwrap();
        let grid = Grid::covering(0.05, 16.0).unwrap();
        let sched = LiquidationSchedule::new(vec![0.5], vec![0.1]).unwrap();
        let coarse = impacted_first_order(&sched, &spec, &regime, &FomOptions::new(0.01), grid).unwrap();
        let fine = impacted_first_order(&sched, &spec, &regime, &FomOptions::new(0.001), grid).unwrap();
        for (i, &t) in coarse.path.times.iter().enumerate() {
            let t: f64 = t;
            let j = (t / 0.001f64).round() as usize;
            assert!((coarse.path.y[i] - fine.path.y[j]).abs() < 1e-5, "t={t}");
            assert!((coarse.path.b[i] - fine.path.b[j]).abs() < 1e-5, "t={t}");
        }
        // Y drops at the trade and relaxes afterwards
        let k = coarse.trade_steps[0];
        let before = solve_first_order(&spec, &regime, &FomOptions::new(0.01), grid).unwrap();
        assert!(coarse.path.y[k] < before.y[k]);
    }

    fn zero_noise_fast() -> (ModelSpec<f64>, ScalingRegime<f64>) {
        let regime = ScalingRegime::fast(1e-4, 0.6, 1.0).unwrap();
        let mut spec = block_spec(1.0, 5.0);
        spec.pa = Arc::new(|_, _| 0.0);
        spec.pb = Arc::new(|_, _| 0.0);
        (spec, regime)
    }

    #[test]
    fn zero_noise_interval_collapses() {
        let (spec, regime) = zero_noise_fast();
        let grid = Grid::covering(0.1, 14.0).unwrap();
        let track = LimitTrack::build(&spec, &regime, grid, 0.05, 1, InterpOrder::Linear).unwrap();
        let stepper = FastStepper::new(&track).unwrap();
        let path = frozen_path_for(&spec, &regime, 0.1);
        let sched = LiquidationSchedule::uniform(4, 1.0, 1.0).unwrap();
        let (v, trades) = value_nonpermanent(&sched, &path).unwrap();
        let ci = ci_nonpermanent(v, &trades, &stepper, &regime, 50, 0.9, 1).unwrap();
        assert_eq!((ci.standard.lo, ci.standard.hi), (v, v));
        assert!(ci_nonpermanent(v, &trades, &stepper, &regime, 50, 1.0, 1).is_err());
    }

    #[test]
    fn symmetric_noise_gives_symmetric_interval() {
        let regime = ScalingRegime::fast(1e-4, 0.6, 1.0).unwrap();
        let params = ModelParams { u0: InitialShape::Block { level: 1.0, width: 5.0 }, ..ModelParams::default() };
        let spec = ModelSpec::constant_test(&params).unwrap();
        let grid = Grid::covering(0.1, 14.0).unwrap();
        let track = LimitTrack::build(&spec, &regime, grid, 0.05, 1, InterpOrder::Linear).unwrap();
        let stepper = FastStepper::new(&track).unwrap();
        let path = frozen_path_for(&spec, &regime, 0.1);
        let sched = LiquidationSchedule::uniform(4, 1.0, 1.0).unwrap();
        let (v, trades) = value_nonpermanent(&sched, &path).unwrap();
        let c = fast_corrections(&stepper, &trades, 2000, 5).unwrap();
        let standard: Vec<f64> = c.iter().map(|x| x.0).collect();
        let m = stats::moments(&standard).unwrap();
        assert!(m.skew.abs() < 2.0 * m.se_skew, "{}", m.skew);
        assert!(m.mean.abs() < 3.0 * m.se_mean);
        let ci90 = interval_from(v, &standard, 0.01, 0.9, RegimeKind::Fast, CorrectionKind::Standard).unwrap();
        let ci50 = interval_from(v, &standard, 0.01, 0.5, RegimeKind::Fast, CorrectionKind::Standard).unwrap();
        assert!(ci90.lo <= ci50.lo && ci50.hi <= ci90.hi);
        let mid = 0.5 * (ci90.lo + ci90.hi);
        assert!((mid - v).abs() < 0.1 * ci90.width());
    }

    #[test]
    fn single_trade_correction_is_price_term() {
        // f ≡ 0 and g ≡ 0: Z^u only carries ∂_x u Z^B, which vanishes inside a flat block
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let spec = block_spec(1.0, 8.0);
        let grid = Grid::covering(0.05, 20.0).unwrap();
        let sched = LiquidationSchedule::new(vec![0.5], vec![0.5]).unwrap();
        let imp = impacted_first_order(&sched, &spec, &regime, &FomOptions::new(0.05), grid).unwrap();
        let track = impacted_track(&spec, &imp, 1).unwrap();
        let stepper = SlowStepper::new(&track, SlowOptions { zy_source: ZySource::Grid, ..SlowOptions::default() }).unwrap();
        let nodes: Vec<usize> = imp.trade_steps.clone();
        let c = slow_corrections(&stepper, &imp.trades, &nodes, 200, 3).unwrap();
        let mut rng_check = Vec::new();
        for p in 0..200 {
            let mut rng = path_rng(3, p as u64);
            let mut s = stepper.initial_state();
            while s.k < nodes[0] {
                let dw = stepper.draw_dw(&mut rng, s.k);
                stepper.step(&mut s, dw).unwrap();
            }
            rng_check.push(s.zb * 0.5);
        }
        // the only Z^u mass sits near the top cell, where |x| is O(tick)
        let rms = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0), |(s, n), x| (s + x * x, n + 1));
            (s / n as f64).sqrt()
        };
        let diff = rms(&mut c.iter().zip(&rng_check).map(|(a, b)| a.0 - b));
        let base = rms(&mut rng_check.iter().copied());
        assert!(diff < 0.1 * base, "{diff} vs {base}");
    }

    #[test]
    fn permanent_fluctuations_exceed_nonpermanent_ones() {
        let slow = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let fast = ScalingRegime::fast(1e-4, 0.6, 1.0).unwrap();
        let s_spec = ModelSpec::example_3_10(&ModelParams::default()).unwrap();
        let f_spec = ModelSpec::example_fast(&ModelParams::default(), &fast).unwrap();
        let sched = LiquidationSchedule::uniform(5, 0.1, 1.0).unwrap();
        let grid = Grid::covering(0.1, 16.0).unwrap();

        let imp = impacted_first_order(&sched, &s_spec, &slow, &FomOptions::new(0.05), grid).unwrap();
        let track = impacted_track(&s_spec, &imp, 1).unwrap();
        let stepper = SlowStepper::new(&track, SlowOptions { zy_source: ZySource::Grid, ..SlowOptions::default() }).unwrap();
        let perm = ci_permanent(&imp, &stepper, 1, &slow, 500, 0.9, 9).unwrap();

        let path = frozen_path_for(&f_spec, &fast, 0.1);
        let (v, trades) = value_nonpermanent(&sched, &path).unwrap();
        let ftrack = LimitTrack::build(&f_spec, &fast, grid, 0.05, 1, InterpOrder::Linear).unwrap();
        let fstepper = FastStepper::new(&ftrack).unwrap();
        let non = ci_nonpermanent(v, &trades, &fstepper, &fast, 500, 0.9, 9).unwrap();
        assert!(non.standard.width() < perm.standard.width(), "{} vs {}", non.standard.width(), perm.standard.width());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn value_decreases_per_share_and_depth_inverts(x1 in 0.01f64..2.0, extra in 0.0f64..2.0) {
            let spec = block_spec(1.3, 4.0);
            let path = frozen_path(&spec, 0.1);
            let book = path.u_snapshot(0);
            let c = depth_for_shares(&book, x1, 0).unwrap();
            prop_assert!((book.integral_between(-c, 0.0) - x1).abs() < 1e-12);
            let v = |x: f64| value_nonpermanent(&LiquidationSchedule::new(vec![0.0], vec![x]).unwrap(), &path).unwrap().0;
            let (a, b) = (v(x1), v(x1 + extra));
            prop_assert!(b / (x1 + extra) <= a / x1 + 1e-12);
        }
    }
}
