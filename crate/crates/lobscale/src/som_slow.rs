//! Slow-regime second-order limit: the coupled `(Z^B, Z^Y)` system, the Volterra
//! representation of `⟨Z^u, φ⟩` and the weak-form transport equation for `Z^u`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::LimitTrack;
use crate::grid::{GridFunction, InterpOrder, TestFunction};
use crate::scalar::{lit, Real};

pub const DEFAULT_HISTORY_CAP: usize = 4096;

/// Which `Z^Y` feeds the `Z^B` drift and the `f_y Z^Y` source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZySource {
    /// Scalar Volterra form over the stored history.
    #[default]
    Volterra,
    /// `⟨Z^u, h⟩` from the weak-form grid function.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry<T> {
    /// Track node index.
    pub k: usize,
    pub t: T,
    pub zb: T,
    pub zy: T,
    /// Brownian increment that led into this node (zero at the first node).
    pub dw: T,
}

/// Stored `(s, Z^B_s, Z^Y_s, dW_s)` at track nodes that are multiples of `stride`.
/// Exceeding the cap keeps every other node and doubles the stride.
#[derive(Clone, Debug, PartialEq)]
pub struct History<T> {
    cap: usize,
    stride: usize,
    entries: Vec<HistoryEntry<T>>,
}

impl<T: Real> History<T> {
    pub fn new(cap: usize) -> Self {
        Self { cap: cap.max(2), stride: 1, entries: Vec::new() }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn entries(&self) -> &[HistoryEntry<T>] {
        &self.entries
    }

    pub fn push(&mut self, entry: HistoryEntry<T>) {
        if entry.k % self.stride != 0 {
            return;
        }
        self.entries.push(entry);
        if self.entries.len() > self.cap {
            let next = self.stride * 2;
            self.entries.retain(|e| e.k % next == 0);
            self.stride = next;
            log::warn!("history exceeded {} nodes; coarsened to every {} steps", self.cap, next);
        }
    }

    /// Stored node indices (without the entries), replaying the same decimation.
    fn replay(cap: usize, steps: usize) -> Vec<Vec<usize>> {
        let mut h = History::<f64>::new(cap);
        let mut out = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            h.push(HistoryEntry { k, t: 0.0, zb: 0.0, zy: 0.0, dw: 0.0 });
            out.push(h.entries.iter().map(|e| e.k).collect());
        }
        out
    }
}

/// Trapezoid weights on the (possibly nonuniform) nodes `times`.
fn trapezoid_weights<T: Real>(times: &[T]) -> Vec<T> {
    let n = times.len();
    let half = lit::<T>(0.5);
    (0..n)
        .map(|j| {
            let left = if j > 0 { times[j] - times[j - 1] } else { T::zero() };
            let right = if j + 1 < n { times[j + 1] - times[j] } else { T::zero() };
            half * (left + right)
        })
        .collect()
}

/// History nodes at step `k`, always ending at `k`.
fn nodes_at(stored: &[usize], k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = stored.iter().copied().filter(|&i| i < k).collect();
    v.push(k);
    v
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct KernelEntry<T> {
    node: usize,
    weight: T,
    kb: T,
    ky: T,
    kf: T,
    /// `⟨u_0, φ'(· + B_0 - B_k)⟩`, only meaningful at `node == 0`.
    c0: T,
}

/// Precomputed shifted inner products for one test function:
/// `⟨f_b(s), φ(·+B_s-B_t)⟩`, `⟨f_y(s), φ(·+B_s-B_t)⟩`, `⟨f(s), φ'(·+B_s-B_t)⟩`
/// on the history nodes of every step, and `⟨u_t, φ'⟩`.
#[derive(Clone, Debug)]
pub struct VolterraKernel<T> {
    pub name: String,
    rows: Vec<Vec<KernelEntry<T>>>,
    c: Vec<T>,
    cap: usize,
}

impl<T: Real> VolterraKernel<T> {
    pub fn build(track: &LimitTrack<T>, phi: &TestFunction<T>, cap: usize) -> Result<Self> {
        if phi.phi.grid() != &track.grid {
            return Err(Error::GridMismatch(format!("test function {} is not on the track grid", phi.name)));
        }
        let steps = track.steps();
        let stored = History::<T>::replay(cap, steps);
        let times: Vec<T> = track.nodes.iter().map(|n| n.t).collect();
        let mut rows = Vec::with_capacity(steps + 1);
        let mut c = Vec::with_capacity(steps + 1);
        let mut shifted = GridFunction::zeros(track.grid);
        let mut shifted_d = GridFunction::zeros(track.grid);
        for k in 0..=steps {
            let prev = if k == 0 { &stored[0] } else { &stored[k - 1] };
            let nodes = nodes_at(prev, k);
            let ts: Vec<T> = nodes.iter().map(|&i| times[i]).collect();
            let w = trapezoid_weights(&ts);
            let bk = track.nodes[k].b;
            let mut row = Vec::with_capacity(nodes.len());
            for (j, &i) in nodes.iter().enumerate() {
                let node = &track.nodes[i];
                let d = node.b - bk;
                phi.phi.sample_shifted_into(d, InterpOrder::Linear, &mut shifted);
                phi.dphi.sample_shifted_into(d, InterpOrder::Linear, &mut shifted_d);
                row.push(KernelEntry {
                    node: i,
                    weight: w[j],
                    kb: node.f_b.dot(&shifted),
                    ky: node.f_y.dot(&shifted),
                    kf: node.f.dot(&shifted_d),
                    c0: if i == 0 { node.u.dot(&shifted_d) } else { T::zero() },
                });
            }
            rows.push(row);
            c.push(track.nodes[k].u.dot(&phi.dphi));
        }
        Ok(Self { name: phi.name.clone(), rows, c, cap })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Pairing at step `k` given `Z^B`, `Z^Y` on the history nodes of step `k` and at `k`.
    fn evaluate(&self, k: usize, history: &History<T>, zb_k: T, zy_k: T) -> Result<T> {
        let row = &self.rows[k];
        let mut acc = T::zero();
        let mut stored = history.entries.iter().filter(|e| e.k < k);
        for e in row {
            let (zb, zy) = if e.node == k {
                (zb_k, zy_k)
            } else {
                let h = stored.next().ok_or(Error::Range(format!("history has no node {}", e.node)))?;
                if h.k != e.node {
                    return Err(Error::Range(format!("history node {} where {} was expected", h.k, e.node)));
                }
                (h.zb, h.zy)
            };
            acc += e.weight * ((e.kb + e.kf) * zb + e.ky * zy);
            if e.node == 0 {
                acc += e.c0 * zb;
            }
        }
        Ok(acc - zb_k * self.c[k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowLimitState<T> {
    pub zb: T,
    pub zy: T,
    pub zu: GridFunction<T>,
    pub history: History<T>,
    pub t: T,
    /// Current track node.
    pub k: usize,
}

impl<T: Real> SlowLimitState<T> {
    pub fn zero(track: &LimitTrack<T>, cap: usize) -> Self {
        Self::with_initial_zb(track, cap, T::zero())
    }

    /// Starts from `Z^B_0 = zb0`, `Z^u_0 = 0`.
    pub fn with_initial_zb(track: &LimitTrack<T>, cap: usize, zb0: T) -> Self {
        let mut history = History::new(cap);
        let zy = T::zero();
        history.push(HistoryEntry { k: 0, t: T::zero(), zb: zb0, zy, dw: T::zero() });
        Self { zb: zb0, zy, zu: GridFunction::zeros(track.grid), history, t: T::zero(), k: 0 }
    }
}

/// Values before one step, needed by the weak-form update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlowIncrement<T> {
    pub k: usize,
    pub zb_prev: T,
    pub zy_prev: T,
    pub dzb: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlowOptions {
    pub zy_source: ZySource,
    pub history_cap: usize,
}

impl Default for SlowOptions {
    fn default() -> Self {
        Self { zy_source: ZySource::Volterra, history_cap: DEFAULT_HISTORY_CAP }
    }
}

/// Shared read-only data for integrating slow-regime paths along one limit track.
pub struct SlowStepper<'a, T> {
    pub track: &'a LimitTrack<T>,
    pub options: SlowOptions,
    zy_kernel: VolterraKernel<T>,
}

impl<'a, T: Real> SlowStepper<'a, T> {
    pub fn new(track: &'a LimitTrack<T>, options: SlowOptions) -> Result<Self> {
        let h = TestFunction::from_grid("h", track.h.clone());
        let h = TestFunction { dphi: track.h_prime.clone(), ..h };
        let zy_kernel = VolterraKernel::build(track, &h, options.history_cap)?;
        Ok(Self { track, options, zy_kernel })
    }

    pub fn initial_state(&self) -> SlowLimitState<T> {
        SlowLimitState::zero(self.track, self.options.history_cap)
    }

    /// Euler-Maruyama for `Z^B` and, in Volterra mode, the implicit trapezoid
    /// solve for `Z^Y` at the new node. Records the new node in the history.
    pub fn step_zb_zy(&self, state: &mut SlowLimitState<T>, dw: T) -> Result<SlowIncrement<T>> {
        let k = state.k;
        if k >= self.track.steps() {
            return Err(Error::Range(format!("track ends at step {}", self.track.steps())));
        }
        let node = &self.track.nodes[k];
        let dt = self.track.nodes[k + 1].t - node.t;
        let (zb, zy) = (state.zb, state.zy);
        let dzb = (node.p_b * zb + node.p_y * zy) * dt + node.sigma * dw;
        state.zb = zb + dzb;
        state.k = k + 1;
        state.t = self.track.nodes[k + 1].t;
        if self.options.zy_source == ZySource::Volterra {
            state.zy = self.volterra_zy(state)?;
            state.history.push(HistoryEntry { k: state.k, t: state.t, zb: state.zb, zy: state.zy, dw });
        }
        Ok(SlowIncrement { k, zb_prev: zb, zy_prev: zy, dzb })
    }

    fn volterra_zy(&self, state: &SlowLimitState<T>) -> Result<T> {
        let k = state.k;
        let diag = self.zy_kernel.rows[k].last().expect("row ends at k");
        let explicit = self.zy_kernel.evaluate(k, &state.history, state.zb, T::zero())?;
        Ok(explicit / (T::one() - diag.weight * diag.ky))
    }

    /// `dZ^u = ∂_x u dZ^B + ∂_x Z^u dB + f_b Z^B dt + f_y Z^Y dt`, upwind in the
    /// transport term and sub-stepped so every sub-shift is at most one tick.
    pub fn step_zu_weak(&self, zu: &mut GridFunction<T>, inc: &SlowIncrement<T>) {
        let node = &self.track.nodes[inc.k];
        let next = &self.track.nodes[inc.k + 1];
        let dt = next.t - node.t;
        upwind_transport(zu, next.b - node.b);
        let cb = inc.zb_prev * dt;
        let cy = inc.zy_prev * dt;
        let vals = zu.values_mut();
        for i in 0..vals.len() {
            vals[i] += node.dxu.values()[i] * inc.dzb + node.f_b.values()[i] * cb + node.f_y.values()[i] * cy;
        }
    }

    pub fn step(&self, state: &mut SlowLimitState<T>, dw: T) -> Result<SlowIncrement<T>> {
        let inc = self.step_zb_zy(state, dw)?;
        self.step_zu_weak(&mut state.zu, &inc);
        if self.options.zy_source == ZySource::Grid {
            state.zy = state.zu.dot(&self.track.h);
            state.history.push(HistoryEntry { k: state.k, t: state.t, zb: state.zb, zy: state.zy, dw });
        }
        Ok(inc)
    }

    pub fn draw_dw<R: Rng>(&self, rng: &mut R, k: usize) -> T {
        let dt = self.track.nodes[k + 1].t - self.track.nodes[k].t;
        dt.sqrt() * lit::<T>(rng.sample::<f64, _>(StandardNormal))
    }

    /// Integrates one path; `observe` sees the state at every node.
    pub fn run<R: Rng>(
        &self,
        rng: &mut R,
        mut observe: impl FnMut(&SlowLimitState<T>) -> Result<()>,
    ) -> Result<SlowLimitState<T>> {
        let mut state = self.initial_state();
        observe(&state)?;
        while state.k < self.track.steps() {
            let dw = self.draw_dw(rng, state.k);
            self.step(&mut state, dw)?;
            observe(&state)?;
        }
        Ok(state)
    }

    /// `⟨Z^u_t, φ⟩` from a precomputed kernel at the state's current node.
    pub fn pairing(&self, kernel: &VolterraKernel<T>, state: &SlowLimitState<T>) -> Result<T> {
        kernel.evaluate(state.k, &state.history, state.zb, state.zy)
    }
}

/// `w ← w + dB ∂_x w` with one-sided differences taken toward the side the profile
/// is read from; zero outside the grid.
pub fn upwind_transport<T: Real>(w: &mut GridFunction<T>, db: T) {
    if db == T::zero() {
        return;
    }
    let tick = w.grid().tick();
    let subs = (db.abs() / tick).ceil().to_usize().unwrap_or(1).max(1);
    let c = db / tick / lit(subs as f64);
    let n = w.values().len();
    let mut old = w.values().to_vec();
    for _ in 0..subs {
        old.copy_from_slice(w.values());
        let vals = w.values_mut();
        if c > T::zero() {
            for i in 0..n {
                let right = if i + 1 < n { old[i + 1] } else { T::zero() };
                vals[i] = old[i] + c * (right - old[i]);
            }
        } else {
            for i in 0..n {
                let left = if i > 0 { old[i - 1] } else { T::zero() };
                vals[i] = old[i] + c * (old[i] - left);
            }
        }
    }
}

/// Direct (table-free) evaluation of the four-term representation of `⟨Z^u_t, φ⟩`
/// at track node `k` from a stored history.
pub fn evaluate_zu_volterra<T: Real>(
    phi: &TestFunction<T>,
    k: usize,
    history: &History<T>,
    track: &LimitTrack<T>,
) -> Result<T> {
    if k > track.steps() {
        return Err(Error::Range(format!("step {k} is beyond the track ({} steps)", track.steps())));
    }
    let entries: Vec<&HistoryEntry<T>> = history.entries.iter().filter(|e| e.k <= k).collect();
    match entries.last() {
        Some(e) if e.k == k => {}
        _ => return Err(Error::Range(format!("history does not reach step {k}"))),
    }
    if entries[0].k != 0 {
        return Err(Error::Range("history does not start at zero".into()));
    }
    let times: Vec<T> = entries.iter().map(|e| e.t).collect();
    let w = trapezoid_weights(&times);
    let bk = track.nodes[k].b;
    let mut acc = T::zero();
    for (j, e) in entries.iter().enumerate() {
        let node = &track.nodes[e.k];
        let d = node.b - bk;
        let sp = phi.phi.sample_shifted(d, InterpOrder::Linear);
        let sd = phi.dphi.sample_shifted(d, InterpOrder::Linear);
        acc += w[j] * ((node.f_b.dot(&sp) + node.f.dot(&sd)) * e.zb + node.f_y.dot(&sp) * e.zy);
        if e.k == 0 {
            acc += node.u.dot(&sd) * e.zb;
        }
    }
    let last = entries[entries.len() - 1];
    Ok(acc - last.zb * track.nodes[k].u.dot(&phi.dphi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{bump, Grid};
    use crate::model::{ModelParams, ModelSpec};
    use crate::regime::ScalingRegime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn example_track(dt: f64, tick: f64) -> LimitTrack<f64> {
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let spec = ModelSpec::example_3_10(&ModelParams::default()).unwrap();
        let grid = Grid::covering(tick, 14.0).unwrap();
        LimitTrack::build(&spec, &regime, grid, dt, 2, InterpOrder::Linear).unwrap()
    }

    fn constant_track(mutate: impl FnOnce(&mut ModelSpec<f64>)) -> LimitTrack<f64> {
        let regime = ScalingRegime::slow(1e-4, 0.4, 1.0).unwrap();
        let mut spec = ModelSpec::constant_test(&ModelParams::default()).unwrap();
        mutate(&mut spec);
        let grid = Grid::covering(0.1, 14.0).unwrap();
        LimitTrack::build(&spec, &regime, grid, 0.02, 1, InterpOrder::Linear).unwrap()
    }

    fn bumps(grid: Grid<f64>) -> Vec<TestFunction<f64>> {
        [-3.0, -1.5, -0.5]
            .iter()
            .map(|&c| {
                let (f, df) = bump(c, 1.0);
                TestFunction::from_fns(format!("bump{c}"), grid, f, df).unwrap()
            })
            .collect()
    }

    #[test]
    fn history_decimates_at_cap() {
        let mut h = History::<f64>::new(8);
        for k in 0..=20 {
            h.push(HistoryEntry { k, t: k as f64, zb: 0.0, zy: 0.0, dw: 0.0 });
        }
        assert!(h.entries().len() <= 8);
        assert_eq!(h.stride(), 4);
        assert!(h.entries().iter().all(|e| e.k % 4 == 0));
        assert_eq!(h.entries()[0].k, 0);
        let w = trapezoid_weights(&[0.0, 1.0, 3.0, 3.5]);
        assert_eq!(w, vec![0.5, 1.5, 1.25, 0.25]);
    }

    #[test]
    fn brownian_price_without_feedback() {
        let track = constant_track(|s| {
            s.f = Arc::new(|_, _, _| 0.0);
            s.g = Arc::new(|_, _, _| 0.0);
        });
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        assert!((track.nodes[0].sigma - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let end = stepper.run(&mut rng, |_| Ok(())).unwrap();
            sq += end.zb * end.zb;
        }
        let var = sq / n as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn zy_vanishes_without_sources() {
        let track = constant_track(|s| {
            s.f = Arc::new(|_, _, _| 0.0);
            s.g = Arc::new(|_, _, _| 0.0);
            s.u0 = Arc::new(|_| 0.0);
        });
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        stepper
            .run(&mut rng, |s| {
                assert_eq!(s.zy, 0.0);
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn frozen_book_pairs_with_derivative() {
        // p^A = p^B keeps B fixed; u = u0 since f = 0
        let track = constant_track(|s| {
            s.f = Arc::new(|_, _, _| 0.0);
            s.g = Arc::new(|_, _, _| 0.0);
            s.u0 = Arc::new(|x: f64| (-(x + 1.0) * (x + 1.0)).exp());
        });
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let tfs = bumps(track.grid);
        let kernels: Vec<_> = tfs.iter().map(|t| VolterraKernel::build(&track, t, 4096).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        stepper
            .run(&mut rng, |s| {
                for (tf, kern) in tfs.iter().zip(&kernels) {
                    let weak = s.zu.dot(&tf.phi);
                    let closed = track.nodes[0].dxu.dot(&tf.phi) * s.zb;
                    let volterra = stepper.pairing(kern, s)?;
                    assert!((weak - closed).abs() < 1e-12, "{weak} {closed}");
                    let by_parts = -track.nodes[0].u.dot(&tf.dphi) * s.zb;
                    assert!((volterra - by_parts).abs() < 1e-12);
                    // central difference against the analytic φ': O(tick²)
                    let gap = track.nodes[0].dxu.dot(&tf.phi) + track.nodes[0].u.dot(&tf.dphi);
                    assert!(gap.abs() < 0.02 * track.nodes[0].u.dot(&tf.dphi).abs(), "{gap}");
                    let direct = evaluate_zu_volterra(tf, s.k, &s.history, &track)?;
                    assert!((direct - volterra).abs() < 1e-10);
                }
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn zero_volatility_keeps_everything_zero() {
        let track = constant_track(|s| {
            s.pa = Arc::new(|_, _| 0.0);
            s.pb = Arc::new(|_, _| 0.0);
        });
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let end = stepper.run(&mut rng, |_| Ok(())).unwrap();
        assert_eq!(end.zb, 0.0);
        assert_eq!(end.zy, 0.0);
        assert!(end.zu.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn volterra_evaluator_matches_table_and_starts_at_zero() {
        let track = example_track(0.05, 0.1);
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let tf = &bumps(track.grid)[1];
        let kern = VolterraKernel::build(&track, tf, 4096).unwrap();
        let start = stepper.initial_state();
        assert_eq!(evaluate_zu_volterra(tf, 0, &start.history, &track).unwrap(), 0.0);
        assert!(evaluate_zu_volterra(tf, 1, &start.history, &track).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        stepper
            .run(&mut rng, |s| {
                let a = stepper.pairing(&kern, s)?;
                let b = evaluate_zu_volterra(tf, s.k, &s.history, &track)?;
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
                Ok(())
            })
            .unwrap();
    }

    /// Largest gap between the weak-form pairings and the Volterra evaluator over
    /// a few bump functions and `h`, averaged over paths that share a noise sequence.
    fn equivalence_gap(dt: f64, tick: f64, paths: usize) -> f64 {
        let track = example_track(dt, tick);
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let tfs = bumps(track.grid);
        let kernels: Vec<_> = tfs.iter().map(|t| VolterraKernel::build(&track, t, 4096).unwrap()).collect();
        let mut total = 0.0;
        for p in 0..paths {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + p as u64);
            let mut sup: f64 = 0.0;
            stepper
                .run(&mut rng, |s| {
                    for (tf, kern) in tfs.iter().zip(&kernels) {
                        sup = sup.max((s.zu.dot(&tf.phi) - stepper.pairing(kern, s)?).abs());
                    }
                    sup = sup.max((s.zu.dot(&track.h) - s.zy).abs());
                    Ok(())
                })
                .unwrap();
            total += sup;
        }
        total / paths as f64
    }

    #[test]
    fn weak_form_and_volterra_converge_together() {
        let coarse = equivalence_gap(0.04, 0.2, 8);
        let fine = equivalence_gap(0.02, 0.1, 8);
        assert!(fine < 0.75 * coarse, "{coarse} -> {fine}");
        assert!(fine < 0.1, "{fine}");
    }

    #[test]
    fn grid_source_runs_and_is_deterministic() {
        let track = example_track(0.05, 0.1);
        let options = SlowOptions { zy_source: ZySource::Grid, ..SlowOptions::default() };
        let stepper = SlowStepper::new(&track, options).unwrap();
        let a = stepper.run(&mut ChaCha8Rng::seed_from_u64(12), |_| Ok(())).unwrap();
        let b = stepper.run(&mut ChaCha8Rng::seed_from_u64(12), |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.zy, a.zu.dot(&track.h));
    }

    #[test]
    fn linear_in_initial_price_fluctuation() {
        let track = example_track(0.05, 0.1);
        let stepper = SlowStepper::new(&track, SlowOptions::default()).unwrap();
        let run = |zb0: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut s = SlowLimitState::with_initial_zb(&track, 4096, zb0);
            let mut zb = vec![s.zb];
            while s.k < track.steps() {
                let dw = stepper.draw_dw(&mut rng, s.k);
                stepper.step(&mut s, dw).unwrap();
                zb.push(s.zb);
            }
            zb
        };
        let base = run(0.0);
        let eps = 1e-3;
        let one = run(eps);
        let two = run(2.0 * eps);
        // Gronwall constant from the coefficient sizes
        let k_const = track
            .nodes
            .iter()
            .map(|n| {
                n.p_b.abs()
                    + n.p_y.abs() * (n.f_b.l2_norm() + n.f.l2_norm() + n.u.l2_norm() + 1.0) * (track.h.l2_norm() + track.h_prime.l2_norm())
            })
            .fold(0.0, f64::max);
        for k in 0..base.len() {
            let g1 = one[k] - base[k];
            let g2 = two[k] - base[k];
            assert!((g2 - 2.0 * g1).abs() < 1e-9, "{k}");
            let t = track.nodes[k].t;
            assert!(g1.abs() <= (k_const * t).exp() * eps * 1.0001, "{k}: {g1}");
        }
    }
}
