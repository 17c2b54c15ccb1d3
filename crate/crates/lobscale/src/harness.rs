//! Rescaled fluctuations of the discrete book, their limit-side counterparts and
//! the statistical comparisons between the two.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fom::{solve_first_order, FomOptions, LimitPath, LimitTrack};
use crate::grid::{bump, Grid, InterpOrder, TestFunction};
use crate::model::ModelSpec;
use crate::regime::{RegimeKind, ScalingRegime};
use crate::simulator::{path_rng, path_seed, Simulator};
use crate::som_fast::{zy_ou_reference, FastLimitState, FastNoise, FastStepper, KernelDiagnostics, NoiseKernel};
use crate::som_slow::{SlowOptions, SlowStepper, VolterraKernel};
use crate::stats::{self, KsReport, Moments};

/// Fractions of the horizon at which marginals are compared.
pub const OBSERVATION_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];

/// Smallest sample accepted on either side of a marginal comparison.
pub const MIN_PATHS: usize = 500;

const BUMP_CENTERS: [f64; 5] = [-5.0, -3.0, -1.5, -0.5, 0.5];
const BUMP_WIDTH: f64 = 1.0;

/// Five bumps across the book plus `h`.
pub fn standard_family(spec: &ModelSpec<f64>, grid: Grid<f64>) -> Result<Vec<TestFunction<f64>>> {
    let mut out = Vec::with_capacity(BUMP_CENTERS.len() + 1);
    for &c in &BUMP_CENTERS {
        let (f, df) = bump(c, BUMP_WIDTH);
        out.push(TestFunction::from_fns(format!("bump{c:+}"), grid, f, df)?);
    }
    out.push(TestFunction { name: "h".into(), phi: spec.h_grid(grid)?, dphi: spec.h_prime_grid(grid)? });
    Ok(out)
}

/// Event indices of the observation times (the state at the last event not after `t`).
pub fn observation_steps(regime: &ScalingRegime<f64>) -> Vec<usize> {
    OBSERVATION_FRACTIONS.iter().map(|q| ((q * regime.horizon() / regime.dt()) + 1e-9).floor() as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FluctuationSample {
    pub path: usize,
    pub regime: RegimeKind,
    pub times: Vec<f64>,
    pub zb: Vec<f64>,
    pub zy: Vec<f64>,
    /// `pairings[i][m] = ⟨Z^u(times[i]), φ_m⟩`.
    pub pairings: Vec<Vec<f64>>,
    /// Event step of the discrete model (limit samples carry the regime's step too).
    pub dt: f64,
    /// `sup_t |B^(n) - B|` and `sup_t |Y^(n) - Y|` over every event (discrete samples only).
    pub sup_b: Option<f64>,
    pub sup_y: Option<f64>,
}

/// First-order values on the simulator grid at the observation times.
#[derive(Clone, Debug)]
pub struct LimitReference {
    pub regime: ScalingRegime<f64>,
    pub path: LimitPath<f64>,
    pub family: Vec<TestFunction<f64>>,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub pairings: Vec<Vec<f64>>,
}

impl LimitReference {
    /// Solves on `grid` (the simulator grid) with RK4 step `solver_dt`.
    pub fn new(spec: &ModelSpec<f64>, regime: &ScalingRegime<f64>, grid: Grid<f64>, solver_dt: f64) -> Result<Self> {
        let path = solve_first_order(spec, regime, &FomOptions::new(solver_dt), grid)?;
        let family = standard_family(spec, grid)?;
        let steps = observation_steps(regime);
        let times: Vec<f64> = steps.iter().map(|&k| k as f64 * regime.dt()).collect();
        let mut b = vec![];
        let mut y = vec![];
        let mut pairings = vec![];
        for &t in &times {
            b.push(path.b_at(t));
            y.push(path.y_at(t));
            let u = path.u_at_time(t);
            pairings.push(family.iter().map(|phi| u.dot(&phi.phi)).collect());
        }
        Ok(Self { regime: *regime, path, family, steps, times, b, y, pairings })
    }
}

fn scale_of(regime: &ScalingRegime<f64>) -> Result<f64> {
    regime
        .fluctuation_scale()
        .ok_or_else(|| Error::config("scaling.regime", "fluctuations need the fast or slow regime"))
}

/// Runs one discrete path and rescales its deviations from the first-order limit.
/// Between events the discrete state is held constant.
pub fn extract_fluctuations(
    sim: &Simulator<'_, f64>,
    reference: &LimitReference,
    seed: u64,
    path_id: usize,
) -> Result<FluctuationSample> {
    let regime = sim.regime();
    if regime.kind() != reference.regime.kind() || regime.dt() != reference.regime.dt() {
        return Err(Error::config(
            "scaling",
            format!("sample regime {:?} does not match the limit regime {:?}", regime.kind(), reference.regime.kind()),
        ));
    }
    if sim.grid() != &reference.path.grid {
        return Err(Error::GridMismatch("limit reference must be solved on the simulator grid".into()));
    }
    let scale = scale_of(regime)?;
    let dt = regime.dt();
    let n_obs = reference.steps.len();
    let mut zb = Vec::with_capacity(n_obs);
    let mut zy = Vec::with_capacity(n_obs);
    let mut pairings = Vec::with_capacity(n_obs);
    let (mut sup_b, mut sup_y) = (0.0f64, 0.0f64);
    let mut next = 0;
    sim.run(seed, |_, s| {
        let t = s.k as f64 * dt;
        sup_b = sup_b.max((s.b - reference.path.b_at(t)).abs());
        sup_y = sup_y.max((s.y - reference.path.y_at(t)).abs());
        while next < n_obs && reference.steps[next] == s.k {
            zb.push((s.b - reference.b[next]) / scale);
            zy.push((s.y - reference.y[next]) / scale);
            pairings.push(
                reference.family.iter().zip(&reference.pairings[next]).map(|(phi, &lim)| (s.u.dot(&phi.phi) - lim) / scale).collect(),
            );
            next += 1;
        }
        Ok(())
    })?;
    Ok(FluctuationSample {
        path: path_id,
        regime: regime.kind(),
        times: reference.times.clone(),
        zb,
        zy,
        pairings,
        dt,
        sup_b: Some(sup_b),
        sup_y: Some(sup_y),
    })
}

/// Discrete samples in parallel; aborted paths are dropped and counted.
pub fn discrete_samples(
    sim: &Simulator<'_, f64>,
    reference: &LimitReference,
    paths: usize,
    seed: u64,
) -> Result<(Vec<FluctuationSample>, usize)> {
    let results: Vec<Result<FluctuationSample>> =
        (0..paths).into_par_iter().map(|p| extract_fluctuations(sim, reference, path_seed(seed, p as u64), p)).collect();
    let mut out = Vec::with_capacity(paths);
    let mut aborted = 0;
    for r in results {
        match r {
            Ok(s) => out.push(s),
            Err(Error::PathAborted(msg)) => {
                log::warn!("{msg}");
                aborted += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, aborted))
}

fn track_nodes(track: &LimitTrack<f64>, times: &[f64]) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let k = track.node_of(t);
            if (track.nodes[k].t - t).abs() > 1e-9 {
                return Err(Error::Argument(format!("observation time {t} is not a node of the limit track")));
            }
            Ok(k)
        })
        .collect()
}

/// Fast-regime limit samples of `(Z^B, Z^Y, ⟨Z^u, φ⟩)` at `times`.
pub fn limit_samples_fast(
    stepper: &FastStepper<'_, f64>,
    family: &[TestFunction<f64>],
    times: &[f64],
    paths: usize,
    seed: u64,
) -> Result<Vec<FluctuationSample>> {
    let nodes = track_nodes(stepper.track, times)?;
    Ok((0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut s = FluctuationSample {
                path: p,
                regime: RegimeKind::Fast,
                times: times.to_vec(),
                zb: vec![],
                zy: vec![],
                pairings: vec![],
                dt: stepper.track.dt,
                sup_b: None,
                sup_y: None,
            };
            stepper.run(&mut rng, |k, st| {
                for _ in nodes.iter().filter(|&&n| n == k) {
                    s.zb.push(st.zb);
                    s.zy.push(st.zy);
                    s.pairings.push(family.iter().map(|phi| st.zu.dot(&phi.phi)).collect());
                }
            });
            s
        })
        .collect())
}

/// Slow-regime limit samples; pairings come from the weak-form `Z^u`.
pub fn limit_samples_slow(
    stepper: &SlowStepper<'_, f64>,
    family: &[TestFunction<f64>],
    times: &[f64],
    paths: usize,
    seed: u64,
) -> Result<Vec<FluctuationSample>> {
    let nodes = track_nodes(stepper.track, times)?;
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut s = FluctuationSample {
                path: p,
                regime: RegimeKind::Slow,
                times: times.to_vec(),
                zb: vec![],
                zy: vec![],
                pairings: vec![],
                dt: stepper.track.dt,
                sup_b: None,
                sup_y: None,
            };
            stepper.run(&mut rng, |st| {
                for _ in nodes.iter().filter(|&&n| n == st.k) {
                    s.zb.push(st.zb);
                    s.zy.push(st.zy);
                    s.pairings.push(family.iter().map(|phi| st.zu.dot(&phi.phi)).collect());
                }
                Ok(())
            })?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PairingComparison {
    pub name: String,
    pub discrete: Moments,
    pub limit: Moments,
    /// `(mean_d - mean_l) / sqrt(se_d² + se_l²)`.
    pub mean_z: f64,
    pub var_ratio: f64,
    /// Standard error of `var_ratio` by the delta method.
    pub var_ratio_se: f64,
    pub cov_zb_discrete: f64,
    pub cov_zb_limit: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginalReport {
    pub t: f64,
    pub zb: KsReport,
    pub zy: KsReport,
    pub pairings: Vec<PairingComparison>,
}

fn column(samples: &[FluctuationSample], f: impl Fn(&FluctuationSample) -> f64) -> Vec<f64> {
    samples.iter().map(f).collect()
}

/// KS tests for `Z^B` and `Z^Y` and moment comparisons for every pairing at
/// observation index `i`.
pub fn compare_marginals(
    discrete: &[FluctuationSample],
    limit: &[FluctuationSample],
    names: &[String],
    i: usize,
) -> Result<MarginalReport> {
    let got = discrete.len().min(limit.len());
    if got < MIN_PATHS {
        return Err(Error::InsufficientSample { needed: MIN_PATHS, got });
    }
    for s in discrete.iter().chain(limit) {
        if s.zb.len() <= i || s.pairings[i].len() != names.len() {
            return Err(Error::Argument(format!("sample {} lacks observation {i}", s.path)));
        }
    }
    let zb_d = column(discrete, |s| s.zb[i]);
    let zb_l = column(limit, |s| s.zb[i]);
    let zy_d = column(discrete, |s| s.zy[i]);
    let zy_l = column(limit, |s| s.zy[i]);
    let mut pairings = Vec::with_capacity(names.len());
    for (m, name) in names.iter().enumerate() {
        let d = column(discrete, |s| s.pairings[i][m]);
        let l = column(limit, |s| s.pairings[i][m]);
        let (md, ml) = (stats::moments(&d)?, stats::moments(&l)?);
        let se = (md.se_mean.powi(2) + ml.se_mean.powi(2)).sqrt();
        let ratio = if ml.var > 0.0 { md.var / ml.var } else { f64::NAN };
        let ratio_se = ratio * ((md.se_var / md.var).powi(2) + (ml.se_var / ml.var).powi(2)).sqrt();
        pairings.push(PairingComparison {
            name: name.clone(),
            mean_z: if se > 0.0 { (md.mean - ml.mean) / se } else { 0.0 },
            var_ratio: ratio,
            var_ratio_se: ratio_se,
            cov_zb_discrete: stats::covariance(&zb_d, &d)?,
            cov_zb_limit: stats::covariance(&zb_l, &l)?,
            discrete: md,
            limit: ml,
        });
    }
    Ok(MarginalReport {
        t: discrete[0].times[i],
        zb: stats::ks_test(&zb_d, &zb_l)?,
        zy: stats::ks_test(&zy_d, &zy_l)?,
        pairings,
    })
}

/// Tick lattice of `Z^B` against the KS resolution: passes when the lattice is
/// below a quarter of the critical distance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Preflight {
    pub lattice: f64,
    pub critical: f64,
    pub level: f64,
    pub passed: bool,
}

pub fn lattice_preflight(regime: &ScalingRegime<f64>, n: usize, m: usize, level: f64) -> Result<Preflight> {
    let lattice = regime
        .lattice_spacing()
        .ok_or_else(|| Error::config("scaling.regime", "lattice check needs the fast or slow regime"))?;
    let critical = stats::ks_critical(level, n, m)?;
    Ok(Preflight { lattice, critical, level, passed: lattice < 0.25 * critical })
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelRow {
    pub dt: f64,
    pub paths: usize,
    pub aborted: usize,
    pub median_sup_b: f64,
    pub median_sup_y: f64,
    /// KS distance of `Z^B(T)` against limit samples, when requested.
    pub ks_zb: Option<f64>,
    pub lattice: Option<f64>,
}

/// Settings of one convergence sweep.
#[derive(Clone, Debug)]
pub struct SweepSetup {
    pub dts: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    pub solver_dt: f64,
    pub excursion: f64,
    /// Limit-side KS comparison of `Z^B(T)`: `(paths, dt_sde, tick)`.
    pub clt: Option<(usize, f64, f64)>,
}

/// Median sup-deviations per level, optionally with the `Z^B(T)` KS distance.
pub fn convergence_sweep<F>(base: &ScalingRegime<f64>, model: F, setup: &SweepSetup) -> Result<Vec<LevelRow>>
where
    F: Fn(&ScalingRegime<f64>) -> Result<ModelSpec<f64>>,
{
    if setup.dts.len() < 3 {
        return Err(Error::Argument(format!("a sweep needs at least 3 levels, got {}", setup.dts.len())));
    }
    let mut rows = vec![];
    for (level, &dt) in setup.dts.iter().enumerate() {
        let regime = base.with_dt(dt)?;
        let spec = model(&regime)?;
        let sim = Simulator::with_excursion(&spec, regime, setup.excursion)?;
        let reference = LimitReference::new(&spec, &regime, *sim.grid(), setup.solver_dt.min(dt))?;
        let level_seed = path_seed(setup.seed, level as u64);
        let (samples, aborted) = discrete_samples(&sim, &reference, setup.paths, level_seed)?;
        let sup_b: Vec<f64> = samples.iter().filter_map(|s| s.sup_b).collect();
        let sup_y: Vec<f64> = samples.iter().filter_map(|s| s.sup_y).collect();
        let ks_zb = match setup.clt {
            Some((m, dt_sde, tick)) => {
                let last = reference.times.len() - 1;
                let limit = limit_zb(&spec, &regime, dt_sde, tick, setup.excursion, m, level_seed ^ LIMIT_STREAM)?;
                Some(stats::ks_statistic(&column(&samples, |s| s.zb[last]), &limit)?)
            }
            None => None,
        };
        let row = LevelRow {
            dt,
            paths: samples.len(),
            aborted,
            median_sup_b: stats::median(&sup_b)?,
            median_sup_y: stats::median(&sup_y)?,
            ks_zb,
            lattice: regime.lattice_spacing(),
        };
        log::info!("level dt={dt}: median sup|B|={:.4e} sup|Y|={:.4e}", row.median_sup_b, row.median_sup_y);
        rows.push(row);
    }
    Ok(rows)
}

/// Separates discrete and limit random streams.
const LIMIT_STREAM: u64 = 0x11_a17_5eed;

fn limit_grid(spec: &ModelSpec<f64>, tick: f64, excursion: f64) -> Result<Grid<f64>> {
    Grid::covering(tick, crate::simulator::window_half_width(spec, tick, excursion))
}

fn limit_zb(
    spec: &ModelSpec<f64>,
    regime: &ScalingRegime<f64>,
    dt_sde: f64,
    tick: f64,
    excursion: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let grid = limit_grid(spec, tick, excursion)?;
    let track = LimitTrack::build(spec, regime, grid, dt_sde, 2, InterpOrder::Linear)?;
    let family = standard_family(spec, grid)?;
    let t = [regime.horizon()];
    let samples = match regime.kind() {
        RegimeKind::Fast => limit_samples_fast(&FastStepper::new(&track)?, &family, &t, paths, seed)?,
        RegimeKind::Slow => limit_samples_slow(&SlowStepper::new(&track, SlowOptions::default())?, &family, &t, paths, seed)?,
        RegimeKind::FirstOrderOnly => return Err(Error::config("scaling.regime", "no second-order limit")),
    };
    Ok(samples.iter().map(|s| s.zb[0]).collect())
}

/// Settings of a discrete-vs-limit CLT comparison.
#[derive(Clone, Debug)]
pub struct CltSetup {
    pub discrete_paths: usize,
    pub limit_paths: usize,
    pub seed: u64,
    pub solver_dt: f64,
    pub dt_sde: f64,
    pub limit_tick: f64,
    pub excursion: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltReport {
    pub regime: RegimeKind,
    pub dt: f64,
    pub preflight_1pct: Preflight,
    pub preflight_5pct: Preflight,
    pub kernel: Option<KernelDiagnostics<f64>>,
    pub aborted: usize,
    pub marginals: Vec<MarginalReport>,
    pub names: Vec<String>,
    #[serde(skip)]
    pub discrete: Vec<FluctuationSample>,
    #[serde(skip)]
    pub limit: Vec<FluctuationSample>,
}

/// Discrete simulator against limit SDE samples at the observation times.
pub fn clt_experiment(spec: &ModelSpec<f64>, regime: &ScalingRegime<f64>, setup: &CltSetup) -> Result<CltReport> {
    let sim = Simulator::with_excursion(spec, *regime, setup.excursion)?;
    let reference = LimitReference::new(spec, regime, *sim.grid(), setup.solver_dt)?;
    let (discrete, aborted) = discrete_samples(&sim, &reference, setup.discrete_paths, setup.seed)?;

    let grid = limit_grid(spec, setup.limit_tick, setup.excursion)?;
    let track = LimitTrack::build(spec, regime, grid, setup.dt_sde, 2, InterpOrder::Linear)?;
    let family = standard_family(spec, grid)?;
    let seed = setup.seed ^ LIMIT_STREAM;
    let (limit, kernel) = match regime.kind() {
        RegimeKind::Fast => {
            let stepper = FastStepper::new(&track)?;
            (limit_samples_fast(&stepper, &family, &reference.times, setup.limit_paths, seed)?, Some(stepper.kernel_summary()))
        }
        RegimeKind::Slow => {
            let stepper = SlowStepper::new(&track, SlowOptions::default())?;
            (limit_samples_slow(&stepper, &family, &reference.times, setup.limit_paths, seed)?, None)
        }
        RegimeKind::FirstOrderOnly => return Err(Error::config("scaling.regime", "no second-order limit")),
    };
    let names: Vec<String> = family.iter().map(|f| f.name.clone()).collect();
    let marginals = (0..reference.times.len()).map(|i| compare_marginals(&discrete, &limit, &names, i)).collect::<Result<_>>()?;
    Ok(CltReport {
        regime: regime.kind(),
        dt: regime.dt(),
        preflight_1pct: lattice_preflight(regime, discrete.len(), limit.len(), 0.01)?,
        preflight_5pct: lattice_preflight(regime, discrete.len(), limit.len(), 0.05)?,
        kernel,
        aborted,
        marginals,
        names,
        discrete,
        limit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OuLevel {
    pub dt: f64,
    /// Mean over paths of `sup_t |⟨Z^u, h⟩ - Z^Y_OU|`.
    pub mean_sup_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OuReport {
    pub levels: Vec<OuLevel>,
    /// `gap(dt/2) / gap(dt)` for consecutive levels.
    pub ratios: Vec<f64>,
}

/// Grid SDE pairing with `h` against the scalar OU reference driven by the same
/// increments. Level `l` uses every `2^l`-th node of `track` with merged noise,
/// so all levels share one Brownian path.
pub fn ou_consistency(stepper: &FastStepper<'_, f64>, levels: usize, paths: usize, seed: u64) -> Result<OuReport> {
    let track = stepper.track;
    let coarsest = 1usize << (levels.max(1) - 1);
    if track.steps() % coarsest != 0 {
        return Err(Error::Argument(format!("{} track steps do not split into strides of {coarsest}", track.steps())));
    }
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut noise: Vec<FastNoise<f64>> =
                (0..track.steps()).map(|_| FastNoise::draw(&mut rng, stepper.cells(), track.dt)).collect();
            (0..levels)
                .map(|l| {
                    if l > 0 {
                        noise = noise.chunks(2).map(|c| FastNoise::merge(&c[0], &c[1])).collect();
                    }
                    let stride = 1usize << l;
                    let dt = track.dt * stride as f64;
                    let mut state = FastLimitState::zero(track);
                    let mut drive = vec![];
                    let mut grid_zy = vec![0.0];
                    for (j, n) in noise.iter().enumerate() {
                        let inc = stepper.step(&mut state, j * stride, dt, n);
                        drive.push(inc.d_drive_h);
                        grid_zy.push(state.zy);
                    }
                    let ou = zy_ou_reference(track, stride, &drive);
                    grid_zy.iter().zip(&ou).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    let levels_out: Vec<OuLevel> = (0..levels)
        .map(|l| OuLevel {
            dt: track.dt * (1usize << l) as f64,
            mean_sup_gap: per_path.iter().map(|g| g[l]).sum::<f64>() / paths.max(1) as f64,
        })
        .collect();
    let ratios = levels_out.windows(2).map(|w| w[0].mean_sup_gap / w[1].mean_sup_gap).collect();
    Ok(OuReport { levels: levels_out, ratios })
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceLevel {
    pub dt: f64,
    pub tick: f64,
    /// Mean over paths of the largest `|weak - Volterra|` over nodes and bumps.
    pub gap: f64,
    /// `gap / (dt + tick)`.
    pub constant: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub levels: Vec<EquivalenceLevel>,
    /// `max C / min C` over levels.
    pub constant_spread: f64,
}

/// Weak-form `Z^u` pairings against their Volterra evaluation on the same Brownian
/// paths. The Brownian path is drawn at the finest `dt` and summed for coarser levels,
/// whose `dt` must be integer multiples of the finest.
pub fn ito_wentzell(
    spec: &ModelSpec<f64>,
    regime: &ScalingRegime<f64>,
    levels: &[(f64, f64)],
    paths: usize,
    seed: u64,
    excursion: f64,
) -> Result<EquivalenceReport> {
    let finest = levels.iter().map(|l| l.0).fold(f64::INFINITY, f64::min);
    let n_fine = (regime.horizon() / finest).round() as usize;
    let fine_dw: Vec<Vec<f64>> = (0..paths)
        .map(|p| {
            use rand::Rng;
            let mut rng = path_rng(seed, p as u64);
            (0..n_fine).map(|_| finest.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        })
        .collect();
    let mut out = vec![];
    for &(dt, tick) in levels {
        let ratio = dt / finest;
        let stride = ratio.round() as usize;
        if (ratio - stride as f64).abs() > 1e-9 {
            return Err(Error::Argument(format!("level dt {dt} is not a multiple of {finest}")));
        }
        let grid = limit_grid(spec, tick, excursion)?;
        let track = LimitTrack::build(spec, regime, grid, dt, 2, InterpOrder::Linear)?;
        let stepper = SlowStepper::new(&track, SlowOptions::default())?;
        let family: Vec<TestFunction<f64>> =
            standard_family(spec, grid)?.into_iter().take(BUMP_CENTERS.len()).collect();
        let cap = stepper.options.history_cap;
        let kernels: Vec<VolterraKernel<f64>> =
            family.iter().map(|phi| VolterraKernel::build(&track, phi, cap)).collect::<Result<_>>()?;
        let gaps: Vec<f64> = fine_dw
            .par_iter()
            .map(|dw| {
                let mut state = stepper.initial_state();
                let mut worst = 0.0f64;
                for chunk in dw.chunks(stride) {
                    stepper.step(&mut state, chunk.iter().sum())?;
                    for (phi, kernel) in family.iter().zip(&kernels) {
                        let weak = state.zu.dot(&phi.phi);
                        let volterra = stepper.pairing(kernel, &state)?;
                        worst = worst.max((weak - volterra).abs());
                    }
                }
                Ok(worst)
            })
            .collect::<Result<_>>()?;
        let gap = gaps.iter().sum::<f64>() / paths.max(1) as f64;
        log::info!("equivalence level dt={dt} tick={tick}: gap {gap:.4e}");
        out.push(EquivalenceLevel { dt, tick, gap, constant: gap / (dt + tick) });
    }
    let cs: Vec<f64> = out.iter().map(|l| l.constant).collect();
    let spread = cs.iter().copied().fold(0.0, f64::max) / cs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EquivalenceReport { levels: out, constant_spread: spread })
}

/// Largest projection delta and clamped-cell count of the placement-noise kernels
/// along the first-order track of `spec`.
pub fn kernel_check(spec: &ModelSpec<f64>, regime: &ScalingRegime<f64>, tick: f64, dt_sde: f64) -> Result<KernelDiagnostics<f64>> {
    let grid = limit_grid(spec, tick, 0.0)?;
    let track = LimitTrack::build(spec, regime, grid, dt_sde, 1, InterpOrder::Linear)?;
    let mut out = KernelDiagnostics::<f64>::default();
    for node in &track.nodes {
        let d = NoiseKernel::from_node(node)?.diagnostics;
        out.clamped_cells += d.clamped_cells;
        out.projection_delta = out.projection_delta.max(d.projection_delta);
        out.rank_one_weight = out.rank_one_weight.max(d.rank_one_weight);
    }
    Ok(out)
}

/// `sup_t |B^(n) - B|` and `sup_t |Y^(n) - Y|` of one discrete path, any regime.
pub fn sup_deviation(sim: &Simulator<'_, f64>, path: &LimitPath<f64>, seed: u64) -> Result<(f64, f64)> {
    let dt = sim.regime().dt();
    let (mut sb, mut sy) = (0.0f64, 0.0f64);
    sim.run(seed, |_, s| {
        let t = s.k as f64 * dt;
        sb = sb.max((s.b - path.b_at(t)).abs());
        sy = sy.max((s.y - path.y_at(t)).abs());
        Ok(())
    })?;
    Ok((sb, sy))
}
