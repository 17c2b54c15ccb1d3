//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Settings and tolerances are pinned here. Criteria listed in `KNOWN_RED` are
//! reported as FAIL without failing the target; see the decisions ledger.

use std::fs;
use std::path::Path;
use std::time::Instant;

use lobscale::liquidation::{depth_for_shares, value_nonpermanent, LiquidationSchedule};
use lobscale::simulator::path_seed;
use lobscale::{
    solve_first_order, FomOptions, Grid, GridFunction, InitialShape, ModelParams, ModelSpec, RegimeKind, ScalingRegime,
    Shift, Simulator,
};
use lobscale_cli::config::{ExperimentKind, RunConfig};
use lobscale_cli::{run, Criterion};

/// Criterion 2 fails its own lattice preflight at dt = 1e-4.
const KNOWN_RED: &[&str] = &["2"];

const EXACT_TOL: f64 = 1e-12;

struct Line {
    id: String,
    passed: bool,
    gating: bool,
    text: String,
}

fn preset(kind: ExperimentKind, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::preset(kind);
    cfg.out = out.join(kind.name());
    cfg
}

fn fast(cfg: &mut RunConfig) {
    cfg.scaling.regime = RegimeKind::Fast;
    cfg.scaling.alpha = 0.6;
    cfg.scaling.beta = None;
    cfg.model.name = "example-fast".into();
}

fn slow(cfg: &mut RunConfig) {
    cfg.scaling.regime = RegimeKind::Slow;
    cfg.scaling.alpha = 0.4;
    cfg.scaling.beta = None;
    cfg.model.name = "example-3-10".into();
}

fn lines_of(criteria: Vec<Criterion>, secs: f64) -> Vec<Line> {
    criteria
        .into_iter()
        .map(|c| Line {
            gating: !c.diagnostic,
            text: format!("{} [{secs:.0}s]: {}", c.description, c.detail),
            id: c.id,
            passed: c.passed,
        })
        .collect()
}

fn timed(f: impl FnOnce() -> Vec<Criterion>) -> Vec<Line> {
    let t0 = Instant::now();
    let c = f();
    lines_of(c, t0.elapsed().as_secs_f64())
}

fn lln(out: &Path) -> Vec<Line> {
    let mut cfg = preset(ExperimentKind::LlnSweep, out);
    slow(&mut cfg);
    cfg.scaling.dt = 1e-2;
    let e = &mut cfg.experiment;
    e.dt_levels = vec![1e-2, 1e-3, 1e-4];
    e.paths = 100;
    e.solver_dt = 1e-3;
    e.excursion = 2.0;
    timed(|| run(&cfg).unwrap().criteria)
}

fn fast_clt(out: &Path) -> Vec<Line> {
    let mut cfg = preset(ExperimentKind::FastClt, out);
    fast(&mut cfg);
    cfg.scaling.dt = 1e-4;
    let e = &mut cfg.experiment;
    e.paths = 2000;
    e.limit_paths = Some(2000);
    e.solver_dt = 1e-2;
    e.dt_sde = 1e-2;
    e.limit_tick = 0.05;
    e.excursion = 0.5;
    // the kernel line is reported once, over all built-ins, by `kernels`
    timed(|| run(&cfg).unwrap().criteria.into_iter().filter(|c| c.id != "7").collect())
}

fn ou(out: &Path) -> Vec<Line> {
    let mut cfg = preset(ExperimentKind::OuConsistency, out);
    fast(&mut cfg);
    cfg.scaling.dt = 1e-4;
    let e = &mut cfg.experiment;
    e.limit_tick = 0.05;
    e.dt_sde = 2.5e-3;
    e.refinements = 3;
    e.paths = 50;
    timed(|| run(&cfg).unwrap().criteria)
}

fn ito_wentzell(out: &Path) -> Vec<Line> {
    let mut cfg = preset(ExperimentKind::ItoWentzell, out);
    slow(&mut cfg);
    cfg.scaling.dt = 1e-4;
    let e = &mut cfg.experiment;
    e.mesh_levels = vec![[0.02, 0.1], [0.01, 0.05], [0.005, 0.025]];
    e.paths = 50;
    e.excursion = 2.0;
    timed(|| run(&cfg).unwrap().criteria)
}

fn slow_clt(out: &Path) -> Vec<Line> {
    let mut cfg = preset(ExperimentKind::SlowClt, out);
    slow(&mut cfg);
    cfg.scaling.dt = 1e-4;
    let e = &mut cfg.experiment;
    e.paths = 1000;
    e.limit_paths = Some(1000);
    e.solver_dt = 1e-3;
    e.dt_sde = 5e-3;
    e.limit_tick = 0.025;
    e.excursion = 2.0;
    timed(|| run(&cfg).unwrap().criteria)
}

/// Every built-in model that has a fast-regime noise kernel.
fn kernels(out: &Path) -> Vec<Line> {
    timed(|| {
        let mut all = vec![];
        for model in ["example-fast", "example-3-10", "constant-test"] {
            let mut cfg = preset(ExperimentKind::KernelCheck, out);
            fast(&mut cfg);
            cfg.model.name = model.into();
            cfg.out = out.join(format!("kernel-{model}"));
            let mut c = run(&cfg).unwrap().criteria.remove(0);
            c.detail = format!("{model}: {}", c.detail);
            all.push(c);
        }
        let passed = all.iter().all(|c| c.passed);
        let detail = all.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ");
        let mut c = all.remove(0);
        c.passed = passed;
        c.detail = detail;
        vec![c]
    })
}

fn liquidation(out: &Path) -> Vec<Line> {
    let mut a = preset(ExperimentKind::Liquidation, out);
    fast(&mut a);
    a.scaling.dt = 1e-4;
    a.out = out.join("liquidation-nonpermanent");
    let e = &mut a.experiment;
    e.schedule.slices = 10;
    e.schedule.total = 0.5;
    e.paths = 500;
    e.limit_paths = Some(2000);
    e.limit_tick = 0.01;
    e.dt_sde = 1e-2;
    e.excursion = 2.0;
    e.confidence = 0.9;

    let mut b = a.clone();
    slow(&mut b);
    b.out = out.join("liquidation-permanent");
    b.experiment.permanent = true;
    b.experiment.schedule.total = 0.1;
    b.experiment.limit_tick = 0.05;
    b.experiment.excursion = 3.0;

    let mut lines = timed(|| run(&a).unwrap().criteria);
    lines.extend(timed(|| run(&b).unwrap().criteria));
    lines
}

fn exactness() -> Vec<Line> {
    let mut worst: [f64; 4] = [0.0; 4];

    // shift inverse on interior-supported functions
    let grid = Grid::new(0.05, -40, 40).unwrap();
    let f = GridFunction::project(grid, 4, |x: f64| if x.abs() < 1.5 { (3.0 * x).cos() + 1.2 } else { 0.0 }).unwrap();
    for k in 1..8 {
        let mut g = f.clone();
        g.shift_cells(k);
        g.shift_cells(-k);
        let (down, _) = f.shifted(Shift::Minus);
        let (back, _) = down.shifted(Shift::Plus);
        let err = f.values().iter().zip(g.values()).chain(f.values().iter().zip(back.values())).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(err);
    }

    // mass bookkeeping along simulated paths
    let params = ModelParams {
        p_a: 0.3,
        p_b: 0.2,
        omega: 1.0,
        pi_lo: -2.0,
        pi_hi: 0.5,
        u0: InitialShape::Block { level: 1.0, width: 3.0 },
        ..ModelParams::default()
    };
    let spec = ModelSpec::<f64>::constant_test(&params).unwrap();
    let regime = ScalingRegime::new(1e-4, 0.6, 0.5, 1.0, RegimeKind::FirstOrderOnly).unwrap();
    let sim = Simulator::with_excursion(&spec, regime, 1.0).unwrap();
    let m0 = sim.initial_state().u.integral();
    for p in 0..4 {
        sim.run(path_seed(11, p), |_, s| {
            let m = s.u.integral();
            worst[1] = worst[1].max((m - (m0 + s.placed - s.lost)).abs() / m0.max(m));
            Ok(())
        })
        .unwrap();
    }

    // depth inversion on a smooth book
    let grid = Grid::new(0.01, -300, 100).unwrap();
    let u = GridFunction::project(grid, 4, |y: f64| if y <= 0.0 && y > -2.5 { 1.0 + 0.3 * y.sin() } else { 0.0 }).unwrap();
    let total = u.integral();
    for i in 1..50 {
        let x = total * i as f64 / 50.0;
        let c = depth_for_shares(&u, x, 0).unwrap();
        worst[2] = worst[2].max((u.integral_between(-c, 0.0) - x).abs());
    }

    // block book value, limit and discrete side
    let mut frozen = ModelSpec::<f64>::constant_test(&ModelParams { p_a: 0.0, p_b: 0.0, ..params }).unwrap();
    frozen.omega = std::sync::Arc::new(|_, _, _| 0.0);
    let regime = ScalingRegime::new(1e-3, 0.6, 0.5, 1.0, RegimeKind::FirstOrderOnly).unwrap();
    let sim = Simulator::with_excursion(&frozen, regime, 2.0).unwrap();
    let path = solve_first_order(&frozen, &regime, &FomOptions::new(0.01), *sim.grid()).unwrap();
    let b0 = frozen.b0;
    for x in [0.1, 0.5, 1.3, 2.9] {
        let exact = b0 * x - x * x / 2.0;
        let (v, _) = value_nonpermanent(&LiquidationSchedule::new(vec![0.0], vec![x]).unwrap(), &path).unwrap();
        let fill = sim.quote_sell(&sim.initial_state(), x, 0).unwrap();
        worst[3] = worst[3].max((v - exact).abs()).max((fill.revenue - exact).abs());
    }

    let passed = worst.iter().all(|&w| w <= EXACT_TOL);
    vec![Line {
        id: "9".into(),
        passed,
        gating: true,
        text: format!(
            "exactness suite, tolerance {EXACT_TOL:e}: shift {:.1e}, mass {:.1e}, depth {:.1e}, block value {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    }]
}

fn csv_bodies(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(out: &Path) -> Vec<Line> {
    let mut checked = vec![];
    let mut passed = true;
    let mut configs = vec![];
    let mut fo = preset(ExperimentKind::FirstOrder, out);
    fo.experiment.paths = 20;
    configs.push(fo);
    let mut ou = preset(ExperimentKind::OuConsistency, out);
    fast(&mut ou);
    ou.experiment.paths = 8;
    configs.push(ou);
    let mut clt = preset(ExperimentKind::SlowClt, out);
    clt.scaling.dt = 1e-3;
    clt.experiment.paths = 500;
    clt.experiment.excursion = 2.0;
    configs.push(clt);
    for (i, base) in configs.into_iter().enumerate() {
        let mut a = base.clone();
        a.out = out.join(format!("det-{i}-a"));
        a.parallelism = Some(1);
        let mut b = base;
        b.out = out.join(format!("det-{i}-b"));
        b.parallelism = None;
        let ra = run(&a).unwrap();
        let rb = run(&b).unwrap();
        let (fa, fb) = (csv_bodies(&a.out), csv_bodies(&b.out));
        let same = ra.config_hash == rb.config_hash && !fa.is_empty() && fa == fb;
        passed &= same;
        checked.push(format!("{} ({} csv files{})", a.experiment.name.name(), fa.len(), if same { "" } else { ", DIFFER" }));
    }
    vec![Line {
        id: "10".into(),
        passed,
        gating: true,
        text: format!("re-runs with the same config hash give byte-identical CSV (1 thread vs pool): {}", checked.join(", ")),
    }]
}

fn main() {
    // `cargo test -- --list` and filtered runs
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let _ = env_logger::builder().is_test(true).try_init();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let t0 = Instant::now();

    let mut lines = vec![];
    lines.extend(lln(out));
    lines.extend(fast_clt(out));
    lines.extend(ou(out));
    lines.extend(ito_wentzell(out));
    lines.extend(slow_clt(out));
    lines.extend(kernels(out));
    lines.extend(liquidation(out));
    lines.extend(exactness());
    lines.extend(determinism(out));
    lines.sort_by_key(|l| {
        let digits: String = l.id.chars().take_while(|c| c.is_ascii_digit()).collect();
        (digits.parse::<u32>().unwrap_or(99), l.id.clone())
    });

    let mut unexpected = vec![];
    for l in &lines {
        let known = KNOWN_RED.contains(&l.id.as_str());
        let tag = match (l.passed, l.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (diagnostic)",
        };
        let note = match (known, l.passed) {
            (true, false) => " [known red]",
            (true, true) => " [listed as known red; revisit the ledger]",
            _ => "",
        };
        println!("criterion {:<3} {tag}{note}  {}", l.id, l.text);
        if !l.passed && l.gating && !known {
            unexpected.push(l.id.clone());
        }
    }
    println!("acceptance finished in {:.0}s", t0.elapsed().as_secs_f64());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
