//! Coefficient bundle of the order book model and the built-in specifications.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::regime::{RegimeKind, ScalingRegime};
use crate::scalar::{fd_step, lit, normal_cdf, normal_pdf, Real};

/// `(b, y) -> value`.
pub type Coef<T> = Arc<dyn Fn(T, T) -> T + Send + Sync>;
/// `(b, y, x) -> value`.
pub type Density<T> = Arc<dyn Fn(T, T, T) -> T + Send + Sync>;
/// `x -> value`.
pub type Profile<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
/// Conditional sampler given `(b, y)`.
pub type Sampler<T> = Arc<dyn Fn(T, T, &mut dyn RngCore) -> T + Send + Sync>;

/// Normalizer of the placement density `C (x-10)²(x+10)²` on `[-10, 10]`.
pub const PLACEMENT_NORMALIZER: f64 = 3.0 / 320_000.0;

#[derive(Clone)]
pub struct ModelSpec<T> {
    pub name: String,
    /// Event intensities of the discrete model at the current level.
    pub pa_n: Coef<T>,
    pub pb_n: Coef<T>,
    /// Limit intensities.
    pub pa: Coef<T>,
    pub pb: Coef<T>,
    /// Rescaled intensity difference of the fast regime.
    pub p_diff: Option<Coef<T>>,
    pub f: Density<T>,
    pub g: Density<T>,
    pub f_b: Option<Density<T>>,
    pub f_y: Option<Density<T>>,
    pub p_b: Option<Coef<T>>,
    pub p_y: Option<Coef<T>>,
    pub h: Profile<T>,
    pub h_prime: Option<Profile<T>>,
    pub omega: Sampler<T>,
    pub pi: Sampler<T>,
    pub b0: T,
    pub u0: Profile<T>,
    pub bound: T,
    /// Midpoint points per cell when projecting callables.
    pub refine: usize,
}

impl<T: Real> std::fmt::Debug for ModelSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("b0", &self.b0)
            .field("bound", &self.bound)
            .finish_non_exhaustive()
    }
}

impl<T: Real> ModelSpec<T> {
    /// Limit drift `p^{B-A} = p^B - p^A`.
    pub fn p_ba(&self, b: T, y: T) -> T {
        (self.pb)(b, y) - (self.pa)(b, y)
    }

    /// `σ_B = (p^A + p^B)^{1/2}` of the limit intensities.
    pub fn sigma_b(&self, b: T, y: T) -> T {
        ((self.pa)(b, y) + (self.pb)(b, y)).max(T::zero()).sqrt()
    }

    pub fn p_b_at(&self, b: T, y: T) -> T {
        match &self.p_b {
            Some(p) => p(b, y),
            None => {
                let e = fd_step(b);
                (self.p_ba(b + e, y) - self.p_ba(b - e, y)) / (e + e)
            }
        }
    }

    pub fn p_y_at(&self, b: T, y: T) -> T {
        match &self.p_y {
            Some(p) => p(b, y),
            None => {
                let e = fd_step(y);
                (self.p_ba(b, y + e) - self.p_ba(b, y - e)) / (e + e)
            }
        }
    }

    pub fn f_b_at(&self, b: T, y: T, x: T) -> T {
        match &self.f_b {
            Some(d) => d(b, y, x),
            None => {
                let e = fd_step(b);
                ((self.f)(b + e, y, x) - (self.f)(b - e, y, x)) / (e + e)
            }
        }
    }

    pub fn f_y_at(&self, b: T, y: T, x: T) -> T {
        match &self.f_y {
            Some(d) => d(b, y, x),
            None => {
                let e = fd_step(y);
                ((self.f)(b, y + e, x) - (self.f)(b, y - e, x)) / (e + e)
            }
        }
    }

    /// Cell averages of `phi` with this model's refinement.
    pub fn project(&self, grid: Grid<T>, phi: impl Fn(T) -> T) -> Result<GridFunction<T>> {
        GridFunction::project(grid, self.refine, phi)
    }

    /// `f(b, y; · - shift)` as cell averages.
    pub fn f_grid_shifted(&self, b: T, y: T, shift: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| (self.f)(b, y, x - shift))
    }

    pub fn f_grid(&self, b: T, y: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.f_grid_shifted(b, y, T::zero(), grid)
    }

    pub fn g_grid(&self, b: T, y: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| (self.g)(b, y, x))
    }

    pub fn f_b_grid(&self, b: T, y: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| self.f_b_at(b, y, x))
    }

    pub fn f_y_grid(&self, b: T, y: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| self.f_y_at(b, y, x))
    }

    pub fn h_grid(&self, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| (self.h)(x))
    }

    /// `h(· - shift)` as cell averages.
    pub fn h_grid_shifted(&self, shift: T, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| (self.h)(x - shift))
    }

    pub fn h_prime_grid(&self, grid: Grid<T>) -> Result<GridFunction<T>> {
        match &self.h_prime {
            Some(d) => self.project(grid, |x| d(x)),
            None => Ok(self.h_grid(grid)?.central_derivative()),
        }
    }

    pub fn u0_grid(&self, grid: Grid<T>) -> Result<GridFunction<T>> {
        self.project(grid, |x| (self.u0)(x))
    }

    /// Draws `(ω, π)` for a C-event.
    pub fn sample_order(&self, b: T, y: T, rng: &mut dyn RngCore) -> (T, T) {
        let omega = (self.omega)(b, y, rng);
        let pi = (self.pi)(b, y, rng);
        (omega, pi)
    }

    /// Startup checks against a regime and a grid.
    pub fn validate(&self, regime: &ScalingRegime<T>, grid: &Grid<T>) -> Result<()> {
        if !(self.bound > T::zero()) {
            return Err(Error::InvalidModel(format!("bound M must be positive, got {}", self.bound)));
        }
        if !self.b0.is_finite() {
            return Err(Error::InvalidModel("B0 is not finite".into()));
        }
        let margin = lit::<T>(5.0) * grid.tick();
        if grid.bound() < self.bound + margin {
            return Err(Error::InvalidGrid(format!(
                "window {} does not cover M={} plus five ticks",
                grid.bound(),
                self.bound
            )));
        }
        for i in 0..grid.len() {
            let x = grid.center(i);
            let v = (self.u0)(x);
            if !v.is_finite() || v < T::zero() || v > self.bound {
                return Err(Error::InvalidModel(format!("u0({x}) = {v} outside [0, M]")));
            }
            if x.abs() > self.bound + grid.tick() && v != T::zero() {
                return Err(Error::InvalidModel(format!("u0 has support at {x}, outside [-M, M]")));
            }
        }
        let dp = regime.dp();
        for k in -40..=40 {
            let y = lit::<T>(k as f64 * 0.25);
            let total = dp * ((self.pa_n)(self.b0, y) + (self.pb_n)(self.b0, y));
            if !(total <= T::one()) {
                return Err(Error::InvalidModel(format!("price event probability {total} exceeds one at y={y}")));
            }
        }
        if regime.kind() == RegimeKind::Fast && self.p_diff.is_none() {
            return Err(Error::config("model", "fast regime requires the rescaled drift p"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialShape {
    /// `u0 = scale · ρ` with `ρ` the placement density.
    Density { scale: f64 },
    /// `u0 = level` on `(-width, 0]`.
    Block { level: f64, width: f64 },
    Zero,
}

impl Default for InitialShape {
    fn default() -> Self {
        InitialShape::Density { scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub lambda: f64,
    /// Placement density normalizer; fixed by normalization, accepted only to be checked.
    pub normalizer: Option<f64>,
    pub b0: f64,
    pub u0: InitialShape,
    // constant-test parameters
    pub p_a: f64,
    pub p_b: f64,
    pub p_drift: f64,
    pub omega: f64,
    pub pi_lo: f64,
    pub pi_hi: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            normalizer: None,
            b0: 1.0,
            u0: InitialShape::default(),
            p_a: 0.5,
            p_b: 0.5,
            p_drift: 0.0,
            omega: 1.0,
            pi_lo: -1.0,
            pi_hi: 0.0,
        }
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["example-3-10", "example-fast", "constant-test"];

/// `ρ(x) = C (x-10)²(x+10)²` on `[-10, 10]`.
pub fn placement_density<T: Real>(x: T) -> T {
    let ten = lit::<T>(10.0);
    if x.abs() > ten {
        T::zero()
    } else {
        let q = x * x - ten * ten;
        lit::<T>(PLACEMENT_NORMALIZER) * q * q
    }
}

/// `h(x) = -(λx)³ e^{λx}` for `x ≤ 0`.
pub fn volume_kernel<T: Real>(lambda: T) -> (Profile<T>, Profile<T>) {
    let h: Profile<T> = Arc::new(move |x: T| {
        if x > T::zero() {
            T::zero()
        } else {
            let z = lambda * x;
            -(z * z * z) * z.exp()
        }
    });
    let dh: Profile<T> = Arc::new(move |x: T| {
        if x > T::zero() {
            T::zero()
        } else {
            let z = lambda * x;
            -lambda * z * z * (lit::<T>(3.0) + z) * z.exp()
        }
    });
    (h, dh)
}

fn initial_profile<T: Real>(shape: &InitialShape) -> Result<Profile<T>> {
    Ok(match *shape {
        InitialShape::Density { scale } => {
            if !(scale >= 0.0) {
                return Err(Error::config("model.u0.scale", "must be non-negative"));
            }
            let s = lit::<T>(scale);
            Arc::new(move |x| s * placement_density(x))
        }
        InitialShape::Block { level, width } => {
            if !(level >= 0.0) || !(width > 0.0) {
                return Err(Error::config("model.u0", "block needs level >= 0 and width > 0"));
            }
            let (l, w) = (lit::<T>(level), lit::<T>(width));
            Arc::new(move |x| if x > -w && x <= T::zero() { l } else { T::zero() })
        }
        InitialShape::Zero => Arc::new(|_| T::zero()),
    })
}

/// `P(ω = +1) = e^{-y³} ∧ 1`, otherwise `ω = -1`.
fn sign_sampler<T: Real>() -> Sampler<T> {
    Arc::new(|_b, y, rng| {
        let p = (-(y * y * y)).exp().min(T::one());
        if lit::<T>(rng.random::<f64>()) < p {
            T::one()
        } else {
            -T::one()
        }
    })
}

/// `π = 20·Beta(3,3) - 10`, whose density is `ρ`.
fn placement_sampler<T: Real>() -> Sampler<T> {
    let beta = Beta::new(3.0, 3.0).expect("valid beta parameters");
    Arc::new(move |_b, _y, rng| lit(20.0 * beta.sample(rng) - 10.0))
}

fn expected_sign<T: Real>(y: T) -> T {
    let yp = y.max(T::zero());
    lit::<T>(2.0) * (-(yp * yp * yp)).exp() - T::one()
}

fn expected_sign_dy<T: Real>(y: T) -> T {
    if y > T::zero() {
        lit::<T>(-6.0) * y * y * (-(y * y * y)).exp()
    } else {
        T::zero()
    }
}

fn check_normalizer(params: &ModelParams) -> Result<()> {
    if let Some(c) = params.normalizer {
        if (c - PLACEMENT_NORMALIZER).abs() > 1e-12 * PLACEMENT_NORMALIZER {
            return Err(Error::config(
                "model.normalizer",
                format!("placement density integrates to one only for C = 3/320000, got {c}"),
            ));
        }
    }
    if !(params.lambda > 0.0) {
        return Err(Error::config("model.lambda", "must be positive"));
    }
    if !params.b0.is_finite() {
        return Err(Error::config("model.b0", "must be finite"));
    }
    Ok(())
}

impl<T: Real> ModelSpec<T> {
    pub fn builtin(name: &str, params: &ModelParams, regime: &ScalingRegime<T>) -> Result<Self> {
        match name {
            "example-3-10" => Self::example_3_10(params),
            "example-fast" => Self::example_fast(params, regime),
            "constant-test" => Self::constant_test(params),
            other => Err(Error::config(
                "model.name",
                format!("unknown built-in `{other}`, expected one of {BUILTIN_NAMES:?}"),
            )),
        }
    }

    fn example_common(params: &ModelParams, name: &str) -> Result<Self> {
        check_normalizer(params)?;
        let (h, dh) = volume_kernel(lit::<T>(params.lambda));
        let pa: Coef<T> = Arc::new(|b, y| b / (T::one() + b) * (T::one() - normal_cdf(y)));
        let pb: Coef<T> = {
            let pa = pa.clone();
            Arc::new(move |b, y| T::one() - pa(b, y))
        };
        Ok(Self {
            name: name.to_string(),
            pa_n: pa.clone(),
            pb_n: pb.clone(),
            pa,
            pb,
            p_diff: None,
            f: Arc::new(|_b, y, x| expected_sign(y) * placement_density(x)),
            g: Arc::new(|_b, _y, x| placement_density(x)),
            f_b: Some(Arc::new(|_b, _y, _x| T::zero())),
            f_y: Some(Arc::new(|_b, y, x| expected_sign_dy(y) * placement_density(x))),
            p_b: Some(Arc::new(|b, y| {
                let d = T::one() + b;
                lit::<T>(-2.0) * (T::one() - normal_cdf(y)) / (d * d)
            })),
            p_y: Some(Arc::new(|b, y| lit::<T>(2.0) * b * normal_pdf(y) / (T::one() + b))),
            h,
            h_prime: Some(dh),
            omega: sign_sampler(),
            pi: placement_sampler(),
            b0: lit(params.b0),
            u0: initial_profile(&params.u0)?,
            bound: lit(10.0),
            refine: 3,
        })
    }

    /// Price moves driven by the standing volume near the touch; slow or first-order scaling.
    pub fn example_3_10(params: &ModelParams) -> Result<Self> {
        Self::example_common(params, "example-3-10")
    }

    /// Variant whose price intensities differ by `Δt^{α-1/2}`, for the fast regime.
    pub fn example_fast(params: &ModelParams, regime: &ScalingRegime<T>) -> Result<Self> {
        let mut spec = Self::example_common(params, "example-fast")?;
        let p: Coef<T> = Arc::new(|b, y| b * (T::one() - normal_cdf(y)) / (T::one() + b));
        let tilt = regime.dt().powf(regime.alpha() - lit(0.5));
        spec.pa_n = p.clone();
        spec.pb_n = {
            let p = p.clone();
            Arc::new(move |b, y| (T::one() + tilt) * p(b, y))
        };
        spec.pa = p.clone();
        spec.pb = p.clone();
        spec.p_diff = Some(p);
        spec.p_b = None;
        spec.p_y = None;
        Ok(spec)
    }

    /// Constant intensities, deterministic order size and uniform placements on `[pi_lo, pi_hi]`.
    pub fn constant_test(params: &ModelParams) -> Result<Self> {
        check_normalizer(params)?;
        let (pa, pb) = (lit::<T>(params.p_a), lit::<T>(params.p_b));
        if !(params.p_a >= 0.0 && params.p_b >= 0.0) {
            return Err(Error::config("model.p_a", "intensities must be non-negative"));
        }
        if !(params.pi_hi > params.pi_lo) {
            return Err(Error::config("model.pi_hi", "placement interval must be non-empty"));
        }
        let (lo, hi) = (lit::<T>(params.pi_lo), lit::<T>(params.pi_hi));
        let omega = lit::<T>(params.omega);
        let drift = lit::<T>(params.p_drift);
        let width = hi - lo;
        let inside = move |x: T| x >= lo && x <= hi;
        let (h, dh) = volume_kernel(lit::<T>(params.lambda));
        let bound = lit::<T>(10.0f64.max(params.pi_lo.abs()).max(params.pi_hi.abs()).max(params.omega.abs()));
        Ok(Self {
            name: "constant-test".into(),
            pa_n: Arc::new(move |_, _| pa),
            pb_n: Arc::new(move |_, _| pb),
            pa: Arc::new(move |_, _| pa),
            pb: Arc::new(move |_, _| pb),
            p_diff: Some(Arc::new(move |_, _| drift)),
            f: Arc::new(move |_, _, x| if inside(x) { omega / width } else { T::zero() }),
            g: Arc::new(move |_, _, x| if inside(x) { omega * omega / width } else { T::zero() }),
            f_b: Some(Arc::new(|_, _, _| T::zero())),
            f_y: Some(Arc::new(|_, _, _| T::zero())),
            p_b: Some(Arc::new(|_, _| T::zero())),
            p_y: Some(Arc::new(|_, _| T::zero())),
            h,
            h_prime: Some(dh),
            omega: Arc::new(move |_, _, _| omega),
            pi: Arc::new(move |_, _, rng| lo + width * lit::<T>(rng.random::<f64>())),
            b0: lit(params.b0),
            u0: initial_profile(&params.u0)?,
            bound,
            refine: 3,
        })
    }
}
