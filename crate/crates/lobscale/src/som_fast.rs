//! Fast-regime second-order limit: `Z^B` with drift `μ` and volatility `σ`, and the
//! grid-valued volume fluctuation driven by `∂_x u dZ^B` and the Gaussian field `M`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fom::{LimitTrack, TrackNode};
use crate::grid::GridFunction;
use crate::model::ModelSpec;
use crate::scalar::{exp_and_phi1, lit, safe_div, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct FastLimitState<T> {
    pub zb: T,
    pub zu: GridFunction<T>,
    pub zy: T,
    pub t: T,
}

impl<T: Real> FastLimitState<T> {
    pub fn zero(track: &LimitTrack<T>) -> Self {
        Self { zb: T::zero(), zu: GridFunction::zeros(track.grid), zy: T::zero(), t: T::zero() }
    }
}

/// `(μ(y), σ(y)) = (p(B0, y), (p^A + p^B)^{1/2}(B0, y))`.
pub fn drift_vol_price<T: Real>(y: T, spec: &ModelSpec<T>) -> Result<(T, T)> {
    let p = spec
        .p_diff
        .as_ref()
        .ok_or_else(|| Error::config("model.p_diff", "fast regime requires the rescaled drift p"))?;
    Ok((p(spec.b0, y), spec.sigma_b(spec.b0, y)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct KernelDiagnostics<T> {
    /// Cells whose variance `⟨g, e_i²⟩ - ⟨f, e_i⟩²` was negative and clamped to zero.
    pub clamped_cells: usize,
    /// Frobenius norm of the change made by the PSD projection.
    pub projection_delta: T,
    /// `Σ ⟨f, e_i⟩² / ⟨g, e_i²⟩`; the kernel is PSD iff this is at most one.
    pub rank_one_weight: T,
}

/// Covariance `Q = diag(g) - w wᵀ` of the field `M` in the cell basis
/// `e_i = 1_{cell i}/√tick`, with `w_i = √tick·f_i`, and its exact square root.
///
/// Writing `Q = D^{1/2}(I - a aᵀ)D^{1/2}` with `a = D^{-1/2} w`, the factor
/// `L = D^{1/2}(I - γ â âᵀ)`, `γ = 1 - sqrt(1 - |a|²)`, satisfies `L Lᵀ = Q`.
#[derive(Clone, Debug)]
pub struct NoiseKernel<T> {
    sqrt_d: Vec<T>,
    a_hat: Vec<T>,
    gamma: T,
    tick: T,
    diag: Vec<T>,
    w: Vec<T>,
    pub diagnostics: KernelDiagnostics<T>,
}

impl<T: Real> NoiseKernel<T> {
    pub fn new(f: &GridFunction<T>, g: &GridFunction<T>) -> Result<Self> {
        if f.grid() != g.grid() {
            return Err(Error::GridMismatch("noise kernel needs f and g on one grid".into()));
        }
        let tick = f.grid().tick();
        let st = tick.sqrt();
        let n = f.values().len();
        let mut diag = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut diagnostics = KernelDiagnostics::default();
        let mut delta_sq = T::zero();
        for i in 0..n {
            let d = g.values()[i];
            let wi = st * f.values()[i];
            let mut d_used = d.max(T::zero());
            let mut wi_used = wi;
            if d_used - wi * wi < T::zero() {
                // σ_{e_i}² < 0: keep the diagonal at zero variance
                diagnostics.clamped_cells += 1;
                let target = d_used.max(T::zero());
                let shrink = safe_div(target.sqrt(), wi.abs());
                wi_used = wi * shrink.min(T::one());
                delta_sq += (wi * wi - wi_used * wi_used) * (wi * wi - wi_used * wi_used);
                d_used = target;
            }
            diag.push(d_used);
            w.push(wi_used);
            a.push(safe_div(wi_used, d_used.sqrt()));
        }
        let s: T = a.iter().map(|&x| x * x).sum();
        diagnostics.rank_one_weight = s;
        let norm = s.sqrt();
        let (a_hat, gamma) = if s > T::one() {
            // eigenvalue 1 - s < 0 along â: project it to zero
            let dh: T = a.iter().zip(&diag).map(|(&ai, &di)| ai * ai * di / s).sum();
            delta_sq += ((s - T::one()) * dh) * ((s - T::one()) * dh);
            (a.iter().map(|&x| x / norm).collect::<Vec<_>>(), T::one())
        } else if s == T::zero() {
            (vec![T::zero(); n], T::zero())
        } else {
            (a.iter().map(|&x| x / norm).collect(), T::one() - (T::one() - s).sqrt())
        };
        diagnostics.projection_delta = delta_sq.sqrt();
        Ok(Self { sqrt_d: diag.iter().map(|d| d.sqrt()).collect(), a_hat, gamma, tick, diag, w, diagnostics })
    }

    pub fn from_node(node: &TrackNode<T>) -> Result<Self> {
        Self::new(&node.f, &node.g)
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `Q_ij` before projection.
    pub fn entry(&self, i: usize, j: usize) -> T {
        let d = if i == j { self.diag[i] } else { T::zero() };
        d - self.w[i] * self.w[j]
    }

    /// `σ_{e_i}² = (⟨g, e_i²⟩ - ⟨f, e_i⟩²) ∨ 0`.
    pub fn cell_variance(&self, i: usize) -> T {
        (self.diag[i] - self.w[i] * self.w[i]).max(T::zero())
    }

    /// `σ_φ² = (⟨g, φ²⟩ - ⟨f, φ⟩²) ∨ 0` for a grid function φ.
    pub fn variance_of(&self, phi: &GridFunction<T>) -> T {
        let st = self.tick.sqrt();
        let mut gp = T::zero();
        let mut fp = T::zero();
        for (i, &p) in phi.values().iter().enumerate() {
            let c = p * st; // ⟨e_i, φ⟩
            gp += self.diag[i] * c * c;
            fp += self.w[i] * c;
        }
        (gp - fp * fp).max(T::zero())
    }

    /// Maps standard normals `n` to cell values of a field with covariance `scale²·Q`.
    pub fn apply(&self, normals: &[T], scale: T, out: &mut [T]) {
        let s: T = self.a_hat.iter().zip(normals).map(|(&a, &z)| a * z).sum();
        let inv = T::one() / self.tick.sqrt();
        for i in 0..out.len() {
            out[i] = scale * self.sqrt_d[i] * (normals[i] - self.gamma * self.a_hat[i] * s) * inv;
        }
    }
}

/// Driving noise of one step: `dW^B` and the standard normals behind `dM`.
#[derive(Clone, Debug, PartialEq)]
pub struct FastNoise<T> {
    pub dw: T,
    pub normals: Vec<T>,
}

impl<T: Real> FastNoise<T> {
    pub fn draw<R: Rng>(rng: &mut R, cells: usize, dt: T) -> Self {
        let dw = dt.sqrt() * lit::<T>(rng.sample::<f64, _>(StandardNormal));
        let normals = (0..cells).map(|_| lit::<T>(rng.sample::<f64, _>(StandardNormal))).collect();
        Self { dw, normals }
    }

    /// Noise of a step twice as long, built from two consecutive steps.
    pub fn merge(a: &Self, b: &Self) -> Self {
        let r = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
        Self {
            dw: a.dw + b.dw,
            normals: a.normals.iter().zip(&b.normals).map(|(&x, &y)| (x + y) * r).collect(),
        }
    }
}

/// Shared read-only data for integrating many fast-regime paths.
pub struct FastStepper<'a, T> {
    pub track: &'a LimitTrack<T>,
    pub kernels: Vec<NoiseKernel<T>>,
    scratch_len: usize,
}

/// Per-step output needed by the scalar reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastIncrement<T> {
    /// `⟨h, dD⟩`: the `Z^u` increment without the `f_y Z^Y` term, paired with `h`.
    pub d_drive_h: T,
}

impl<'a, T: Real> FastStepper<'a, T> {
    pub fn new(track: &'a LimitTrack<T>) -> Result<Self> {
        if track.nodes.iter().any(|n| n.mu.is_none()) {
            return Err(Error::config("model.p_diff", "fast regime requires the rescaled drift p"));
        }
        let kernels = track.nodes.iter().map(NoiseKernel::from_node).collect::<Result<Vec<_>>>()?;
        Ok(Self { track, kernels, scratch_len: track.grid.len() })
    }

    pub fn cells(&self) -> usize {
        self.scratch_len
    }

    /// Largest projection delta and total clamped cells over all nodes.
    pub fn kernel_summary(&self) -> KernelDiagnostics<T> {
        let mut out = KernelDiagnostics::<T>::default();
        for k in &self.kernels {
            out.clamped_cells += k.diagnostics.clamped_cells;
            out.projection_delta = out.projection_delta.max(k.diagnostics.projection_delta);
            out.rank_one_weight = out.rank_one_weight.max(k.diagnostics.rank_one_weight);
        }
        out
    }

    /// Euler-Maruyama step from node `k` to `k + 1` over `dt` (a multiple of the track step).
    pub fn step(&self, state: &mut FastLimitState<T>, k: usize, dt: T, noise: &FastNoise<T>) -> FastIncrement<T> {
        let node = &self.track.nodes[k];
        let mu = node.mu.unwrap_or(T::zero());
        let sigma = node.sigma;
        let mut dm = vec![T::zero(); self.scratch_len];
        self.kernels[k].apply(&noise.normals, dt.sqrt(), &mut dm);
        let zb = state.zb;
        let zy = state.zy;
        let a = mu * dt + sigma * noise.dw;
        let cb = zb * dt;
        let cy = zy * dt;
        let h = self.track.h.values();
        let mut drive_h = T::zero();
        let mut zy_new = T::zero();
        let vals = state.zu.values_mut();
        for i in 0..vals.len() {
            let drive = node.dxu.values()[i] * a + node.f_b.values()[i] * cb + dm[i];
            vals[i] += drive + node.f_y.values()[i] * cy;
            drive_h += h[i] * drive;
            zy_new += h[i] * vals[i];
        }
        let tick = self.track.grid.tick();
        state.zb = zb + a;
        state.zy = zy_new * tick;
        state.t += dt;
        FastIncrement { d_drive_h: drive_h * tick }
    }

    /// Integrates one path with fresh noise; `observe` sees the state at every node.
    pub fn run<R: Rng>(&self, rng: &mut R, mut observe: impl FnMut(usize, &FastLimitState<T>)) -> FastLimitState<T> {
        let mut state = FastLimitState::zero(self.track);
        observe(0, &state);
        for k in 0..self.track.steps() {
            let noise = FastNoise::draw(rng, self.scratch_len, self.track.dt);
            self.step(&mut state, k, self.track.dt, &noise);
            observe(k + 1, &state);
        }
        state
    }
}

/// Single step of [`FastStepper::step`] with freshly drawn noise.
pub fn step_fast<T: Real, R: Rng>(
    stepper: &FastStepper<'_, T>,
    state: &mut FastLimitState<T>,
    k: usize,
    rng: &mut R,
) -> FastIncrement<T> {
    let noise = FastNoise::draw(rng, stepper.cells(), stepper.track.dt);
    stepper.step(state, k, stepper.track.dt, &noise)
}

/// Exponential integrator for `dZ = dD + a(t) Z dt`, treating each increment of `D`
/// as spread uniformly over its step: `Z_{k+1} = e^{A_k} Z_k + φ₁(A_k) ΔD_k` with
/// `A_k` the trapezoidal integral of `a` over the step.
pub fn ou_exponential<T: Real>(a: &[T], d_increments: &[T], dt: T) -> Vec<T> {
    let mut z = Vec::with_capacity(d_increments.len() + 1);
    z.push(T::zero());
    let half = lit::<T>(0.5) * dt;
    for (k, &dd) in d_increments.iter().enumerate() {
        let big_a = half * (a[k] + a[(k + 1).min(a.len() - 1)]);
        let (e, phi1) = exp_and_phi1(big_a);
        let prev = z[k];
        z.push(e * prev + phi1 * dd);
    }
    z
}

/// Scalar reference for `Z^Y`: `dZ^Y = d⟨D, h⟩ + Z^Y ⟨h, f_y(B0, Y_t)⟩ dt`.
pub fn zy_ou_reference<T: Real>(track: &LimitTrack<T>, stride: usize, d_drive_h: &[T]) -> Vec<T> {
    let stride = stride.max(1);
    let a: Vec<T> = track.nodes.iter().step_by(stride).map(|n| n.h_fy).collect();
    ou_exponential(&a, d_drive_h, track.dt * lit(stride as f64))
}
