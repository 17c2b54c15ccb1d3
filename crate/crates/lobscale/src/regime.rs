//! Scaling parameters of the n-th discrete model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

const EXPONENT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    /// Fluctuations rescaled by `sqrt(dt)`; first-order price is constant.
    Fast,
    /// Fluctuations rescaled by `sqrt(dx)`; first-order price moves.
    Slow,
    FirstOrderOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRegime<T> {
    dt: T,
    alpha: T,
    beta: T,
    horizon: T,
    kind: RegimeKind,
}

impl<T: Real> ScalingRegime<T> {
    pub fn new(dt: T, alpha: T, beta: T, horizon: T, kind: RegimeKind) -> Result<Self> {
        let tol = lit::<T>(EXPONENT_TOL);
        let half = lit::<T>(0.5);
        let one = T::one();
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidRegime(format!("dt must be positive, got {dt}")));
        }
        if !(alpha > T::zero() && alpha < one) {
            return Err(Error::InvalidRegime(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if beta < one - alpha - tol {
            return Err(Error::InvalidRegime(format!("beta must be at least 1-alpha, got beta={beta}, alpha={alpha}")));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidRegime(format!("horizon must be positive, got {horizon}")));
        }
        match kind {
            RegimeKind::Fast => {
                if !(alpha > half) {
                    return Err(Error::InvalidRegime(format!("fast regime needs alpha in (1/2,1), got {alpha}")));
                }
                if (beta - lit::<T>(2.0) * (one - alpha)).abs() > tol {
                    return Err(Error::InvalidRegime(format!("fast regime needs beta = 2(1-alpha), got beta={beta}")));
                }
            }
            RegimeKind::Slow => {
                if !(alpha < half) {
                    return Err(Error::InvalidRegime(format!("slow regime needs alpha in (0,1/2), got {alpha}")));
                }
                if (beta - (one - alpha)).abs() > tol {
                    return Err(Error::InvalidRegime(format!("slow regime needs beta = 1-alpha, got beta={beta}")));
                }
            }
            RegimeKind::FirstOrderOnly => {}
        }
        let regime = Self { dt, alpha, beta, horizon, kind };
        if regime.steps() < 1 {
            return Err(Error::InvalidRegime(format!("horizon {horizon} shorter than one step {dt}")));
        }
        Ok(regime)
    }

    pub fn fast(dt: T, alpha: T, horizon: T) -> Result<Self> {
        Self::new(dt, alpha, lit::<T>(2.0) * (T::one() - alpha), horizon, RegimeKind::Fast)
    }

    pub fn slow(dt: T, alpha: T, horizon: T) -> Result<Self> {
        Self::new(dt, alpha, T::one() - alpha, horizon, RegimeKind::Slow)
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.dt
    }

    #[inline]
    pub fn alpha(&self) -> T {
        self.alpha
    }

    #[inline]
    pub fn beta(&self) -> T {
        self.beta
    }

    #[inline]
    pub fn horizon(&self) -> T {
        self.horizon
    }

    #[inline]
    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    /// Order size scale `Δv = Δt`.
    #[inline]
    pub fn dv(&self) -> T {
        self.dt
    }

    /// Tick size `Δx = Δt^α`.
    #[inline]
    pub fn dx(&self) -> T {
        self.dt.powf(self.alpha)
    }

    /// Price event probability scale `Δp = Δt^β`.
    #[inline]
    pub fn dp(&self) -> T {
        self.dt.powf(self.beta)
    }

    /// Number of events `T_n = floor(T/Δt)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt + lit(1e-9)).floor().to_usize().unwrap_or(0)
    }

    /// Whether the first-order price moves (`β = 1 - α`).
    pub fn transport_active(&self) -> bool {
        (self.beta - (T::one() - self.alpha)).abs() <= lit(EXPONENT_TOL)
    }

    /// `sqrt(Δ)` with `Δ = Δt` (fast) or `Δx` (slow).
    pub fn fluctuation_scale(&self) -> Option<T> {
        match self.kind {
            RegimeKind::Fast => Some(self.dt.sqrt()),
            RegimeKind::Slow => Some(self.dx().sqrt()),
            RegimeKind::FirstOrderOnly => None,
        }
    }

    /// Spacing of the price fluctuation lattice in Z-units.
    pub fn lattice_spacing(&self) -> Option<T> {
        self.fluctuation_scale().map(|s| self.dx() / s)
    }

    /// Same exponents and horizon at a different event step.
    pub fn with_dt(&self, dt: T) -> Result<Self> {
        Self::new(dt, self.alpha, self.beta, self.horizon, self.kind)
    }
}
