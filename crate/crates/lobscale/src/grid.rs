//! Tick grid and step functions living on it.
//!
//! Cell `j` covers `((j-1)·tick, j·tick]`, so a price level `x_j = j·tick`
//! carries the volume sitting just below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, safe_div, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    tick: T,
    lo: i64,
    hi: i64,
}

impl<T: Real> Grid<T> {
    pub fn new(tick: T, lo: i64, hi: i64) -> Result<Self> {
        if !(tick > T::zero()) || !tick.is_finite() {
            return Err(Error::InvalidGrid(format!("tick must be positive, got {tick}")));
        }
        if !(lo < 0 && 0 < hi) {
            return Err(Error::InvalidGrid(format!("need lo < 0 < hi, got lo={lo}, hi={hi}")));
        }
        Ok(Self { tick, lo, hi })
    }

    /// Symmetric grid whose cells cover at least `[-half_width, half_width]`.
    pub fn covering(tick: T, half_width: T) -> Result<Self> {
        if !(half_width > T::zero()) {
            return Err(Error::InvalidGrid(format!("half width must be positive, got {half_width}")));
        }
        let n = (half_width / tick - lit(1e-9)).ceil().to_i64().unwrap_or(0).max(1);
        Self::new(tick, -n, n + 1)
    }

    #[inline]
    pub fn tick(&self) -> T {
        self.tick
    }

    #[inline]
    pub fn lo(&self) -> i64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> i64 {
        self.hi
    }

    #[inline]
    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Truncation bound `L = max(|lo|, hi)·tick`.
    pub fn bound(&self) -> T {
        lit::<T>(self.lo.unsigned_abs().max(self.hi.unsigned_abs()) as f64) * self.tick
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> i64 {
        self.lo + idx as i64
    }

    #[inline]
    pub fn index_of(&self, j: i64) -> Option<usize> {
        (j >= self.lo && j <= self.hi).then(|| (j - self.lo) as usize)
    }

    /// Index of the cell containing `x`, i.e. `ceil(x / tick)`.
    pub fn index_containing(&self, x: T) -> Option<usize> {
        self.index_of((x / self.tick).ceil().to_i64()?)
    }

    #[inline]
    pub fn right(&self, idx: usize) -> T {
        lit::<T>(self.cell(idx) as f64) * self.tick
    }

    #[inline]
    pub fn left(&self, idx: usize) -> T {
        lit::<T>((self.cell(idx) - 1) as f64) * self.tick
    }

    #[inline]
    pub fn center(&self, idx: usize) -> T {
        (lit::<T>(self.cell(idx) as f64) - lit(0.5)) * self.tick
    }

    pub fn lower_edge(&self) -> T {
        lit::<T>((self.lo - 1) as f64) * self.tick
    }

    pub fn upper_edge(&self) -> T {
        lit::<T>(self.hi as f64) * self.tick
    }

    pub fn centers(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.len()).map(move |i| self.center(i))
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shift {
    /// `T_+ f = f(· + tick)`: contents move one cell left.
    Plus,
    /// `T_- f = f(· - tick)`: contents move one cell right.
    Minus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpOrder {
    #[default]
    Linear,
    Cubic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction<T> {
    grid: Grid<T>,
    values: Vec<T>,
}

impl<T: Real> GridFunction<T> {
    pub fn zeros(grid: Grid<T>) -> Self {
        Self { grid, values: vec![T::zero(); grid.len()] }
    }

    pub fn constant(grid: Grid<T>, c: T) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "grid value".into(), location: format!("cell {}", grid.cell(i)) });
        }
        Ok(Self { grid, values })
    }

    /// Cell averages of `f` by a composite midpoint rule with `refine` points per cell.
    pub fn project(grid: Grid<T>, refine: usize, f: impl Fn(T) -> T) -> Result<Self> {
        let refine = refine.max(1);
        let sub = grid.tick() / lit(refine as f64);
        let inv = lit::<T>(1.0 / refine as f64);
        let mut values = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let left = grid.left(idx);
            let mut acc = T::zero();
            for k in 0..refine {
                let x = left + sub * (lit::<T>(k as f64) + lit(0.5));
                let fx = f(x);
                if !fx.is_finite() {
                    return Err(Error::NonFinite { what: format!("f({x})"), location: format!("cell {}", grid.cell(idx)) });
                }
                acc += fx;
            }
            values.push(acc * inv);
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Value of the step function at `x` (zero outside the window).
    pub fn at(&self, x: T) -> T {
        self.grid.index_containing(x).map_or(T::zero(), |i| self.values[i])
    }

    pub fn integral(&self) -> T {
        self.grid.tick() * self.values.iter().copied().sum::<T>()
    }

    /// `tick·Σ a_j b_j` without a grid check.
    #[inline]
    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.values.len(), other.values.len());
        let mut acc = T::zero();
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += *a * *b;
        }
        acc * self.grid.tick()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn fill(&mut self, c: T) {
        self.values.iter_mut().for_each(|v| *v = c);
    }

    pub fn scale(&mut self, a: T) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: T, x: &Self) {
        debug_assert_eq!(self.values.len(), x.values.len());
        for (s, xv) in self.values.iter_mut().zip(&x.values) {
            *s += a * *xv;
        }
    }

    /// One-cell shift in place; returns the signed mass pushed out of the window.
    pub fn shift_in_place(&mut self, dir: Shift) -> T {
        let n = self.values.len();
        let tick = self.grid.tick();
        match dir {
            Shift::Minus => {
                let lost = self.values[n - 1];
                self.values.rotate_right(1);
                self.values[0] = T::zero();
                lost * tick
            }
            Shift::Plus => {
                let lost = self.values[0];
                self.values.rotate_left(1);
                self.values[n - 1] = T::zero();
                lost * tick
            }
        }
    }

    pub fn shifted(&self, dir: Shift) -> (Self, T) {
        let mut out = self.clone();
        let lost = out.shift_in_place(dir);
        (out, lost)
    }

    /// Shifts by `k` cells (`k > 0` moves contents right, like `k` applications of `T_-`).
    pub fn shift_cells(&mut self, k: i64) -> T {
        let n = self.values.len();
        let tick = self.grid.tick();
        let m = k.unsigned_abs() as usize;
        if m == 0 {
            return T::zero();
        }
        if m >= n {
            let lost = self.integral();
            self.fill(T::zero());
            return lost;
        }
        let lost;
        if k > 0 {
            lost = self.values[n - m..].iter().copied().sum::<T>() * tick;
            self.values.rotate_right(m);
            self.values[..m].iter_mut().for_each(|v| *v = T::zero());
        } else {
            lost = self.values[..m].iter().copied().sum::<T>() * tick;
            self.values.rotate_left(m);
            self.values[n - m..].iter_mut().for_each(|v| *v = T::zero());
        }
        lost
    }

    /// `(T_+ - I) u / tick`, the discrete forward derivative.
    pub fn forward_difference(&self) -> Self {
        let n = self.values.len();
        let inv = T::one() / self.grid.tick();
        let values = (0..n)
            .map(|i| {
                let next = if i + 1 < n { self.values[i + 1] } else { T::zero() };
                (next - self.values[i]) * inv
            })
            .collect();
        Self { grid: self.grid, values }
    }

    /// Central difference derivative with zero extension beyond the window.
    pub fn central_derivative(&self) -> Self {
        let n = self.values.len();
        let inv = T::one() / (lit::<T>(2.0) * self.grid.tick());
        let values = (0..n)
            .map(|i| {
                let next = if i + 1 < n { self.values[i + 1] } else { T::zero() };
                let prev = if i > 0 { self.values[i - 1] } else { T::zero() };
                (next - prev) * inv
            })
            .collect();
        Self { grid: self.grid, values }
    }

    /// Returns `w` with `w(x) ≈ self(x + d)`, interpolating through cell centers.
    pub fn sample_shifted(&self, d: T, order: InterpOrder) -> Self {
        let mut out = Self::zeros(self.grid);
        self.sample_shifted_into(d, order, &mut out);
        out
    }

    pub fn sample_shifted_into(&self, d: T, order: InterpOrder, out: &mut Self) {
        let n = self.values.len() as i64;
        let offset = d / self.grid.tick();
        let base = offset.floor();
        let w = offset - base;
        let k = base.to_i64().unwrap_or(i64::MAX / 4);
        let get = |i: i64| if i >= 0 && i < n { self.values[i as usize] } else { T::zero() };
        if w == T::zero() {
            for (i, o) in out.values.iter_mut().enumerate() {
                *o = get(i as i64 + k);
            }
            return;
        }
        match order {
            InterpOrder::Linear => {
                let w0 = T::one() - w;
                for (i, o) in out.values.iter_mut().enumerate() {
                    let j = i as i64 + k;
                    *o = w0 * get(j) + w * get(j + 1);
                }
            }
            InterpOrder::Cubic => {
                // Catmull-Rom weights
                let w2 = w * w;
                let w3 = w2 * w;
                let h = lit::<T>(0.5);
                let c0 = h * (-w3 + lit::<T>(2.0) * w2 - w);
                let c1 = h * (lit::<T>(3.0) * w3 - lit::<T>(5.0) * w2 + lit(2.0));
                let c2 = h * (lit::<T>(-3.0) * w3 + lit::<T>(4.0) * w2 + w);
                let c3 = h * (w3 - w2);
                for (i, o) in out.values.iter_mut().enumerate() {
                    let j = i as i64 + k;
                    *o = c0 * get(j - 1) + c1 * get(j) + c2 * get(j + 1) + c3 * get(j + 2);
                }
            }
        }
    }

    fn overlap_fold(&self, a: T, b: T, mut f: impl FnMut(T, T, T)) {
        if !(b > a) {
            return;
        }
        let tick = self.grid.tick();
        let j0 = ((a / tick).ceil().to_i64().unwrap_or(i64::MIN / 4)).max(self.grid.lo());
        let j1 = ((b / tick).ceil().to_i64().unwrap_or(i64::MAX / 4)).min(self.grid.hi());
        for j in j0..=j1 {
            let idx = (j - self.grid.lo()) as usize;
            let left = self.grid.left(idx).max(a);
            let right = self.grid.right(idx).min(b);
            if right > left {
                f(self.values[idx], left, right);
            }
        }
    }

    /// Exact `∫_a^b u(x) dx` of the step function.
    pub fn integral_between(&self, a: T, b: T) -> T {
        let mut acc = T::zero();
        self.overlap_fold(a, b, |v, l, r| acc += v * (r - l));
        acc
    }

    /// Exact `∫_a^b x·u(x) dx` of the step function.
    pub fn moment_between(&self, a: T, b: T) -> T {
        let mut acc = T::zero();
        let half = lit::<T>(0.5);
        self.overlap_fold(a, b, |v, l, r| acc += v * half * (r * r - l * l));
        acc
    }

    /// Smallest `c ≥ 0` with `∫_{top-c}^{top} u = theta`.
    ///
    /// On failure returns the largest cumulative mass reachable inside the window.
    pub fn depth_below(&self, top: T, theta: T) -> std::result::Result<T, T> {
        if theta <= T::zero() {
            return Ok(T::zero());
        }
        let tick = self.grid.tick();
        let mut j = (top / tick).ceil().to_i64().unwrap_or(i64::MAX / 4).min(self.grid.hi() + 1);
        let mut cursor = top.min(self.grid.upper_edge());
        let mut cum = T::zero();
        let mut best = T::zero();
        // the part of the window above `top` is skipped by `cursor`
        if j > self.grid.hi() {
            j = self.grid.hi();
        }
        while j >= self.grid.lo() {
            let idx = (j - self.grid.lo()) as usize;
            let left = self.grid.left(idx);
            let len = cursor - left;
            if len > T::zero() {
                let v = self.values[idx];
                let piece = v * len;
                if v > T::zero() && cum + piece >= theta {
                    let rest = safe_div(theta - cum, v);
                    return Ok((top - cursor) + rest.min(len));
                }
                cum += piece;
                best = best.max(cum);
                cursor = left;
            }
            j -= 1;
        }
        Err(best)
    }

    /// Zeroes the step function on `(a, b]`, scaling partially covered cells.
    /// Returns the removed mass.
    pub fn remove_between(&mut self, a: T, b: T) -> T {
        let mut removed = T::zero();
        if !(b > a) {
            return removed;
        }
        let tick = self.grid.tick();
        let j0 = ((a / tick).ceil().to_i64().unwrap_or(i64::MIN / 4)).max(self.grid.lo());
        let j1 = ((b / tick).ceil().to_i64().unwrap_or(i64::MAX / 4)).min(self.grid.hi());
        for j in j0..=j1 {
            let idx = (j - self.grid.lo()) as usize;
            let left = self.grid.left(idx);
            let right = self.grid.right(idx);
            let l = left.max(a);
            let r = right.min(b);
            if r > l {
                let frac = (r - l) / tick;
                let v = self.values[idx];
                removed += v * (r - l);
                self.values[idx] = v * (T::one() - frac);
            }
        }
        removed
    }
}

/// `⟨a, b⟩ = tick·Σ a_j b_j`, exact for step functions.
pub fn inner_product<T: Real>(a: &GridFunction<T>, b: &GridFunction<T>) -> Result<T> {
    a.grid.check_same(&b.grid)?;
    Ok(a.dot(b))
}

/// Cell-average projection of a callable (midpoint rule, three points per cell).
pub fn project_to_grid<T: Real>(f: impl Fn(T) -> T, grid: Grid<T>) -> Result<GridFunction<T>> {
    GridFunction::project(grid, 3, f)
}

/// Value and derivative of a test function, both on the grid.
#[derive(Clone, Debug)]
pub struct TestFunction<T> {
    pub name: String,
    pub phi: GridFunction<T>,
    pub dphi: GridFunction<T>,
}

impl<T: Real> TestFunction<T> {
    pub fn from_fns(name: impl Into<String>, grid: Grid<T>, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Self> {
        Ok(Self { name: name.into(), phi: project_to_grid(f, grid)?, dphi: project_to_grid(df, grid)? })
    }

    /// Derivative by central differences of the grid values.
    pub fn from_grid(name: impl Into<String>, phi: GridFunction<T>) -> Self {
        let dphi = phi.central_derivative();
        Self { name: name.into(), phi, dphi }
    }
}

/// Smooth bump `exp(1 - 1/(1 - r²))`, `r = (x - center)/width`, and its derivative.
pub fn bump<T: Real>(center: T, width: T) -> (impl Fn(T) -> T + Clone, impl Fn(T) -> T + Clone) {
    let f = move |x: T| {
        let r = (x - center) / width;
        let q = T::one() - r * r;
        if q <= T::zero() {
            T::zero()
        } else {
            (T::one() - T::one() / q).exp()
        }
    };
    let df = move |x: T| {
        let r = (x - center) / width;
        let q = T::one() - r * r;
        if q <= T::zero() {
            T::zero()
        } else {
            let v = (T::one() - T::one() / q).exp();
            v * (lit::<T>(-2.0) * r / (q * q)) / width
        }
    };
    (f, df)
}
