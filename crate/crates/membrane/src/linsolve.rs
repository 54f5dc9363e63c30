//! Exact modewise solution of the damped linearized Cauchy problem
//!
//! ```text
//! ∂ₜ²φ + b ∂ₜφ = L_φ φ + γ(t),
//! ∂ₜ²ψ + b ∂ₜψ = f_⊤(t),
//! ```
//!
//! together with the decay-rate constant β(b), the gauge maps (the sphere
//! exponential and its derivative), and the (Y, c, v) triple splitting of a
//! linearized trajectory into a terminal tangent field, a terminal shift and
//! an exponentially decaying remainder.
//!
//! Each spectral mode with eigenvalue λ of -L evolves through the kernel
//! pair built from ω±(λ) = (-b ± √(b²-4λ))/2; zero modes use the analytic
//! (1-e^{-bt})/b kernel (t when b = 0). Duhamel integrals are accumulated
//! with composite Gauss-Legendre panels, updated exactly across panel
//! boundaries via the semigroup property of the exponential kernels.

use nalgebra::{Matrix2, Vector2, Vector3};
use num_complex::Complex64;

use crate::error::{MembraneError, Result};
use crate::fit::linear_fit;
use crate::harmonics::{GridField, SpectralField, Vec3Field};
use crate::linop::{operator_matrix, LPhiOperator, TangentField, ZeroModeProjection};

// ---------------------------------------------------------------------------
// Decay rate and mode roots
// ---------------------------------------------------------------------------

/// Guaranteed exponential decay rate for damping b > 0:
/// β = (b - √(b²-4))/3 for b >= 2, b/3 otherwise.
pub fn beta(b: f64) -> Result<f64> {
    if b <= 0.0 {
        return Err(MembraneError::NonpositiveDamping { b });
    }
    Ok(if b >= 2.0 {
        (b - (b * b - 4.0).sqrt()) / 3.0
    } else {
        b / 3.0
    })
}

/// Characteristic roots of ÿ + bẏ + λy = 0.
#[derive(Debug, Clone, Copy)]
pub struct ModeRoots {
    pub lambda: f64,
    pub b: f64,
    pub omega_plus: Complex64,
    pub omega_minus: Complex64,
}

pub fn mode_roots(b: f64, lambda: f64) -> ModeRoots {
    let disc = b * b - 4.0 * lambda;
    let (omega_plus, omega_minus) = if disc >= 0.0 {
        let s = disc.sqrt();
        (
            Complex64::new((-b + s) / 2.0, 0.0),
            Complex64::new((-b - s) / 2.0, 0.0),
        )
    } else {
        let nu = (-disc).sqrt() / 2.0;
        (Complex64::new(-b / 2.0, nu), Complex64::new(-b / 2.0, -nu))
    };
    ModeRoots {
        lambda,
        b,
        omega_plus,
        omega_minus,
    }
}

/// Relative threshold below which b² - 4λ is treated as a double root and
/// the confluent kernel is used (avoids cancellation in the ω± quotients).
const DEGENERATE_REL: f64 = 1e-9;

/// Homogeneous propagator of one mode: position kernel A(t) (A(0)=1, Ȧ(0)=0)
/// and velocity kernel B(t) (B(0)=0, Ḃ(0)=1), with the analytic limits at
/// λ = 0 and at the double root b² = 4λ.
#[derive(Debug, Clone, Copy)]
enum ModeKernels {
    /// λ = 0, b > 0: A = 1, B = (1-e^{-bt})/b.
    ZeroDamped { b: f64 },
    /// λ = 0, b = 0: A = 1, B = t.
    ZeroFree,
    /// b² = 4λ: double root ω = -b/2.
    Degenerate { omega: f64, lambda: f64 },
    /// b² > 4λ: real pair.
    Overdamped { wp: f64, wm: f64, lambda: f64 },
    /// b² < 4λ: complex pair -b/2 ± iν.
    Oscillatory { alpha: f64, nu: f64, lambda: f64 },
}

impl ModeKernels {
    fn new(b: f64, lambda: f64) -> Self {
        if lambda < 1e-12 {
            if b > 0.0 {
                ModeKernels::ZeroDamped { b }
            } else {
                ModeKernels::ZeroFree
            }
        } else {
            let disc = b * b - 4.0 * lambda;
            if disc.abs() <= DEGENERATE_REL * (b * b).max(4.0 * lambda) {
                ModeKernels::Degenerate {
                    omega: -b / 2.0,
                    lambda,
                }
            } else if disc > 0.0 {
                let s = disc.sqrt();
                ModeKernels::Overdamped {
                    wp: (-b + s) / 2.0,
                    wm: (-b - s) / 2.0,
                    lambda,
                }
            } else {
                ModeKernels::Oscillatory {
                    alpha: -b / 2.0,
                    nu: (-disc).sqrt() / 2.0,
                    lambda,
                }
            }
        }
    }

    /// (A, B, Ȧ, Ḃ) at time t.
    fn eval(&self, t: f64) -> (f64, f64, f64, f64) {
        match *self {
            ModeKernels::ZeroDamped { b } => {
                let e = (-b * t).exp();
                (1.0, (1.0 - e) / b, 0.0, e)
            }
            ModeKernels::ZeroFree => (1.0, t, 0.0, 1.0),
            ModeKernels::Degenerate { omega, lambda } => {
                let e = (omega * t).exp();
                let a = e * (1.0 - omega * t);
                let bk = t * e;
                (a, bk, -lambda * bk, e * (1.0 + omega * t))
            }
            ModeKernels::Overdamped { wp, wm, lambda } => {
                let (ep, em) = ((wp * t).exp(), (wm * t).exp());
                let d = wp - wm;
                let a = (wp * em - wm * ep) / d;
                let bk = (ep - em) / d;
                (a, bk, -lambda * bk, (wp * ep - wm * em) / d)
            }
            ModeKernels::Oscillatory { alpha, nu, lambda } => {
                let e = (alpha * t).exp();
                let (s, c) = (nu * t).sin_cos();
                let a = e * (c - alpha / nu * s);
                let bk = e * s / nu;
                (a, bk, -lambda * bk, e * (c + alpha / nu * s))
            }
        }
    }
}

/// Duhamel accumulators of one mode, valid at the current front time.
/// Panel updates use the exponential semigroup property, so no accuracy is
/// lost over long horizons.
#[derive(Debug, Clone)]
enum ModeDuhamel {
    /// λ > 0, distinct roots (real or complex): I± = ∫ e^{ω±(t-s)} γ ds.
    Pair {
        wp: Complex64,
        wm: Complex64,
        ip: Complex64,
        im: Complex64,
    },
    /// Double root: I = ∫ e^{ω(t-s)} γ ds, J = ∫ (t-s) e^{ω(t-s)} γ ds.
    Confluent { omega: f64, i: f64, j: f64 },
    /// λ = 0, b > 0: I1 = ∫ γ ds, Ib = ∫ e^{-b(t-s)} γ ds.
    ZeroDamped { b: f64, i1: f64, ib: f64 },
    /// λ = 0, b = 0: I1 = ∫ γ ds, Is = ∫ s γ ds.
    ZeroFree { i1: f64, is: f64 },
}

impl ModeDuhamel {
    fn new(kernels: &ModeKernels) -> Self {
        match *kernels {
            ModeKernels::ZeroDamped { b } => ModeDuhamel::ZeroDamped {
                b,
                i1: 0.0,
                ib: 0.0,
            },
            ModeKernels::ZeroFree => ModeDuhamel::ZeroFree { i1: 0.0, is: 0.0 },
            ModeKernels::Degenerate { omega, .. } => ModeDuhamel::Confluent {
                omega,
                i: 0.0,
                j: 0.0,
            },
            ModeKernels::Overdamped { wp, wm, .. } => ModeDuhamel::Pair {
                wp: Complex64::new(wp, 0.0),
                wm: Complex64::new(wm, 0.0),
                ip: Complex64::new(0.0, 0.0),
                im: Complex64::new(0.0, 0.0),
            },
            ModeKernels::Oscillatory { alpha, nu, .. } => ModeDuhamel::Pair {
                wp: Complex64::new(alpha, nu),
                wm: Complex64::new(alpha, -nu),
                ip: Complex64::new(0.0, 0.0),
                im: Complex64::new(0.0, 0.0),
            },
        }
    }

    /// Advance the front from t0 to t1 given γ values at the panel's
    /// Gauss-Legendre nodes (absolute times `s`, weights `w`).
    fn advance(&mut self, t0: f64, t1: f64, s: &[f64], w: &[f64], gamma: &[f64]) {
        debug_assert!(t1 >= t0);
        match self {
            ModeDuhamel::Pair { wp, wm, ip, im } => {
                let dt = t1 - t0;
                *ip *= (*wp * dt).exp();
                *im *= (*wm * dt).exp();
                for q in 0..s.len() {
                    let g = gamma[q] * w[q];
                    *ip += (*wp * (t1 - s[q])).exp() * g;
                    *im += (*wm * (t1 - s[q])).exp() * g;
                }
            }
            ModeDuhamel::Confluent { omega, i, j } => {
                let dt = t1 - t0;
                let e = (*omega * dt).exp();
                *j = e * (*j + dt * *i);
                *i *= e;
                for q in 0..s.len() {
                    let tau = t1 - s[q];
                    let g = gamma[q] * w[q] * (*omega * tau).exp();
                    *i += g;
                    *j += tau * g;
                }
            }
            ModeDuhamel::ZeroDamped { b, i1, ib } => {
                let dt = t1 - t0;
                *ib *= (-*b * dt).exp();
                for q in 0..s.len() {
                    let g = gamma[q] * w[q];
                    *i1 += g;
                    *ib += (-*b * (t1 - s[q])).exp() * g;
                }
            }
            ModeDuhamel::ZeroFree { i1, is } => {
                for q in 0..s.len() {
                    let g = gamma[q] * w[q];
                    *i1 += g;
                    *is += s[q] * g;
                }
            }
        }
    }

    /// (∫B(t-s)γ ds, ∫Ḃ(t-s)γ ds) at the current front time t.
    fn value(&self, t: f64) -> (f64, f64) {
        match self {
            ModeDuhamel::Pair { wp, wm, ip, im } => {
                let d = *wp - *wm;
                (((ip - im) / d).re, ((*wp * ip - *wm * im) / d).re)
            }
            ModeDuhamel::Confluent { omega, i, j } => (*j, *i + *omega * *j),
            ModeDuhamel::ZeroDamped { b, i1, ib } => ((i1 - ib) / b, *ib),
            ModeDuhamel::ZeroFree { i1, is } => (t * i1 - is, *i1),
        }
    }

    /// Plain running integral ∫γ ds (defined for the zero-mode kernels).
    fn plain_integral(&self) -> f64 {
        match self {
            ModeDuhamel::ZeroDamped { i1, .. } => *i1,
            ModeDuhamel::ZeroFree { i1, .. } => *i1,
            _ => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar per-mode evolution (the kernel engine on one coefficient)
// ---------------------------------------------------------------------------

/// Evolve a single mode ÿ + bẏ + λy = γ(t) from (y0, v0), reporting (y, ẏ)
/// at each requested time. `forcing` is an optional closure with the panel
/// boundaries to respect. Times must be ascending.
pub fn scalar_mode_evolve(
    b: f64,
    lambda: f64,
    y0: f64,
    v0: f64,
    forcing: Option<(&dyn Fn(f64) -> f64, &[f64])>,
    times: &[f64],
) -> Vec<(f64, f64)> {
    let kernels = ModeKernels::new(b, lambda);
    let mut duh = ModeDuhamel::new(&kernels);
    let panel = PanelRule::new(lambda);
    let mut out = Vec::with_capacity(times.len());
    let mut front = 0.0;
    for &t in times {
        if let Some((f, boundaries)) = forcing {
            for (s0, s1) in panel.segments(front, t, boundaries) {
                let (s, w) = panel.nodes(s0, s1);
                let gamma: Vec<f64> = s.iter().map(|&si| f(si)).collect();
                duh.advance(front, s1, &s, &w, &gamma);
                front = s1;
            }
        }
        front = t;
        let (a, bk, da, db) = kernels.eval(t);
        let (du, ddu) = duh.value(t);
        out.push((a * y0 + bk * v0 + du, da * y0 + db * v0 + ddu));
    }
    out
}

// ---------------------------------------------------------------------------
// Forcing descriptions and panel quadrature
// ---------------------------------------------------------------------------

/// Scalar forcing trajectory: absent, a closure with panel boundaries, or
/// sampled values (interpolated cubically inside each sample interval).
pub enum ScalarForcing<'a> {
    None,
    Func {
        eval: &'a dyn Fn(f64) -> GridField,
        panels: &'a [f64],
    },
    Samples {
        times: &'a [f64],
        values: &'a [GridField],
    },
}

/// Vector-valued forcing trajectory.
pub enum VecForcing<'a> {
    None,
    Func {
        eval: &'a dyn Fn(f64) -> Vec3Field,
        panels: &'a [f64],
    },
    Samples {
        times: &'a [f64],
        values: &'a [Vec3Field],
    },
}

/// Composite Gauss-Legendre rule sized to resolve the fastest mode kernel.
struct PanelRule {
    nodes01: Vec<f64>,
    weights01: Vec<f64>,
    max_len: f64,
}

impl PanelRule {
    fn new(lambda_max: f64) -> Self {
        let (x, w) = crate::harmonics::gauss_legendre_rule(8);
        // e^{iνs} with ν = √λ needs ν·h <~ 2 for 8-point accuracy ~1e-13.
        let max_len = (2.0 / lambda_max.max(1.0).sqrt()).min(0.25);
        Self {
            nodes01: x.iter().map(|&xi| 0.5 * (xi + 1.0)).collect(),
            weights01: w.iter().map(|&wi| 0.5 * wi).collect(),
            max_len,
        }
    }

    /// Split [from, to] into panels no longer than `max_len`, cutting at the
    /// supplied boundaries.
    fn segments(&self, from: f64, to: f64, boundaries: &[f64]) -> Vec<(f64, f64)> {
        if to <= from + 1e-15 {
            return Vec::new();
        }
        let mut cuts = vec![from];
        for &c in boundaries {
            if c > from + 1e-15 && c < to - 1e-15 {
                cuts.push(c);
            }
        }
        cuts.push(to);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out = Vec::new();
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a < 1e-15 {
                continue;
            }
            let nsub = ((b - a) / self.max_len).ceil().max(1.0) as usize;
            let h = (b - a) / nsub as f64;
            for k in 0..nsub {
                out.push((a + k as f64 * h, a + (k + 1) as f64 * h));
            }
        }
        out
    }

    fn nodes(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let h = b - a;
        (
            self.nodes01.iter().map(|&x| a + h * x).collect(),
            self.weights01.iter().map(|&w| h * w).collect(),
        )
    }
}

/// Cubic (4-point Lagrange) interpolation weights within a sample grid.
fn cubic_weights(times: &[f64], t: f64) -> ([usize; 4], [f64; 4]) {
    let n = times.len();
    assert!(n >= 2, "need at least two samples to interpolate");
    let hi = times.partition_point(|&s| s < t).clamp(1, n - 1);
    let lo = (hi - 1).saturating_sub(1);
    let idx = if n < 4 {
        [0, 1.min(n - 1), (n - 1).min(2), n - 1]
    } else if lo + 3 >= n {
        [n - 4, n - 3, n - 2, n - 1]
    } else {
        [lo, lo + 1, lo + 2, lo + 3]
    };
    let mut w = [0.0; 4];
    for a in 0..4 {
        let mut l = 1.0;
        for c in 0..4 {
            if c != a && (times[idx[c]] - times[idx[a]]).abs() > 1e-300 {
                l *= (t - times[idx[c]]) / (times[idx[a]] - times[idx[c]]);
            }
        }
        w[a] = l;
    }
    (idx, w)
}

impl ScalarForcing<'_> {
    fn is_none(&self) -> bool {
        matches!(self, ScalarForcing::None)
    }

    fn boundaries(&self) -> Vec<f64> {
        match self {
            ScalarForcing::None => Vec::new(),
            ScalarForcing::Func { panels, .. } => panels.to_vec(),
            ScalarForcing::Samples { times, .. } => times.to_vec(),
        }
    }

    fn horizon(&self) -> f64 {
        self.boundaries().last().copied().unwrap_or(0.0)
    }

    fn eval(&self, t: f64) -> Option<GridField> {
        match self {
            ScalarForcing::None => None,
            ScalarForcing::Func { eval, .. } => Some(eval(t)),
            ScalarForcing::Samples { times, values } => {
                let (idx, w) = cubic_weights(times, t);
                let mut out = values[idx[0]].scale(w[0]);
                for a in 1..4 {
                    if idx[a] != idx[a - 1] {
                        out.axpy(w[a], &values[idx[a]]);
                    }
                }
                Some(out)
            }
        }
    }
}

impl VecForcing<'_> {
    fn is_none(&self) -> bool {
        matches!(self, VecForcing::None)
    }

    fn boundaries(&self) -> Vec<f64> {
        match self {
            VecForcing::None => Vec::new(),
            VecForcing::Func { panels, .. } => panels.to_vec(),
            VecForcing::Samples { times, .. } => times.to_vec(),
        }
    }

    fn horizon(&self) -> f64 {
        self.boundaries().last().copied().unwrap_or(0.0)
    }

    fn eval(&self, t: f64) -> Option<Vec3Field> {
        match self {
            VecForcing::None => None,
            VecForcing::Func { eval, .. } => Some(eval(t)),
            VecForcing::Samples { times, values } => {
                let (idx, w) = cubic_weights(times, t);
                let mut out = values[idx[0]].scale(w[0]);
                for a in 1..4 {
                    if idx[a] != idx[a - 1] {
                        out.axpy(w[a], &values[idx[a]]);
                    }
                }
                Some(out)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linear evolution of the normal component
// ---------------------------------------------------------------------------

/// Solution record of the scalar linearized Cauchy problem.
pub struct LinearEvolution {
    pub times: Vec<f64>,
    pub phi: Vec<SpectralField>,
    pub dphi: Vec<SpectralField>,
    /// t → ∞ limit of φ (the zero-mode part); `None` signals b = 0, where
    /// zero modes grow linearly and no limit exists.
    pub limit: Option<SpectralField>,
}

/// Solve ∂ₜ²φ + b∂ₜφ = L_φ φ + γ modewise. With `gauge = None` the operator
/// is L at the identity with multipliers -4 (l=0), 0 (l=1), 2-l(l+1)
/// (l >= 2); otherwise the distorted operator is diagonalized numerically at
/// the working band limit.
pub fn evolve_linear(
    gauge: Option<&TangentField>,
    b: f64,
    phi0: &GridField,
    dphi0: &GridField,
    gamma: &ScalarForcing,
    times: &[f64],
    lmax: usize,
) -> Result<LinearEvolution> {
    match gauge {
        None => evolve_linear_flat(b, phi0, dphi0, gamma, times, lmax),
        Some(x) => evolve_linear_gauged(x, b, phi0, dphi0, gamma, times, lmax),
    }
}

/// Eigenvalue of -L at the identity for degree l: 4 at l = 0, 0 at l = 1,
/// l(l+1) - 2 for l >= 2.
pub fn flat_mode_lambda(l: usize) -> f64 {
    if l == 0 {
        4.0
    } else {
        (l * (l + 1)) as f64 - 2.0
    }
}

fn evolve_linear_flat(
    b: f64,
    phi0: &GridField,
    dphi0: &GridField,
    gamma: &ScalarForcing,
    times: &[f64],
    lmax: usize,
) -> Result<LinearEvolution> {
    let c0 = phi0.analyze(lmax)?;
    let v0 = dphi0.analyze(lmax)?;
    let n = (lmax + 1) * (lmax + 1);

    let mut kernels = Vec::with_capacity(n);
    let mut duh = Vec::with_capacity(n);
    let mut lambda_max: f64 = 1.0;
    for l in 0..=lmax {
        for _m in 0..(2 * l + 1) {
            let lam = flat_mode_lambda(l);
            lambda_max = lambda_max.max(lam);
            let k = ModeKernels::new(b, lam);
            duh.push(ModeDuhamel::new(&k));
            kernels.push(k);
        }
    }

    let panel = PanelRule::new(lambda_max);
    let boundaries = gamma.boundaries();
    let mut front = 0.0;
    let mut phi = Vec::with_capacity(times.len());
    let mut dphi = Vec::with_capacity(times.len());

    for &t in times {
        if !gamma.is_none() {
            for (s0, s1) in panel.segments(front, t, &boundaries) {
                let (s, w) = panel.nodes(s0, s1);
                let g_hat: Vec<SpectralField> = s
                    .iter()
                    .map(|&si| gamma.eval(si).unwrap().analyze(lmax))
                    .collect::<Result<_>>()?;
                for k in 0..n {
                    let gk: Vec<f64> = g_hat.iter().map(|g| g.coeffs()[k]).collect();
                    duh[k].advance(front, s1, &s, &w, &gk);
                }
                front = s1;
            }
        }
        front = t;
        let mut pt = SpectralField::zeros(lmax);
        let mut dpt = SpectralField::zeros(lmax);
        for k in 0..n {
            let (a, bk, da, db) = kernels[k].eval(t);
            let (du, ddu) = duh[k].value(t);
            pt.coeffs_mut()[k] = a * c0.coeffs()[k] + bk * v0.coeffs()[k] + du;
            dpt.coeffs_mut()[k] = da * c0.coeffs()[k] + db * v0.coeffs()[k] + ddu;
        }
        phi.push(pt);
        dphi.push(dpt);
    }

    let limit = if b > 0.0 {
        // Finish integrating the zero-mode forcing over the full horizon.
        if !gamma.is_none() && gamma.horizon() > front {
            let to = gamma.horizon();
            for (s0, s1) in panel.segments(front, to, &boundaries) {
                let (s, w) = panel.nodes(s0, s1);
                let g_hat: Vec<SpectralField> = s
                    .iter()
                    .map(|&si| gamma.eval(si).unwrap().analyze(lmax))
                    .collect::<Result<_>>()?;
                if lmax >= 1 {
                    for m in 0..3usize {
                        let k = 1 + m; // the l = 1 block
                        let gk: Vec<f64> = g_hat.iter().map(|g| g.coeffs()[k]).collect();
                        duh[k].advance(front, s1, &s, &w, &gk);
                    }
                }
                front = s1;
            }
        }
        let mut lim = SpectralField::zeros(lmax);
        if lmax >= 1 {
            for m in -1isize..=1 {
                let k = crate::harmonics::sh_index(1, m);
                lim.coeffs_mut()[k] =
                    c0.coeffs()[k] + v0.coeffs()[k] / b + duh[k].plain_integral() / b;
            }
        }
        Some(lim)
    } else {
        None
    };

    Ok(LinearEvolution {
        times: times.to_vec(),
        phi,
        dphi,
        limit,
    })
}

fn evolve_linear_gauged(
    x: &TangentField,
    b: f64,
    phi0: &GridField,
    dphi0: &GridField,
    gamma: &ScalarForcing,
    times: &[f64],
    lmax: usize,
) -> Result<LinearEvolution> {
    let grid = phi0.grid().clone();
    let op = LPhiOperator::new(x, lmax)?;
    let proj = ZeroModeProjection::for_gauge(x, grid.clone(), lmax)?;
    let n = (lmax + 1) * (lmax + 1);

    // Dense symmetric restriction of L_φ deflated by the zero modes.
    let a_full = operator_matrix(&op)?;
    let a_sym = (&a_full + a_full.transpose()) * 0.5;
    let q = proj.complement_matrix();
    let deflated = &q * &a_sym * &q;
    let eig = nalgebra::SymmetricEigen::new(deflated);

    // Keep genuinely negative directions; the three remaining near-zero
    // directions span the kernel block, which is evolved separately in its
    // ⟨·, Nᵏ⟩ coordinates.
    let mut modes: Vec<(f64, nalgebra::DVector<f64>)> = Vec::new();
    for (i, &mu) in eig.eigenvalues.iter().enumerate() {
        if mu < -0.5 {
            modes.push((-mu, eig.eigenvectors.column(i).into_owned()));
        }
    }

    let c0 = nalgebra::DVector::from_column_slice(phi0.analyze(lmax)?.coeffs());
    let v0 = nalgebra::DVector::from_column_slice(dphi0.analyze(lmax)?.coeffs());

    let basis = proj.basis_matrix(); // n × 3
    let gram_inv = proj.gram_inv();
    let b0 = basis.transpose() * &c0;
    let bv0 = basis.transpose() * &v0;

    let lambda_max = modes.iter().fold(1.0f64, |acc, (lam, _)| acc.max(*lam));
    let panel = PanelRule::new(lambda_max);
    let boundaries = gamma.boundaries();

    let kernel_modes: Vec<ModeKernels> = modes
        .iter()
        .map(|(lam, _)| ModeKernels::new(b, *lam))
        .collect();
    let zero_kernel = ModeKernels::new(b, 0.0);
    let mut duh: Vec<ModeDuhamel> = kernel_modes.iter().map(ModeDuhamel::new).collect();
    let mut zero_duh = [
        ModeDuhamel::new(&zero_kernel),
        ModeDuhamel::new(&zero_kernel),
        ModeDuhamel::new(&zero_kernel),
    ];

    let d0: Vec<f64> = modes.iter().map(|(_, v)| v.dot(&c0)).collect();
    let dv0: Vec<f64> = modes.iter().map(|(_, v)| v.dot(&v0)).collect();

    let mut front = 0.0;
    let mut phi = Vec::with_capacity(times.len());
    let mut dphi = Vec::with_capacity(times.len());

    let advance = |front: &mut f64,
                   to: f64,
                   duh: &mut Vec<ModeDuhamel>,
                   zero_duh: &mut [ModeDuhamel; 3]|
     -> Result<()> {
        if gamma.is_none() {
            return Ok(());
        }
        for (s0, s1) in panel.segments(*front, to, &boundaries) {
            let (s, w) = panel.nodes(s0, s1);
            let g_hat: Vec<nalgebra::DVector<f64>> = s
                .iter()
                .map(|&si| {
                    gamma
                        .eval(si)
                        .unwrap()
                        .analyze(lmax)
                        .map(|g| nalgebra::DVector::from_column_slice(g.coeffs()))
                })
                .collect::<Result<_>>()?;
            for (k, (_, v)) in modes.iter().enumerate() {
                let gk: Vec<f64> = g_hat.iter().map(|g| v.dot(g)).collect();
                duh[k].advance(*front, s1, &s, &w, &gk);
            }
            for k in 0..3 {
                let bk: Vec<f64> = g_hat.iter().map(|g| basis.column(k).dot(g)).collect();
                zero_duh[k].advance(*front, s1, &s, &w, &bk);
            }
            *front = s1;
        }
        Ok(())
    };

    for &t in times {
        advance(&mut front, t, &mut duh, &mut zero_duh)?;
        front = t;

        let mut coeffs = nalgebra::DVector::zeros(n);
        let mut dcoeffs = nalgebra::DVector::zeros(n);

        // Kernel block in the three ⟨·, Nᵏ⟩ coordinates.
        let (za, zb, _zda, zdb) = zero_kernel.eval(t);
        let mut bt = Vector3::zeros();
        let mut dbt = Vector3::zeros();
        for k in 0..3 {
            let (du, ddu) = zero_duh[k].value(t);
            bt[k] = za * b0[k] + zb * bv0[k] + du;
            dbt[k] = zdb * bv0[k] + ddu;
        }
        let ct = gram_inv * bt;
        let dct = gram_inv * dbt;
        for k in 0..3 {
            coeffs.axpy(ct[k], &basis.column(k).into_owned(), 1.0);
            dcoeffs.axpy(dct[k], &basis.column(k).into_owned(), 1.0);
        }

        for (k, (_, v)) in modes.iter().enumerate() {
            let (a, bk, da, db) = kernel_modes[k].eval(t);
            let (du, ddu) = duh[k].value(t);
            coeffs.axpy(a * d0[k] + bk * dv0[k] + du, v, 1.0);
            dcoeffs.axpy(da * d0[k] + db * dv0[k] + ddu, v, 1.0);
        }

        phi.push(SpectralField::from_coeffs(lmax, coeffs.as_slice().to_vec()));
        dphi.push(SpectralField::from_coeffs(
            lmax,
            dcoeffs.as_slice().to_vec(),
        ));
    }

    let limit = if b > 0.0 {
        if !gamma.is_none() && gamma.horizon() > front {
            advance(&mut front, gamma.horizon(), &mut duh, &mut zero_duh)?;
        }
        let mut bt = Vector3::zeros();
        for k in 0..3 {
            bt[k] = b0[k] + bv0[k] / b + zero_duh[k].plain_integral() / b;
        }
        let ct = gram_inv * bt;
        let mut coeffs = nalgebra::DVector::zeros(n);
        for k in 0..3 {
            coeffs.axpy(ct[k], &basis.column(k).into_owned(), 1.0);
        }
        Some(SpectralField::from_coeffs(lmax, coeffs.as_slice().to_vec()))
    } else {
        None
    };

    Ok(LinearEvolution {
        times: times.to_vec(),
        phi,
        dphi,
        limit,
    })
}

// ---------------------------------------------------------------------------
// Tangential evolution
// ---------------------------------------------------------------------------

pub struct VecEvolution {
    pub times: Vec<f64>,
    pub psi: Vec<Vec3Field>,
    pub dpsi: Vec<Vec3Field>,
    pub limit: Option<Vec3Field>,
}

/// Solve ∂ₜ²ψ + b∂ₜψ = f_⊤ pointwise:
/// ψ(t) = ψ(0) + (1-e^{-bt})/b ψ'(0) + ∫ (1-e^{-b(t-s)})/b f_⊤(s) ds,
/// with the analytic t and (t-s) kernels when b = 0.
pub fn evolve_tangential(
    b: f64,
    psi0: &Vec3Field,
    dpsi0: &Vec3Field,
    f_top: &VecForcing,
    times: &[f64],
) -> Result<VecEvolution> {
    let grid = psi0.grid().clone();
    let n = grid.len();
    let kernel = ModeKernels::new(b, 0.0);
    // Per-node, per-component Duhamel accumulators.
    let mut duh: Vec<ModeDuhamel> = (0..3 * n).map(|_| ModeDuhamel::new(&kernel)).collect();
    let panel = PanelRule::new(1.0);
    let boundaries = f_top.boundaries();

    let mut front = 0.0;
    let mut psi = Vec::with_capacity(times.len());
    let mut dpsi = Vec::with_capacity(times.len());

    let advance = |front: &mut f64, to: f64, duh: &mut Vec<ModeDuhamel>| {
        if f_top.is_none() {
            return;
        }
        for (s0, s1) in panel.segments(*front, to, &boundaries) {
            let (s, w) = panel.nodes(s0, s1);
            let samples: Vec<Vec3Field> = s.iter().map(|&si| f_top.eval(si).unwrap()).collect();
            for node in 0..n {
                for c in 0..3 {
                    let g: Vec<f64> = samples
                        .iter()
                        .map(|f| f.components()[c].values()[node])
                        .collect();
                    duh[3 * node + c].advance(*front, s1, &s, &w, &g);
                }
            }
            *front = s1;
        }
    };

    for &t in times {
        advance(&mut front, t, &mut duh);
        front = t;
        let (a, bk, _da, db) = kernel.eval(t);
        let mut pt = Vec3Field::zeros(grid.clone());
        let mut dpt = Vec3Field::zeros(grid.clone());
        for node in 0..n {
            let mut v = Vector3::zeros();
            let mut dv = Vector3::zeros();
            for c in 0..3 {
                let (du, ddu) = duh[3 * node + c].value(t);
                v[c] = a * psi0.components()[c].values()[node]
                    + bk * dpsi0.components()[c].values()[node]
                    + du;
                dv[c] = db * dpsi0.components()[c].values()[node] + ddu;
            }
            pt.set(node, v);
            dpt.set(node, dv);
        }
        psi.push(pt);
        dpsi.push(dpt);
    }

    let limit = if b > 0.0 {
        if !f_top.is_none() && f_top.horizon() > front {
            advance(&mut front, f_top.horizon(), &mut duh);
        }
        let mut lim = Vec3Field::zeros(grid.clone());
        for node in 0..n {
            let mut v = Vector3::zeros();
            for c in 0..3 {
                v[c] = psi0.components()[c].values()[node]
                    + dpsi0.components()[c].values()[node] / b
                    + duh[3 * node + c].plain_integral() / b;
            }
            lim.set(node, v);
        }
        Some(lim)
    } else {
        None
    };

    Ok(VecEvolution {
        times: times.to_vec(),
        psi,
        dpsi,
        limit,
    })
}

// ---------------------------------------------------------------------------
// Gauge maps: the sphere exponential and its derivative
// ---------------------------------------------------------------------------

fn sinc(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 6.0 + r.powi(4) / 120.0
    } else {
        r.sin() / r
    }
}

/// (cos r - sinc r)/r², series-guarded near r = 0.
fn cos_minus_sinc_over_r2(r: f64) -> f64 {
    if r < 1e-3 {
        -1.0 / 3.0 + r * r / 30.0 - r.powi(4) / 840.0
    } else {
        (r.cos() - r.sin() / r) / (r * r)
    }
}

/// Distorted embedding i₀∘E_X: geodesic flow of the tangent field on the
/// unit sphere, pointwise cos|X|·x + (sin|X|/|X|)·X. Requires |X| < π.
pub fn exp_map(x_field: &TangentField) -> Result<Vec3Field> {
    let grid = x_field.field().grid().clone();
    let pos = Vec3Field::unit_positions(grid.clone());
    let mut out = Vec3Field::zeros(grid.clone());
    for node in 0..grid.len() {
        let xv = x_field.field().at(node);
        let r = xv.norm();
        if r >= std::f64::consts::PI {
            return Err(MembraneError::InjectivityRadius { node, max_norm: r });
        }
        out.set(node, pos.at(node) * r.cos() + xv * sinc(r));
    }
    Ok(out)
}

/// Derivative of X ↦ i₀∘E_X in direction Y:
/// Σ_φ Y = -sinc|X| (X·Y) i₀ + [(cos|X| - sinc|X|)/|X|²](X·Y) X + sinc|X| Y.
/// The output is tangent along the distorted embedding.
pub fn sigma_apply(x_field: &TangentField, y_field: &TangentField) -> Result<Vec3Field> {
    let grid = x_field.field().grid().clone();
    let pos = Vec3Field::unit_positions(grid.clone());
    let mut out = Vec3Field::zeros(grid.clone());
    for node in 0..grid.len() {
        let xv = x_field.field().at(node);
        let yv = y_field.field().at(node);
        let r = xv.norm();
        if r >= std::f64::consts::PI {
            return Err(MembraneError::InjectivityRadius { node, max_norm: r });
        }
        let xy = xv.dot(&yv);
        let v = pos.at(node) * (-sinc(r) * xy)
            + xv * (cos_minus_sinc_over_r2(r) * xy)
            + yv * sinc(r);
        out.set(node, v);
    }
    Ok(out)
}

/// Pointwise inverse of `sigma_apply`: recover the tangent field Y with
/// Σ_φ Y = ξ for ξ tangent along i₀∘E_X. The 3×2 system restricted to the
/// tangent plane is solved by normal equations; ill-conditioned nodes and
/// non-tangent inputs are rejected.
pub fn sigma_inverse(x_field: &TangentField, xi: &Vec3Field) -> Result<TangentField> {
    let grid = x_field.field().grid().clone();
    let moved = exp_map(x_field)?;
    let max_xi = xi.norm_field().max_abs();
    let tol = 1e-8 * (1.0 + max_xi);

    let mut out = Vec3Field::zeros(grid.clone());
    for i in 0..grid.nlat() {
        let theta = grid.colatitude(i);
        for j in 0..grid.nlon() {
            let node = i * grid.nlon() + j;
            let normal = moved.at(node);
            let xiv = xi.at(node);
            let nc = xiv.dot(&normal);
            if nc.abs() > tol {
                return Err(MembraneError::NotTangent {
                    node,
                    normal_component: nc.abs(),
                    tolerance: tol,
                });
            }
            // Orthonormal tangent basis at the source point.
            let phi = grid.longitude(j);
            let (st, ct) = (theta.sin(), theta.cos());
            let (sp, cp) = (phi.sin(), phi.cos());
            let e1 = Vector3::new(ct * cp, ct * sp, -st);
            let e2 = Vector3::new(-sp, cp, 0.0);

            let xv = x_field.field().at(node);
            let r = xv.norm();
            let posv = Vector3::new(st * cp, st * sp, ct);
            let map = |y: Vector3<f64>| -> Vector3<f64> {
                let xy = xv.dot(&y);
                posv * (-sinc(r) * xy) + xv * (cos_minus_sinc_over_r2(r) * xy) + y * sinc(r)
            };
            let m1 = map(e1);
            let m2 = map(e2);
            let g = Matrix2::new(m1.dot(&m1), m1.dot(&m2), m1.dot(&m2), m2.dot(&m2));
            let det = g.determinant();
            let trace = g.trace();
            // Condition estimate of the 2×2 Gram matrix.
            let disc = (trace * trace - 4.0 * det).max(0.0).sqrt();
            let (emax, emin) = ((trace + disc) / 2.0, (trace - disc) / 2.0);
            if emin <= 0.0 || emax / emin > 1e8 {
                return Err(MembraneError::SingularGaugeMap {
                    node,
                    condition: if emin > 0.0 {
                        emax / emin
                    } else {
                        f64::INFINITY
                    },
                });
            }
            let rhs = Vector2::new(m1.dot(&xiv), m2.dot(&xiv));
            let sol = g.try_inverse().expect("checked conditioning") * rhs;
            out.set(node, e1 * sol.x + e2 * sol.y);
        }
    }
    TangentField::new(out)
}

// ---------------------------------------------------------------------------
// Triple splitting
// ---------------------------------------------------------------------------

/// The solved (Y, c, v) of the linearized problem: a terminal tangent field,
/// a terminal shift vector, and the exponentially decaying remainder with
/// its first time derivative.
pub struct TripleSplit {
    pub y: TangentField,
    pub c: Vector3<f64>,
    pub times: Vec<f64>,
    pub v: Vec<Vec3Field>,
    pub v_dot: Vec<Vec3Field>,
    pub beta_used: f64,
}

/// Decompose the solution of the linearized problem along the gauged sphere
/// with Cauchy data (η₀, η̇₀) and forcing f into (Y, c, v):
///
/// ```text
/// cᵏ = ⟨(η₀ + b⁻¹η̇₀)·N + b⁻¹∫₀^∞ f_⊥, Nᵏ⟩  (Gram-normalized),
/// Y  = Σ_φ⁻¹[ -⊤c + ⊤(η₀ + b⁻¹η̇₀) + b⁻¹∫₀^∞ f_⊤ ],
/// v  = η(t) - Σ_φY - c.
/// ```
pub fn triple_split(
    gauge: Option<&TangentField>,
    b: f64,
    eta0: &Vec3Field,
    deta0: &Vec3Field,
    forcing: &VecForcing,
    times: &[f64],
    lmax: usize,
) -> Result<TripleSplit> {
    let beta_used = beta(b)?;
    let grid = eta0.grid().clone();

    // The normal field of the gauged sphere is its own position.
    let normal = match gauge {
        None => Vec3Field::unit_positions(grid.clone()),
        Some(x) => exp_map(x)?,
    };

    // Verify the forcing decays at rate >= β before trusting the tail
    // truncation.
    if !forcing.is_none() {
        verify_forcing_decay(forcing, beta_used)?;
    }

    let phi0 = eta0.dot(&normal);
    let dphi0 = deta0.dot(&normal);
    let tang = |v: &Vec3Field| -> Vec3Field {
        let nc = v.dot(&normal);
        v.sub(&normal.mul_scalar_field(&nc))
    };
    let psi0 = tang(eta0);
    let dpsi0 = tang(deta0);

    // Split the forcing along the gauged sphere.
    let normal_perp = normal.clone();
    let f_perp_eval = |t: f64| -> GridField {
        forcing
            .eval(t)
            .map(|f| f.dot(&normal_perp))
            .unwrap_or_else(|| GridField::zeros(normal_perp.grid().clone()))
    };
    let normal_top = normal.clone();
    let f_top_eval = |t: f64| -> Vec3Field {
        match forcing.eval(t) {
            Some(f) => {
                let nc = f.dot(&normal_top);
                f.sub(&normal_top.mul_scalar_field(&nc))
            }
            None => Vec3Field::zeros(normal_top.grid().clone()),
        }
    };
    let boundaries = forcing.boundaries();
    let scalar_forcing = if forcing.is_none() {
        ScalarForcing::None
    } else {
        ScalarForcing::Func {
            eval: &f_perp_eval,
            panels: &boundaries,
        }
    };
    let vec_forcing = if forcing.is_none() {
        VecForcing::None
    } else {
        VecForcing::Func {
            eval: &f_top_eval,
            panels: &boundaries,
        }
    };

    let lin = evolve_linear(gauge, b, &phi0, &dphi0, &scalar_forcing, times, lmax)?;
    let tangential = evolve_tangential(b, &psi0, &dpsi0, &vec_forcing, times)?;

    let phi_limit = lin.limit.as_ref().expect("b > 0 enforced above");
    let psi_limit = tangential.limit.as_ref().expect("b > 0 enforced above");

    // Shift vector from the Gram-normalized projection of the scalar limit.
    let proj = match gauge {
        None => ZeroModeProjection::at_identity(grid.clone(), lmax)?,
        Some(x) => ZeroModeProjection::for_gauge(x, grid.clone(), lmax)?,
    };
    let c = proj.coefficients_from_coeffs(phi_limit);

    // Tangent field: remove the tangential shadow of c from the tangential
    // limit and pull back through the gauge derivative.
    let c_field = Vec3Field::constant(grid.clone(), c);
    let c_tangential = tang(&c_field);
    let y_ambient = psi_limit.sub(&c_tangential);
    let y = match gauge {
        None => TangentField::new(y_ambient)?,
        Some(x) => sigma_inverse(x, &y_ambient)?,
    };

    // Decaying remainder: v(t) = [φ(t) - φ(∞)]N + [ψ(t) - ψ(∞)].
    let mut v = Vec::with_capacity(times.len());
    let mut v_dot = Vec::with_capacity(times.len());
    for (k, _t) in times.iter().enumerate() {
        let phi_dev = lin.phi[k].sub(phi_limit).synthesize(grid.clone())?;
        let mut vt = normal.mul_scalar_field(&phi_dev);
        vt.axpy(1.0, &tangential.psi[k].sub(psi_limit));
        v.push(vt);

        let dphi_t = lin.dphi[k].synthesize(grid.clone())?;
        let mut dvt = normal.mul_scalar_field(&dphi_t);
        dvt.axpy(1.0, &tangential.dpsi[k]);
        v_dot.push(dvt);
    }

    Ok(TripleSplit {
        y,
        c,
        times: times.to_vec(),
        v,
        v_dot,
        beta_used,
    })
}

fn verify_forcing_decay(forcing: &VecForcing, beta_used: f64) -> Result<()> {
    let horizon = forcing.horizon();
    if horizon <= 0.0 {
        return Ok(());
    }
    let nsamp = 64;
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    let mut max_norm: f64 = 0.0;
    for k in 0..=nsamp {
        let t = horizon * k as f64 / nsamp as f64;
        let norm = forcing.eval(t).map(|f| f.l2_norm()).unwrap_or(0.0);
        max_norm = max_norm.max(norm);
        if t >= horizon / 2.0 && norm > 1e-14 {
            ts.push(t);
            logs.push(norm.ln());
        }
    }
    if max_norm < 1e-13 || ts.len() < 3 {
        return Ok(()); // effectively zero, or already below the tail floor
    }
    let (slope, _, _) = linear_fit(&ts, &logs);
    let fitted = -slope;
    if fitted < beta_used - 1e-9 {
        return Err(MembraneError::ForcingNotDecaying {
            fitted,
            beta: beta_used,
        });
    }
    Ok(())
}
