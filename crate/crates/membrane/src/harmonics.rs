//! Real spherical-harmonic analysis and synthesis on a Gauss–Legendre ×
//! equiangular grid, together with the graded Sobolev norms and the dyadic
//! spectral smoothing operators built on top of the transform.
//!
//! The basis is orthonormal real harmonics without the Condon–Shortley
//! phase,
//!
//! ```text
//! Y_{l,0}  = p_l^0(cos θ),
//! Y_{l,m}  = √2 p_l^m(cos θ) cos(mφ),   m > 0,
//! Y_{l,-m} = √2 p_l^m(cos θ) sin(mφ),   m > 0,
//! ```
//!
//! where `p_l^m` carries the full normalization including the 1/√(4π).
//! Coefficients are stored l-major, `m` running from `-l` to `l`, so each
//! degree occupies one contiguous block.
//!
//! Colatitude nodes are Gauss–Legendre in cos θ (no node sits on a pole),
//! longitudes are equally spaced. Quadrature is exact for band-limited
//! integrands with `nlat >= lmax+1`, `nlon >= 2*lmax+1`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{MembraneError, Result};

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes and weights
// ---------------------------------------------------------------------------

/// Nodes and weights of `n`-point Gauss-Legendre quadrature on [-1, 1],
/// nodes ascending. Newton iteration on the Legendre polynomial.
pub(crate) fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_legendre(n)
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess, then Newton.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Quadrature grid on the unit sphere: Gauss–Legendre colatitudes (none at
/// the poles) times equally spaced longitudes. Node (i, j) lives at
/// (θ_i, φ_j) and the flat node index is `i * nlon + j`.
#[derive(Debug)]
pub struct SphGrid {
    nlat: usize,
    nlon: usize,
    theta: Vec<f64>,
    cos_theta: Vec<f64>,
    sin_theta: Vec<f64>,
    phi: Vec<f64>,
    colat_weight: Vec<f64>,
    lon_weight: f64,
    plm_tables: Mutex<HashMap<usize, Arc<Vec<f64>>>>,
    fourier_tables: Mutex<HashMap<usize, Arc<FourierTable>>>,
}

#[derive(Debug)]
struct FourierTable {
    // cos(m φ_j), sin(m φ_j) for m = 0..=mmax, laid out m-major.
    cos: Vec<f64>,
    sin: Vec<f64>,
    nlon: usize,
}

impl SphGrid {
    pub fn new(nlat: usize, nlon: usize) -> Result<Arc<Self>> {
        if nlat == 0 || nlon == 0 {
            return Err(MembraneError::InvalidGridSize { nlat, nlon });
        }
        let (x, w) = gauss_legendre(nlat);
        // Ascending θ (north to south) means descending cos θ.
        let cos_theta: Vec<f64> = x.iter().rev().copied().collect();
        let colat_weight: Vec<f64> = w.iter().rev().copied().collect();
        let theta: Vec<f64> = cos_theta.iter().map(|&c| c.acos()).collect();
        let sin_theta: Vec<f64> = cos_theta.iter().map(|&c| (1.0 - c * c).sqrt()).collect();
        let phi: Vec<f64> = (0..nlon)
            .map(|j| 2.0 * PI * j as f64 / nlon as f64)
            .collect();
        Ok(Arc::new(Self {
            nlat,
            nlon,
            theta,
            cos_theta,
            sin_theta,
            phi,
            colat_weight,
            lon_weight: 2.0 * PI / nlon as f64,
            plm_tables: Mutex::new(HashMap::new()),
            fourier_tables: Mutex::new(HashMap::new()),
        }))
    }

    /// Smallest grid that supports band limit `lmax` for every operation in
    /// this crate, including first-derivative synthesis at band `lmax + 1`.
    pub fn for_lmax(lmax: usize) -> Arc<Self> {
        Self::new(lmax + 2, 2 * lmax + 3).expect("positive sizes")
    }

    pub fn nlat(&self) -> usize {
        self.nlat
    }

    pub fn nlon(&self) -> usize {
        self.nlon
    }

    pub fn len(&self) -> usize {
        self.nlat * self.nlon
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest band limit this grid resolves exactly.
    pub fn max_band(&self) -> usize {
        (self.nlat - 1).min((self.nlon - 1) / 2)
    }

    pub fn supports(&self, lmax: usize) -> bool {
        self.nlat >= lmax + 1 && self.nlon >= 2 * lmax + 1
    }

    /// Grids with the same dimensions carry identical node sets.
    pub fn compatible(&self, other: &SphGrid) -> bool {
        self.nlat == other.nlat && self.nlon == other.nlon
    }

    pub fn require(&self, lmax: usize) -> Result<()> {
        if self.supports(lmax) {
            Ok(())
        } else {
            Err(MembraneError::ResolutionTooLow {
                lmax,
                need_nlat: lmax + 1,
                need_nlon: 2 * lmax + 1,
                nlat: self.nlat,
                nlon: self.nlon,
            })
        }
    }

    pub fn colatitude(&self, i: usize) -> f64 {
        self.theta[i]
    }

    pub fn longitude(&self, j: usize) -> f64 {
        self.phi[j]
    }

    pub fn colatitudes(&self) -> &[f64] {
        &self.theta
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.phi
    }

    pub fn cos_colatitudes(&self) -> &[f64] {
        &self.cos_theta
    }

    pub fn sin_colatitudes(&self) -> &[f64] {
        &self.sin_theta
    }

    /// Quadrature weight of node (i, j) with respect to dμ₀; all weights sum
    /// to 4π.
    pub fn node_weight(&self, i: usize, _j: usize) -> f64 {
        self.colat_weight[i] * self.lon_weight
    }

    /// Flat vector of node weights in node order.
    pub fn node_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.len());
        for i in 0..self.nlat {
            let wi = self.colat_weight[i] * self.lon_weight;
            for _ in 0..self.nlon {
                w.push(wi);
            }
        }
        w
    }

    /// Cartesian unit-sphere position of node (i, j).
    pub fn position(&self, i: usize, j: usize) -> Vector3<f64> {
        Vector3::new(
            self.sin_theta[i] * self.phi[j].cos(),
            self.sin_theta[i] * self.phi[j].sin(),
            self.cos_theta[i],
        )
    }

    fn plm_table(&self, lmax: usize) -> Arc<Vec<f64>> {
        let mut cache = self.plm_tables.lock().unwrap();
        cache
            .entry(lmax)
            .or_insert_with(|| {
                let ncol = (lmax + 1) * (lmax + 2) / 2;
                let mut table = vec![0.0; self.nlat * ncol];
                let mut col = vec![0.0; lmax + 1];
                for i in 0..self.nlat {
                    let (x, sx) = (self.cos_theta[i], self.sin_theta[i]);
                    for m in 0..=lmax {
                        legendre_column(x, sx, m, lmax, &mut col);
                        for l in m..=lmax {
                            table[i * ncol + tri(l, m)] = col[l - m];
                        }
                    }
                }
                Arc::new(table)
            })
            .clone()
    }

    fn fourier_table(&self, mmax: usize) -> Arc<FourierTable> {
        let mut cache = self.fourier_tables.lock().unwrap();
        cache
            .entry(mmax)
            .or_insert_with(|| {
                let mut cos = Vec::with_capacity((mmax + 1) * self.nlon);
                let mut sin = Vec::with_capacity((mmax + 1) * self.nlon);
                for m in 0..=mmax {
                    for j in 0..self.nlon {
                        let arg = m as f64 * self.phi[j];
                        cos.push(arg.cos());
                        sin.push(arg.sin());
                    }
                }
                Arc::new(FourierTable {
                    cos,
                    sin,
                    nlon: self.nlon,
                })
            })
            .clone()
    }
}

/// Triangular index of (l, m) with 0 <= m <= l.
fn tri(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Fill `out[l - m] = p_l^m(x)` for `l = m..=lmax`, where `p_l^m` is the
/// orthonormal associated Legendre function including 1/√(4π) and no
/// Condon-Shortley phase.
fn legendre_column(x: f64, sx: f64, m: usize, lmax: usize, out: &mut [f64]) {
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for k in 1..=m {
        pmm *= ((2 * k + 1) as f64 / (2 * k) as f64).sqrt() * sx;
    }
    out[0] = pmm;
    if lmax == m {
        return;
    }
    let mut plm1 = pmm;
    let mut pl = ((2 * m + 3) as f64).sqrt() * x * pmm;
    out[1] = pl;
    for l in (m + 2)..=lmax {
        let lf = l as f64;
        let mf = m as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = ((2.0 * lf + 1.0) / (2.0 * lf - 3.0) * ((lf - 1.0) * (lf - 1.0) - mf * mf)
            / (lf * lf - mf * mf))
            .sqrt();
        let next = a * x * pl - b * plm1;
        plm1 = pl;
        pl = next;
        out[l - m] = pl;
    }
}

/// θ-derivative factor: d p_l^m/dθ = (l x p_l^m - e_{l,m} p_{l-1}^m)/sin θ.
fn theta_derivative_factor(l: usize, m: usize) -> f64 {
    if l == m {
        0.0
    } else {
        let lf = l as f64;
        let mf = m as f64;
        ((2.0 * lf + 1.0) / (2.0 * lf - 1.0) * (lf * lf - mf * mf)).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Grid fields
// ---------------------------------------------------------------------------

/// Scalar function sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct GridField {
    grid: Arc<SphGrid>,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Arc<SphGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "value count must match grid");
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<SphGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<SphGrid>, value: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_fn(grid: Arc<SphGrid>, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nlat() {
            for j in 0..grid.nlon() {
                values.push(f(grid.colatitude(i), grid.longitude(j)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<SphGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Quadrature integral against dμ₀.
    pub fn integrate(&self) -> f64 {
        let mut total = 0.0;
        let nlon = self.grid.nlon();
        for i in 0..self.grid.nlat() {
            let mut row = 0.0;
            for j in 0..nlon {
                row += self.values[i * nlon + j];
            }
            total += self.grid.colat_weight[i] * row;
        }
        total * self.grid.lon_weight
    }

    /// L²(dμ₀) norm by quadrature.
    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        let nlon = self.grid.nlon();
        for i in 0..self.grid.nlat() {
            let mut row = 0.0;
            for j in 0..nlon {
                let v = self.values[i * nlon + j];
                row += v * v;
            }
            total += self.grid.colat_weight[i] * row;
        }
        (total * self.grid.lon_weight).max(0.0).sqrt()
    }

    /// Quadrature inner product ⟨self, other⟩ with respect to dμ₀.
    pub fn inner(&self, other: &GridField) -> f64 {
        assert!(self.grid.compatible(&other.grid), "grid mismatch");
        let mut total = 0.0;
        let nlon = self.grid.nlon();
        for i in 0..self.grid.nlat() {
            let mut row = 0.0;
            for j in 0..nlon {
                row += self.values[i * nlon + j] * other.values[i * nlon + j];
            }
            total += self.grid.colat_weight[i] * row;
        }
        total * self.grid.lon_weight
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> GridField {
        GridField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &GridField) -> GridField {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridField) -> GridField {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridField) -> GridField {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> GridField {
        assert!(self.grid.compatible(&other.grid), "grid mismatch");
        GridField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &GridField) {
        assert!(self.grid.compatible(&other.grid), "grid mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// Coefficients of the orthonormal real harmonics up to `lmax`, by
    /// quadrature against the basis.
    pub fn analyze(&self, lmax: usize) -> Result<SpectralField> {
        self.grid.require(lmax)?;
        let grid = &self.grid;
        let nlat = grid.nlat();
        let nlon = grid.nlon();
        let ftab = grid.fourier_table(lmax);
        let ptab = grid.plm_table(lmax);
        let ncol = (lmax + 1) * (lmax + 2) / 2;

        // Fourier stage: longitude sums per colatitude, weights folded in.
        let mut cosm = vec![0.0; (lmax + 1) * nlat];
        let mut sinm = vec![0.0; (lmax + 1) * nlat];
        for i in 0..nlat {
            let row = &self.values[i * nlon..(i + 1) * nlon];
            let w = grid.colat_weight[i] * grid.lon_weight;
            for m in 0..=lmax {
                let ct = &ftab.cos[m * ftab.nlon..(m + 1) * ftab.nlon];
                let st = &ftab.sin[m * ftab.nlon..(m + 1) * ftab.nlon];
                let mut c = 0.0;
                let mut s = 0.0;
                for j in 0..nlon {
                    c += row[j] * ct[j];
                    s += row[j] * st[j];
                }
                cosm[m * nlat + i] = w * c;
                sinm[m * nlat + i] = w * s;
            }
        }

        // Legendre stage.
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut out = SpectralField::zeros(lmax);
        for i in 0..nlat {
            let p = &ptab[i * ncol..(i + 1) * ncol];
            for m in 0..=lmax {
                let (c, s) = (cosm[m * nlat + i], sinm[m * nlat + i]);
                for l in m..=lmax {
                    let plm = p[tri(l, m)];
                    if m == 0 {
                        out.coeffs[sh_index(l, 0)] += plm * c;
                    } else {
                        out.coeffs[sh_index(l, m as isize)] += sqrt2 * plm * c;
                        out.coeffs[sh_index(l, -(m as isize))] += sqrt2 * plm * s;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// R³-valued function on the grid, stored componentwise.
#[derive(Debug, Clone)]
pub struct Vec3Field {
    pub x: GridField,
    pub y: GridField,
    pub z: GridField,
}

impl Vec3Field {
    pub fn new(x: GridField, y: GridField, z: GridField) -> Self {
        assert!(x.grid().compatible(y.grid()) && y.grid().compatible(z.grid()));
        Self { x, y, z }
    }

    pub fn zeros(grid: Arc<SphGrid>) -> Self {
        Self {
            x: GridField::zeros(grid.clone()),
            y: GridField::zeros(grid.clone()),
            z: GridField::zeros(grid),
        }
    }

    pub fn constant(grid: Arc<SphGrid>, v: Vector3<f64>) -> Self {
        Self {
            x: GridField::constant(grid.clone(), v.x),
            y: GridField::constant(grid.clone(), v.y),
            z: GridField::constant(grid, v.z),
        }
    }

    pub fn from_fn(grid: Arc<SphGrid>, mut f: impl FnMut(f64, f64) -> Vector3<f64>) -> Self {
        let mut xs = Vec::with_capacity(grid.len());
        let mut ys = Vec::with_capacity(grid.len());
        let mut zs = Vec::with_capacity(grid.len());
        for i in 0..grid.nlat() {
            for j in 0..grid.nlon() {
                let v = f(grid.colatitude(i), grid.longitude(j));
                xs.push(v.x);
                ys.push(v.y);
                zs.push(v.z);
            }
        }
        Self {
            x: GridField::new(grid.clone(), xs),
            y: GridField::new(grid.clone(), ys),
            z: GridField::new(grid, zs),
        }
    }

    /// The reference embedding i₀: node positions on the unit sphere.
    pub fn unit_positions(grid: Arc<SphGrid>) -> Self {
        Self::from_fn(grid, |theta, phi| {
            Vector3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            )
        })
    }

    pub fn grid(&self) -> &Arc<SphGrid> {
        self.x.grid()
    }

    pub fn len(&self) -> usize {
        self.x.values().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn at(&self, node: usize) -> Vector3<f64> {
        Vector3::new(
            self.x.values()[node],
            self.y.values()[node],
            self.z.values()[node],
        )
    }

    pub fn set(&mut self, node: usize, v: Vector3<f64>) {
        self.x.values_mut()[node] = v.x;
        self.y.values_mut()[node] = v.y;
        self.z.values_mut()[node] = v.z;
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn components(&self) -> [&GridField; 3] {
        [&self.x, &self.y, &self.z]
    }

    pub fn scale(&self, s: f64) -> Vec3Field {
        Vec3Field {
            x: self.x.scale(s),
            y: self.y.scale(s),
            z: self.z.scale(s),
        }
    }

    pub fn add(&self, other: &Vec3Field) -> Vec3Field {
        Vec3Field {
            x: self.x.add(&other.x),
            y: self.y.add(&other.y),
            z: self.z.add(&other.z),
        }
    }

    pub fn sub(&self, other: &Vec3Field) -> Vec3Field {
        Vec3Field {
            x: self.x.sub(&other.x),
            y: self.y.sub(&other.y),
            z: self.z.sub(&other.z),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Vec3Field) {
        self.x.axpy(s, &other.x);
        self.y.axpy(s, &other.y);
        self.z.axpy(s, &other.z);
    }

    /// Pointwise dot product with another vector field.
    pub fn dot(&self, other: &Vec3Field) -> GridField {
        let mut out = GridField::zeros(self.grid().clone());
        for k in 0..self.len() {
            out.values_mut()[k] = self.at(k).dot(&other.at(k));
        }
        out
    }

    /// Pointwise multiplication by a scalar field.
    pub fn mul_scalar_field(&self, f: &GridField) -> Vec3Field {
        Vec3Field {
            x: self.x.mul(f),
            y: self.y.mul(f),
            z: self.z.mul(f),
        }
    }

    /// Pointwise Euclidean norm as a scalar field.
    pub fn norm_field(&self) -> GridField {
        let mut out = GridField::zeros(self.grid().clone());
        for k in 0..self.len() {
            out.values_mut()[k] = self.at(k).norm();
        }
        out
    }

    /// L²(dμ₀) norm of the vector field.
    pub fn l2_norm(&self) -> f64 {
        let sq = self.x.inner(&self.x) + self.y.inner(&self.y) + self.z.inner(&self.z);
        sq.max(0.0).sqrt()
    }

    /// Componentwise quadrature integral.
    pub fn integrate(&self) -> Vector3<f64> {
        Vector3::new(self.x.integrate(), self.y.integrate(), self.z.integrate())
    }

    pub fn analyze(&self, lmax: usize) -> Result<[SpectralField; 3]> {
        Ok([
            self.x.analyze(lmax)?,
            self.y.analyze(lmax)?,
            self.z.analyze(lmax)?,
        ])
    }

    /// Graded Sobolev norm of the vector field: root of the summed squared
    /// componentwise norms at index `n`, computed at band limit `lmax`.
    pub fn sobolev_norm(&self, lmax: usize, n: f64) -> Result<f64> {
        let c = self.analyze(lmax)?;
        let s: f64 = c.iter().map(|f| f.sobolev_norm(n).powi(2)).sum();
        Ok(s.sqrt())
    }

    /// Componentwise dyadic smoothing.
    pub fn smooth(&self, j: u32, lmax: usize) -> Result<Vec3Field> {
        let grid = self.grid().clone();
        let c = self.analyze(lmax)?;
        Ok(Vec3Field::new(
            c[0].smooth(j).synthesize(grid.clone())?,
            c[1].smooth(j).synthesize(grid.clone())?,
            c[2].smooth(j).synthesize(grid)?,
        ))
    }

    /// Componentwise hard band-limit to degree `lcut`.
    pub fn truncate_degree(&self, lcut: usize, lmax: usize) -> Result<Vec3Field> {
        let grid = self.grid().clone();
        let c = self.analyze(lmax)?;
        Ok(Vec3Field::new(
            c[0].truncate_degree(lcut).synthesize(grid.clone())?,
            c[1].truncate_degree(lcut).synthesize(grid.clone())?,
            c[2].truncate_degree(lcut).synthesize(grid)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Spectral fields
// ---------------------------------------------------------------------------

/// Flat coefficient index of (l, m): degree blocks are contiguous.
pub fn sh_index(l: usize, m: isize) -> usize {
    debug_assert!(m.unsigned_abs() <= l);
    l * l + (m + l as isize) as usize
}

/// Real spherical-harmonic coefficient table for a scalar function on S².
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    lmax: usize,
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(lmax: usize) -> Self {
        Self {
            lmax,
            coeffs: vec![0.0; (lmax + 1) * (lmax + 1)],
        }
    }

    pub fn from_coeffs(lmax: usize, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), (lmax + 1) * (lmax + 1));
        Self { lmax, coeffs }
    }

    /// Field with a single unit coefficient at (l, m).
    pub fn unit(lmax: usize, l: usize, m: isize) -> Self {
        let mut f = Self::zeros(lmax);
        f.set(l, m, 1.0);
        f
    }

    /// Uniformly random coefficients in [-1, 1] on degrees `lmin..=lmax`.
    pub fn random_band(lmax: usize, lmin: usize, rng: &mut impl Rng) -> Self {
        let mut f = Self::zeros(lmax);
        for l in lmin..=lmax {
            for m in -(l as isize)..=(l as isize) {
                f.set(l, m, rng.gen_range(-1.0..1.0));
            }
        }
        f
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn get(&self, l: usize, m: isize) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: isize, value: f64) {
        self.coeffs[sh_index(l, m)] = value;
    }

    pub fn scale(&self, s: f64) -> SpectralField {
        SpectralField {
            lmax: self.lmax,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        assert_eq!(self.lmax, other.lmax);
        SpectralField {
            lmax: self.lmax,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        assert_eq!(self.lmax, other.lmax);
        SpectralField {
            lmax: self.lmax,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &SpectralField) {
        assert_eq!(self.lmax, other.lmax);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    /// Coefficient-space inner product; equals the L²(dμ₀) inner product of
    /// the synthesized fields (Parseval).
    pub fn inner(&self, other: &SpectralField) -> f64 {
        assert_eq!(self.lmax, other.lmax);
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    pub fn max_abs_diff(&self, other: &SpectralField) -> f64 {
        assert_eq!(self.lmax, other.lmax);
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Spectral Laplacian: coefficient (l, m) multiplied by -l(l+1).
    pub fn laplacian(&self) -> SpectralField {
        let mut out = self.clone();
        for l in 0..=self.lmax {
            let factor = -((l * (l + 1)) as f64);
            for m in -(l as isize)..=(l as isize) {
                out.coeffs[sh_index(l, m)] *= factor;
            }
        }
        out
    }

    /// Dyadic smoothing: keep coefficients with l(l+1) <= 2^j (a spectral
    /// cutoff on the eigenvalues of -Δ), zero the rest.
    pub fn smooth(&self, j: u32) -> SpectralField {
        let cutoff = 2.0f64.powi(j as i32);
        let mut out = self.clone();
        for l in 0..=self.lmax {
            if (l * (l + 1)) as f64 > cutoff {
                for m in -(l as isize)..=(l as isize) {
                    out.coeffs[sh_index(l, m)] = 0.0;
                }
            }
        }
        out
    }

    /// Smallest cutoff index that makes `smooth` the identity at this band
    /// limit: 2^j >= lmax(lmax+1).
    pub fn full_smoothing_index(lmax: usize) -> u32 {
        let lam = (lmax * (lmax + 1)) as f64;
        let mut j = 0u32;
        while 2.0f64.powi(j as i32) < lam {
            j += 1;
        }
        j
    }

    /// Hard band-limit: zero all degrees above `lcut`.
    pub fn truncate_degree(&self, lcut: usize) -> SpectralField {
        let mut out = self.clone();
        for l in (lcut + 1)..=self.lmax {
            for m in -(l as isize)..=(l as isize) {
                out.coeffs[sh_index(l, m)] = 0.0;
            }
        }
        out
    }

    /// Graded Sobolev norm √(Σ (1 + l(l+1))ⁿ a²), spectrally equivalent to
    /// the chart-based Hⁿ norm on the round sphere.
    pub fn sobolev_norm(&self, n: f64) -> f64 {
        let mut total = 0.0;
        for l in 0..=self.lmax {
            let w = (1.0 + (l * (l + 1)) as f64).powf(n);
            let mut block = 0.0;
            for m in -(l as isize)..=(l as isize) {
                let c = self.coeffs[sh_index(l, m)];
                block += c * c;
            }
            total += w * block;
        }
        total.sqrt()
    }

    /// Coefficients of ∂φ of the expansion (an exact rotation within each
    /// (l, |m|) pair).
    pub fn phi_derivative_coeffs(&self) -> SpectralField {
        let mut out = SpectralField::zeros(self.lmax);
        for l in 0..=self.lmax {
            for m in 1..=(l as isize) {
                let a_cos = self.coeffs[sh_index(l, m)];
                let a_sin = self.coeffs[sh_index(l, -m)];
                out.coeffs[sh_index(l, m)] = m as f64 * a_sin;
                out.coeffs[sh_index(l, -m)] = -(m as f64) * a_cos;
            }
        }
        out
    }

    /// Pointwise values Σ a_{l,m} Y_{l,m} at the grid nodes.
    pub fn synthesize(&self, grid: Arc<SphGrid>) -> Result<GridField> {
        grid.require(self.lmax)?;
        let values = self.synthesize_kernel(&grid, Mode::Value);
        Ok(GridField::new(grid, values))
    }

    /// Exact coordinate derivatives (∂θ, ∂φ) of the truncated expansion at
    /// the nodes.
    pub fn differentiate(&self, grid: Arc<SphGrid>) -> Result<(GridField, GridField)> {
        // First derivatives of a degree-l expansion carry polynomial content
        // of degree l+1; demand one extra degree of grid headroom.
        grid.require(self.lmax + 1)?;
        let dtheta = self.synthesize_kernel(&grid, Mode::DTheta);
        let dphi = self
            .phi_derivative_coeffs()
            .synthesize_kernel(&grid, Mode::Value);
        Ok((
            GridField::new(grid.clone(), dtheta),
            GridField::new(grid, dphi),
        ))
    }

    /// Exact second coordinate derivatives (∂θθ, ∂θφ, ∂φφ) at the nodes.
    pub fn second_derivatives(
        &self,
        grid: Arc<SphGrid>,
    ) -> Result<(GridField, GridField, GridField)> {
        grid.require(self.lmax + 1)?;
        let dtt = self.synthesize_kernel(&grid, Mode::DThetaTheta);
        let rot = self.phi_derivative_coeffs();
        let dtp = rot.synthesize_kernel(&grid, Mode::DTheta);
        let dpp = rot.phi_derivative_coeffs().synthesize_kernel(&grid, Mode::Value);
        Ok((
            GridField::new(grid.clone(), dtt),
            GridField::new(grid.clone(), dtp),
            GridField::new(grid, dpp),
        ))
    }

    fn synthesize_kernel(&self, grid: &Arc<SphGrid>, mode: Mode) -> Vec<f64> {
        let lmax = self.lmax;
        let nlat = grid.nlat();
        let nlon = grid.nlon();
        let ptab = grid.plm_table(lmax);
        let ftab = grid.fourier_table(lmax);
        let ncol = (lmax + 1) * (lmax + 2) / 2;
        let sqrt2 = std::f64::consts::SQRT_2;

        let mut values = vec![0.0; nlat * nlon];
        for i in 0..nlat {
            let p = &ptab[i * ncol..(i + 1) * ncol];
            let x = grid.cos_theta[i];
            let sx = grid.sin_theta[i];
            // Accumulate the colatitude part per azimuthal order.
            let mut gc = vec![0.0; lmax + 1];
            let mut gs = vec![0.0; lmax + 1];
            for m in 0..=lmax {
                let mut c = 0.0;
                let mut s = 0.0;
                for l in m..=lmax {
                    let plm = p[tri(l, m)];
                    let basis = match mode {
                        Mode::Value => plm,
                        Mode::DTheta => dtheta_basis(l, m, x, sx, plm, p),
                        Mode::DThetaTheta => {
                            let dt = dtheta_basis(l, m, x, sx, plm, p);
                            let mf = m as f64;
                            -x / sx * dt - ((l * (l + 1)) as f64 - mf * mf / (sx * sx)) * plm
                        }
                    };
                    if m == 0 {
                        c += self.coeffs[sh_index(l, 0)] * basis;
                    } else {
                        c += self.coeffs[sh_index(l, m as isize)] * basis * sqrt2;
                        s += self.coeffs[sh_index(l, -(m as isize))] * basis * sqrt2;
                    }
                }
                gc[m] = c;
                gs[m] = s;
            }
            for j in 0..nlon {
                let mut v = gc[0];
                for m in 1..=lmax {
                    v += gc[m] * ftab.cos[m * ftab.nlon + j] + gs[m] * ftab.sin[m * ftab.nlon + j];
                }
                values[i * nlon + j] = v;
            }
        }
        values
    }

    /// Serialize as CSV rows `l,m,value` with 17-significant-digit floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,m,value\n");
        for l in 0..=self.lmax {
            for m in -(l as isize)..=(l as isize) {
                let _ = writeln!(out, "{},{},{}", l, m, format_f64(self.get(l, m)));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SpectralField> {
        let mut entries = Vec::new();
        let mut lmax = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('l')) {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |p: Option<&str>, what: &str| -> Result<f64> {
                p.and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        MembraneError::InvalidConfig(format!(
                            "bad {what} in spectral CSV line {}",
                            lineno + 1
                        ))
                    })
            };
            let l = parse(parts.next(), "degree")? as usize;
            let m = parse(parts.next(), "order")? as isize;
            let v = parse(parts.next(), "value")?;
            lmax = lmax.max(l);
            entries.push((l, m, v));
        }
        let mut field = SpectralField::zeros(lmax);
        for (l, m, v) in entries {
            field.set(l, m, v);
        }
        Ok(field)
    }
}

#[derive(Clone, Copy)]
enum Mode {
    Value,
    DTheta,
    DThetaTheta,
}

fn dtheta_basis(l: usize, m: usize, x: f64, sx: f64, plm: f64, p: &[f64]) -> f64 {
    let lf = l as f64;
    if l == m {
        lf * x * plm / sx
    } else {
        (lf * x * plm - theta_derivative_factor(l, m) * p[tri(l - 1, m)]) / sx
    }
}

/// 17-significant-digit decimal form; round-trips 64-bit floats in text.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Ambient-space surface gradient of a scalar expansion on the unit sphere:
/// ∂θf · e_θ + (∂φf / sin θ) · e_φ. Tangent to the sphere pointwise.
pub fn surface_gradient(c: &SpectralField, grid: Arc<SphGrid>) -> Result<Vec3Field> {
    let (dt, dp) = c.differentiate(grid.clone())?;
    let nlat = grid.nlat();
    let nlon = grid.nlon();
    let mut out = Vec3Field::zeros(grid.clone());
    for i in 0..nlat {
        let theta = grid.colatitude(i);
        let (st, ct) = (theta.sin(), theta.cos());
        for j in 0..nlon {
            let phi = grid.longitude(j);
            let (sp, cp) = (phi.sin(), phi.cos());
            let e_theta = Vector3::new(ct * cp, ct * sp, -st);
            let e_phi = Vector3::new(-sp, cp, 0.0);
            let k = i * nlon + j;
            let v = e_theta * dt.values()[k] + e_phi * (dp.values()[k] / st);
            out.set(k, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadrature_weights_sum_to_sphere_area() {
        for lmax in [4, 8, 16, 32] {
            let grid = SphGrid::for_lmax(lmax);
            let total: f64 = grid.node_weights().iter().sum();
            assert!(
                (total - 4.0 * PI).abs() / (4.0 * PI) < 1e-12,
                "lmax={lmax}: weights sum {total}"
            );
        }
    }

    #[test]
    fn analyze_constant_field() {
        let grid = SphGrid::for_lmax(8);
        let f = GridField::constant(grid, 1.0);
        let c = f.analyze(8).unwrap();
        assert!((c.get(0, 0) - (4.0 * PI).sqrt()).abs() < 1e-12);
        for l in 1..=8usize {
            for m in -(l as isize)..=(l as isize) {
                assert!(c.get(l, m).abs() < 1e-12, "leak into ({l},{m})");
            }
        }
    }

    #[test]
    fn analyze_cos_theta_matches_quadrature_oracle() {
        // Oracle: direct quadrature of cosθ·Y₁⁰ at much higher resolution.
        let fine = SphGrid::for_lmax(64);
        let y10 = SpectralField::unit(1, 1, 0).synthesize(fine.clone()).unwrap();
        let ct = GridField::from_fn(fine, |t, _| t.cos());
        let oracle = ct.inner(&y10);

        let grid = SphGrid::for_lmax(8);
        let f = GridField::from_fn(grid, |t, _| t.cos());
        let c = f.analyze(8).unwrap();
        assert!((c.get(1, 0) - oracle).abs() < 1e-12);
        assert!((c.get(1, 0) - (4.0 * PI / 3.0).sqrt()).abs() < 1e-12);
        for l in 0..=8usize {
            for m in -(l as isize)..=(l as isize) {
                if (l, m) != (1, 0) {
                    assert!(c.get(l, m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn roundtrip_on_band_limited_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for lmax in [4usize, 8, 16, 32] {
            let grid = SphGrid::for_lmax(lmax);
            let c = SpectralField::random_band(lmax, 0, &mut rng);
            let f = c.synthesize(grid.clone()).unwrap();
            let back = f.analyze(lmax).unwrap();
            assert!(
                back.max_abs_diff(&c) < 1e-10,
                "roundtrip failure at lmax={lmax}: {}",
                back.max_abs_diff(&c)
            );
        }
    }

    #[test]
    fn single_coefficient_roundtrip() {
        let grid = SphGrid::for_lmax(8);
        let c = SpectralField::unit(8, 2, 1);
        let f = c.synthesize(grid).unwrap();
        let back = f.analyze(8).unwrap();
        assert!(back.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn parseval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lmax = 12;
        let grid = SphGrid::for_lmax(lmax);
        let c = SpectralField::random_band(lmax, 0, &mut rng);
        let f = c.synthesize(grid).unwrap();
        let quad = f.mul(&f).integrate();
        let spec: f64 = c.coeffs().iter().map(|a| a * a).sum();
        assert!((quad - spec).abs() / spec < 1e-10);
    }

    #[test]
    fn synthesize_zero_and_constant() {
        let grid = SphGrid::for_lmax(6);
        let zero = SpectralField::zeros(6).synthesize(grid.clone()).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let mut c = SpectralField::zeros(6);
        c.set(0, 0, (4.0 * PI).sqrt());
        let one = c.synthesize(grid).unwrap();
        for v in one.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_multipliers_and_self_adjointness() {
        let mut c = SpectralField::zeros(3);
        c.set(1, 0, 1.0);
        c.set(1, 1, 0.5);
        let lap = c.laplacian();
        assert_eq!(lap.get(1, 0), -2.0);
        assert_eq!(lap.get(1, 1), -1.0);
        assert_eq!(lap.get(0, 0), 0.0);

        // Self-adjointness via quadrature on random band-limited fields.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lmax = 10;
        let grid = SphGrid::for_lmax(lmax);
        for _ in 0..20 {
            let a = SpectralField::random_band(lmax, 0, &mut rng);
            let b = SpectralField::random_band(lmax, 0, &mut rng);
            let la = a.laplacian().synthesize(grid.clone()).unwrap();
            let lb = b.laplacian().synthesize(grid.clone()).unwrap();
            let fa = a.synthesize(grid.clone()).unwrap();
            let fb = b.synthesize(grid.clone()).unwrap();
            let lhs = la.inner(&fb);
            let rhs = fa.inner(&lb);
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() / scale < 1e-10);
            // Negative semidefinite.
            assert!(la.inner(&fa) <= 1e-10);
        }
    }

    #[test]
    fn smooth_cutoff_and_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = SpectralField::random_band(8, 0, &mut rng);

        // Large j: identity. lmax(lmax+1) = 72 <= 2^7.
        assert_eq!(SpectralField::full_smoothing_index(8), 7);
        assert!(c.smooth(7).max_abs_diff(&c) == 0.0);

        // j = 0 keeps only l = 0 (1*2 = 2 > 2^0 = 1).
        let s0 = c.smooth(0);
        assert_eq!(s0.get(0, 0), c.get(0, 0));
        for l in 1..=8usize {
            for m in -(l as isize)..=(l as isize) {
                assert_eq!(s0.get(l, m), 0.0);
            }
        }

        // Projection property, exact.
        for j in 0..=7 {
            let once = c.smooth(j);
            assert!(once.smooth(j).max_abs_diff(&once) == 0.0);
        }
    }

    #[test]
    fn smoothing_gain_exponent_is_half_in_lambda_convention() {
        // ||S_j u||_b <= C 2^{j(b-a)/2} ||u||_a over random fields; measure
        // the constant and require it bounded.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (0.0, 2.0);
        let mut cmax: f64 = 0.0;
        for _ in 0..100 {
            let u = SpectralField::random_band(16, 0, &mut rng);
            let na = u.sobolev_norm(a);
            for j in 0..=9 {
                let s = u.smooth(j);
                let ratio = s.sobolev_norm(b) / (2.0f64.powf(j as f64 * (b - a) / 2.0) * na);
                cmax = cmax.max(ratio);
            }
        }
        assert!(cmax < 3.0, "gain constant {cmax}");
    }

    #[test]
    fn sobolev_norm_values_and_monotonicity() {
        let mut c = SpectralField::zeros(4);
        c.set(1, 0, 1.0);
        assert!((c.sobolev_norm(0.0) - 1.0).abs() < 1e-15);
        assert!((c.sobolev_norm(1.0) - 3.0f64.sqrt()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = SpectralField::random_band(8, 0, &mut rng);
        let mut prev = f.sobolev_norm(0.0);
        for k in 1..=8 {
            let n = f.sobolev_norm(k as f64 * 0.5);
            assert!(n >= prev - 1e-12);
            prev = n;
        }
    }

    #[test]
    fn differentiate_constant_and_cos_theta() {
        let grid = SphGrid::for_lmax(8);
        let c = GridField::constant(grid.clone(), 3.0).analyze(8).unwrap();
        let (dt, dp) = c.differentiate(grid.clone()).unwrap();
        assert!(dt.max_abs() < 1e-12);
        assert!(dp.max_abs() < 1e-12);

        let f = GridField::from_fn(grid.clone(), |t, _| t.cos());
        let c = f.analyze(8).unwrap();
        let (dt, dp) = c.differentiate(grid.clone()).unwrap();
        let want = GridField::from_fn(grid, |t, _| -t.sin());
        assert!(dt.sub(&want).max_abs() < 1e-10);
        assert!(dp.max_abs() < 1e-10);
    }

    #[test]
    fn differentiate_matches_finite_differences() {
        // Oracle: 4th-order centered differences in θ and φ on the analytic
        // synthesis, evaluated off-grid.
        let lmax = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = SpectralField::random_band(lmax, 0, &mut rng);
        let grid = SphGrid::for_lmax(lmax);
        let (dt, dp) = c.differentiate(grid.clone()).unwrap();

        let eval = |theta: f64, phi: f64| -> f64 {
            let mut v = 0.0;
            let mut col = vec![0.0; lmax + 1];
            for m in 0..=lmax {
                legendre_column(theta.cos(), theta.sin(), m, lmax, &mut col);
                for l in m..=lmax {
                    let p = col[l - m];
                    if m == 0 {
                        v += c.get(l, 0) * p;
                    } else {
                        let sq = std::f64::consts::SQRT_2;
                        v += c.get(l, m as isize) * sq * p * (m as f64 * phi).cos();
                        v += c.get(l, -(m as isize)) * sq * p * (m as f64 * phi).sin();
                    }
                }
            }
            v
        };

        let h = 1e-3;
        let fd = |f: &dyn Fn(f64) -> f64| {
            (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
        };
        for &(i, j) in &[(1usize, 0usize), (4, 7), (7, 12), (9, 3)] {
            let t0 = grid.colatitude(i);
            let p0 = grid.longitude(j);
            let k = i * grid.nlon() + j;
            let dt_fd = fd(&|d| eval(t0 + d, p0));
            let dp_fd = fd(&|d| eval(t0, p0 + d));
            assert!((dt.values()[k] - dt_fd).abs() < 1e-6, "dθ at node {k}");
            assert!((dp.values()[k] - dp_fd).abs() < 1e-6, "dφ at node {k}");
        }
    }

    #[test]
    fn second_derivatives_match_finite_differences_of_first() {
        let lmax = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = SpectralField::random_band(lmax, 0, &mut rng);
        // Evaluate exact second derivatives and compare against 4th-order FD
        // of the exact first derivative along φ plus the θθ consistency via
        // the Laplacian identity below.
        let grid = SphGrid::for_lmax(lmax);
        let (dtt, dtp, dpp) = c.second_derivatives(grid.clone()).unwrap();

        // φφ: exact coefficient rotation applied twice.
        let want_dpp = c
            .phi_derivative_coeffs()
            .phi_derivative_coeffs()
            .synthesize(grid.clone())
            .unwrap();
        assert!(dpp.sub(&want_dpp).max_abs() < 1e-10);

        // θφ: θ-derivative of the rotated coefficients.
        let (want_dtp, _) = c.phi_derivative_coeffs().differentiate(grid.clone()).unwrap();
        assert!(dtp.sub(&want_dtp).max_abs() < 1e-10);

        // θθ via the Laplace-Beltrami identity on the round sphere:
        // Δf = f_θθ + cotθ f_θ + f_φφ/sin²θ = -l(l+1) f.
        let (dt, _) = c.differentiate(grid.clone()).unwrap();
        let lap = c.laplacian().synthesize(grid.clone()).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..grid.nlat() {
            let t = grid.colatitude(i);
            for j in 0..grid.nlon() {
                let k = i * grid.nlon() + j;
                let lhs = dtt.values()[k]
                    + t.cos() / t.sin() * dt.values()[k]
                    + dpp.values()[k] / (t.sin() * t.sin());
                err = err.max((lhs - lap.values()[k]).abs());
            }
        }
        assert!(err < 1e-9, "Laplacian identity residual {err}");
    }

    #[test]
    fn integrate_examples() {
        let grid = SphGrid::for_lmax(8);
        let one = GridField::constant(grid.clone(), 1.0);
        assert!((one.integrate() - 4.0 * PI).abs() < 1e-12);

        let ct = GridField::from_fn(grid.clone(), |t, _| t.cos());
        assert!(ct.integrate().abs() < 1e-12);

        let ct2 = GridField::from_fn(grid, |t, _| t.cos().powi(2));
        assert!((ct2.integrate() - 4.0 * PI / 3.0).abs() < 1e-10);
    }

    #[test]
    fn resolution_errors() {
        let grid = SphGrid::new(4, 7).unwrap(); // supports lmax 3
        let f = GridField::constant(grid.clone(), 1.0);
        assert!(matches!(
            f.analyze(5),
            Err(MembraneError::ResolutionTooLow { .. })
        ));
        let c = SpectralField::zeros(6);
        assert!(matches!(
            c.synthesize(grid.clone()),
            Err(MembraneError::ResolutionTooLow { .. })
        ));
        // Differentiate needs one extra degree.
        let c3 = SpectralField::zeros(3);
        assert!(matches!(
            c3.differentiate(grid),
            Err(MembraneError::ResolutionTooLow { .. })
        ));
    }

    #[test]
    fn tail_smoothing_exponent() {
        // ||(1-S_j)u||_a <= C 2^{-j(b-a)/2} ||u||_b for a < b.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (a, b) = (0.0, 2.0);
        let mut cmax: f64 = 0.0;
        for _ in 0..100 {
            let u = SpectralField::random_band(16, 0, &mut rng);
            let nb = u.sobolev_norm(b);
            for j in 0..=9 {
                let tail = u.sub(&u.smooth(j));
                let ratio = tail.sobolev_norm(a) * 2.0f64.powf(j as f64 * (b - a) / 2.0) / nb;
                cmax = cmax.max(ratio);
            }
        }
        assert!(cmax < 3.0, "tail constant {cmax}");
    }

    #[test]
    fn surface_gradient_is_tangent_and_matches_cos_theta() {
        let grid = SphGrid::for_lmax(8);
        let c = GridField::from_fn(grid.clone(), |t, _| t.cos())
            .analyze(8)
            .unwrap();
        let g = surface_gradient(&c, grid.clone()).unwrap();
        // ∇(cos θ) = -sin θ e_θ; tangency against the position vector.
        for i in 0..grid.nlat() {
            for j in 0..grid.nlon() {
                let k = i * grid.nlon() + j;
                let pos = grid.position(i, j);
                let v = g.at(k);
                assert!(v.dot(&pos).abs() < 1e-10);
                let t = grid.colatitude(i);
                let e_theta = Vector3::new(
                    t.cos() * grid.longitude(j).cos(),
                    t.cos() * grid.longitude(j).sin(),
                    -t.sin(),
                );
                assert!((v - e_theta * (-t.sin())).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = SpectralField::random_band(5, 0, &mut rng);
        let text = c.to_csv();
        let back = SpectralField::from_csv(&text).unwrap();
        assert_eq!(back.lmax(), c.lmax());
        assert!(back.max_abs_diff(&c) == 0.0, "CSV must round-trip bitwise");
    }
}
