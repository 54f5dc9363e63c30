//! Extrinsic geometry of an embedded evolving surface w : S² → R³ and the
//! nonlinear surface-tension/pressure force.
//!
//! All coordinate derivatives of the embedding are evaluated analytically
//! from its truncated harmonic expansion, so the induced metric, normal,
//! second fundamental form and curvature are spectrally accurate at the
//! nodes. Curved differential operators (Laplace–Beltrami, tangential
//! divergence) are assembled pointwise through the Christoffel symbols
//! Γ^k_ij = g^{kl} ∂_i∂_j w · ∂_l w, which keeps them exact on band-limited
//! data at the round sphere.
//!
//! Sign conventions: h_ij = -N · ∂_i∂_j w and N is outward, so the unit
//! sphere has H = +2 and Δ_g w = -H N.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::error::{MembraneError, Result};
use crate::harmonics::{GridField, SphGrid, Vec3Field};

/// Relative determinant floor: nodes with det g <= DEGENERACY_FACTOR·(tr g)²
/// abort with a diagnostic instead of being regularized.
pub const DEGENERACY_FACTOR: f64 = 1e-12;

/// An R³-valued configuration of the membrane with the band limit used for
/// differentiation.
#[derive(Debug, Clone)]
pub struct Embedding {
    pos: Vec3Field,
    lmax: usize,
}

impl Embedding {
    pub fn new(pos: Vec3Field, lmax: usize) -> Self {
        Self { pos, lmax }
    }

    pub fn unit_sphere(grid: Arc<SphGrid>, lmax: usize) -> Self {
        Self::sphere(grid, lmax, 1.0)
    }

    pub fn sphere(grid: Arc<SphGrid>, lmax: usize, radius: f64) -> Self {
        Self {
            pos: Vec3Field::unit_positions(grid).scale(radius),
            lmax,
        }
    }

    pub fn pos(&self) -> &Vec3Field {
        &self.pos
    }

    pub fn grid(&self) -> &Arc<SphGrid> {
        self.pos.grid()
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    /// Deviation from the reference embedding i₀.
    pub fn deviation(&self) -> Vec3Field {
        self.pos
            .sub(&Vec3Field::unit_positions(self.grid().clone()))
    }

    pub fn geometry(&self) -> Result<GeometryCache> {
        geometry_of(self)
    }
}

/// Time jet of an R³-valued field: value and first/second time derivatives
/// on one time slice.
#[derive(Debug, Clone)]
pub struct Vec3Jet {
    pub value: Vec3Field,
    pub dot: Vec3Field,
    pub ddot: Vec3Field,
}

impl Vec3Jet {
    pub fn still(value: Vec3Field) -> Self {
        let grid = value.grid().clone();
        Self {
            value,
            dot: Vec3Field::zeros(grid.clone()),
            ddot: Vec3Field::zeros(grid),
        }
    }
}

/// Everything extrinsic about one embedding: per-node metric data and the
/// global area/volume, plus the curved differential operators built on it.
#[derive(Debug, Clone)]
pub struct GeometryCache {
    grid: Arc<SphGrid>,
    lmax: usize,
    pos: Vec3Field,
    dw_theta: Vec3Field,
    dw_phi: Vec3Field,
    // Metric g_ij, inverse, and second fundamental form h_ij as
    // (11, 12, 22) triples per node.
    g: Vec<[f64; 3]>,
    ginv: Vec<[f64; 3]>,
    h: Vec<[f64; 3]>,
    sqrt_detg: Vec<f64>,
    normal: Vec3Field,
    hmean: GridField,
    h_norm_sq: GridField,
    area_ratio: GridField,
    // Contracted Christoffel symbols γ^k = g^{ij} Γ^k_ij per node.
    christoffel_contracted: Vec<[f64; 2]>,
    area: f64,
    volume: f64,
    orientation_flipped: bool,
}

/// Compute the full geometry of an embedding.
pub fn geometry_of(w: &Embedding) -> Result<GeometryCache> {
    let grid = w.grid().clone();
    let lmax = w.lmax();
    let n = grid.len();
    let nlon = grid.nlon();

    let coeffs = w.pos().analyze(lmax)?;
    let mut first = Vec::with_capacity(3);
    let mut second = Vec::with_capacity(3);
    for c in &coeffs {
        first.push(c.differentiate(grid.clone())?);
        second.push(c.second_derivatives(grid.clone())?);
    }
    let deriv = |k: usize, which: usize, node: usize| -> f64 {
        match which {
            0 => first[k].0.values()[node], // θ
            _ => first[k].1.values()[node], // φ
        }
    };
    let dderiv = |k: usize, which: usize, node: usize| -> f64 {
        match which {
            0 => second[k].0.values()[node], // θθ
            1 => second[k].1.values()[node], // θφ
            _ => second[k].2.values()[node], // φφ
        }
    };

    let mut g = vec![[0.0; 3]; n];
    let mut ginv = vec![[0.0; 3]; n];
    let mut h = vec![[0.0; 3]; n];
    let mut sqrt_detg = vec![0.0; n];
    let mut normal = Vec3Field::zeros(grid.clone());
    let mut hmean = GridField::zeros(grid.clone());
    let mut h_norm_sq = GridField::zeros(grid.clone());
    let mut area_ratio = GridField::zeros(grid.clone());
    let mut christoffel = vec![[0.0; 2]; n];
    let mut dw_theta = Vec3Field::zeros(grid.clone());
    let mut dw_phi = Vec3Field::zeros(grid.clone());

    for node in 0..n {
        let wt = Vector3::new(deriv(0, 0, node), deriv(1, 0, node), deriv(2, 0, node));
        let wp = Vector3::new(deriv(0, 1, node), deriv(1, 1, node), deriv(2, 1, node));
        dw_theta.set(node, wt);
        dw_phi.set(node, wp);

        let g11 = wt.dot(&wt);
        let g12 = wt.dot(&wp);
        let g22 = wp.dot(&wp);
        let det = g11 * g22 - g12 * g12;
        let trace = g11 + g22;
        if det <= DEGENERACY_FACTOR * trace * trace {
            return Err(MembraneError::DegenerateEmbedding {
                node,
                det_g: det,
                threshold: DEGENERACY_FACTOR * trace * trace,
            });
        }
        g[node] = [g11, g12, g22];
        ginv[node] = [g22 / det, -g12 / det, g11 / det];
        sqrt_detg[node] = det.sqrt();

        let cross = wt.cross(&wp);
        let nvec = cross / cross.norm();
        normal.set(node, nvec);

        let wtt = Vector3::new(dderiv(0, 0, node), dderiv(1, 0, node), dderiv(2, 0, node));
        let wtp = Vector3::new(dderiv(0, 1, node), dderiv(1, 1, node), dderiv(2, 1, node));
        let wpp = Vector3::new(dderiv(0, 2, node), dderiv(1, 2, node), dderiv(2, 2, node));

        let h11 = -nvec.dot(&wtt);
        let h12 = -nvec.dot(&wtp);
        let h22 = -nvec.dot(&wpp);
        h[node] = [h11, h12, h22];

        let [i11, i12, i22] = ginv[node];
        hmean.values_mut()[node] = i11 * h11 + 2.0 * i12 * h12 + i22 * h22;

        // |h|² = tr((g⁻¹h)²).
        let m11 = i11 * h11 + i12 * h12;
        let m12 = i11 * h12 + i12 * h22;
        let m21 = i12 * h11 + i22 * h12;
        let m22 = i12 * h12 + i22 * h22;
        h_norm_sq.values_mut()[node] = m11 * m11 + 2.0 * m12 * m21 + m22 * m22;

        let i = node / nlon;
        area_ratio.values_mut()[node] = sqrt_detg[node] / grid.sin_colatitudes()[i];

        // Contracted Christoffels: γ^k = g^{ij} g^{kl} (∂_i∂_j w · ∂_l w).
        let c_tt = Vector2::new(wtt.dot(&wt), wtt.dot(&wp));
        let c_tp = Vector2::new(wtp.dot(&wt), wtp.dot(&wp));
        let c_pp = Vector2::new(wpp.dot(&wt), wpp.dot(&wp));
        let lower = c_tt * i11 + c_tp * (2.0 * i12) + c_pp * i22;
        christoffel[node] = [
            i11 * lower.x + i12 * lower.y,
            i12 * lower.x + i22 * lower.y,
        ];
    }

    let area = area_ratio.integrate();
    let mut volume = {
        let wdotn = w.pos().dot(&normal);
        wdotn.mul(&area_ratio).integrate() / 3.0
    };

    let mut orientation_flipped = false;
    if volume < 0.0 {
        orientation_flipped = true;
        volume = -volume;
        normal = normal.scale(-1.0);
        for node in 0..n {
            h[node] = [-h[node][0], -h[node][1], -h[node][2]];
        }
        hmean = hmean.scale(-1.0);
    }

    Ok(GeometryCache {
        grid,
        lmax,
        pos: w.pos().clone(),
        dw_theta,
        dw_phi,
        g,
        ginv,
        h,
        sqrt_detg,
        normal,
        hmean,
        h_norm_sq,
        area_ratio,
        christoffel_contracted: christoffel,
        area,
        volume,
        orientation_flipped,
    })
}

/// One-line global summary of a geometry, exportable as a CSV row.
#[derive(Debug, Clone, Copy)]
pub struct GeometrySummary {
    pub area: f64,
    pub volume: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub min_detg: f64,
}

impl GeometryCache {
    pub fn grid(&self) -> &Arc<SphGrid> {
        &self.grid
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn position(&self) -> &Vec3Field {
        &self.pos
    }

    pub fn normal(&self) -> &Vec3Field {
        &self.normal
    }

    pub fn mean_curvature(&self) -> &GridField {
        &self.hmean
    }

    pub fn second_fundamental_norm_sq(&self) -> &GridField {
        &self.h_norm_sq
    }

    pub fn area_ratio(&self) -> &GridField {
        &self.area_ratio
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn orientation_flipped(&self) -> bool {
        self.orientation_flipped
    }

    pub fn tangent_theta(&self) -> &Vec3Field {
        &self.dw_theta
    }

    pub fn tangent_phi(&self) -> &Vec3Field {
        &self.dw_phi
    }

    pub fn metric(&self, node: usize) -> Matrix2<f64> {
        let [g11, g12, g22] = self.g[node];
        Matrix2::new(g11, g12, g12, g22)
    }

    pub fn metric_inv(&self, node: usize) -> Matrix2<f64> {
        let [i11, i12, i22] = self.ginv[node];
        Matrix2::new(i11, i12, i12, i22)
    }

    pub fn second_fundamental(&self, node: usize) -> Matrix2<f64> {
        let [h11, h12, h22] = self.h[node];
        Matrix2::new(h11, h12, h12, h22)
    }

    pub fn min_detg(&self) -> f64 {
        self.sqrt_detg
            .iter()
            .fold(f64::INFINITY, |acc, s| acc.min(s * s))
    }

    pub fn summary(&self) -> GeometrySummary {
        let mut h_min = f64::INFINITY;
        let mut h_max = f64::NEG_INFINITY;
        for &v in self.hmean.values() {
            h_min = h_min.min(v);
            h_max = h_max.max(v);
        }
        GeometrySummary {
            area: self.area,
            volume: self.volume,
            h_min,
            h_max,
            min_detg: self.min_detg(),
        }
    }

    /// Integral against the induced measure dμ(w) = area_ratio · dμ₀.
    pub fn integrate_induced(&self, f: &GridField) -> f64 {
        f.mul(&self.area_ratio).integrate()
    }

    /// Scalar normal component η·N as a field.
    pub fn normal_component(&self, eta: &Vec3Field) -> GridField {
        eta.dot(&self.normal)
    }

    /// Tangential part η - (η·N)N.
    pub fn tangential_part(&self, eta: &Vec3Field) -> Vec3Field {
        let phi = self.normal_component(eta);
        eta.sub(&self.normal.mul_scalar_field(&phi))
    }

    /// Laplace-Beltrami operator of the induced metric applied to a scalar
    /// field, assembled pointwise from exact spectral derivatives:
    /// Δ_g φ = g^{ij} ∂_i∂_j φ - γ^k ∂_k φ.
    pub fn laplace_beltrami(&self, phi: &GridField) -> Result<GridField> {
        let c = phi.analyze(self.lmax)?;
        let (dt, dp) = c.differentiate(self.grid.clone())?;
        let (dtt, dtp, dpp) = c.second_derivatives(self.grid.clone())?;
        let mut out = GridField::zeros(self.grid.clone());
        for node in 0..self.grid.len() {
            let [i11, i12, i22] = self.ginv[node];
            let [ct, cp] = self.christoffel_contracted[node];
            out.values_mut()[node] = i11 * dtt.values()[node]
                + 2.0 * i12 * dtp.values()[node]
                + i22 * dpp.values()[node]
                - ct * dt.values()[node]
                - cp * dp.values()[node];
        }
        Ok(out)
    }

    /// Ambient representation of the surface gradient ∇_g φ = g^{ij} ∂_j φ ∂_i w.
    pub fn gradient_ambient(&self, phi: &GridField) -> Result<Vec3Field> {
        let c = phi.analyze(self.lmax)?;
        let (dt, dp) = c.differentiate(self.grid.clone())?;
        let mut out = Vec3Field::zeros(self.grid.clone());
        for node in 0..self.grid.len() {
            let [i11, i12, i22] = self.ginv[node];
            let a = i11 * dt.values()[node] + i12 * dp.values()[node];
            let b = i12 * dt.values()[node] + i22 * dp.values()[node];
            out.set(node, self.dw_theta.at(node) * a + self.dw_phi.at(node) * b);
        }
        Ok(out)
    }

    /// Tangential divergence of an ambient vector field tangent to the
    /// surface: div_g T = g^{ij} (∂_i T · ∂_j w).
    pub fn divergence_tangent(&self, t_field: &Vec3Field) -> Result<GridField> {
        let coeffs = t_field.analyze(self.lmax)?;
        let mut firsts = Vec::with_capacity(3);
        for c in &coeffs {
            firsts.push(c.differentiate(self.grid.clone())?);
        }
        let mut out = GridField::zeros(self.grid.clone());
        for node in 0..self.grid.len() {
            let dt = Vector3::new(
                firsts[0].0.values()[node],
                firsts[1].0.values()[node],
                firsts[2].0.values()[node],
            );
            let dp = Vector3::new(
                firsts[0].1.values()[node],
                firsts[1].1.values()[node],
                firsts[2].1.values()[node],
            );
            let [i11, i12, i22] = self.ginv[node];
            let wt = self.dw_theta.at(node);
            let wp = self.dw_phi.at(node);
            out.values_mut()[node] = i11 * dt.dot(&wt)
                + i12 * (dt.dot(&wp) + dp.dot(&wt))
                + i22 * dp.dot(&wp);
        }
        Ok(out)
    }

    /// Shape-operator image of a tangential ambient field:
    /// W(T) = h^k_m T̃^m ∂_k w (so W(T) = T on the unit sphere).
    pub fn weingarten(&self, t_field: &Vec3Field) -> Vec3Field {
        let mut out = Vec3Field::zeros(self.grid.clone());
        for node in 0..self.grid.len() {
            let wt = self.dw_theta.at(node);
            let wp = self.dw_phi.at(node);
            let t = t_field.at(node);
            let [i11, i12, i22] = self.ginv[node];
            // Covariant components and raised vector components of T.
            let (t1, t2) = (t.dot(&wt), t.dot(&wp));
            let (tu1, tu2) = (i11 * t1 + i12 * t2, i12 * t1 + i22 * t2);
            let [h11, h12, h22] = self.h[node];
            // h^k_m T̃^m = g^{kl} h_{lm} T̃^m.
            let hl1 = h11 * tu1 + h12 * tu2;
            let hl2 = h12 * tu1 + h22 * tu2;
            let (hu1, hu2) = (i11 * hl1 + i12 * hl2, i12 * hl1 + i22 * hl2);
            out.set(node, wt * hu1 + wp * hu2);
        }
        out
    }

    /// First variation of the unit normal under a deformation η of the
    /// embedding: δN = -∇_g(η·N) + W(⊤η). For η = ∂ₜw this is ∂ₜN.
    pub fn normal_variation(&self, eta: &Vec3Field) -> Result<Vec3Field> {
        let phi = self.normal_component(eta);
        let grad = self.gradient_ambient(&phi)?;
        let tang = self.tangential_part(eta);
        Ok(self.weingarten(&tang).sub(&grad))
    }

    /// Directional derivative of the mean curvature along a tangential
    /// ambient field: ∇H · T = g^{ij} (T·∂_j w) ∂_i H.
    pub fn mean_curvature_gradient_along(&self, t_field: &Vec3Field) -> Result<GridField> {
        let c = self.hmean.analyze(self.lmax)?;
        let (dt, dp) = c.differentiate(self.grid.clone())?;
        let mut out = GridField::zeros(self.grid.clone());
        for node in 0..self.grid.len() {
            let wt = self.dw_theta.at(node);
            let wp = self.dw_phi.at(node);
            let t = t_field.at(node);
            let [i11, i12, i22] = self.ginv[node];
            let (t1, t2) = (t.dot(&wt), t.dot(&wp));
            let (tu1, tu2) = (i11 * t1 + i12 * t2, i12 * t1 + i22 * t2);
            out.values_mut()[node] = tu1 * dt.values()[node] + tu2 * dp.values()[node];
        }
        Ok(out)
    }
}

/// The nonlinear force of the membrane equation:
/// F = (dμ(w)/dμ₀) (-H(w) + κ/Vol(w)) N(w) per node.
pub fn rhs_force(w: &Embedding, kappa: f64) -> Result<Vec3Field> {
    let cache = geometry_of(w)?;
    Ok(rhs_force_cached(&cache, kappa))
}

pub fn rhs_force_cached(cache: &GeometryCache, kappa: f64) -> Vec3Field {
    let p = kappa / cache.volume;
    let mut magnitude = GridField::zeros(cache.grid.clone());
    for node in 0..cache.grid.len() {
        magnitude.values_mut()[node] =
            cache.area_ratio.values()[node] * (p - cache.hmean.values()[node]);
    }
    cache.normal.mul_scalar_field(&magnitude)
}

/// First variation of the force F(w) in the direction η, evaluated on one
/// time slice. Assembled from the classical variation formulas
///
/// ```text
/// δ(dμ/dμ₀) = (dμ/dμ₀)(φH + div_g ⊤η),
/// δH        = -(Δ_g φ + |h|² φ) + ∇H·⊤η,
/// δVol      = ∫ φ dμ(w),
/// δN        = -∇_g φ + W(⊤η),          φ = η·N,
/// ```
///
/// with the h_ij = -N·∂²w sign convention. The finite-difference
/// consistency of this variation against F itself is enforced in tests.
pub fn force_variation(cache: &GeometryCache, eta: &Vec3Field, kappa: f64) -> Result<Vec3Field> {
    let phi = cache.normal_component(eta);
    let tang = cache.tangential_part(eta);

    let lap_phi = cache.laplace_beltrami(&phi)?;
    let grad_h_along = cache.mean_curvature_gradient_along(&tang)?;
    let div_t = cache.divergence_tangent(&tang)?;
    let delta_n = {
        let grad_phi = cache.gradient_ambient(&phi)?;
        cache.weingarten(&tang).sub(&grad_phi)
    };

    let pressure = kappa / cache.volume;
    let delta_vol = cache.integrate_induced(&phi);
    let delta_pressure = -kappa / (cache.volume * cache.volume) * delta_vol;

    let mut out = Vec3Field::zeros(cache.grid.clone());
    for node in 0..cache.grid.len() {
        let rho = cache.area_ratio.values()[node];
        let hm = cache.hmean.values()[node];
        let base = -hm + pressure;
        let trace_term = phi.values()[node] * hm + div_t.values()[node];
        let delta_h = -(lap_phi.values()[node]
            + cache.h_norm_sq.values()[node] * phi.values()[node])
            + grad_h_along.values()[node];
        let normal_scale = rho * (trace_term * base + (-delta_h + delta_pressure));
        let v = cache.normal.at(node) * normal_scale + delta_n.at(node) * (rho * base);
        out.set(node, v);
    }
    Ok(out)
}

/// The linearization Ψ'(w)η of the full evolution operator
/// Ψ(w) = ∂ₜ²w + b ∂ₜw - F(w) at one time slice:
/// Ψ'(w)η = ∂ₜ²η + b ∂ₜη - δF(w)[η]. The right-hand side depends on w only
/// through its spatial geometry; supplied time derivatives of η enter the
/// inertial terms.
pub fn apply_psi_prime(w: &Embedding, eta: &Vec3Jet, b: f64, kappa: f64) -> Result<Vec3Field> {
    let cache = geometry_of(w)?;
    apply_psi_prime_cached(&cache, eta, b, kappa)
}

pub fn apply_psi_prime_cached(
    cache: &GeometryCache,
    eta: &Vec3Jet,
    b: f64,
    kappa: f64,
) -> Result<Vec3Field> {
    let df = force_variation(cache, &eta.value, kappa)?;
    let mut out = eta.ddot.clone();
    out.axpy(b, &eta.dot);
    out.axpy(-1.0, &df);
    Ok(out)
}
