//! Nonlinear time integration of the membrane equation
//! ∂ₜ²w + b∂ₜw = (dμ(w)/dμ₀)(-H(w) + κ/Vol(w))N(w), with energy
//! diagnostics, sphere fitting, decay-rate measurement, the radial breather
//! ODE oracle, and lifespan scans.
//!
//! The integrator is classical RK4 on (w, ∂ₜw) with an optional spectral
//! anti-aliasing filter (2/3 rule) after each step. Radially symmetric
//! states reduce the PDE exactly to r̈ = -2r + 2/r, which is the strongest
//! nonlinear cross-check available.

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MembraneError, Result};
use crate::fit::linear_fit;
use crate::geometry::{geometry_of, rhs_force_cached, Embedding, GeometryCache};
use crate::harmonics::{SpectralField, SphGrid, Vec3Field};

// ---------------------------------------------------------------------------
// State and configuration
// ---------------------------------------------------------------------------

/// One Cauchy slice of the evolution: configuration, velocity, clock.
#[derive(Debug, Clone)]
pub struct State {
    pub w: Embedding,
    pub wdot: Vec3Field,
    pub t: f64,
}

impl State {
    pub fn is_finite(&self) -> bool {
        self.w.pos().is_finite() && self.wdot.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Normal,
    Tangent,
}

#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub l: usize,
    pub m: isize,
    pub amplitude: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone)]
pub enum InitialData {
    /// Harmonic perturbations of the unit sphere, zero initial velocity.
    Modes(Vec<ModeSpec>),
    /// Seeded random perturbation on degrees 1..=band, scaled so the graded
    /// n = 4 deviation norm equals `amplitude`.
    RandomBand { band: usize, amplitude: f64 },
    /// Round sphere of radius r0 with radial velocity rdot0.
    Radial { r0: f64, rdot0: f64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub lmax: usize,
    /// None selects the stability default 0.5/√(lmax(lmax+1)).
    pub dt: Option<f64>,
    pub t_end: f64,
    pub b: f64,
    pub kappa: f64,
    pub initial: InitialData,
    pub seed: u64,
    /// Diagnostics cadence in steps.
    pub sample_every: usize,
    /// Band-limit both state components to ⌊2·lmax/3⌋ after each step.
    pub antialias: bool,
    /// Graded norm indices reported per sample.
    pub norm_indices: Vec<f64>,
    /// Early exit when the first reported deviation norm exceeds this.
    pub norm_threshold: Option<f64>,
}

impl SimConfig {
    pub fn default_dt(lmax: usize) -> f64 {
        0.5 / ((lmax * (lmax + 1)) as f64).sqrt()
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or_else(|| Self::default_dt(self.lmax))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lmax < 2 {
            return Err(MembraneError::InvalidConfig(
                "lmax must be at least 2".into(),
            ));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(MembraneError::InvalidConfig(format!(
                    "dt must be positive, got {dt}"
                )));
            }
        }
        if !(self.t_end > 0.0) {
            return Err(MembraneError::InvalidConfig(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.b < 0.0 {
            return Err(MembraneError::InvalidConfig(format!(
                "damping must be nonnegative, got {}",
                self.b
            )));
        }
        if !(self.kappa > 0.0) {
            return Err(MembraneError::InvalidConfig(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.sample_every == 0 {
            return Err(MembraneError::InvalidConfig(
                "sample_every must be positive".into(),
            ));
        }
        match &self.initial {
            InitialData::Modes(modes) => {
                for m in modes {
                    if m.m.unsigned_abs() > m.l {
                        return Err(MembraneError::InvalidConfig(format!(
                            "mode order |{}| exceeds degree {}",
                            m.m, m.l
                        )));
                    }
                    if m.l > self.lmax {
                        return Err(MembraneError::InvalidConfig(format!(
                            "mode degree {} exceeds lmax {}",
                            m.l, self.lmax
                        )));
                    }
                }
            }
            InitialData::RandomBand { band, .. } => {
                if *band > self.lmax {
                    return Err(MembraneError::InvalidConfig(format!(
                        "random band {band} exceeds lmax {}",
                        self.lmax
                    )));
                }
            }
            InitialData::Radial { r0, .. } => {
                if !(*r0 > 0.0) {
                    return Err(MembraneError::InvalidConfig(format!(
                        "radial r0 must be positive, got {r0}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build the initial state on the grid sized for the configured band limit.
pub fn build_initial_state(cfg: &SimConfig) -> Result<State> {
    cfg.validate()?;
    let grid = SphGrid::for_lmax(cfg.lmax);
    let pos = Vec3Field::unit_positions(grid.clone());
    let (w, wdot) = match &cfg.initial {
        InitialData::Modes(modes) => {
            let mut w = pos.clone();
            for spec in modes {
                let y = SpectralField::unit(cfg.lmax, spec.l, spec.m);
                match spec.channel {
                    Channel::Normal => {
                        let f = y.synthesize(grid.clone())?;
                        w.axpy(spec.amplitude, &pos.mul_scalar_field(&f));
                    }
                    Channel::Tangent => {
                        let g = crate::harmonics::surface_gradient(&y, grid.clone())?;
                        w.axpy(spec.amplitude, &g);
                    }
                }
            }
            (w, Vec3Field::zeros(grid.clone()))
        }
        InitialData::RandomBand { band, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dev = Vec3Field::new(
                SpectralField::random_band(*band, 1, &mut rng).synthesize(grid.clone())?,
                SpectralField::random_band(*band, 1, &mut rng).synthesize(grid.clone())?,
                SpectralField::random_band(*band, 1, &mut rng).synthesize(grid.clone())?,
            );
            let norm = dev.sobolev_norm(cfg.lmax, 4.0)?;
            let mut w = pos.clone();
            if norm > 0.0 {
                w.axpy(amplitude / norm, &dev);
            }
            (w, Vec3Field::zeros(grid.clone()))
        }
        InitialData::Radial { r0, rdot0 } => (pos.scale(*r0), pos.scale(*rdot0)),
    };
    Ok(State {
        w: Embedding::new(w, cfg.lmax),
        wdot,
        t: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Time stepping
// ---------------------------------------------------------------------------

fn acceleration(
    pos: &Vec3Field,
    vel: &Vec3Field,
    lmax: usize,
    b: f64,
    kappa: f64,
    stage: usize,
) -> Result<Vec3Field> {
    let cache = geometry_of(&Embedding::new(pos.clone(), lmax)).map_err(|e| match e {
        MembraneError::DegenerateEmbedding { .. } => MembraneError::DegenerateAtStage {
            stage,
            source: Box::new(e),
        },
        other => other,
    })?;
    let mut f = rhs_force_cached(&cache, kappa);
    f.axpy(-b, vel);
    Ok(f)
}

/// One classical RK4 step of the first-order system (w, ∂ₜw); the optional
/// dyadic filter index band-limits both components after the step.
pub fn step(s: &State, dt: f64, b: f64, kappa: f64, filter_j: Option<u32>) -> Result<State> {
    let lmax = s.w.lmax();
    let w0 = s.w.pos();
    let v0 = &s.wdot;

    let a1 = acceleration(w0, v0, lmax, b, kappa, 1)?;

    let mut w1 = w0.clone();
    w1.axpy(dt / 2.0, v0);
    let mut v1 = v0.clone();
    v1.axpy(dt / 2.0, &a1);
    let a2 = acceleration(&w1, &v1, lmax, b, kappa, 2)?;

    let mut w2 = w0.clone();
    w2.axpy(dt / 2.0, &v1);
    let mut v2 = v0.clone();
    v2.axpy(dt / 2.0, &a2);
    let a3 = acceleration(&w2, &v2, lmax, b, kappa, 3)?;

    let mut w3 = w0.clone();
    w3.axpy(dt, &v2);
    let mut v3 = v0.clone();
    v3.axpy(dt, &a3);
    let a4 = acceleration(&w3, &v3, lmax, b, kappa, 4)?;

    let mut w = w0.clone();
    w.axpy(dt / 6.0, v0);
    w.axpy(dt / 3.0, &v1);
    w.axpy(dt / 3.0, &v2);
    w.axpy(dt / 6.0, &v3);

    let mut v = v0.clone();
    v.axpy(dt / 6.0, &a1);
    v.axpy(dt / 3.0, &a2);
    v.axpy(dt / 3.0, &a3);
    v.axpy(dt / 6.0, &a4);

    let (w, v) = if let Some(j) = filter_j {
        (w.smooth(j, lmax)?, v.smooth(j, lmax)?)
    } else {
        (w, v)
    };

    Ok(State {
        w: Embedding::new(w, lmax),
        wdot: v,
        t: s.t + dt,
    })
}

/// Physical energy E = ½∫|∂ₜw|²dμ₀ + Area(w) - κ log(Vol(w)/vol0);
/// conserved when b = 0, dissipated at rate b∫|∂ₜw|²dμ₀ otherwise.
pub fn energy(s: &State, kappa: f64, vol0: f64) -> Result<f64> {
    let cache = s.w.geometry()?;
    Ok(energy_cached(s, &cache, kappa, vol0))
}

fn energy_cached(s: &State, cache: &GeometryCache, kappa: f64, vol0: f64) -> f64 {
    let kinetic = 0.5 * s.wdot.dot(&s.wdot).integrate();
    kinetic + cache.area() - kappa * (cache.volume() / vol0).ln()
}

// ---------------------------------------------------------------------------
// Reports and the simulation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleRow {
    pub t: f64,
    pub energy: f64,
    pub area: f64,
    pub volume: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub min_detg: f64,
    pub fit_center: Vector3<f64>,
    pub fit_radius: f64,
    pub fit_rms: f64,
    /// ‖w - i₀‖ at each configured grading index.
    pub deviation_norms: Vec<f64>,
    /// ‖∂ₜw‖ₙ + ‖w - i₀‖ₙ at each configured grading index.
    pub energy_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    TimeReached,
    Degenerate { t: f64, detail: String },
    NormThreshold { t: f64 },
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub rows: Vec<SampleRow>,
    pub termination: Termination,
    pub dt: f64,
    pub norm_indices: Vec<f64>,
}

/// Full sampled trajectory (positions and velocities at every accepted
/// step), for cross-solver comparisons and residual evaluation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec3Field>,
    pub velocities: Vec<Vec3Field>,
}

/// Incremental simulation driver; the CLI drives it step by step for
/// checkpointing, tests mostly use [`simulate`].
pub struct Simulation {
    cfg: SimConfig,
    state: State,
    dt: f64,
    vol0: f64,
    filter: Option<u32>,
    steps_done: u64,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let state = build_initial_state(&cfg)?;
        Self::from_state(cfg, state)
    }

    /// Resume from an existing state (the clock is taken from the state).
    pub fn from_state(cfg: SimConfig, state: State) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.dt();
        let vol0 = state.w.geometry()?.volume();
        let filter = if cfg.antialias {
            Some(two_thirds_filter_index(cfg.lmax))
        } else {
            None
        };
        Ok(Self {
            cfg,
            state,
            dt,
            vol0,
            filter,
            steps_done: 0,
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn cfg(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn finished(&self) -> bool {
        self.state.t + 0.5 * self.dt >= self.cfg.t_end
    }

    pub fn step_once(&mut self) -> Result<()> {
        self.state = step(
            &self.state,
            self.dt,
            self.cfg.b,
            self.cfg.kappa,
            self.filter,
        )?;
        self.steps_done += 1;
        Ok(())
    }

    pub fn should_sample(&self) -> bool {
        self.steps_done % self.cfg.sample_every as u64 == 0
    }

    pub fn sample(&self) -> Result<SampleRow> {
        let cache = self.state.w.geometry()?;
        let fit = sphere_fit_cached(self.state.w.pos(), &cache)?;
        let deviation = self.state.w.deviation();
        let mut deviation_norms = Vec::with_capacity(self.cfg.norm_indices.len());
        let mut energy_norms = Vec::with_capacity(self.cfg.norm_indices.len());
        for &n in &self.cfg.norm_indices {
            let dn = deviation.sobolev_norm(self.cfg.lmax, n)?;
            let vn = self.state.wdot.sobolev_norm(self.cfg.lmax, n)?;
            deviation_norms.push(dn);
            energy_norms.push(dn + vn);
        }
        let summary = cache.summary();
        Ok(SampleRow {
            t: self.state.t,
            energy: energy_cached(&self.state, &cache, self.cfg.kappa, self.vol0),
            area: summary.area,
            volume: summary.volume,
            h_min: summary.h_min,
            h_max: summary.h_max,
            min_detg: summary.min_detg,
            fit_center: fit.center,
            fit_radius: fit.radius,
            fit_rms: fit.rms,
            deviation_norms,
            energy_norms,
        })
    }

    fn threshold_hit(&self, row: &SampleRow) -> bool {
        match self.cfg.norm_threshold {
            Some(th) => row.deviation_norms.first().is_some_and(|&d| d > th),
            None => false,
        }
    }
}

fn two_thirds_filter_index(lmax: usize) -> u32 {
    // Largest dyadic index whose cutoff keeps at most ⌊2·lmax/3⌋ degrees.
    let lcut = (2 * lmax) / 3;
    let lam = (lcut * (lcut + 1)) as f64;
    let mut j = 0u32;
    while 2.0f64.powi(j as i32 + 1) <= lam {
        j += 1;
    }
    j
}

/// Run a configured simulation to completion, sampling diagnostics at the
/// configured cadence. Step failures become the termination reason rather
/// than an error.
pub fn simulate(cfg: SimConfig) -> Result<SolveReport> {
    simulate_impl(cfg, false).map(|(r, _)| r)
}

/// As [`simulate`], additionally recording the full per-step trajectory.
pub fn simulate_with_trajectory(cfg: SimConfig) -> Result<(SolveReport, Trajectory)> {
    let (r, t) = simulate_impl(cfg, true)?;
    Ok((r, t.expect("trajectory requested")))
}

fn simulate_impl(cfg: SimConfig, keep_traj: bool) -> Result<(SolveReport, Option<Trajectory>)> {
    let mut sim = Simulation::new(cfg)?;
    let dt = sim.dt();
    let norm_indices = sim.cfg.norm_indices.clone();
    let mut rows = vec![sim.sample()?];
    let mut traj = keep_traj.then(|| Trajectory {
        times: vec![sim.state.t],
        positions: vec![sim.state.w.pos().clone()],
        velocities: vec![sim.state.wdot.clone()],
    });

    let termination = loop {
        if sim.finished() {
            break Termination::TimeReached;
        }
        match sim.step_once() {
            Ok(()) => {}
            Err(e) => {
                break Termination::Degenerate {
                    t: sim.state.t,
                    detail: e.to_string(),
                };
            }
        }
        if let Some(traj) = traj.as_mut() {
            traj.times.push(sim.state.t);
            traj.positions.push(sim.state.w.pos().clone());
            traj.velocities.push(sim.state.wdot.clone());
        }
        if sim.should_sample() {
            match sim.sample() {
                Ok(row) => {
                    let hit = sim.threshold_hit(&row);
                    let t = row.t;
                    rows.push(row);
                    if hit {
                        break Termination::NormThreshold { t };
                    }
                }
                Err(e) => {
                    break Termination::Degenerate {
                        t: sim.state.t,
                        detail: e.to_string(),
                    };
                }
            }
        }
    };

    Ok((
        SolveReport {
            rows,
            termination,
            dt,
            norm_indices,
        },
        traj,
    ))
}

// ---------------------------------------------------------------------------
// Sphere fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SphereFit {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub rms: f64,
}

/// Weighted least-squares sphere through the embedded nodes by Gauss-Newton
/// on Σ qᵢ(|wᵢ - a| - r)², initialized at the area-weighted centroid and
/// the equal-area radius.
pub fn sphere_fit(w: &Embedding) -> Result<SphereFit> {
    let cache = w.geometry()?;
    sphere_fit_cached(w.pos(), &cache)
}

fn sphere_fit_cached(pos: &Vec3Field, cache: &GeometryCache) -> Result<SphereFit> {
    let grid = pos.grid().clone();
    let base_weights = grid.node_weights();
    let n = grid.len();
    // Induced-measure weights.
    let q: Vec<f64> = (0..n)
        .map(|k| base_weights[k] * cache.area_ratio().values()[k])
        .collect();
    let qsum: f64 = q.iter().sum();

    let mut center = pos
        .mul_scalar_field(cache.area_ratio())
        .integrate()
        .scale(1.0 / cache.area());
    let mut radius = (cache.area() / (4.0 * std::f64::consts::PI)).sqrt();

    let mut gradient_norm = f64::INFINITY;
    for _ in 0..50 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for k in 0..n {
            let d = pos.at(k) - center;
            let dist = d.norm();
            if dist < 1e-14 {
                continue;
            }
            let u = d / dist;
            let r = dist - radius;
            // Jacobian row of the residual: (-u, -1).
            let row = Vector4::new(-u.x, -u.y, -u.z, -1.0);
            jtj += row * row.transpose() * q[k];
            jtr += row * (r * q[k]);
        }
        gradient_norm = jtr.norm();
        if gradient_norm <= 1e-12 {
            break;
        }
        let delta =
            jtj.lu()
                .solve(&(-jtr))
                .ok_or(MembraneError::SphereFitNoConvergence {
                    iterations: 50,
                    gradient_norm,
                    radius,
                })?;
        center += Vector3::new(delta.x, delta.y, delta.z);
        radius += delta.w;
    }
    if gradient_norm > 1e-12 {
        return Err(MembraneError::SphereFitNoConvergence {
            iterations: 50,
            gradient_norm,
            radius,
        });
    }

    let mut sse = 0.0;
    for k in 0..n {
        let r = (pos.at(k) - center).norm() - radius;
        sse += q[k] * r * r;
    }
    Ok(SphereFit {
        center,
        radius,
        rms: (sse / qsum).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Decay fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares exponential rate on a time window given as fractions of
/// the sampled range: fits log(value) on [t0 + w0·span, t0 + w1·span].
pub fn decay_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    if series.len() < 2 {
        return Err(MembraneError::InsufficientData {
            need: 10,
            got: series.len(),
        });
    }
    let t0 = series.first().unwrap().0;
    let t1 = series.last().unwrap().0;
    let lo = t0 + window.0 * (t1 - t0);
    let hi = t0 + window.1 * (t1 - t0);
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for &(t, v) in series {
        if t < lo || t > hi {
            continue;
        }
        if v <= 0.0 {
            return Err(MembraneError::NonpositiveValue { t, value: v });
        }
        ts.push(t);
        logs.push(v.ln());
    }
    if ts.len() < 10 {
        return Err(MembraneError::InsufficientData {
            need: 10,
            got: ts.len(),
        });
    }
    let (slope, intercept_log, r2) = linear_fit(&ts, &logs);
    Ok(DecayFit {
        rate: -slope,
        intercept: intercept_log.exp(),
        r_squared: r2,
    })
}

/// Keep the local maxima of a sampled signal; useful before rate-fitting an
/// oscillating decay. Falls back to the input when fewer than two interior
/// peaks exist.
pub fn peak_envelope(series: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut peaks = Vec::new();
    for w in series.windows(3) {
        if w[1].1 >= w[0].1 && w[1].1 >= w[2].1 {
            peaks.push(w[1]);
        }
    }
    if peaks.len() < 2 {
        series.to_vec()
    } else {
        peaks
    }
}

// ---------------------------------------------------------------------------
// Breather ODE
// ---------------------------------------------------------------------------

/// Trace of the radial breather r̈ = -2r + 2/r with its conserved energy
/// ṙ²/2 + r² - 2 log r and the measured oscillation period.
#[derive(Debug, Clone)]
pub struct BreatherTrace {
    pub times: Vec<f64>,
    pub r: Vec<f64>,
    pub rdot: Vec<f64>,
    pub ode_energy: Vec<f64>,
    /// Mean period between upward crossings of r = 1; the linearized value
    /// π when no full oscillation was observed.
    pub period: f64,
    pub period_measured: bool,
}

pub fn breather_ode(r0: f64, rdot0: f64, dt: f64, t_end: f64) -> Result<BreatherTrace> {
    if !(r0 > 0.0) {
        return Err(MembraneError::BlowDown { r: r0, t: 0.0 });
    }
    let force = |r: f64| -2.0 * r + 2.0 / r;
    let nsteps = (t_end / dt).ceil() as usize;
    let mut times = Vec::with_capacity(nsteps + 1);
    let mut rs = Vec::with_capacity(nsteps + 1);
    let mut vs = Vec::with_capacity(nsteps + 1);
    let (mut r, mut v, mut t) = (r0, rdot0, 0.0);
    times.push(t);
    rs.push(r);
    vs.push(v);
    for _ in 0..nsteps {
        let k1 = (v, force(r));
        let k2 = (v + dt / 2.0 * k1.1, force(r + dt / 2.0 * k1.0));
        let k3 = (v + dt / 2.0 * k2.1, force(r + dt / 2.0 * k2.0));
        let k4 = (v + dt * k3.1, force(r + dt * k3.0));
        r += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        v += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        t += dt;
        if r <= 0.0 {
            return Err(MembraneError::BlowDown { r, t });
        }
        times.push(t);
        rs.push(r);
        vs.push(v);
    }
    let ode_energy: Vec<f64> = rs
        .iter()
        .zip(&vs)
        .map(|(&r, &v)| v * v / 2.0 + r * r - 2.0 * r.ln())
        .collect();

    // Upward crossings of the equilibrium radius 1.
    let mut crossings = Vec::new();
    for k in 1..rs.len() {
        if rs[k - 1] < 1.0 && rs[k] >= 1.0 {
            let f = (1.0 - rs[k - 1]) / (rs[k] - rs[k - 1]);
            crossings.push(times[k - 1] + f * dt);
        }
    }
    let (period, period_measured) = if crossings.len() >= 2 {
        let diffs: Vec<f64> = crossings.windows(2).map(|w| w[1] - w[0]).collect();
        (diffs.iter().sum::<f64>() / diffs.len() as f64, true)
    } else {
        // Small-oscillation fallback: V''(1) = 4, so ω = 2 and T = π.
        (std::f64::consts::PI, false)
    };

    Ok(BreatherTrace {
        times,
        r: rs,
        rdot: vs,
        ode_energy,
        period,
        period_measured,
    })
}

// ---------------------------------------------------------------------------
// Lifespan scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LifespanStatus {
    /// Configured horizon reached without exit.
    Global,
    ThresholdReached,
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct LifespanEntry {
    pub epsilon: f64,
    pub t_exit: f64,
    pub status: LifespanStatus,
}

#[derive(Debug, Clone)]
pub struct LifespanScan {
    pub entries: Vec<LifespanEntry>,
    /// Log-log slope of T(ε) over the non-global entries, when at least two
    /// exist.
    pub loglog_slope: Option<f64>,
}

/// Run the template simulation at each ε (scaling the initial-data
/// amplitudes), recording the time at which the deviation norm exceeds the
/// threshold, the integration degenerates, or the horizon is reached.
pub fn lifespan_scan(
    epsilons: &[f64],
    b: f64,
    threshold: f64,
    template: &SimConfig,
) -> Result<LifespanScan> {
    let mut entries = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut cfg = template.clone();
        cfg.b = b;
        cfg.norm_threshold = Some(threshold);
        cfg.initial = scale_initial(&template.initial, eps);
        let report = simulate(cfg)?;
        let entry = match report.termination {
            Termination::TimeReached => LifespanEntry {
                epsilon: eps,
                t_exit: template.t_end,
                status: LifespanStatus::Global,
            },
            Termination::NormThreshold { t } => LifespanEntry {
                epsilon: eps,
                t_exit: t,
                status: LifespanStatus::ThresholdReached,
            },
            Termination::Degenerate { t, .. } => LifespanEntry {
                epsilon: eps,
                t_exit: t,
                status: LifespanStatus::Degenerate,
            },
        };
        entries.push(entry);
    }

    let finite: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.status == LifespanStatus::ThresholdReached && e.t_exit > 0.0)
        .map(|e| (e.epsilon.ln(), e.t_exit.ln()))
        .collect();
    let loglog_slope = if finite.len() >= 2 {
        let (ts, ys): (Vec<f64>, Vec<f64>) = finite.into_iter().unzip();
        Some(linear_fit(&ts, &ys).0)
    } else {
        None
    };

    Ok(LifespanScan {
        entries,
        loglog_slope,
    })
}

fn scale_initial(initial: &InitialData, eps: f64) -> InitialData {
    match initial {
        InitialData::Modes(modes) => InitialData::Modes(
            modes
                .iter()
                .map(|m| ModeSpec {
                    amplitude: m.amplitude * eps,
                    ..m.clone()
                })
                .collect(),
        ),
        InitialData::RandomBand { band, .. } => InitialData::RandomBand {
            band: *band,
            amplitude: eps,
        },
        InitialData::Radial { r0, rdot0 } => InitialData::Radial {
            r0: 1.0 + (r0 - 1.0) * eps,
            rdot0: rdot0 * eps,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::KAPPA_UNIT_SPHERE;
    use std::f64::consts::PI;

    fn radial_config(lmax: usize, r0: f64, t_end: f64, dt: f64) -> SimConfig {
        SimConfig {
            lmax,
            dt: Some(dt),
            t_end,
            b: 0.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::Radial { r0, rdot0: 0.0 },
            seed: 1,
            sample_every: 10,
            antialias: false,
            norm_indices: vec![4.0],
            norm_threshold: None,
        }
    }

    #[test]
    fn static_sphere_is_fixed_point() {
        let grid = SphGrid::for_lmax(12);
        let s = State {
            w: Embedding::unit_sphere(grid.clone(), 12),
            wdot: Vec3Field::zeros(grid),
            t: 0.0,
        };
        let mut cur = s.clone();
        let dt = 0.05;
        for _ in 0..20 {
            cur = step(&cur, dt, 0.0, KAPPA_UNIT_SPHERE, None).unwrap();
        }
        // Drift after one unit of time.
        let drift = cur.w.pos().sub(s.w.pos()).norm_field().max_abs();
        assert!(drift < 1e-12, "equilibrium drift {drift:.3e}");
    }

    #[test]
    fn radial_step_matches_scalar_rk4() {
        // Radial symmetry reduces the PDE exactly to r̈ = -2r + 2/r; one RK4
        // step of the PDE must match one scalar RK4 step to near machine
        // precision.
        let lmax = 8;
        let grid = SphGrid::for_lmax(lmax);
        let r0 = 1.05;
        let dt = 1e-3;
        let s = State {
            w: Embedding::sphere(grid.clone(), lmax, r0),
            wdot: Vec3Field::zeros(grid.clone()),
            t: 0.0,
        };
        let after = step(&s, dt, 0.0, KAPPA_UNIT_SPHERE, None).unwrap();

        let force = |r: f64| -2.0 * r + 2.0 / r;
        let (r, v) = (r0, 0.0);
        let k1 = (v, force(r));
        let k2 = (v + dt / 2.0 * k1.1, force(r + dt / 2.0 * k1.0));
        let k3 = (v + dt / 2.0 * k2.1, force(r + dt / 2.0 * k2.0));
        let k4 = (v + dt * k3.1, force(r + dt * k3.0));
        let r_next = r + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);

        let pde_r = after.w.pos().at(0).norm();
        assert!(
            (pde_r - r_next).abs() < 1e-10,
            "radial reduction broken: {pde_r} vs {r_next}"
        );
    }

    #[test]
    fn breather_energy_and_period() {
        // Energy conservation at small step.
        let trace = breather_ode(1.05, 0.0, 1e-4, 10.0).unwrap();
        let e0 = trace.ode_energy[0];
        for &e in &trace.ode_energy {
            assert!((e - e0).abs() / e0.abs() < 1e-10, "energy drift");
        }

        // Small-amplitude period approaches π = 2π/ω with ω = 2.
        let trace = breather_ode(1.0 + 1e-4, 0.0, 1e-4, 10.0).unwrap();
        assert!(trace.period_measured);
        assert!(
            (trace.period - PI).abs() < 1e-3,
            "period {} vs π",
            trace.period
        );

        // Equilibrium start reports the linearized fallback period.
        let trace = breather_ode(1.0, 0.0, 1e-3, 2.0).unwrap();
        assert!(!trace.period_measured);
        assert!((trace.period - PI).abs() < 1e-15);
        for &r in &trace.r {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_pde_tracks_breather() {
        // The PDE at lmax = 8 vs the ODE trace over a short horizon.
        let dt = 1e-3;
        let cfg = radial_config(8, 1.05, 1.0, dt);
        let (_, traj) = simulate_with_trajectory(cfg).unwrap();
        let trace = breather_ode(1.05, 0.0, dt, 1.0).unwrap();
        for (k, &t) in traj.times.iter().enumerate() {
            let idx = (t / dt).round() as usize;
            let pde_r = traj.positions[k].at(0).norm();
            assert!(
                (pde_r - trace.r[idx]).abs() < 1e-6,
                "t={t}: {pde_r} vs {}",
                trace.r[idx]
            );
        }
    }

    #[test]
    fn energy_statics_and_dissipation() {
        // Static unit sphere: E = area = 4π with vol0 = 4π/3.
        let grid = SphGrid::for_lmax(8);
        let s = State {
            w: Embedding::unit_sphere(grid.clone(), 8),
            wdot: Vec3Field::zeros(grid),
            t: 0.0,
        };
        let e = energy(&s, KAPPA_UNIT_SPHERE, 4.0 * PI / 3.0).unwrap();
        assert!((e - 4.0 * PI).abs() < 1e-8);

        // Damped run: energy monotone nonincreasing.
        let cfg = SimConfig {
            lmax: 8,
            dt: None,
            t_end: 2.0,
            b: 1.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::Modes(vec![ModeSpec {
                l: 2,
                m: 0,
                amplitude: 0.01,
                channel: Channel::Normal,
            }]),
            seed: 1,
            sample_every: 5,
            antialias: true,
            norm_indices: vec![2.0],
            norm_threshold: None,
        };
        let report = simulate(cfg).unwrap();
        assert_eq!(report.termination, Termination::TimeReached);
        for pair in report.rows.windows(2) {
            assert!(
                pair[1].energy <= pair[0].energy + 1e-10,
                "energy increased: {} -> {}",
                pair[0].energy,
                pair[1].energy
            );
        }
    }

    #[test]
    fn undamped_energy_conserved() {
        let cfg = radial_config(8, 1.03, 2.0, 1e-3);
        let report = simulate(cfg).unwrap();
        let e0 = report.rows[0].energy;
        for row in &report.rows {
            assert!(
                (row.energy - e0).abs() / e0.abs() < 1e-8,
                "drift at t={}: {:.3e}",
                row.t,
                (row.energy - e0).abs() / e0.abs()
            );
        }
    }

    #[test]
    fn sphere_fit_examples() {
        let lmax = 10;
        let grid = SphGrid::for_lmax(lmax);
        // Exact off-center sphere.
        let center = Vector3::new(0.1, 0.0, 0.0);
        let pos = Vec3Field::from_fn(grid.clone(), |t, p| {
            Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos()) + center
        });
        let fit = sphere_fit(&Embedding::new(pos, lmax)).unwrap();
        assert!((fit.center - center).norm() < 1e-10);
        assert!((fit.radius - 1.0).abs() < 1e-10);
        assert!(fit.rms < 1e-10);

        // Symmetric normal bump: center stays at the origin.
        let y20 = SpectralField::unit(lmax, 2, 0)
            .synthesize(grid.clone())
            .unwrap();
        let base = Vec3Field::unit_positions(grid.clone());
        let mut bumped = base.clone();
        bumped.axpy(1e-3, &base.mul_scalar_field(&y20));
        let fit = sphere_fit(&Embedding::new(bumped, lmax)).unwrap();
        assert!(fit.center.norm() < 1e-6, "center {:?}", fit.center);
        assert!(fit.rms > 1e-5 && fit.rms < 1e-2);

        // Equivariance under a rigid motion.
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, 0.5, -0.9);
        let shift = Vector3::new(-0.05, 0.2, 0.07);
        let mut moved = base.clone();
        for k in 0..grid.len() {
            let v = base.at(k) * (1.0 + 1e-3 * y20.values()[k]);
            moved.set(k, rot * v + shift);
        }
        let fit2 = sphere_fit(&Embedding::new(moved, lmax)).unwrap();
        assert!((fit2.center - shift).norm() < 1e-6);
        assert!((fit2.radius - fit.radius).abs() < 1e-10);
        assert!((fit2.rms - fit.rms).abs() < 1e-10);
    }

    #[test]
    fn decay_fit_examples() {
        // Exact exponential.
        let series: Vec<(f64, f64)> = (0..=100)
            .map(|k| {
                let t = k as f64 * 0.1;
                (t, (-0.5 * t).exp())
            })
            .collect();
        let fit = decay_fit(&series, (0.0, 1.0)).unwrap();
        assert!((fit.rate - 0.5).abs() < 1e-10);
        assert!((fit.intercept - 1.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        // Oscillating envelope with a floor: fit the peak envelope on the
        // later window.
        let series: Vec<(f64, f64)> = (0..=4000)
            .map(|k| {
                let t = k as f64 * 0.01;
                (t, (-0.5 * t).exp() * (2.0 * t).cos().abs() + 1e-12)
            })
            .collect();
        let env = peak_envelope(&series);
        let fit = decay_fit(&env, (0.5, 1.0)).unwrap();
        assert!((fit.rate - 0.5).abs() < 0.05, "rate {}", fit.rate);

        // Constant series: zero rate, perfect fit.
        let series: Vec<(f64, f64)> = (0..=50).map(|k| (k as f64, 2.0)).collect();
        let fit = decay_fit(&series, (0.0, 1.0)).unwrap();
        assert!(fit.rate.abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        // Error paths.
        assert!(matches!(
            decay_fit(&series[..5], (0.0, 1.0)),
            Err(MembraneError::InsufficientData { .. })
        ));
        let bad: Vec<(f64, f64)> = (0..=20).map(|k| (k as f64, -1.0)).collect();
        assert!(matches!(
            decay_fit(&bad, (0.0, 1.0)),
            Err(MembraneError::NonpositiveValue { .. })
        ));
    }

    #[test]
    fn symmetry_preserved_by_scheme() {
        // Initial data symmetric under x → -x keeps the fitted center's
        // x-component at the numerical floor.
        let cfg = SimConfig {
            lmax: 8,
            dt: None,
            t_end: 1.0,
            b: 0.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::Modes(vec![ModeSpec {
                l: 2,
                m: 0,
                amplitude: 1e-3,
                channel: Channel::Normal,
            }]),
            seed: 7,
            sample_every: 5,
            antialias: true,
            norm_indices: vec![4.0],
            norm_threshold: None,
        };
        let report = simulate(cfg).unwrap();
        for row in &report.rows {
            assert!(
                row.fit_center.x.abs() < 1e-8,
                "center drifted to {:?}",
                row.fit_center
            );
        }
    }

    #[test]
    fn degenerate_termination_is_reported_not_crashed() {
        // A huge perturbation degenerates quickly; simulate must report it.
        let cfg = SimConfig {
            lmax: 6,
            dt: Some(5e-3),
            t_end: 20.0,
            b: 0.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::Modes(vec![ModeSpec {
                l: 2,
                m: 1,
                amplitude: 0.9,
                channel: Channel::Normal,
            }]),
            seed: 1,
            sample_every: 10,
            antialias: true,
            norm_indices: vec![4.0],
            norm_threshold: None,
        };
        let report = simulate(cfg).unwrap();
        assert!(
            matches!(report.termination, Termination::Degenerate { .. }),
            "expected degenerate exit, got {:?}",
            report.termination
        );
    }

    #[test]
    fn lifespan_scan_entries() {
        let template = SimConfig {
            lmax: 6,
            dt: None,
            t_end: 5.0,
            b: 0.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::Modes(vec![ModeSpec {
                l: 2,
                m: 0,
                amplitude: 1.0, // unit shape; ε scales it
                channel: Channel::Normal,
            }]),
            seed: 3,
            sample_every: 2,
            antialias: true,
            norm_indices: vec![4.0],
            norm_threshold: None,
        };

        // Damped runs stay global.
        let scan = lifespan_scan(&[1e-3], 1.0, 0.3, &template).unwrap();
        assert_eq!(scan.entries[0].status, LifespanStatus::Global);
        assert!(scan.loglog_slope.is_none());

        // Undamped: exit times nondecreasing as ε decreases.
        let scan = lifespan_scan(&[0.3, 0.2], 0.0, 0.05, &template).unwrap();
        for e in &scan.entries {
            assert_eq!(e.status, LifespanStatus::ThresholdReached, "{e:?}");
        }
        assert!(
            scan.entries[1].t_exit >= scan.entries[0].t_exit,
            "T(ε) not monotone: {:?}",
            scan.entries
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = radial_config(8, 1.05, 1.0, 1e-3);
        cfg.dt = Some(-1.0);
        assert!(matches!(
            simulate(cfg),
            Err(MembraneError::InvalidConfig(_))
        ));
        let mut cfg = radial_config(8, 1.05, 1.0, 1e-3);
        cfg.initial = InitialData::Modes(vec![ModeSpec {
            l: 30,
            m: 0,
            amplitude: 0.1,
            channel: Channel::Normal,
        }]);
        assert!(matches!(
            simulate(cfg),
            Err(MembraneError::InvalidConfig(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SimConfig {
            lmax: 6,
            dt: None,
            t_end: 0.5,
            b: 1.0,
            kappa: KAPPA_UNIT_SPHERE,
            initial: InitialData::RandomBand {
                band: 4,
                amplitude: 1e-3,
            },
            seed: 42,
            sample_every: 3,
            antialias: true,
            norm_indices: vec![2.0, 4.0],
            norm_threshold: None,
        };
        let a = simulate(cfg.clone()).unwrap();
        let b = simulate(cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.t, rb.t);
            assert_eq!(ra.energy, rb.energy);
            assert_eq!(ra.deviation_norms, rb.deviation_norms);
        }
    }
}
