//! One runner per subcommand. Every runner receives the resolved
//! configuration and an output context, writes its CSV/JSON artifacts
//! incrementally (flushing row by row so a killed run leaves a parseable
//! prefix), and reports a termination string plus manifest extras.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use membrane::dynamics::{
    self, breather_ode, lifespan_scan, Channel, InitialData, LifespanStatus,
    SimConfig, Simulation, Termination,
};
use membrane::harmonics::{format_f64, SpectralField, SphGrid, Vec3Field};
use membrane::linop::{
    l_id_multiplier, rayleigh_extremes, LIdOperator, RayleighOptions, ZeroModeProjection,
};
use membrane::linsolve::{evolve_linear, triple_split, ScalarForcing, VecForcing};
use membrane::nashmoser::{check_smoothing_axioms, solve_by_iteration, IterationConfig};
use membrane::{KAPPA_UNIT_SPHERE, MembraneError};
use serde_json::json;

use crate::checkpoint;
use crate::config::Config;
use crate::manifest::GridInfo;

/// How a failed run should be reported at the process level.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments: exit 2, nothing but the manifest.
    Validation(String),
    /// Numerical termination: exit 3, partial outputs preserved.
    Numerical(String),
    /// Unexpected I/O trouble: exit 1.
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

fn numerical(e: MembraneError) -> Failure {
    match e {
        MembraneError::InvalidConfig(msg) => Failure::Validation(msg),
        other => Failure::Numerical(other.to_string()),
    }
}

fn io_err(e: anyhow::Error) -> Failure {
    Failure::Io(format!("{e:#}"))
}

pub struct Outcome {
    pub termination: String,
    pub grid: Option<GridInfo>,
    pub extra: BTreeMap<String, serde_json::Value>,
    /// Files to digest into the manifest.
    pub outputs: Vec<PathBuf>,
}

impl Outcome {
    fn new(termination: impl Into<String>) -> Self {
        Self {
            termination: termination.into(),
            grid: None,
            extra: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }
}

/// Incremental CSV writer: one flush per row keeps the prefix parseable if
/// the process dies mid-run.
struct CsvOut {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[&str]) -> anyhow::Result<Self> {
        let path = dir.join(name);
        let file =
            File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = Self {
            writer: BufWriter::new(file),
            path,
        };
        out.raw_row(header)?;
        Ok(out)
    }

    fn raw_row(&mut self, fields: &[&str]) -> anyhow::Result<()> {
        writeln!(self.writer, "{}", fields.join(","))?;
        self.writer.flush()?;
        Ok(())
    }

    fn row(&mut self, fields: &[String]) -> anyhow::Result<()> {
        let refs: Vec<&str> = fields.iter().map(String::as_str).collect();
        self.raw_row(&refs)
    }
}

fn grid_info(lmax: usize) -> GridInfo {
    let grid = SphGrid::for_lmax(lmax);
    GridInfo {
        lmax,
        nlat: grid.nlat(),
        nlon: grid.nlon(),
    }
}

fn sim_config(cfg: &Config, seed: u64) -> Result<SimConfig, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    let initial = match cfg.get_string("initial.kind").as_str() {
        "modes" => InitialData::Modes(cfg.get_modes("initial.modes").map_err(validation)?),
        "random" => InitialData::RandomBand {
            band: cfg.get_usize("initial.band").map_err(validation)?,
            amplitude: cfg.get_f64("initial.amplitude").map_err(validation)?,
        },
        "radial" => InitialData::Radial {
            r0: cfg.get_f64("initial.r0").map_err(validation)?,
            rdot0: cfg.get_f64("initial.rdot0").map_err(validation)?,
        },
        other => {
            return Err(Failure::Validation(format!(
                "initial.kind must be modes, random or radial, got {other:?}"
            )))
        }
    };
    let sim = SimConfig {
        lmax,
        dt: cfg.get_auto_f64("time.dt").map_err(validation)?,
        t_end: cfg.get_f64("time.t_end").map_err(validation)?,
        b: cfg.get_f64("physics.b").map_err(validation)?,
        kappa: resolve_kappa(cfg)?,
        initial,
        seed,
        sample_every: cfg.get_usize("time.sample_every").map_err(validation)?,
        antialias: cfg.get_bool("simulate.antialias").map_err(validation)?,
        norm_indices: cfg.get_f64_list("simulate.norm_indices").map_err(validation)?,
        norm_threshold: cfg
            .get_optional_f64("simulate.norm_threshold")
            .map_err(validation)?,
    };
    sim.validate().map_err(numerical)?;
    Ok(sim)
}

fn resolve_kappa(cfg: &Config) -> Result<f64, Failure> {
    Ok(cfg
        .get_auto_f64("physics.kappa")
        .map_err(validation)?
        .unwrap_or(KAPPA_UNIT_SPHERE))
}

fn validation(e: anyhow::Error) -> Failure {
    Failure::Validation(format!("{e:#}"))
}

/// Build an R³-valued field from a (l,m,amplitude,channel) list on the unit
/// sphere.
fn vec_field_from_modes(
    modes: &[dynamics::ModeSpec],
    grid: &std::sync::Arc<SphGrid>,
    lmax: usize,
) -> Result<Vec3Field, Failure> {
    let pos = Vec3Field::unit_positions(grid.clone());
    let mut out = Vec3Field::zeros(grid.clone());
    for spec in modes {
        if spec.l > lmax || spec.m.unsigned_abs() > spec.l {
            return Err(Failure::Validation(format!(
                "mode ({}, {}) outside the band limit {lmax}",
                spec.l, spec.m
            )));
        }
        let y = SpectralField::unit(lmax, spec.l, spec.m);
        match spec.channel {
            Channel::Normal => {
                let f = y.synthesize(grid.clone()).map_err(numerical)?;
                out.axpy(spec.amplitude, &pos.mul_scalar_field(&f));
            }
            Channel::Tangent => {
                let g = membrane::harmonics::surface_gradient(&y, grid.clone())
                    .map_err(numerical)?;
                out.axpy(spec.amplitude, &g);
            }
        }
    }
    Ok(out)
}

fn output_times(cfg: &Config, lmax: usize) -> Result<Vec<f64>, Failure> {
    let t_end = cfg.get_positive_f64("time.t_end").map_err(validation)?;
    let dt = cfg
        .get_auto_f64("time.dt")
        .map_err(validation)?
        .unwrap_or_else(|| SimConfig::default_dt(lmax));
    let every = cfg.get_usize("time.sample_every").map_err(validation)?.max(1);
    let step = dt * every as f64;
    let n = (t_end / step).floor() as usize;
    Ok((0..=n).map(|k| k as f64 * step).collect())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn run_simulate(
    cfg: &Config,
    dir: &Path,
    seed: u64,
    resume: Option<&Path>,
) -> Result<Outcome, Failure> {
    let sim_cfg = sim_config(cfg, seed)?;
    let checkpoint_every = cfg
        .get_usize("simulate.checkpoint_every")
        .map_err(validation)?;
    let lmax = sim_cfg.lmax;

    let mut sim = match resume {
        None => Simulation::new(sim_cfg.clone()).map_err(numerical)?,
        Some(path) => {
            let state = checkpoint::read(path)
                .map_err(|e| Failure::Validation(format!("cannot resume: {e:#}")))?;
            if state.w.lmax() != lmax {
                return Err(Failure::Validation(format!(
                    "checkpoint band limit {} does not match configured lmax {lmax}",
                    state.w.lmax()
                )));
            }
            Simulation::from_state(sim_cfg.clone(), state).map_err(numerical)?
        }
    };

    let ckpt_dir = dir.join("checkpoints");
    if checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)
            .with_context(|| format!("creating {}", ckpt_dir.display()))
            .map_err(io_err)?;
    }

    let mut header = vec![
        "t".to_string(),
        "energy".into(),
        "area".into(),
        "volume".into(),
        "h_min".into(),
        "h_max".into(),
        "min_detg".into(),
        "center_x".into(),
        "center_y".into(),
        "center_z".into(),
        "fit_radius".into(),
        "fit_rms".into(),
    ];
    for n in &sim_cfg.norm_indices {
        header.push(format!("dev_norm_{n}"));
    }
    for n in &sim_cfg.norm_indices {
        header.push(format!("energy_norm_{n}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::create(dir, "report.csv", &header_refs).map_err(io_err)?;
    let mut outputs = vec![csv.path.clone()];

    let write_sample = |csv: &mut CsvOut, row: &dynamics::SampleRow| -> anyhow::Result<()> {
        let mut fields = vec![
            format_f64(row.t),
            format_f64(row.energy),
            format_f64(row.area),
            format_f64(row.volume),
            format_f64(row.h_min),
            format_f64(row.h_max),
            format_f64(row.min_detg),
            format_f64(row.fit_center.x),
            format_f64(row.fit_center.y),
            format_f64(row.fit_center.z),
            format_f64(row.fit_radius),
            format_f64(row.fit_rms),
        ];
        for v in &row.deviation_norms {
            fields.push(format_f64(*v));
        }
        for v in &row.energy_norms {
            fields.push(format_f64(*v));
        }
        csv.row(&fields)
    };

    let first = sim.sample().map_err(numerical)?;
    write_sample(&mut csv, &first).map_err(io_err)?;

    let save_checkpoint = |sim: &Simulation, outputs: &mut Vec<PathBuf>| -> Result<(), Failure> {
        let path = ckpt_dir.join(format!("step_{:08}.memb", sim.steps_done()));
        checkpoint::write(sim.state(), &path).map_err(io_err)?;
        outputs.push(path);
        Ok(())
    };

    let termination = loop {
        if sim.finished() {
            break Termination::TimeReached;
        }
        if let Err(e) = sim.step_once() {
            break Termination::Degenerate {
                t: sim.state().t,
                detail: e.to_string(),
            };
        }
        if checkpoint_every > 0 && sim.steps_done() % checkpoint_every as u64 == 0 {
            save_checkpoint(&sim, &mut outputs)?;
        }
        if sim.should_sample() {
            match sim.sample() {
                Ok(row) => {
                    write_sample(&mut csv, &row).map_err(io_err)?;
                    if sim
                        .cfg()
                        .norm_threshold
                        .is_some_and(|th| row.deviation_norms.first().is_some_and(|&d| d > th))
                    {
                        break Termination::NormThreshold { t: row.t };
                    }
                }
                Err(e) => {
                    break Termination::Degenerate {
                        t: sim.state().t,
                        detail: e.to_string(),
                    }
                }
            }
        }
    };

    if checkpoint_every > 0 {
        save_checkpoint(&sim, &mut outputs)?;
    }

    let mut outcome = Outcome::new(termination_label(&termination));
    outcome.grid = Some(grid_info(lmax));
    outcome.outputs = outputs;
    outcome
        .extra
        .insert("steps".into(), json!(sim.steps_done()));
    outcome.extra.insert("dt".into(), json!(sim.dt()));
    if let Termination::Degenerate { t, detail } = &termination {
        outcome
            .extra
            .insert("failure_time".into(), json!(t));
        return Err(Failure::Numerical(format!(
            "integration degenerated at t = {t}: {detail} (partial outputs in {})",
            dir.display()
        )));
    }
    Ok(outcome)
}

fn termination_label(t: &Termination) -> String {
    match t {
        Termination::TimeReached => "time-reached".into(),
        Termination::Degenerate { t, .. } => format!("degenerate at t = {t}"),
        Termination::NormThreshold { t } => format!("norm-threshold at t = {t}"),
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

pub fn run_linear(cfg: &Config, dir: &Path, _seed: u64) -> Result<Outcome, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    let b = cfg.get_f64("physics.b").map_err(validation)?;
    let grid = SphGrid::for_lmax(lmax);
    let modes = cfg.get_modes("linear.modes").map_err(validation)?;
    let vmodes = cfg.get_modes("linear.velocity_modes").map_err(validation)?;
    let norm_indices = cfg.get_f64_list("linear.norm_indices").map_err(validation)?;

    let scalar_from = |specs: &[dynamics::ModeSpec]| -> Result<SpectralField, Failure> {
        let mut c = SpectralField::zeros(lmax);
        for s in specs {
            if s.l > lmax || s.m.unsigned_abs() > s.l {
                return Err(Failure::Validation(format!(
                    "mode ({}, {}) outside lmax {lmax}",
                    s.l, s.m
                )));
            }
            c.set(s.l, s.m, c.get(s.l, s.m) + s.amplitude);
        }
        Ok(c)
    };
    let phi0 = scalar_from(&modes)?;
    let dphi0 = scalar_from(&vmodes)?;
    let times = output_times(cfg, lmax)?;

    let evo = evolve_linear(
        None,
        b,
        &phi0.synthesize(grid.clone()).map_err(numerical)?,
        &dphi0.synthesize(grid.clone()).map_err(numerical)?,
        &ScalarForcing::None,
        &times,
        lmax,
    )
    .map_err(numerical)?;

    let mut tracked: Vec<(usize, isize)> = modes.iter().map(|s| (s.l, s.m)).collect();
    for s in &vmodes {
        if !tracked.contains(&(s.l, s.m)) {
            tracked.push((s.l, s.m));
        }
    }

    let mut header = vec!["t".to_string()];
    for n in &norm_indices {
        header.push(format!("norm_{n}"));
    }
    for (l, m) in &tracked {
        header.push(format!("coeff_{l}_{m}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::create(dir, "report.csv", &header_refs).map_err(io_err)?;
    for (k, &t) in evo.times.iter().enumerate() {
        let mut fields = vec![format_f64(t)];
        for &n in &norm_indices {
            fields.push(format_f64(evo.phi[k].sobolev_norm(n)));
        }
        for &(l, m) in &tracked {
            fields.push(format_f64(evo.phi[k].get(l, m)));
        }
        csv.row(&fields).map_err(io_err)?;
    }

    let mut outcome = Outcome::new("time-reached");
    outcome.grid = Some(grid_info(lmax));
    outcome.outputs = vec![csv.path.clone()];
    match &evo.limit {
        Some(lim) => {
            outcome
                .extra
                .insert("limit_l2".into(), json!(lim.l2_norm()));
        }
        None => {
            outcome.extra.insert("no_limit".into(), json!(true));
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

pub fn run_split(cfg: &Config, dir: &Path, _seed: u64) -> Result<Outcome, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    let b = cfg.get_f64("physics.b").map_err(validation)?;
    if b <= 0.0 {
        return Err(Failure::Validation(format!(
            "the splitting requires positive damping, got b = {b}"
        )));
    }
    let grid = SphGrid::for_lmax(lmax);
    let eta0 = vec_field_from_modes(&cfg.get_modes("split.modes").map_err(validation)?, &grid, lmax)?;
    let eta1 = vec_field_from_modes(
        &cfg.get_modes("split.velocity_modes").map_err(validation)?,
        &grid,
        lmax,
    )?;
    let times = output_times(cfg, lmax)?;

    let split = triple_split(None, b, &eta0, &eta1, &VecForcing::None, &times, lmax)
        .map_err(numerical)?;

    // v as a trajectory CSV.
    let mut csv = CsvOut::create(dir, "report.csv", &["t", "v_l2", "v_h2", "vdot_l2"])
        .map_err(io_err)?;
    for (k, &t) in split.times.iter().enumerate() {
        csv.row(&[
            format_f64(t),
            format_f64(split.v[k].l2_norm()),
            format_f64(split.v[k].sobolev_norm(lmax, 2.0).map_err(numerical)?),
            format_f64(split.v_dot[k].l2_norm()),
        ])
        .map_err(io_err)?;
    }

    // Y as an (l, m, component) CSV.
    let ycoeffs = split.y.field().analyze(lmax).map_err(numerical)?;
    let mut ycsv = CsvOut::create(dir, "y_field.csv", &["l", "m", "x", "y", "z"])
        .map_err(io_err)?;
    for l in 0..=lmax {
        for m in -(l as isize)..=(l as isize) {
            ycsv.row(&[
                l.to_string(),
                m.to_string(),
                format_f64(ycoeffs[0].get(l, m)),
                format_f64(ycoeffs[1].get(l, m)),
                format_f64(ycoeffs[2].get(l, m)),
            ])
            .map_err(io_err)?;
        }
    }

    // c as JSON.
    let cpath = dir.join("splitting.json");
    let cjson = json!({
        "c": [split.c.x, split.c.y, split.c.z],
        "beta": split.beta_used,
        "y_l2": split.y.field().l2_norm(),
    });
    fs::write(&cpath, serde_json::to_string_pretty(&cjson).unwrap())
        .map_err(|e| io_err(anyhow!(e)))?;

    let mut outcome = Outcome::new("time-reached");
    outcome.grid = Some(grid_info(lmax));
    outcome.outputs = vec![csv.path.clone(), ycsv.path.clone(), cpath];
    outcome
        .extra
        .insert("beta".into(), json!(split.beta_used));
    outcome
        .extra
        .insert("c".into(), json!([split.c.x, split.c.y, split.c.z]));
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// breather
// ---------------------------------------------------------------------------

pub fn run_breather(cfg: &Config, dir: &Path, _seed: u64) -> Result<Outcome, Failure> {
    let r0 = cfg.get_f64("initial.r0").map_err(validation)?;
    let rdot0 = cfg.get_f64("initial.rdot0").map_err(validation)?;
    let dt = cfg
        .get_auto_f64("time.dt")
        .map_err(validation)?
        .unwrap_or(1e-3);
    let t_end = cfg.get_positive_f64("time.t_end").map_err(validation)?;
    let every = cfg.get_usize("time.sample_every").map_err(validation)?.max(1);

    let trace = breather_ode(r0, rdot0, dt, t_end).map_err(numerical)?;

    let mut csv =
        CsvOut::create(dir, "report.csv", &["t", "r", "rdot", "ode_energy"]).map_err(io_err)?;
    for k in (0..trace.times.len()).step_by(every) {
        csv.row(&[
            format_f64(trace.times[k]),
            format_f64(trace.r[k]),
            format_f64(trace.rdot[k]),
            format_f64(trace.ode_energy[k]),
        ])
        .map_err(io_err)?;
    }

    let e0 = trace.ode_energy[0];
    let drift = trace
        .ode_energy
        .iter()
        .fold(0.0f64, |acc, &e| acc.max((e - e0).abs()))
        / e0.abs();

    let mut outcome = Outcome::new("time-reached");
    outcome.outputs = vec![csv.path.clone()];
    outcome.extra.insert("period".into(), json!(trace.period));
    outcome
        .extra
        .insert("period_measured".into(), json!(trace.period_measured));
    outcome
        .extra
        .insert("energy_drift_rel".into(), json!(drift));
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

pub fn run_spectrum(cfg: &Config, dir: &Path, _seed: u64) -> Result<Outcome, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    let grid = SphGrid::for_lmax(lmax);

    // Closed-form multipliers with their multiplicity, sorted descending,
    // and the operator residual of each eigenvector as a cross-check.
    let mut rows: Vec<(f64, usize, isize)> = Vec::new();
    for l in 0..=lmax {
        for m in -(l as isize)..=(l as isize) {
            rows.push((l_id_multiplier(l), l, m));
        }
    }
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut csv = CsvOut::create(dir, "report.csv", &["index", "l", "m", "eigenvalue", "residual"])
        .map_err(io_err)?;
    for (idx, (ev, l, m)) in rows.iter().enumerate() {
        let e = SpectralField::unit(lmax, *l, *m);
        let residual = membrane::linop::apply_L_id(&e).sub(&e.scale(*ev)).l2_norm();
        csv.row(&[
            idx.to_string(),
            l.to_string(),
            m.to_string(),
            format_f64(*ev),
            format_f64(residual),
        ])
        .map_err(io_err)?;
    }

    // Deflated extremal eigenvalue through the iterative path.
    let proj = ZeroModeProjection::at_identity(grid.clone(), lmax).map_err(numerical)?;
    let deflated_top = rayleigh_extremes(
        &LIdOperator { lmax },
        Some(&proj),
        &RayleighOptions::default(),
    )
    .map_err(numerical)?;

    let mut outcome = Outcome::new("complete");
    outcome.grid = Some(grid_info(lmax));
    outcome.outputs = vec![csv.path.clone()];
    outcome
        .extra
        .insert("deflated_top_eigenvalue".into(), json!(deflated_top));
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// smoothing-axioms
// ---------------------------------------------------------------------------

pub fn run_smoothing(cfg: &Config, dir: &Path, seed: u64) -> Result<Outcome, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    if lmax < 8 {
        return Err(Failure::Validation(format!(
            "smoothing axioms need lmax >= 8, got {lmax}"
        )));
    }
    let samples = cfg.get_usize("smoothing.samples").map_err(validation)?;
    let pairs = cfg.get_pair_list("smoothing.pairs").map_err(validation)?;
    for (a, b) in &pairs {
        if a >= b {
            return Err(Failure::Validation(format!(
                "smoothing pair ({a}, {b}) must be ordered low, high"
            )));
        }
    }

    let report = check_smoothing_axioms(samples, lmax, &pairs, seed);

    let mut csv = CsvOut::create(
        dir,
        "report.csv",
        &["a", "b", "c_bounded", "c_gain", "c_tail", "equiv_low", "equiv_high"],
    )
    .map_err(io_err)?;
    for p in &report.pairs {
        csv.row(&[
            format_f64(p.a),
            format_f64(p.b),
            format_f64(p.c_bounded),
            format_f64(p.c_gain),
            format_f64(p.c_tail),
            format_f64(p.equiv_low),
            format_f64(p.equiv_high),
        ])
        .map_err(io_err)?;
    }

    let mut outcome = Outcome::new("complete");
    outcome.grid = Some(grid_info(lmax));
    outcome.outputs = vec![csv.path.clone()];
    outcome
        .extra
        .insert("telescope_error".into(), json!(report.telescope_error));
    outcome.extra.insert("samples".into(), json!(samples));
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// nash-moser
// ---------------------------------------------------------------------------

pub fn run_nashmoser(cfg: &Config, dir: &Path, _seed: u64) -> Result<Outcome, Failure> {
    let lmax = cfg.get_usize("grid.lmax").map_err(validation)?;
    let b = cfg.get_f64("physics.b").map_err(validation)?;
    let grid = SphGrid::for_lmax(lmax);
    let eta0 = vec_field_from_modes(
        &cfg.get_modes("nashmoser.modes").map_err(validation)?,
        &grid,
        lmax,
    )?;
    let eta1 = vec_field_from_modes(
        &cfg.get_modes("nashmoser.velocity_modes").map_err(validation)?,
        &grid,
        lmax,
    )?;
    let iter_cfg = IterationConfig {
        lmax,
        b,
        kappa: resolve_kappa(cfg)?,
        t_end: cfg.get_positive_f64("time.t_end").map_err(validation)?,
        dt: cfg
            .get_auto_f64("time.dt")
            .map_err(validation)?
            .unwrap_or_else(|| SimConfig::default_dt(lmax) / 4.0),
        schedule: cfg.get_u32_list_or_auto("nashmoser.schedule").map_err(validation)?,
        max_iterations: cfg.get_usize("nashmoser.max_iterations").map_err(validation)?,
        tol: cfg.get_positive_f64("nashmoser.tol").map_err(validation)?,
    };

    let result = solve_by_iteration(&eta0, &eta1, &iter_cfg);

    let mut csv = CsvOut::create(
        dir,
        "report.csv",
        &["iterate", "residual_n0", "residual_n2", "residual_n4", "smoothing_index", "correction_norm", "accepted"],
    )
    .map_err(io_err)?;

    match result {
        Ok((_, trace)) => {
            for r in &trace.records {
                csv.row(&[
                    r.iterate.to_string(),
                    format_f64(r.residual_norms[0]),
                    format_f64(r.residual_norms[1]),
                    format_f64(r.residual_norms[2]),
                    r.smoothing_index.to_string(),
                    format_f64(r.correction_norm),
                    r.accepted.to_string(),
                ])
                .map_err(io_err)?;
            }
            let mut outcome = Outcome::new(if trace.converged {
                "converged"
            } else {
                "schedule-exhausted"
            });
            outcome.grid = Some(grid_info(lmax));
            outcome.outputs = vec![csv.path.clone()];
            outcome
                .extra
                .insert("converged".into(), json!(trace.converged));
            outcome
                .extra
                .insert("iterations".into(), json!(trace.records.len()));
            Ok(outcome)
        }
        Err(e) => Err(Failure::Numerical(format!(
            "iteration diverged: {e} (trace prefix preserved in {})",
            dir.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// lifespan-scan
// ---------------------------------------------------------------------------

pub fn run_lifespan(cfg: &Config, dir: &Path, seed: u64) -> Result<Outcome, Failure> {
    let template = sim_config(cfg, seed)?;
    let b = cfg.get_f64("physics.b").map_err(validation)?;
    let threshold = cfg.get_positive_f64("lifespan.threshold").map_err(validation)?;
    let epsilons = cfg.get_f64_list("lifespan.epsilons").map_err(validation)?;
    if epsilons.is_empty() {
        return Err(Failure::Validation("lifespan.epsilons is empty".into()));
    }

    let scan = lifespan_scan(&epsilons, b, threshold, &template).map_err(numerical)?;

    let mut csv =
        CsvOut::create(dir, "report.csv", &["epsilon", "t_exit", "status"]).map_err(io_err)?;
    for e in &scan.entries {
        let status = match e.status {
            LifespanStatus::Global => "global",
            LifespanStatus::ThresholdReached => "threshold",
            LifespanStatus::Degenerate => "degenerate",
        };
        csv.row(&[format_f64(e.epsilon), format_f64(e.t_exit), status.to_string()])
            .map_err(io_err)?;
    }

    let mut outcome = Outcome::new("complete");
    outcome.grid = Some(grid_info(template.lmax));
    outcome.outputs = vec![csv.path.clone()];
    match scan.loglog_slope {
        Some(s) => {
            outcome.extra.insert("loglog_slope".into(), json!(s));
        }
        None => {
            outcome.extra.insert("loglog_slope".into(), json!("undefined"));
        }
    }
    let all_global = scan
        .entries
        .iter()
        .all(|e| e.status == LifespanStatus::Global);
    if all_global {
        outcome.extra.insert("flag".into(), json!("global"));
    }
    Ok(outcome)
}
