//! `chisep` command-line frontend. Every subcommand reads and writes the
//! raw+sidecar volume format, so pipelines chain through files.
//!
//! Exit status: 0 on success, 1 when a study metric fails, 2 on invalid
//! input or any other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chisep::echo::{fit_frequency, reference_divide, synthesize_echoes, AcquisitionParams};
use chisep::forward::{susceptibility_field, total_field, volume_hz_to_ppm, FieldConversion, GAMMA_BAR_MHZ_PER_T};
use chisep::inversion::{invert, invert_total_for_comparison, InversionParams, Solver};
use chisep::io::{self, FieldEntry, FieldManifest, RunConfig, SeparationMethodChoice};
use chisep::phantom::build_phantom;
use chisep::separation::{
    complete_cylinder, complete_sphere, separate_general, separate_orthogonal, GeneralParams, OrientationSet, OrientedField,
    ORTHOGONALITY_TOLERANCE_DEG, SINGULAR_VALUE_FLOOR,
};
use chisep::studies::{run_study, StudyId};
use chisep::volume::{Axis, Orientation, ScalarVolume, Unit};
use chisep::{Error, Result};

#[derive(Parser)]
#[command(name = "chisep", version, about = "Separate susceptibility and chemical shift from multi-orientation field maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a labeled phantom from the `phantom` section of a run config.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate total and susceptibility fields for one or more B0 directions.
    Forward {
        #[arg(long)]
        chi: PathBuf,
        /// Chemical-shift map; zero when omitted.
        #[arg(long)]
        cs: Option<PathBuf>,
        /// `x`, `y`, `z` or `theta,phi` in degrees. Repeatable.
        #[arg(long, required = true, value_parser = parse_orientation)]
        b0: Vec<Orientation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split total fields into chemical-shift and susceptibility parts.
    Separate(SeparateArgs),
    /// Dipole inversion of a susceptibility field.
    Invert(InvertArgs),
    /// Synthesize a complex multi-echo series from a total field map.
    SimulateEchoes(SimulateArgs),
    /// Fit the per-voxel frequency of an echo series.
    FitFrequency {
        /// Echo-series manifest.
        #[arg(long)]
        echoes: PathBuf,
        /// Reference series divided out before fitting.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Field strength for the ppm map; taken from the series when omitted.
        #[arg(long)]
        b0_tesla: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted study and write its report, metrics and volumes.
    Study {
        /// Study to run; overrides the config's `study` key.
        #[arg(long)]
        name: Option<StudyId>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one slice of a volume as an 8-bit PGM.
    Render {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value = "z")]
        axis: AxisArg,
        /// Slice index; the central slice when omitted.
        #[arg(long)]
        slice: Option<usize>,
        /// `lo,hi` display window; slice min/max when omitted.
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<(f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Completion {
    Cylinder,
    Sphere,
}

#[derive(Args)]
struct SeparateArgs {
    /// Field manifest listing total-field maps and their orientations.
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long, value_enum, default_value = "orthogonal")]
    method: MethodArg,
    /// Fill in missing scans by symmetry before separating: `cylinder` takes
    /// the parallel scan then one perpendicular scan, `sphere` a single scan.
    #[arg(long, value_enum)]
    complete: Option<Completion>,
    /// Cylinder long axis for `--complete cylinder`.
    #[arg(long, default_value = "z")]
    long_axis: AxisArg,
    #[arg(long, default_value_t = ORTHOGONALITY_TOLERANCE_DEG)]
    tolerance_deg: f64,
    #[arg(long, default_value_t = 0.0)]
    reg_epsilon: f64,
    #[arg(long, default_value_t = SINGULAR_VALUE_FLOOR)]
    singular_value_floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Orthogonal,
    General,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    field: PathBuf,
    /// B0 direction; read from the field header when omitted.
    #[arg(long, value_parser = parse_orientation)]
    b0: Option<Orientation>,
    #[arg(long, default_value = "cg")]
    solver: Solver,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Mask of voxels left out of the data term (CG only).
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Treat the input as a total field (chemical shift not removed).
    #[arg(long)]
    total: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Total field map in ppm.
    #[arg(long)]
    field: PathBuf,
    /// Magnitude map; unit magnitude when omitted.
    #[arg(long)]
    magnitude: Option<PathBuf>,
    /// Run config whose `acquisition` section supplies every parameter below.
    #[arg(long, conflicts_with_all = ["te", "b0_tesla", "noise_sigma", "t2star_ms", "seed"])]
    config: Option<PathBuf>,
    /// Comma-separated echo times in ms.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    te: Vec<f64>,
    #[arg(long)]
    b0_tesla: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    t2star_ms: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_orientation(s: &str) -> std::result::Result<Orientation, String> {
    match s {
        "x" | "X" => return Ok(Orientation::along(Axis::X)),
        "y" | "Y" => return Ok(Orientation::along(Axis::Y)),
        "z" | "Z" => return Ok(Orientation::along(Axis::Z)),
        _ => {}
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("expected x, y, z or theta,phi in degrees: {e}"))?;
    match parts[..] {
        [theta, phi] if theta.is_finite() && phi.is_finite() => {
            Ok(Orientation::from_angles(theta.to_radians(), phi.to_radians()))
        }
        _ => Err(format!("expected x, y, z or theta,phi in degrees, got {s:?}")),
    }
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("window lo: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("window hi: {e}"))?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("window needs lo < hi, got {lo},{hi}"))
    }
}

enum Outcome {
    Done,
    MetricFailure,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::MetricFailure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Phantom { config, out } => cmd_phantom(&config, &out),
        Command::Forward { chi, cs, b0, out } => cmd_forward(&chi, cs.as_deref(), &b0, &out),
        Command::Separate(a) => cmd_separate(&a),
        Command::Invert(a) => cmd_invert(&a),
        Command::SimulateEchoes(a) => cmd_simulate(&a),
        Command::FitFrequency { echoes, reference, b0_tesla, out } => cmd_fit(&echoes, reference.as_deref(), b0_tesla, &out),
        Command::Study { name, config, out, seed } => cmd_study(name, config.as_deref(), out, seed),
        Command::Render { volume, axis, slice, window, out } => {
            let (v, _) = io::read_volume(&volume)?;
            let axis = Axis::from(axis);
            let slice = slice.unwrap_or(v.grid().dims[axis.index()] / 2);
            io::write_atomic(&out, &io::render_pgm(&v, axis, slice, window)?)?;
            Ok(Outcome::Done)
        }
    }
}

fn cmd_phantom(config: &Path, out: &Path) -> Result<Outcome> {
    let c = io::read_config(config)?;
    let spec = c.phantom.ok_or_else(|| Error::Config(format!("{}: missing `phantom` section", config.display())))?;
    let p = build_phantom(&spec)?;
    io::write_volume(&out.join("chi"), &p.chi, None, Some("susceptibility"))?;
    io::write_volume(&out.join("cs"), &p.cs, None, Some("chemical shift"))?;
    let labels = ScalarVolume::new(p.grid, Unit::Dimensionless, p.labels.iter().map(|&l| l as f64).collect())?;
    io::write_volume(&out.join("labels"), &labels, None, Some("region labels"))?;
    for (label, m) in &p.region_masks {
        io::write_mask(&out.join(format!("mask_{label}")), m, None)?;
    }
    eprintln!("phantom {:?} with {} region(s) -> {}", p.grid.dims, p.region_masks.len(), out.display());
    Ok(Outcome::Done)
}

fn cmd_forward(chi: &Path, cs: Option<&Path>, b0: &[Orientation], out: &Path) -> Result<Outcome> {
    let (chi, _) = io::read_volume(chi)?;
    let cs = match cs {
        Some(p) => io::read_volume(p)?.0,
        None => ScalarVolume::zeros(*chi.grid(), Unit::Ppm),
    };
    let mut entries = Vec::new();
    for (k, o) in b0.iter().enumerate() {
        let total = total_field(&chi, &cs, o)?;
        let fs = susceptibility_field(&chi, o)?;
        io::write_volume(&out.join(format!("total_{k}")), &total, Some(*o), Some("total field"))?;
        io::write_volume(&out.join(format!("f_s_{k}")), &fs, Some(*o), Some("susceptibility field"))?;
        entries.push(FieldEntry { orientation: *o, file: format!("total_{k}.json") });
    }
    io::write_field_manifest(&out.join("fields.json"), &FieldManifest::new(entries))?;
    eprintln!("{} orientation(s) -> {}", b0.len(), out.display());
    Ok(Outcome::Done)
}

fn cmd_separate(a: &SeparateArgs) -> Result<Outcome> {
    let inputs = io::read_field_manifest(&a.inputs)?;
    let mut fields: Vec<OrientedField> = inputs.into_iter().map(|(o, f)| OrientedField::new(o, f)).collect();
    let set = match (a.complete, fields.len()) {
        (None, _) => OrientationSet::new(fields)?,
        (Some(Completion::Cylinder), 2) => {
            let perpendicular = fields.pop().unwrap();
            let parallel = fields.pop().unwrap();
            complete_cylinder(&parallel, &perpendicular, a.long_axis.into())?
        }
        (Some(Completion::Sphere), 1) => complete_sphere(&fields[0])?,
        (Some(c), n) => {
            let want = match c {
                Completion::Cylinder => 2,
                Completion::Sphere => 1,
            };
            return Err(Error::InvalidArgument(format!("completion needs {want} input field(s), got {n}")));
        }
    };
    let method = match a.method {
        MethodArg::Orthogonal => SeparationMethodChoice::Orthogonal,
        MethodArg::General => SeparationMethodChoice::General,
    };
    let result = match method {
        SeparationMethodChoice::Orthogonal => separate_orthogonal(&set, a.tolerance_deg)?,
        SeparationMethodChoice::General => {
            separate_general(&set, &GeneralParams { reg_epsilon: a.reg_epsilon, singular_value_floor: a.singular_value_floor })?
        }
    };
    io::write_volume(&a.out.join("f_c"), &result.f_c, None, Some("chemical shift"))?;
    let mut entries = Vec::new();
    for (k, (o, fs)) in set.orientations().iter().zip(&result.f_s).enumerate() {
        io::write_volume(&a.out.join(format!("f_s_{k}")), fs, Some(*o), Some("susceptibility field"))?;
        entries.push(FieldEntry { orientation: *o, file: format!("f_s_{k}.json") });
    }
    io::write_field_manifest(&a.out.join("fields.json"), &FieldManifest::new(entries))?;
    if let Some(chi) = &result.chi {
        io::write_volume(&a.out.join("chi"), chi, None, Some("zero-mean susceptibility"))?;
    }
    if let Some(c) = &result.conditioning {
        eprintln!("regularized {} of {} k-samples ({:.3e})", c.regularized, c.total, c.fraction);
    }
    eprintln!("separated {} field(s) -> {}", set.len(), a.out.display());
    Ok(Outcome::Done)
}

fn cmd_invert(a: &InvertArgs) -> Result<Outcome> {
    let (field, header) = io::read_volume(&a.field)?;
    let b0 =
        a.b0.or(header.orientation)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no orientation in header, pass --b0", a.field.display())))?;
    let p = InversionParams {
        solver: a.solver,
        tkd_threshold: a.threshold,
        lambda: a.lambda,
        cg_max_iters: a.max_iters,
        cg_rel_tol: a.tol,
    };
    let excluded = a.exclude.as_deref().map(io::read_mask).transpose()?;
    let inv = if a.total {
        invert_total_for_comparison(&field, &b0, &p, excluded.as_ref())?
    } else {
        invert(&field, &b0, &p, excluded.as_ref())?
    };
    io::write_volume(&a.out.join("chi"), &inv.chi, Some(b0), Some("susceptibility"))?;
    if let Some(r) = inv.report {
        eprintln!("cg: {} iterations, relative residual {:.3e}, converged {}", r.iterations, r.relative_residual, r.converged);
    }
    Ok(Outcome::Done)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    let params = match &a.config {
        Some(c) => {
            let cfg = io::read_config(c)?;
            cfg.acquisition.ok_or_else(|| Error::Config(format!("{}: missing `acquisition` section", c.display())))?
        }
        None => AcquisitionParams {
            te_ms: a.te.clone(),
            b0_tesla: a.b0_tesla.unwrap_or(3.0),
            noise_sigma: a.noise_sigma.unwrap_or(0.0),
            t2star_ms: a.t2star_ms,
            seed: a.seed.unwrap_or(0),
            gamma_bar_mhz_per_t: GAMMA_BAR_MHZ_PER_T,
        },
    };
    params.validate()?;
    let (field, _) = io::read_volume(&a.field)?;
    let magnitude = match &a.magnitude {
        Some(m) => io::read_volume(m)?.0,
        None => ScalarVolume::filled(*field.grid(), Unit::Dimensionless, 1.0),
    };
    let series = synthesize_echoes(&field, &magnitude, &params)?;
    let manifest = io::write_echo_series(&a.out, &series)?;
    eprintln!("{} echoes -> {}", series.len(), manifest.display());
    Ok(Outcome::Done)
}

fn cmd_fit(echoes: &Path, reference: Option<&Path>, b0_tesla: Option<f64>, out: &Path) -> Result<Outcome> {
    let mut series = io::read_echo_series(echoes)?;
    if let Some(r) = reference {
        series = reference_divide(&series, &io::read_echo_series(r)?)?;
    }
    let fit = fit_frequency(&series)?;
    io::write_volume(&out.join("frequency_hz"), &fit.frequency, None, Some("fitted frequency"))?;
    io::write_volume(&out.join("residual"), &fit.residual, None, Some("RMS phase residual (rad)"))?;
    if let Some(m) = &series.low_snr {
        io::write_mask(&out.join("low_snr"), m, Some("voxels zeroed by reference division"))?;
    }
    let conversion = match (b0_tesla, &series.params) {
        (Some(b0), _) => Some(FieldConversion::new(b0)?),
        (None, Some(p)) => Some(p.conversion()),
        (None, None) => None,
    };
    match conversion {
        Some(c) => io::write_volume(&out.join("field_ppm"), &volume_hz_to_ppm(&fit.frequency, &c)?, None, Some("field shift"))?,
        None => eprintln!("no field strength known; pass --b0-tesla for a ppm map"),
    }
    eprintln!("fitted {} echoes -> {}", series.len(), out.display());
    Ok(Outcome::Done)
}

fn cmd_study(name: Option<StudyId>, config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Outcome> {
    let cfg = match config {
        Some(c) => io::read_config(c)?,
        None => RunConfig::default(),
    };
    let id = name.or(cfg.study).ok_or_else(|| Error::Config("no study selected: pass --name or set `study`".into()))?;
    let out = out
        .or(cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output_dir`".into()))?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut result = run_study(id, &cfg.studies, &cfg.inversion, seed)?;
    io::write_study_output(&out, &mut result)?;
    let report = &result.report;
    for m in &report.metrics {
        let status = match m.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        println!("{:<5} {:<36} {:>14.6e}  {}", status, m.name, m.value, m.check);
    }
    println!("{id}: {} -> {}", if report.passed() { "passed" } else { "FAILED" }, out.display());
    Ok(if report.passed() { Outcome::Done } else { Outcome::MetricFailure })
}
