//! The `gibly` command line: scene synthesis, feature extraction, kernel
//! fitting, segmentation training, gradient checking and benchmarking.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. Exit codes: 0 success, 1 failed check,
//! 2 usage or configuration error, 3 unreadable input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::bench::run_benchmark;
use crate::composite::RegularizerConfig;
use crate::error::{Error, Result};
use crate::io::{self, CloudFormat};
use crate::kernels::{GibKind, GibParams};
use crate::layer::{GiblyConfig, GiblyLayer};
use crate::neighborhood::{farthest_point_sample, CapMode, NeighborCap, NeighborhoodIndex, PointCloud, ScaleSchedule};
use crate::normalization::{derive_seed, DEFAULT_MC_SAMPLES};
use crate::training::gradcheck::{check_layer, GradcheckOptions};
use crate::training::segment::standardized_inputs;
use crate::training::{
    fit_shape, generate_scene, tile_scene, train_segmenter, uniform_cloud, AdamWConfig, FitOptions, SegmenterOptions,
    SyntheticSceneSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;

/// Every setting, as read from a config file or given as a flag. Unset
/// values fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Radius of the finest neighborhood (m).
    #[arg(long, global = true)]
    pub base_radius: Option<f64>,
    /// Ratio between consecutive radii.
    #[arg(long, global = true)]
    pub factor: Option<f64>,
    #[arg(long, global = true)]
    pub num_scales: Option<usize>,
    #[arg(long, global = true)]
    pub gibs_per_kind: Option<usize>,
    #[arg(long, global = true)]
    pub num_composites: Option<usize>,
    /// Monte-Carlo samples per neighborhood ball.
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    #[arg(long, global = true)]
    pub projection_dim: Option<usize>,
    #[arg(long, global = true)]
    pub lambda_l1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_l2: Option<f64>,
    /// Per-scale neighbor limit; unset means no limit.
    #[arg(long, global = true)]
    pub max_neighbors: Option<usize>,
    /// `closest` or `strided`.
    #[arg(long, global = true)]
    pub cap_mode: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub freeze_geometry: Option<bool>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        Settings { $($field: $top.$field.clone().or_else(|| $base.$field.clone()),)* }
    };
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Values in `top` win over values in `self`.
    pub fn overlay(&self, top: &Settings) -> Settings {
        overlay!(
            self,
            top,
            base_radius,
            factor,
            num_scales,
            gibs_per_kind,
            num_composites,
            mc_samples,
            projection_dim,
            lambda_l1,
            lambda_l2,
            max_neighbors,
            cap_mode,
            epochs,
            lr,
            weight_decay,
            freeze_geometry,
            seed,
            workers
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }

    pub fn layer_config(&self) -> Result<GiblyConfig> {
        let d = GiblyConfig::default();
        let schedule = ScaleSchedule {
            base_radius: self.base_radius.unwrap_or(d.schedule.base_radius),
            factor: self.factor.unwrap_or(d.schedule.factor),
            num_scales: self.num_scales.unwrap_or(d.schedule.num_scales),
        };
        let mode = match self.cap_mode.as_deref() {
            None | Some("strided") => CapMode::Strided,
            Some("closest") => CapMode::Closest,
            Some(other) => return Err(Error::Config(format!("cap_mode must be `closest` or `strided`, got `{other}`"))),
        };
        let config = GiblyConfig {
            schedule,
            gibs_per_kind: self.gibs_per_kind.unwrap_or(d.gibs_per_kind),
            num_composites: self.num_composites.unwrap_or(d.num_composites),
            mc_samples: self.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES),
            projection_dim: self.projection_dim.unwrap_or(d.projection_dim),
            reg: RegularizerConfig {
                lambda_l1: self.lambda_l1.unwrap_or(d.reg.lambda_l1),
                lambda_l2: self.lambda_l2.unwrap_or(d.reg.lambda_l2),
            },
            global_seed: self.seed(),
            neighbor_cap: self.max_neighbors.map(|max| NeighborCap { max, mode }),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn segmenter_options(&self) -> SegmenterOptions {
        let d = SegmenterOptions::default();
        SegmenterOptions {
            epochs: self.epochs.unwrap_or(d.epochs),
            optimizer: AdamWConfig {
                lr: self.lr.unwrap_or(d.optimizer.lr),
                weight_decay: self.weight_decay.unwrap_or(d.optimizer.weight_decay),
                ..d.optimizer
            },
            seed: self.seed(),
            freeze_geometry: self.freeze_geometry.unwrap_or(false),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gibly", version, about = "Geometric inductive-bias features for point clouds")]
pub struct Cli {
    /// TOML file with settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(flatten)]
    pub settings: Settings,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a labeled cloud from a TOML scene spec.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// auto, xyz or ply
        #[arg(long, default_value = "auto")]
        format: String,
    },
    /// Run the layer over a cloud and write its features.
    Extract {
        cloud: PathBuf,
        #[arg(long)]
        out_features: Option<PathBuf>,
        #[arg(long)]
        out_pre_projection: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        format: String,
    },
    /// Fit one kernel to a cloud about its centroid.
    Fit {
        cloud: PathBuf,
        #[arg(long)]
        kind: String,
        /// Comma-separated: r, t, beta, w, angles, precisions, all.
        #[arg(long, default_value = "r")]
        trainable: String,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Initial radius.
        #[arg(long)]
        r: Option<f64>,
        /// Initial shell thickness.
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        w: Option<f64>,
        /// Trajectory CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        format: String,
    },
    /// Train the layer with a linear head, plus a coordinates-only baseline.
    Train {
        /// Labeled cloud, or a `.toml` scene spec.
        scene: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Parameter dump of the trained model.
        #[arg(long)]
        params_out: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        format: String,
    },
    /// Compare every layer gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 30)]
        points: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Time the phases of a forward pass.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also write the timings as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::EmptyCloud | Error::UnsupportedPly(_) => EXIT_PARSE,
        _ => EXIT_USAGE,
    }
}

fn resolve_settings(cli: &Cli) -> Result<Settings> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    Ok(file.overlay(&cli.settings))
}

fn execute(cli: &Cli) -> Result<i32> {
    let settings = resolve_settings(cli)?;
    let workers = settings.workers();
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    crate::with_workers(workers, || dispatch(&cli.command, &settings))?
}

fn dispatch(command: &Command, settings: &Settings) -> Result<i32> {
    match command {
        Command::Synth { spec, out, format } => cmd_synth(spec, out, format.parse()?, settings),
        Command::Extract {
            cloud,
            out_features,
            out_pre_projection,
            format,
        } => cmd_extract(cloud, out_features.as_deref(), out_pre_projection.as_deref(), format.parse()?, settings),
        Command::Fit {
            cloud,
            kind,
            trainable,
            steps,
            r,
            t,
            beta,
            w,
            report,
            format,
        } => {
            let kind: GibKind = kind.parse()?;
            let mut p = GibParams::new(kind);
            p.r = r.unwrap_or(p.r);
            p.t = t.unwrap_or(p.t);
            p.beta = beta.unwrap_or(p.beta);
            p.w = w.unwrap_or(p.w);
            if !p.to_array().iter().all(|v| v.is_finite()) {
                return Err(Error::Config("initial parameters must be finite".into()));
            }
            let mask = FitOptions::mask_from_names(trainable.split(','))?;
            cmd_fit(cloud, p, mask, *steps, report.as_deref(), format.parse()?, settings)
        }
        Command::Train {
            scene,
            report,
            params_out,
            format,
        } => cmd_train(scene, report.as_deref(), params_out.as_deref(), format.parse()?, settings),
        Command::Gradcheck { points, tolerance, step } => cmd_gradcheck(*points, *tolerance, *step, settings),
        Command::Bench { points, repeats, csv } => cmd_bench(*points, *repeats, csv.as_deref(), settings),
    }
}

fn read_scene_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SyntheticSceneSpec::from_toml(&text)
}

pub fn cmd_synth(spec: &Path, out: &Path, format: CloudFormat, settings: &Settings) -> Result<i32> {
    let mut spec = read_scene_spec(spec)?;
    if let Some(seed) = settings.seed {
        spec.seed = seed;
    }
    let cloud = generate_scene(&spec)?;
    io::write_cloud(&cloud, out, format)?;
    println!("wrote {} points to {}", cloud.len(), out.display());
    Ok(EXIT_OK)
}

pub fn cmd_extract(
    cloud_path: &Path,
    out_features: Option<&Path>,
    out_pre: Option<&Path>,
    format: CloudFormat,
    settings: &Settings,
) -> Result<i32> {
    let cloud = io::read_cloud(cloud_path, format)?;
    let config = settings.layer_config()?;
    let layer = GiblyLayer::new(config, cloud.feature_dim())?;
    let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius())?;
    let pass = layer.forward(&cloud, &index)?;
    if let Some(path) = out_features {
        io::write_features(&pass.output, path)?;
    }
    if let Some(path) = out_pre {
        io::write_features(&pass.pre_projection, path)?;
    }
    println!(
        "{} points: {} output features, {} pre-projection features",
        cloud.len(),
        pass.output.ncols(),
        pass.pre_projection.ncols()
    );
    Ok(EXIT_OK)
}

pub fn format_params(p: &GibParams) -> String {
    let a = p.angles;
    let l = p.precisions();
    format!(
        "kind={} r={} t={} beta={} w={} phi=({}, {}, {}) precisions=({}, {}, {})",
        p.kind,
        io::format_sig(p.r, 9),
        io::format_sig(p.t, 9),
        io::format_sig(p.beta, 9),
        io::format_sig(p.w, 9),
        io::format_sig(a.phi_x, 9),
        io::format_sig(a.phi_y, 9),
        io::format_sig(a.phi_z, 9),
        io::format_sig(l[0], 9),
        io::format_sig(l[1], 9),
        io::format_sig(l[2], 9)
    )
}

pub fn cmd_fit(
    cloud_path: &Path,
    initial: GibParams,
    trainable: [bool; GibParams::NUM_SCALARS],
    steps: usize,
    report: Option<&Path>,
    format: CloudFormat,
    settings: &Settings,
) -> Result<i32> {
    let cloud = io::read_cloud(cloud_path, format)?;
    let mut options = FitOptions::new(steps, settings.lr.unwrap_or(1e-2), trainable);
    options.mc_samples = settings.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES);
    options.seed = settings.seed();
    let fit = fit_shape(&cloud, initial, &options)?;
    if let Some(path) = report {
        io::write_string(&io::format_trajectory(&fit.trajectory), path)?;
    }
    println!("initial: {}", format_params(&initial));
    println!("fitted:  {}", format_params(&fit.params));
    println!(
        "objective {} -> {} ({} accepted, {} rejected steps)",
        io::format_sig(fit.trajectory[0], 9),
        io::format_sig(*fit.trajectory.last().expect("non-empty"), 9),
        fit.accepted_steps,
        fit.rejected_steps
    );
    Ok(EXIT_OK)
}

fn load_scene(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let is_spec = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_spec {
        generate_scene(&read_scene_spec(path)?)
    } else {
        io::read_cloud(path, format)
    }
}

pub fn cmd_train(
    scene: &Path,
    report: Option<&Path>,
    params_out: Option<&Path>,
    format: CloudFormat,
    settings: &Settings,
) -> Result<i32> {
    let cloud = load_scene(scene, format)?;
    let config = settings.layer_config()?;
    let options = settings.segmenter_options();
    info!("training on {} points for {} epochs", cloud.len(), options.epochs);
    let outcome = train_segmenter(&cloud, &config, &options)?;
    if let Some(path) = report {
        io::write_string(&io::format_train_reports(&[&outcome.gibly, &outcome.baseline]), path)?;
    }
    if let Some(path) = params_out {
        io::write_parameters(&outcome.gibly.parameters, path)?;
    }
    for r in [&outcome.gibly, &outcome.baseline] {
        let m = &r.final_metrics().metrics;
        println!(
            "{:<8} accuracy {} mIoU {}",
            r.model,
            io::format_sig(m.accuracy, 6),
            io::format_sig(m.miou, 6)
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(points: usize, tolerance: f64, step: f64, settings: &Settings) -> Result<i32> {
    if points == 0 {
        return Err(Error::Config("points must be at least 1".into()));
    }
    if !(tolerance > 0.0 && step > 0.0) {
        return Err(Error::Config("tolerance and step must be positive".into()));
    }
    let seed = settings.seed();
    let config = settings.layer_config()?;
    let half = config.schedule.base_radius * 1.5;
    let cloud = uniform_cloud(points, half, derive_seed(seed, 6_000))?;
    let cloud = cloud.clone().with_features(standardized_inputs(&cloud))?;
    let layer = GiblyLayer::new(config, cloud.feature_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6_001));
    let upstream = Array2::from_shape_simple_fn((points, layer.output_dim()), || rng.gen_range(-1.0..1.0));
    let report = check_layer(&layer, &cloud, &upstream, GradcheckOptions::relative(step, tolerance))?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} parameters, max relative error {}, {} failing",
        report.entries.len(),
        io::format_sig(report.max_rel_error(), 3),
        report.failures().count()
    );
    for e in report.failures().take(10) {
        let _ = writeln!(out, "  param {}: analytic {} numeric {}", e.index, e.analytic, e.numeric);
    }
    print!("{out}");
    if report.passed() {
        println!("PASS");
        Ok(EXIT_OK)
    } else {
        println!("FAIL");
        Ok(EXIT_CHECK_FAILED)
    }
}

/// The benchmark cloud: a synthetic tile oversampled by 20% and thinned to
/// `points` by farthest-point sampling.
pub fn bench_cloud(points: usize, seed: u64) -> Result<PointCloud> {
    if points == 0 {
        return Err(Error::Config("points must be at least 1".into()));
    }
    let dense = generate_scene(&tile_scene(points + points / 5, seed))?;
    let keep = farthest_point_sample(&dense, points.min(dense.len()), 0)?;
    Ok(dense.select(&keep))
}

pub fn cmd_bench(points: usize, repeats: usize, csv: Option<&Path>, settings: &Settings) -> Result<i32> {
    let cloud = bench_cloud(points, settings.seed())?;
    let config = settings.layer_config()?;
    let timings = run_benchmark(&cloud, &config, repeats)?;
    println!("{} points, {} workers, median of {} timed passes", cloud.len(), settings.workers(), repeats - 1);
    print!("{}", timings.to_table());
    if let Some(path) = csv {
        io::write_string(&timings.to_csv(), path)?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::from_toml("num_scales = 2\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn defaults_match_layer_defaults() {
        let c = Settings::default().layer_config().unwrap();
        assert_eq!(c, GiblyConfig::default());
        assert_eq!(c.schedule.num_scales, 3);
        assert_eq!(c.gibs_per_kind, 2);
        assert_eq!(c.num_composites, 16);
        assert_eq!(c.schedule.base_radius, 0.4);
        assert_eq!(c.schedule.factor, 2.0);
    }

    #[test]
    fn flags_override_file() {
        let file = Settings::from_toml("num_scales = 2\nlr = 0.5\n").unwrap();
        let flags = Settings {
            num_scales: Some(4),
            ..Default::default()
        };
        let merged = file.overlay(&flags);
        assert_eq!(merged.num_scales, Some(4));
        assert_eq!(merged.lr, Some(0.5));
    }

    #[test]
    fn bad_cap_mode_is_a_config_error() {
        let s = Settings {
            cap_mode: Some("nearest".into()),
            ..Default::default()
        };
        assert!(matches!(s.layer_config(), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&Error::parse(1, "x")), EXIT_PARSE);
        assert_eq!(exit_code_for(&Error::EmptyCloud), EXIT_PARSE);
        assert_eq!(exit_code_for(&Error::InvalidSpec("x".into())), EXIT_USAGE);
        assert_eq!(run(["gibly", "no-such-command"]), EXIT_USAGE);
    }
}
