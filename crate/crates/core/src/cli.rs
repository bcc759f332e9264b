//! Command line front end.
//!
//! Every subcommand is a pure function of its flags, input files and seed.
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{config_err, Error, Result};
use crate::io;
use crate::metrics;
use crate::phantom::{self, Dataset, DatasetManifest, Sampling, Split};
use crate::projector::{fbp, forward_project, Grid, Image, ProjectionGeometry, Sinogram};
use crate::redscan::{RedscanConfig, RedscanModel};
use crate::sampling::{apply_mask, fbp_acquired, ViewMask};
use crate::scl::{SclConfig, SclLayer, DEFAULT_LAMBDA};
use crate::trainer::{self, AdamConfig, RecurrentConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "limview", version, about = "Limited-view CT reconstruction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a phantom image.
    Phantom(PhantomArgs),
    /// Forward project an image.
    Project(ProjectArgs),
    /// Print the kept view indices, optionally masking a sinogram.
    Mask(MaskArgs),
    /// Filtered back projection of a sinogram.
    Fbp(FbpArgs),
    /// Generate a paired phantom dataset.
    Dataset(DatasetArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Reconstruct an acquired sinogram with a trained model.
    Reconstruct(ReconstructArgs),
    /// Score FBP and a trained model on a dataset split.
    Eval(EvalArgs),
    /// Run the unroll-depth or attention ablation.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    SheppLogan,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Z,
    Attention,
}

/// View subset selection; at most one of the two flags.
#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Keep this many uniformly spaced views.
    #[arg(long, conflicts_with = "la_max_deg")]
    pub sv_keep: Option<usize>,
    /// Keep the views with angle below this many degrees.
    #[arg(long)]
    pub la_max_deg: Option<f64>,
}

impl SamplingArgs {
    pub fn sampling(&self) -> Option<Sampling> {
        match (self.sv_keep, self.la_max_deg) {
            (Some(keep), _) => Some(Sampling::SparseView { keep }),
            (None, Some(max_deg)) => Some(Sampling::LimitedAngle { max_deg }),
            (None, None) => None,
        }
    }

    fn mask_for(&self, geometry: &ProjectionGeometry) -> Result<Option<ViewMask>> {
        self.sampling().map(|s| s.mask(geometry)).transpose()
    }

    fn require_mask(&self, geometry: &ProjectionGeometry) -> Result<ViewMask> {
        match self.mask_for(geometry)? {
            Some(m) => Ok(m),
            None => config_err("one of --sv-keep or --la-max-deg is required"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Number of residual dense attention blocks.
    #[arg(long, default_value_t = RedscanConfig::default().n_blocks)]
    pub blocks: usize,
    /// Feature channels.
    #[arg(long, default_value_t = RedscanConfig::default().base_channels)]
    pub channels: usize,
    /// Growth rate of the dense layers.
    #[arg(long, default_value_t = RedscanConfig::default().growth)]
    pub growth: usize,
    /// Disable channel attention.
    #[arg(long)]
    pub no_ca: bool,
    /// Disable spatial attention.
    #[arg(long)]
    pub no_sa: bool,
}

impl ModelArgs {
    pub fn config(&self) -> RedscanConfig {
        RedscanConfig {
            n_blocks: self.blocks,
            base_channels: self.channels,
            growth: self.growth,
            use_ca: !self.no_ca,
            use_sa: !self.no_sa,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RecurrentArgs {
    /// Recurrent unroll depth.
    #[arg(long, default_value_t = 4)]
    pub z: usize,
    /// Consistency blending weight.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Disable the sinogram consistency layer.
    #[arg(long)]
    pub no_scl: bool,
}

impl RecurrentArgs {
    fn build(&self, mask: &ViewMask, geometry: &ProjectionGeometry, grid: Grid) -> Result<RecurrentConfig> {
        let scl = if self.no_scl {
            None
        } else {
            Some(SclLayer::new(SclConfig::new(self.lambda, mask.clone(), geometry.clone(), grid)?)?)
        };
        RecurrentConfig::new(self.z, scl)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// Number of training iterations.
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 250)]
    pub val_interval: usize,
    #[arg(long, default_value_t = 50)]
    pub log_interval: usize,
    /// Validate on at most this many samples.
    #[arg(long)]
    pub val_limit: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    pub no_clip: bool,
}

impl OptimArgs {
    fn config(&self, model: &ModelArgs, rec: &RecurrentArgs) -> TrainConfig {
        let base = TrainConfig::default();
        TrainConfig {
            model: model.config(),
            z: rec.z,
            batch_size: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            max_iters: self.iters,
            seed: self.seed,
            val_interval: self.val_interval,
            log_interval: self.log_interval,
            val_limit: self.val_limit,
            checkpoint: None,
            use_scl: !rec.no_scl,
            lambda: rec.lambda,
            grad_clip: if self.no_clip { None } else { base.grad_clip },
        }
    }
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = PhantomKind::SheppLogan)]
    pub kind: PhantomKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an 8-bit PNG with window [0, 1].
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub views: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, default_value_t = 60)]
    pub views: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Sinogram to mask; requires --out.
    #[arg(long, requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FbpArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// With a subset flag, reconstructs from the acquired views only.
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 60)]
    pub views: usize,
    /// Defaults to keeping 10 uniformly spaced views.
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 128)]
    pub n_train: usize,
    #[arg(long, default_value_t = 16)]
    pub n_val: usize,
    #[arg(long, default_value_t = 32)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; holds the best-validation model.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub rec: RecurrentArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Full-shape acquired sinogram with unacquired rows zeroed.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub rec: RecurrentArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub rec: RecurrentArgs,
    /// Print the per-sample table of each method as well.
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub study: Study,
    /// Unroll depths for the Z study.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub depths: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub rec: RecurrentArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Results go to `out`, diagnostics to `err`.
pub fn cli_main<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match run(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Mask(a) => mask_cmd(a, out),
        Command::Fbp(a) => fbp_cmd(a),
        Command::Dataset(a) => dataset_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn save_with_png(img: &Image, path: &Path, png: Option<&PathBuf>) -> Result<()> {
    io::save_image(path, img)?;
    if let Some(p) = png {
        io::export_png(img, p, (0.0, 1.0))?;
    }
    Ok(())
}

fn phantom_cmd(a: &PhantomArgs) -> Result<()> {
    let img = match a.kind {
        PhantomKind::SheppLogan => phantom::shepp_logan(a.grid)?,
        PhantomKind::Random => phantom::random_phantom(a.grid, a.seed)?,
    };
    save_with_png(&img, &a.out, a.png.as_ref())
}

fn project_cmd(a: &ProjectArgs) -> Result<()> {
    let img = io::load_image(&a.input)?;
    let geometry = ProjectionGeometry::uniform(a.views, &img.grid)?;
    io::save_sinogram(&a.out, &forward_project(&img, &geometry)?)
}

/// Uniform geometry over [0, 180) matching a stored sinogram's shape.
fn stored_geometry(sino: &Sinogram, grid: &Grid) -> Result<ProjectionGeometry> {
    let geometry = ProjectionGeometry::uniform(sino.n_views(), grid)?;
    if geometry.n_detectors() != sino.n_detectors() {
        return Err(Error::Shape(format!(
            "sinogram has {} detectors, a {}-pixel grid uses {}",
            sino.n_detectors(),
            grid.nx,
            geometry.n_detectors()
        )));
    }
    Ok(geometry)
}

fn load_for_grid(path: &Path, grid: &Grid) -> Result<Sinogram> {
    let raw = io::load_sinogram(path)?;
    let geometry = stored_geometry(&raw, grid)?;
    Sinogram::from_data(geometry, raw.data)
}

fn mask_cmd(a: &MaskArgs, out: &mut dyn Write) -> Result<()> {
    let angles = crate::projector::uniform_angles(a.views);
    let geometry = ProjectionGeometry::new(angles, 1, 1.0)?;
    let mask = a.sampling.require_mask(&geometry)?;
    let idx: Vec<String> = mask.kept().iter().map(|k| k.to_string()).collect();
    emit(out, &format!("{}\n", idx.join(",")))?;
    if let (Some(input), Some(path)) = (&a.input, &a.out) {
        let sino = io::load_sinogram(input)?;
        io::save_sinogram(path, &apply_mask(&sino, &mask)?)?;
    }
    Ok(())
}

fn fbp_cmd(a: &FbpArgs) -> Result<()> {
    let grid = Grid::square(a.grid)?;
    let sino = load_for_grid(&a.input, &grid)?;
    let img = match a.sampling.mask_for(&sino.geometry)? {
        Some(mask) => fbp_acquired(&sino, &mask, &grid)?,
        None => fbp(&sino, &grid)?,
    };
    save_with_png(&img, &a.out, a.png.as_ref())
}

fn dataset_cmd(a: &DatasetArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = DatasetManifest {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        grid_size: a.grid,
        n_views: a.views,
        sampling: a.sampling.sampling().unwrap_or(Sampling::SparseView { keep: 10 }),
        seed: a.seed,
    };
    let manifest = phantom::generate_dataset(&manifest, &a.out)?;
    emit(out, &manifest.to_text()?)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let mut cfg = a.optim.config(&a.model, &a.rec);
    cfg.checkpoint = Some(a.out.clone());
    let model = RedscanModel::init(cfg.model, cfg.seed)?;
    let mut lines = String::new();
    let (model, record) = trainer::train(&dataset, model, &cfg, |line| {
        lines.push_str(line);
        lines.push('\n');
    })?;
    emit(out, &lines)?;
    if record.validations.is_empty() {
        io::save_checkpoint(&model, &a.out)?;
    }
    if let Some(best) = record.best() {
        emit(
            out,
            &format!(
                "best iteration {} val_psnr {:.4} val_ssim {:.6}\n",
                best.iteration, best.psnr, best.ssim
            ),
        )?;
    }
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs) -> Result<()> {
    let grid = Grid::square(a.grid)?;
    let model = io::load_checkpoint(&a.checkpoint)?;
    let sino = load_for_grid(&a.input, &grid)?;
    let mask = a.sampling.require_mask(&sino.geometry)?;
    let rec = a.rec.build(&mask, &sino.geometry, grid)?;
    let result = trainer::reconstruct(&model, &sino, &mask, &grid, &rec)?;
    save_with_png(&result.image, &a.out, a.png.as_ref())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split: Split = a.split.parse()?;
    let dataset = Dataset::load(&a.data)?;
    let model = io::load_checkpoint(&a.checkpoint)?;
    let m = &dataset.manifest;
    let rec = a.rec.build(&m.mask()?, &m.geometry()?, m.grid()?)?;
    let tables = trainer::compare_methods(&model, dataset.split(split), &rec)?;
    if a.per_sample {
        for t in &tables {
            emit(out, &format!("# {}\n{}", t.method, t.to_tsv()))?;
        }
    }
    emit(out, &metrics::summary_table(&tables))
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let cfg = a.optim.config(&a.model, &a.rec);
    let text = match a.study {
        Study::Z => trainer::format_z_sweep(&trainer::z_sweep(&dataset, &cfg, &a.depths)?),
        Study::Attention => trainer::format_attention_table(&trainer::attention_ablation(&dataset, &cfg)?),
    };
    emit(out, &text)
}
