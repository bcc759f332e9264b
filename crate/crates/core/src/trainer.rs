//! Recurrent reconstruction: Z weight-shared network + SCL stages, trained
//! end to end with an L1 loss on the final output and Adam.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::io;
use crate::metrics::{self, EvalTable, DEFAULT_DATA_RANGE};
use crate::phantom::{Dataset, Sample};
use crate::projector::{Grid, Image, Sinogram};
use crate::sampling::{fbp_acquired, ViewMask};
use crate::redscan::{redscan_forward, ModelVars, RedscanConfig, RedscanModel};
use crate::scl::{SclConfig, SclLayer, DEFAULT_LAMBDA};
use crate::tensor::{Parameter, Real, Tape, Tensor, Var};

/// Unroll depth and optional consistency layer.
#[derive(Clone)]
pub struct RecurrentConfig {
    pub z: usize,
    pub scl: Option<Arc<SclLayer>>,
}

impl RecurrentConfig {
    pub fn new(z: usize, scl: Option<Arc<SclLayer>>) -> Result<Self> {
        if z == 0 {
            return config_err("the unroll depth must be at least 1");
        }
        Ok(Self { z, scl })
    }
}

pub struct RecurrentOutput {
    pub output: Var,
    /// `merged[j][b]`: merged sinogram of batch element `b` after stage `j`.
    /// Empty when the consistency layer is off.
    pub merged: Vec<Vec<Vec<f64>>>,
}

/// Runs `z` stages on `input` (shape `(B, 1, H, W)`), reusing one set of
/// weights. `s_u` gives the acquired sinogram of each batch element.
pub fn recurrent_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &RedscanModel<T>,
    vars: &ModelVars,
    input: Var,
    s_u: &[&[f64]],
    cfg: &RecurrentConfig,
) -> Result<RecurrentOutput> {
    if cfg.z == 0 {
        return config_err("the unroll depth must be at least 1");
    }
    let mut x = input;
    let mut merged = Vec::new();
    for _ in 0..cfg.z {
        x = redscan_forward(tape, model, vars, x)?;
        if let Some(layer) = &cfg.scl {
            let (y, m) = layer.on_tape(tape, x, s_u)?;
            x = y;
            merged.push(m);
        }
    }
    Ok(RecurrentOutput { output: x, merged })
}

/// Mean absolute error between two tape values.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    tape.mean_abs_diff(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return config_err("Adam epsilon must be positive");
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using each parameter's stored gradient.
pub fn adam_step<T: Real>(params: &mut [Parameter<T>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return shape_err("optimizer state does not match the parameter list");
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let n = p.tensor.numel();
        if m.len() != n {
            return shape_err(format!("optimizer state for {} has the wrong length", p.name));
        }
        let grad: Vec<f64> = p.grad().iter().map(|g| g.as_f64()).collect();
        if grad.len() != n {
            return shape_err(format!("{} has no gradient buffer", p.name));
        }
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w = T::lit(w.as_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: RedscanConfig,
    pub z: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_iters: usize,
    pub seed: u64,
    /// Validate every this many iterations (and after the last one).
    pub val_interval: usize,
    pub log_interval: usize,
    /// Number of validation samples used; `None` uses the whole split.
    pub val_limit: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub use_scl: bool,
    pub lambda: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: RedscanConfig::default(),
            z: 4,
            batch_size: 4,
            adam: AdamConfig::default(),
            max_iters: 2000,
            seed: 0,
            val_interval: 250,
            log_interval: 50,
            val_limit: None,
            checkpoint: None,
            use_scl: true,
            lambda: DEFAULT_LAMBDA,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.z == 0 {
            return config_err("the unroll depth must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.val_interval == 0 || self.log_interval == 0 {
            return config_err("validation and log intervals must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err("lambda must be finite and non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err("gradient clip must be positive");
            }
        }
        Ok(())
    }

    /// Builds the recurrent settings for a dataset's geometry.
    pub fn recurrent(&self, dataset: &Dataset) -> Result<RecurrentConfig> {
        let scl = if self.use_scl {
            let m = &dataset.manifest;
            Some(SclLayer::new(SclConfig::new(self.lambda, m.mask()?, m.geometry()?, m.grid()?)?)?)
        } else {
            None
        };
        RecurrentConfig::new(self.z, scl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub iteration: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
    pub validations: Vec<Validation>,
    pub seconds: f64,
    /// Iteration of the returned weights (0 when no validation ran).
    pub best_iteration: usize,
}

impl TrainRecord {
    pub fn best(&self) -> Option<&Validation> {
        self.validations.iter().find(|v| v.iteration == self.best_iteration)
    }

    /// Mean of the losses of iterations `[start, start + len)` (1-based).
    pub fn mean_loss(&self, start: usize, len: usize) -> f64 {
        let s = start.saturating_sub(1).min(self.losses.len());
        let e = (s + len).min(self.losses.len());
        self.losses[s..e].iter().sum::<f64>() / (e - s).max(1) as f64
    }
}

fn stack<'a>(images: impl Iterator<Item = &'a Image>, n: usize, side: usize) -> Tensor<f32> {
    let data: Vec<f32> = images.flat_map(|im| im.data.iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![n, 1, side, side], data).expect("batch shape")
}

/// Gradient statistics after one backward pass.
fn grad_norm_and_max(model: &RedscanModel<f32>) -> (f64, f64) {
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for p in model.params() {
        for &g in p.grad() {
            let g = g as f64;
            sq += g * g;
            max = max.max(g.abs());
        }
    }
    (sq.sqrt(), max)
}

/// Runs one forward/backward pass on `batch`, storing gradients in `model`.
/// Returns the loss.
pub fn train_step(model: &mut RedscanModel<f32>, batch: &[&Sample], rec: &RecurrentConfig) -> Result<f64> {
    let Some(first) = batch.first() else {
        return config_err("empty batch");
    };
    let side = first.gt.grid.nx;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let input = tape.input(stack(batch.iter().map(|s| &s.fbpu), batch.len(), side));
    let gt = tape.input(stack(batch.iter().map(|s| &s.gt), batch.len(), side));
    let s_u: Vec<&[f64]> = batch.iter().map(|s| s.sinou.data.as_slice()).collect();
    let out = recurrent_forward(&mut tape, model, &vars, input, &s_u, rec)?;
    let loss = l1_loss(&mut tape, out.output, gt)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    model.store_grads(&grads, &vars);
    Ok(value)
}

fn clip_gradients(model: &mut RedscanModel<f32>, max_norm: f64) {
    let (norm, _) = grad_norm_and_max(model);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in model.params_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Mean PSNR / SSIM of the full recurrent model on `samples`.
pub fn validate(model: &RedscanModel<f32>, samples: &[Sample], rec: &RecurrentConfig) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return config_err("validation split is empty");
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for sample in samples {
        let out = reconstruct_from(model, &sample.fbpu, &sample.sinou, rec)?.image;
        p += metrics::psnr(&out, &sample.gt, DEFAULT_DATA_RANGE)?;
        s += metrics::ssim(&out, &sample.gt, DEFAULT_DATA_RANGE)?;
    }
    let n = samples.len() as f64;
    Ok((p / n, s / n))
}

/// Trains `model` on the dataset's training split. Returns the weights with
/// the best validation PSNR (the input weights when `max_iters` is 0).
///
/// `log` receives one `iter loss val_psnr val_ssim secs` line per log
/// interval; validation columns are `nan` between validations.
pub fn train(
    dataset: &Dataset,
    model: RedscanModel<f32>,
    cfg: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<(RedscanModel<f32>, TrainRecord)> {
    cfg.validate()?;
    if *model.config() != cfg.model {
        return config_err("model layout differs from the training configuration");
    }
    let mut record = TrainRecord::default();
    if cfg.max_iters == 0 {
        return Ok((model, record));
    }
    if dataset.train.is_empty() {
        return config_err("training split is empty");
    }
    let rec = cfg.recurrent(dataset)?;
    let val = &dataset.val[..cfg.val_limit.unwrap_or(dataset.val.len()).min(dataset.val.len())];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut model = model;
    let mut state = AdamState::new(model.params());
    let mut best: Option<(f64, RedscanModel<f32>)> = None;
    let mut last_val = (f64::NAN, f64::NAN);

    for iter in 1..=cfg.max_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset.train[order[cursor]]);
            cursor += 1;
        }
        let loss = train_step(&mut model, &batch, &rec)?;
        let (_, max_grad) = grad_norm_and_max(&model);
        if !loss.is_finite() || !max_grad.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter,
                max_abs_grad: max_grad,
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut model, c);
        }
        adam_step(model.params_mut(), &mut state, &cfg.adam)?;
        record.losses.push(loss);

        let validate_now = !val.is_empty() && (iter % cfg.val_interval == 0 || iter == cfg.max_iters);
        if validate_now {
            let (p, s) = validate(&model, val, &rec)?;
            record.validations.push(Validation {
                iteration: iter,
                psnr: p,
                ssim: s,
            });
            last_val = (p, s);
            if best.as_ref().is_none_or(|(bp, _)| p > *bp) {
                best = Some((p, model.clone()));
                record.best_iteration = iter;
                if let Some(path) = &cfg.checkpoint {
                    io::save_checkpoint(&model, path)?;
                }
            }
        }
        if iter % cfg.log_interval == 0 || iter == cfg.max_iters {
            log(&format!(
                "{iter} {loss:.6} {:.4} {:.4} {:.1}",
                last_val.0,
                last_val.1,
                start.elapsed().as_secs_f64()
            ));
            last_val = (f64::NAN, f64::NAN);
        }
    }
    record.seconds = start.elapsed().as_secs_f64();
    let mut out = match best {
        Some((_, m)) => m,
        None => {
            record.best_iteration = cfg.max_iters;
            if let Some(path) = &cfg.checkpoint {
                io::save_checkpoint(&model, path)?;
            }
            model
        }
    };
    out.zero_grad();
    Ok((out, record))
}

/// Output of an inference run.
pub struct Reconstruction {
    pub image: Image,
    /// Merged sinogram of the final stage, when the consistency layer is on.
    pub merged: Option<Sinogram>,
}

/// Unrolls the model from a given starting image.
pub fn reconstruct_from(
    model: &RedscanModel<f32>,
    start: &Image,
    s_u: &Sinogram,
    rec: &RecurrentConfig,
) -> Result<Reconstruction> {
    let side = start.grid.nx;
    if let Some(layer) = &rec.scl {
        if layer.config().grid != start.grid || layer.config().geometry.n_views() != s_u.n_views() {
            return shape_err("sinogram or image does not match the consistency layer");
        }
    }
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let x = tape.input(stack(std::iter::once(start), 1, side));
    let out = recurrent_forward(&mut tape, model, &vars, x, &[s_u.data.as_slice()], rec)?;
    let data = tape.value(out.output).data().iter().map(|&v| v as f64).collect();
    let merged = match out.merged.last() {
        Some(m) => Some(Sinogram::from_data(s_u.geometry.clone(), m[0].clone())?),
        None => None,
    };
    Ok(Reconstruction {
        image: Image::from_data(start.grid, data)?,
        merged,
    })
}

/// FBP of the acquired views followed by the recurrent unroll. `s_u` is the
/// full-shape sinogram with unacquired rows zeroed.
pub fn reconstruct(
    model: &RedscanModel<f32>,
    s_u: &Sinogram,
    mask: &ViewMask,
    grid: &Grid,
    rec: &RecurrentConfig,
) -> Result<Reconstruction> {
    reconstruct_from(model, &fbp_acquired(s_u, mask, grid)?, s_u, rec)
}

/// Reconstruction methods compared in evaluation tables.
pub enum Method<'a> {
    Fbp,
    Network {
        model: &'a RedscanModel<f32>,
        rec: RecurrentConfig,
    },
}

/// Scores each method on `samples`, one table per method.
pub fn evaluate_methods(samples: &[Sample], methods: &[(&str, Method<'_>)]) -> Result<Vec<EvalTable>> {
    methods
        .iter()
        .map(|(name, method)| {
            metrics::evaluate_split(name, samples.iter().map(|s| &s.gt), DEFAULT_DATA_RANGE, None, |i| {
                let s = &samples[i];
                match method {
                    Method::Fbp => Ok(s.fbpu.clone()),
                    Method::Network { model, rec } => Ok(reconstruct_from(model, &s.fbpu, &s.sinou, rec)?.image),
                }
            })
        })
        .collect()
}

/// Standard comparison: FBP, a single network pass without SCL, and the
/// full recurrent model.
pub fn compare_methods(model: &RedscanModel<f32>, samples: &[Sample], full: &RecurrentConfig) -> Result<Vec<EvalTable>> {
    evaluate_methods(
        samples,
        &[
            ("FBP", Method::Fbp),
            (
                "RedSCAN",
                Method::Network {
                    model,
                    rec: RecurrentConfig::new(1, None)?,
                },
            ),
            (
                "R2edSCAN",
                Method::Network {
                    model,
                    rec: full.clone(),
                },
            ),
        ],
    )
}

/// One trained-and-evaluated configuration of an ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub record: TrainRecord,
}

fn run_variant(dataset: &Dataset, cfg: &TrainConfig, label: String) -> Result<AblationRow> {
    let model = RedscanModel::init(cfg.model, cfg.seed)?;
    let (model, record) = train(dataset, model, cfg, |_| {})?;
    let rec = cfg.recurrent(dataset)?;
    let table = evaluate_methods(&dataset.test, &[(&label, Method::Network { model: &model, rec })])?.remove(0);
    Ok(AblationRow {
        label,
        psnr: table.psnr_mean_std(),
        ssim: table.ssim_mean_std(),
        record,
    })
}

/// Trains one model per unroll depth and scores it on the test split.
pub fn z_sweep(dataset: &Dataset, base: &TrainConfig, depths: &[usize]) -> Result<Vec<AblationRow>> {
    depths
        .iter()
        .map(|&z| run_variant(dataset, &TrainConfig { z, ..base.clone() }, format!("Z={z}")))
        .collect()
}

/// Trains the four channel/spatial attention combinations.
pub fn attention_ablation(dataset: &Dataset, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (ca, sa) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = TrainConfig {
            model: RedscanConfig {
                use_ca: ca,
                use_sa: sa,
                ..base.model
            },
            ..base.clone()
        };
        let mark = |b: bool| if b { "yes" } else { "no" };
        rows.push(run_variant(dataset, &cfg, format!("CA={} SA={}", mark(ca), mark(sa)))?);
    }
    Ok(rows)
}

/// `Z psnr ssim` lines, one per depth.
pub fn format_z_sweep(rows: &[AblationRow]) -> String {
    let mut out = String::from("Z\tpsnr\tssim\n");
    for r in rows {
        let z = r.label.trim_start_matches("Z=");
        let _ = writeln!(out, "{z}\t{:.4}\t{:.6}", r.psnr.0, r.ssim.0);
    }
    out
}

/// `CA SA psnr ssim` lines, one per attention combination.
pub fn format_attention_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("CA\tSA\tpsnr\tssim\n");
    for r in rows {
        let mut parts = r.label.split_whitespace().map(|p| p.split('=').nth(1).unwrap_or(""));
        let (ca, sa) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let _ = writeln!(
            out,
            "{ca}\t{sa}\t{:.2}±{:.2}\t{:.4}±{:.4}",
            r.psnr.0, r.psnr.1, r.ssim.0, r.ssim.1
        );
    }
    out
}
