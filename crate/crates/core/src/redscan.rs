//! Residual dense network with spatial-channel attention.
//!
//! Layout (all convolutions stride 1, "same" padding):
//!
//! ```text
//! input (B,1,H,W)
//!   -> ife1 3x3 (1->C) = F-1 -> ife2 3x3 (C->C) = F0
//!   -> block 1 .. block n            (each (B,C,H,W) -> (B,C,H,W))
//!   -> concat(F1..Fn) -> gff1 1x1 (nC->C) -> gff2 3x3 (C->C) = FGF
//!   -> FGF + F-1 -> final 3x3 (C->1)
//! ```
//!
//! A block runs four densely connected 3x3 convs with Leaky-ReLU (each adds
//! `growth` channels), fuses `[input, d1..d4]` with a 1x1 conv, applies
//! channel and spatial attention, sums the two branches and adds the block
//! input back.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Parameter, Real, Tape, Tensor, Var};

pub const DENSE_LAYERS: usize = 4;
pub const CA_REDUCTION: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedscanConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub use_ca: bool,
    pub use_sa: bool,
}

impl Default for RedscanConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            base_channels: 32,
            growth: 16,
            use_ca: true,
            use_sa: true,
        }
    }
}

impl RedscanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return config_err("need at least one block");
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(CA_REDUCTION) {
            return config_err(format!(
                "base channel count must be a positive multiple of {CA_REDUCTION}, got {}",
                self.base_channels
            ));
        }
        if self.growth == 0 {
            return config_err("growth must be positive");
        }
        Ok(())
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, g) = (self.base_channels, self.growth);
        let mut shapes = vec![
            ("ife1.w".to_string(), vec![c, 1, 3, 3]),
            ("ife1.b".to_string(), vec![c]),
            ("ife2.w".to_string(), vec![c, c, 3, 3]),
            ("ife2.b".to_string(), vec![c]),
        ];
        for n in 0..self.n_blocks {
            for t in 0..DENSE_LAYERS {
                shapes.push((format!("block{n}.dense{t}.w"), vec![g, c + t * g, 3, 3]));
                shapes.push((format!("block{n}.dense{t}.b"), vec![g]));
            }
            shapes.push((format!("block{n}.lff.w"), vec![c, c + DENSE_LAYERS * g, 1, 1]));
            shapes.push((format!("block{n}.lff.b"), vec![c]));
            if self.use_ca {
                shapes.push((format!("block{n}.ca.w1"), vec![c / CA_REDUCTION, c]));
                shapes.push((format!("block{n}.ca.w2"), vec![c, c / CA_REDUCTION]));
            }
            if self.use_sa {
                shapes.push((format!("block{n}.sa.w3"), vec![1, c, 1, 1]));
            }
        }
        shapes.extend([
            ("gff1.w".to_string(), vec![c, self.n_blocks * c, 1, 1]),
            ("gff1.b".to_string(), vec![c]),
            ("gff2.w".to_string(), vec![c, c, 3, 3]),
            ("gff2.b".to_string(), vec![c]),
            ("final.w".to_string(), vec![1, c, 3, 3]),
            ("final.b".to_string(), vec![1]),
        ]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Network weights; shared by every recurrent iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RedscanModel<T = f32> {
    config: RedscanConfig,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> RedscanModel<T> {
    /// He-normal weights (`N(0, 2 / fan_in)`), zero biases.
    pub fn init(config: RedscanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![T::zero(); numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::Config(e.to_string()))?;
                    (0..numel).map(|_| T::lit(normal.sample(&mut rng))).collect()
                };
                Ok(Parameter::new(name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters; names and shapes must match `config`.
    pub fn from_params(config: RedscanConfig, params: Vec<Parameter<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return config_err(format!(
                "config needs {} parameters, got {}",
                expected.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.tensor.shape() {
                return config_err(format!(
                    "expected parameter {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self { config, params, index })
    }

    pub fn config(&self) -> &RedscanConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> RedscanModel<U> {
        RedscanModel {
            config: self.config,
            params: self.params.iter().map(Parameter::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// All parameter values, concatenated in order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    /// Overwrites parameter values from a flat vector.
    pub fn set_flat_values(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err("flat parameter vector has the wrong length");
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.zero_grad();
                tape.param(Tensor::new(t.shape().to_vec(), t.into_data()).expect("shape"))
            })
            .collect();
        ModelVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Copies gradients of the bound parameters into the model's grad slots
    /// (overwriting); unreachable parameters get zeros.
    pub fn store_grads(&mut self, grads: &crate::tensor::Gradients<T>, vars: &ModelVars) {
        for (p, &v) in self.params.iter_mut().zip(&vars.vars) {
            let n = p.tensor.numel();
            let g = grads.get_or_zeros(v, n);
            p.tensor.ensure_grad().copy_from_slice(&g);
        }
    }
}

/// Tape handles for a bound model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weights of one attention unit.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub ca: Option<(Var, Var)>,
    pub sa: Option<Var>,
}

/// `f * sigmoid(w2 relu(w1 gap(f)))`, scaled per channel.
pub fn channel_attention<T: Real>(tape: &mut Tape<T>, f: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = tape.value(f).dims4()?.1;
    if tape.value(w1).shape().get(1) != Some(&c) {
        return shape_err(format!("channel attention weights do not match {c} channels"));
    }
    let v = tape.global_avg_pool(f)?;
    let h = tape.linear(v, w1)?;
    let h = tape.relu(h);
    let s = tape.linear(h, w2)?;
    let vhat = tape.sigmoid(s);
    tape.mul_channelwise(f, vhat)
}

/// `f * sigmoid(w3 * f)`, scaled per pixel.
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, f: Var, w3: Var) -> Result<Var> {
    let m = tape.conv2d(f, w3, None)?;
    let mhat = tape.sigmoid(m);
    tape.mul_spatialwise(f, mhat)
}

/// Sum of the enabled attention branches; the input itself when both are off.
pub fn sca<T: Real>(tape: &mut Tape<T>, f: Var, att: AttentionVars) -> Result<Var> {
    let ca = att.ca.map(|(w1, w2)| channel_attention(tape, f, w1, w2)).transpose()?;
    let sa = att.sa.map(|w3| spatial_attention(tape, f, w3)).transpose()?;
    match (ca, sa) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Ok(f),
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, vars: &ModelVars, x: Var, prefix: &str) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    tape.conv2d(x, w, Some(b))
}

pub fn block_attention(config: &RedscanConfig, vars: &ModelVars, n: usize) -> Result<AttentionVars> {
    Ok(AttentionVars {
        ca: if config.use_ca {
            Some((vars.get(&format!("block{n}.ca.w1"))?, vars.get(&format!("block{n}.ca.w2"))?))
        } else {
            None
        },
        sa: if config.use_sa {
            Some(vars.get(&format!("block{n}.sa.w3"))?)
        } else {
            None
        },
    })
}

/// Block `n`: dense convs, local fusion, attention, local residual.
pub fn redscab<T: Real>(
    tape: &mut Tape<T>,
    config: &RedscanConfig,
    vars: &ModelVars,
    n: usize,
    f_prev: Var,
) -> Result<Var> {
    let slope = T::lit(LEAKY_SLOPE);
    let mut feats = vec![f_prev];
    for t in 0..DENSE_LAYERS {
        let input = if feats.len() == 1 { f_prev } else { tape.concat_channels(&feats)? };
        let d = conv(tape, vars, input, &format!("block{n}.dense{t}"))?;
        feats.push(tape.leaky_relu(d, slope));
    }
    let all = tape.concat_channels(&feats)?;
    let fused = conv(tape, vars, all, &format!("block{n}.lff"))?;
    let attended = sca(tape, fused, block_attention(config, vars, n)?)?;
    tape.add(attended, f_prev)
}

/// Full network on a `(B, 1, H, W)` batch.
pub fn redscan_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &RedscanModel<T>,
    vars: &ModelVars,
    input: Var,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(input).dims4()?;
    if c != 1 {
        return shape_err(format!("network input must have one channel, got {c}"));
    }
    if h != w {
        return shape_err(format!("network input must be square, got {h}x{w}"));
    }
    let config = model.config();
    let f_m1 = conv(tape, vars, input, "ife1")?;
    let mut f = conv(tape, vars, f_m1, "ife2")?;
    let mut outs = Vec::with_capacity(config.n_blocks);
    for n in 0..config.n_blocks {
        f = redscab(tape, config, vars, n, f)?;
        outs.push(f);
    }
    let cat = tape.concat_channels(&outs)?;
    let g = conv(tape, vars, cat, "gff1")?;
    let g = conv(tape, vars, g, "gff2")?;
    let s = tape.add(g, f_m1)?;
    conv(tape, vars, s, "final")
}
