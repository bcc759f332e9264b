//! Sinogram consistency layer.
//!
//! The network output is projected, the acquired views are blended back in
//! with weight `1 / (1 + lambda)`, and the merged sinogram is reconstructed
//! with FBP. Everything here runs in `f64`.

use std::sync::Arc;

use crate::error::{config_err, shape_err, Result};
use crate::projector::{FbpOperator, Grid, Image, ProjectionGeometry, Sinogram};
use crate::sampling::ViewMask;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct SclConfig {
    pub lambda: f64,
    pub mask: ViewMask,
    pub geometry: ProjectionGeometry,
    pub grid: Grid,
}

impl SclConfig {
    pub fn new(lambda: f64, mask: ViewMask, geometry: ProjectionGeometry, grid: Grid) -> Result<Self> {
        let cfg = Self {
            lambda,
            mask,
            geometry,
            grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.mask.n_views_full() != self.geometry.n_views() {
            return config_err(format!(
                "mask covers {} views, geometry has {}",
                self.mask.n_views_full(),
                self.geometry.n_views()
            ));
        }
        self.geometry.check_covers(&self.grid)
    }
}

/// Blends acquired rows into the predicted sinogram.
///
/// Rows in the mask become `(lambda * s_net + s_u) / (lambda + 1)`; other
/// rows keep `s_net`.
pub fn merge_sinogram(s_net: &Sinogram, s_u: &Sinogram, mask: &ViewMask, lambda: f64) -> Result<Sinogram> {
    if s_net.n_views() != s_u.n_views() || s_net.n_detectors() != s_u.n_detectors() {
        return shape_err("predicted and acquired sinograms differ in shape");
    }
    if mask.n_views_full() != s_net.n_views() {
        return shape_err("mask does not match the sinogram view count");
    }
    let mut out = s_net.clone();
    merge_rows(&mut out.data, &s_u.data, &mask.membership(), s_net.n_detectors(), lambda);
    Ok(out)
}

fn merge_rows(net: &mut [f64], acquired: &[f64], sampled: &[bool], nd: usize, lambda: f64) {
    let denom = lambda + 1.0;
    for ((row, u), &keep) in net.chunks_mut(nd).zip(acquired.chunks(nd)).zip(sampled) {
        if keep {
            for (n, &a) in row.iter_mut().zip(u) {
                *n = (lambda * *n + a) / denom;
            }
        }
    }
}

/// Precomputed operator for one (grid, geometry, mask, lambda) setting.
pub struct SclLayer {
    config: SclConfig,
    op: FbpOperator,
    sampled: Vec<bool>,
}

/// What the backward pass needs from a forward call.
#[derive(Clone)]
pub struct SclContext {
    layer: Arc<SclLayer>,
}

impl SclContext {
    pub fn layer(&self) -> &SclLayer {
        &self.layer
    }
}

/// Result of one layer application.
pub struct SclOutput {
    pub image: Image,
    pub merged: Sinogram,
    pub context: SclContext,
}

impl SclLayer {
    pub fn new(config: SclConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let op = FbpOperator::new(&config.grid, &config.geometry)?;
        let sampled = config.mask.membership();
        Ok(Arc::new(Self { config, op, sampled }))
    }

    pub fn config(&self) -> &SclConfig {
        &self.config
    }

    pub fn operator(&self) -> &FbpOperator {
        &self.op
    }

    fn check_lengths(&self, img: usize, sino: Option<usize>) -> Result<()> {
        if img != self.config.grid.len() {
            return shape_err(format!("image has {img} pixels, layer expects {}", self.config.grid.len()));
        }
        if let Some(s) = sino {
            let want = self.config.geometry.n_views() * self.config.geometry.n_detectors();
            if s != want {
                return shape_err(format!("sinogram has {s} values, layer expects {want}"));
            }
        }
        Ok(())
    }

    /// Returns `(reconstruction, merged sinogram)` on raw buffers.
    pub fn apply(&self, i_net: &[f64], s_u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_lengths(i_net.len(), Some(s_u.len()))?;
        let mut merged = self.op.project(i_net);
        merge_rows(
            &mut merged,
            s_u,
            &self.sampled,
            self.config.geometry.n_detectors(),
            self.config.lambda,
        );
        Ok((self.op.fbp(&merged), merged))
    }

    /// Vector-Jacobian product with respect to the network image.
    pub fn vjp(&self, grad_out: &[f64]) -> Result<Vec<f64>> {
        self.check_lengths(grad_out.len(), None)?;
        let mut g = self.op.fbp_transpose(grad_out);
        let w = self.config.lambda / (1.0 + self.config.lambda);
        for (row, &keep) in g.chunks_mut(self.config.geometry.n_detectors()).zip(&self.sampled) {
            if keep {
                row.iter_mut().for_each(|v| *v *= w);
            }
        }
        Ok(self.op.back_project(&g))
    }

    pub fn forward(self: &Arc<Self>, i_net: &Image, s_u: &Sinogram) -> Result<SclOutput> {
        if i_net.grid != self.config.grid {
            return shape_err("image grid does not match the layer");
        }
        if s_u.geometry.angles_deg() != self.config.geometry.angles_deg()
            || s_u.n_detectors() != self.config.geometry.n_detectors()
        {
            return shape_err("acquired sinogram geometry does not match the layer");
        }
        let (img, merged) = self.apply(&i_net.data, &s_u.data)?;
        Ok(SclOutput {
            image: Image::from_data(self.config.grid, img)?,
            merged: Sinogram::from_data(self.config.geometry.clone(), merged)?,
            context: SclContext { layer: Arc::clone(self) },
        })
    }

    /// Applies the layer to every element of a `(B, 1, H, W)` tape value.
    /// `s_u` holds one acquired sinogram per batch element. Also returns the
    /// merged sinograms.
    pub fn on_tape<T: Real>(self: &Arc<Self>, tape: &mut Tape<T>, x: Var, s_u: &[&[f64]]) -> Result<(Var, Vec<Vec<f64>>)> {
        let (b, c, h, w) = tape.value(x).dims4()?;
        if c != 1 || h * w != self.config.grid.len() || h != self.config.grid.ny {
            return shape_err(format!("layer input must be (B, 1, {0}, {0})", self.config.grid.ny));
        }
        if s_u.len() != b {
            return shape_err(format!("{} acquired sinograms for a batch of {b}", s_u.len()));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * hw);
        let mut merged = Vec::with_capacity(b);
        for (chunk, s) in tape.value(x).data().chunks(hw).zip(s_u) {
            let img: Vec<f64> = chunk.iter().map(|v| v.as_f64()).collect();
            let (rec, m) = self.apply(&img, s)?;
            out.extend(rec.into_iter().map(T::lit));
            merged.push(m);
        }
        let layer = Arc::clone(self);
        let value = Tensor::new(vec![b, 1, h, w], out)?;
        let y = tape.custom(&[x], value, move |g| {
            let grad = g
                .chunks(hw)
                .flat_map(|gc| {
                    let g64: Vec<f64> = gc.iter().map(|v| v.as_f64()).collect();
                    layer.vjp(&g64).expect("checked length").into_iter().map(T::lit)
                })
                .collect();
            vec![grad]
        });
        Ok((y, merged))
    }
}

/// One-shot forward pass; builds the operator from `cfg`.
pub fn scl_forward(i_net: &Image, s_u: &Sinogram, cfg: &SclConfig) -> Result<SclOutput> {
    SclLayer::new(cfg.clone())?.forward(i_net, s_u)
}

/// Gradient of [`scl_forward`] with respect to its image input.
pub fn scl_backward(grad_out: &Image, ctx: &SclContext) -> Result<Image> {
    let layer = ctx.layer();
    if grad_out.grid != layer.config.grid {
        return shape_err("gradient grid does not match the forward pass");
    }
    Image::from_data(layer.config.grid, layer.vjp(&grad_out.data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{fbp, forward_project};
    use crate::sampling::{apply_mask, sparse_view_mask};
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, views: usize, keep: usize, lambda: f64) -> SclConfig {
        let grid = Grid::square(n).unwrap();
        let geometry = ProjectionGeometry::uniform(views, &grid).unwrap();
        let mask = sparse_view_mask(views, keep).unwrap();
        SclConfig::new(lambda, mask, geometry, grid).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn acquired(cfg: &SclConfig, rng: &mut ChaCha8Rng) -> Sinogram {
        let gt = Image::from_data(cfg.grid, rand_vec(cfg.grid.len(), rng)).unwrap();
        apply_mask(&forward_project(&gt, &cfg.geometry).unwrap(), &cfg.mask).unwrap()
    }

    #[test]
    fn merge_closed_forms() {
        let cfg = setup(16, 6, 3, 0.0);
        let geom = cfg.geometry.clone();
        let nd = geom.n_detectors();
        let s_net = Sinogram::from_data(geom.clone(), vec![1.0; 6 * nd]).unwrap();
        let s_u = apply_mask(&Sinogram::from_data(geom, vec![2.0; 6 * nd]).unwrap(), &cfg.mask).unwrap();
        let m0 = merge_sinogram(&s_net, &s_u, &cfg.mask, 0.0).unwrap();
        let m = merge_sinogram(&s_net, &s_u, &cfg.mask, 0.001).unwrap();
        for v in 0..6 {
            if cfg.mask.contains(v) {
                assert!(m0.view(v).iter().all(|&x| x == 2.0));
                assert!(m.view(v).iter().all(|&x| (x - 1.999_000_999_000_999).abs() < 1e-12));
            } else {
                assert_eq!(m0.view(v), s_net.view(v));
                assert_eq!(m.view(v), s_net.view(v));
            }
        }
        let short = Sinogram::zeros(ProjectionGeometry::uniform(3, &cfg.grid).unwrap());
        assert!(merge_sinogram(&short, &s_u, &cfg.mask, 0.0).is_err());
    }

    #[test]
    fn merge_moves_monotonically_with_lambda() {
        let cfg = setup(16, 4, 2, 0.0);
        let nd = cfg.geometry.n_detectors();
        let s_net = Sinogram::from_data(cfg.geometry.clone(), vec![1.0; 4 * nd]).unwrap();
        let s_u = apply_mask(
            &Sinogram::from_data(cfg.geometry.clone(), vec![3.0; 4 * nd]).unwrap(),
            &cfg.mask,
        )
        .unwrap();
        let v = cfg.mask.kept()[0];
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.001, 0.1, 1.0, 10.0, 1e9] {
            let m = merge_sinogram(&s_net, &s_u, &cfg.mask, lambda).unwrap();
            let x = m.view(v)[0];
            assert!(x < prev && (1.0..=3.0).contains(&x));
            prev = x;
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = setup(16, 6, 3, 0.0);
        assert!(SclConfig { lambda: -1.0, ..cfg.clone() }.validate().is_err());
        assert!(SclConfig { lambda: f64::NAN, ..cfg.clone() }.validate().is_err());
        let other = ProjectionGeometry::uniform(12, &cfg.grid).unwrap();
        assert!(SclConfig { geometry: other, ..cfg }.validate().is_err());
    }

    #[test]
    fn lambda_zero_replaces_sampled_rows() {
        let cfg = setup(16, 12, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s_u = acquired(&cfg, &mut rng);
        let i_net = Image::from_data(cfg.grid, rand_vec(256, &mut rng)).unwrap();
        let out = scl_forward(&i_net, &s_u, &cfg).unwrap();
        for &v in cfg.mask.kept() {
            assert!(out.merged.view(v).iter().zip(s_u.view(v)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let s_net = forward_project(&i_net, &cfg.geometry).unwrap();
        let expected = merge_sinogram(&s_net, &s_u, &cfg.mask, 0.0).unwrap();
        let scale = expected.norm();
        assert!(out.merged.data.iter().zip(&expected.data).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
    }

    #[test]
    fn full_mask_lambda_zero_ignores_network() {
        let grid = Grid::square(16).unwrap();
        let geometry = ProjectionGeometry::uniform(8, &grid).unwrap();
        let cfg = SclConfig::new(0.0, ViewMask::full(8).unwrap(), geometry, grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s_u = acquired(&cfg, &mut rng);
        let want = fbp(&s_u, &grid).unwrap();
        let layer = SclLayer::new(cfg).unwrap();
        for seed in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let i_net = Image::from_data(grid, rand_vec(256, &mut r)).unwrap();
            let out = layer.forward(&i_net, &s_u).unwrap();
            assert!(out.image.data.iter().zip(&want.data).all(|(a, b)| (a - b).abs() <= 1e-12 * want.norm()));
            let g = scl_backward(&i_net, &out.context).unwrap();
            assert!(g.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn large_lambda_keeps_prediction() {
        let cfg = setup(16, 12, 4, 1e9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s_u = acquired(&cfg, &mut rng);
        let i_net = Image::from_data(cfg.grid, rand_vec(256, &mut rng)).unwrap();
        let out = scl_forward(&i_net, &s_u, &cfg).unwrap();
        let s_net = forward_project(&i_net, &cfg.geometry).unwrap();
        let rel = out
            .merged
            .data
            .iter()
            .zip(&s_net.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / s_net.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(rel <= 1e-6, "{rel}");
    }

    #[test]
    fn affine_decomposition() {
        let cfg = setup(16, 12, 4, DEFAULT_LAMBDA);
        let layer = SclLayer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s_u = acquired(&cfg, &mut rng).data;
        let i = rand_vec(256, &mut rng);
        let zero_s = vec![0.0; s_u.len()];
        let (full, _) = layer.apply(&i, &s_u).unwrap();
        let (a, _) = layer.apply(&i, &zero_s).unwrap();
        let (b, _) = layer.apply(&[0.0; 256], &s_u).unwrap();
        let scale = full.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for k in 0..256 {
            assert!((full[k] - a[k] - b[k]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let cfg = setup(16, 12, 3, DEFAULT_LAMBDA);
        let layer = SclLayer::new(cfg).unwrap();
        let zero_s = vec![0.0; 12 * layer.config().geometry.n_detectors()];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_vec(256, &mut rng);
            let y = rand_vec(256, &mut rng);
            let (lx, _) = layer.apply(&x, &zero_s).unwrap();
            let lty = layer.vjp(&y).unwrap();
            let lhs: f64 = lx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&lty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()), "{lhs} {rhs}");
        }
    }

    #[test]
    fn finite_difference_check() {
        let cfg = setup(16, 12, 4, DEFAULT_LAMBDA);
        let layer = SclLayer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s_u = acquired(&cfg, &mut rng).data;
        let i = rand_vec(256, &mut rng);
        let wts = rand_vec(256, &mut rng);
        let loss = |x: &[f64]| {
            let (out, _) = layer.apply(x, &s_u).unwrap();
            out.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = layer.vjp(&wts).unwrap();
        let idx: Vec<usize> = (0..256).step_by(7).collect();
        let r = gradient_check(&i, &g, &idx, 1e-4, 1e-5, 1e-8, loss).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn tape_wrapper_matches_direct_call() {
        let cfg = setup(16, 12, 4, DEFAULT_LAMBDA);
        let layer = SclLayer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s1 = acquired(&cfg, &mut rng).data;
        let s2 = acquired(&cfg, &mut rng).data;
        let x = rand_vec(512, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(Tensor::new(vec![2, 1, 16, 16], x.clone()).unwrap());
        let (y, merged) = layer.on_tape(&mut tape, xv, &[&s1, &s2]).unwrap();
        let (d1, m1) = layer.apply(&x[..256], &s1).unwrap();
        let (d2, _) = layer.apply(&x[256..], &s2).unwrap();
        assert_eq!(&tape.value(y).data()[..256], &d1[..]);
        assert_eq!(&tape.value(y).data()[256..], &d2[..]);
        assert_eq!(merged[0], m1);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        let ones = vec![1.0; 256];
        let want = layer.vjp(&ones).unwrap();
        assert_eq!(&g.get(xv).unwrap()[..256], &want[..]);
        assert!(layer.on_tape(&mut tape, xv, &[&s1]).is_err());
    }
}
