// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small, seeded, never-trained vision transformer.
//!
//! ```text
//! image → patches → [CLS; patches·W_patch + b] + pos
//!   → for each layer:  x += MSA(LN1(x));  x += MLP(LN2(x))     (resid_post hook)
//!   → LN_post(x[CLS]) · P                                      (embedding)
//! ```

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyVitConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_mlp: usize,
    pub d_out: usize,
    /// Multiplier on every block's contribution to the residual stream.
    pub block_gain: f32,
    pub seed: u64,
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            grid_rows: 4,
            grid_cols: 4,
            patch_size: 4,
            channels: 3,
            d_mlp: 256,
            d_out: 32,
            block_gain: 0.5,
            seed: 0,
        }
    }
}

impl ToyVitConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid_rows * self.grid_cols + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.grid_rows * self.patch_size,
            self.grid_cols * self.patch_size,
            self.channels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_out == 0 {
            return Err(Error::invalid("toy model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_out + 1 >= self.d_model {
            return Err(Error::invalid("d_out must be below d_model - 1"));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::invalid("image geometry must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn apply_row(&self, x: ArrayView1<'_, f32>) -> Array1<f32> {
        let n = x.len() as f32;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.mapv(|v| (v - mean) * inv) * &self.gamma + &self.beta
    }

    fn apply(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = Array2::zeros(x.raw_dim());
        for (mut o, r) in out.outer_iter_mut().zip(x.outer_iter()) {
            o.assign(&self.apply_row(r));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    w_q: Array2<f32>,
    w_k: Array2<f32>,
    w_v: Array2<f32>,
    w_o: Array2<f32>,
    b_o: Array1<f32>,
    ln2: LayerNorm,
    w_1: Array2<f32>,
    b_1: Array1<f32>,
    w_2: Array2<f32>,
    b_2: Array1<f32>,
}

fn gaussian(rng: &mut impl Rng, shape: (usize, usize), std: f32) -> Array2<f32> {
    Array2::from_shape_fn(shape, |_| std * rng.sample::<f32, _>(StandardNormal))
}

fn gaussian1(rng: &mut impl Rng, n: usize, std: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| std * rng.sample::<f32, _>(StandardNormal))
}

fn gelu(v: f32) -> f32 {
    0.5 * v * (1.0 + (0.797_884_6 * (v + 0.044_715 * v * v * v)).tanh())
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Block {
    fn new(rng: &mut impl Rng, cfg: &ToyVitConfig) -> Self {
        let d = cfg.d_model;
        let sd = 1.0 / (d as f32).sqrt();
        let gain = cfg.block_gain;
        Self {
            ln1: LayerNorm::new(d),
            w_q: gaussian(rng, (d, d), sd),
            w_k: gaussian(rng, (d, d), sd),
            w_v: gaussian(rng, (d, d), sd),
            w_o: gaussian(rng, (d, d), gain * sd),
            b_o: gaussian1(rng, d, 0.02),
            ln2: LayerNorm::new(d),
            w_1: gaussian(rng, (d, cfg.d_mlp), sd),
            b_1: gaussian1(rng, cfg.d_mlp, 0.02),
            w_2: gaussian(rng, (cfg.d_mlp, d), gain / (cfg.d_mlp as f32).sqrt()),
            b_2: gaussian1(rng, d, 0.02),
        }
    }

    fn attention(&self, x: ArrayView2<'_, f32>, n_heads: usize) -> Array2<f32> {
        let h = self.ln1.apply(x);
        let q = h.dot(&self.w_q);
        let k = h.dot(&self.w_k);
        let v = h.dot(&self.w_v);
        let d = x.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Array2::zeros(x.raw_dim());
        for head in 0..n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        }
        heads.dot(&self.w_o) + &self.b_o
    }

    fn mlp(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let h = self.ln2.apply(x);
        let a = (h.dot(&self.w_1) + &self.b_1).mapv(gelu);
        a.dot(&self.w_2) + &self.b_2
    }

    /// Applies the block in place and returns the MLP output.
    fn apply(&self, x: &mut Array2<f32>, n_heads: usize) -> Array2<f32> {
        let attn = self.attention(x.view(), n_heads);
        *x += &attn;
        let mlp = self.mlp(x.view());
        *x += &mlp;
        mlp
    }
}

/// Per-layer activations captured during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream after each layer, `[n_tokens, d_model]`.
    pub resid_post: Vec<Array2<f32>>,
    /// MLP sublayer output of each layer.
    pub mlp_out: Vec<Array2<f32>>,
    /// Projected CLS output, `[d_out]`.
    pub embedding: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyVit {
    pub config: ToyVitConfig,
    patch_proj: Array2<f32>,
    patch_bias: Array1<f32>,
    cls: Array1<f32>,
    pos: Array2<f32>,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    /// `[d_model, d_out]`
    proj: Array2<f32>,
}

impl ToyVit {
    pub fn new(config: ToyVitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let pd = config.patch_dim();
        let patch_proj = gaussian(&mut rng, (pd, d), 1.0 / (pd as f32).sqrt());
        let patch_bias = gaussian1(&mut rng, d, 0.1);
        let cls = gaussian1(&mut rng, d, 1.0);
        let pos = gaussian(&mut rng, (config.n_tokens(), d), 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(&mut rng, &config))
            .collect();
        let proj = gaussian(&mut rng, (d, config.d_out), 1.0 / (d as f32).sqrt());
        Ok(Self {
            patch_proj,
            patch_bias,
            cls,
            pos,
            blocks,
            ln_post: LayerNorm::new(d),
            proj,
            config,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Splits an `[H, W, C]` image into row-major flattened patches.
    pub fn patchify(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        let c = &self.config;
        if image.dim() != c.image_shape() {
            return Err(Error::shape(format!(
                "image {:?} does not match model geometry {:?}",
                image.dim(),
                c.image_shape()
            )));
        }
        let p = c.patch_size;
        let mut out = Array2::zeros((c.grid_rows * c.grid_cols, c.patch_dim()));
        for r in 0..c.grid_rows {
            for col in 0..c.grid_cols {
                let patch = image.slice(s![r * p..(r + 1) * p, col * p..(col + 1) * p, ..]);
                let flat = Array1::from_iter(patch.iter().copied());
                out.row_mut(r * c.grid_cols + col).assign(&flat);
            }
        }
        Ok(out)
    }

    /// Residual stream entering layer 0.
    pub fn embed(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        let patches = self.patchify(image)?;
        let mut x = Array2::zeros((self.config.n_tokens(), self.config.d_model));
        x.row_mut(0).assign(&self.cls);
        x.slice_mut(s![1.., ..])
            .assign(&(patches.dot(&self.patch_proj) + &self.patch_bias));
        x += &self.pos;
        Ok(x)
    }

    pub fn forward(&self, image: &Array3<f32>) -> Result<ForwardTrace> {
        let mut x = self.embed(image)?;
        let mut resid_post = Vec::with_capacity(self.n_layers());
        let mut mlp_out = Vec::with_capacity(self.n_layers());
        for block in &self.blocks {
            mlp_out.push(block.apply(&mut x, self.config.n_heads));
            resid_post.push(x.clone());
        }
        let embedding = self.readout(x.view());
        Ok(ForwardTrace {
            resid_post,
            mlp_out,
            embedding,
        })
    }

    /// Resumes from the residual stream after `layer` and returns the embedding.
    pub fn forward_from_layer(&self, activations: ArrayView2<'_, f32>, layer: usize) -> Result<Array1<f32>> {
        if layer >= self.n_layers() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers()
            )));
        }
        let want = (self.config.n_tokens(), self.config.d_model);
        if activations.dim() != want {
            return Err(Error::shape(format!(
                "activations {:?}, expected {want:?}",
                activations.dim()
            )));
        }
        let mut x = activations.to_owned();
        for block in &self.blocks[layer + 1..] {
            block.apply(&mut x, self.config.n_heads);
        }
        Ok(self.readout(x.view()))
    }

    fn readout(&self, x: ArrayView2<'_, f32>) -> Array1<f32> {
        self.ln_post.apply_row(x.row(0)).dot(&self.proj)
    }

    /// Unit residual direction `u` whose readout `LN_post(u)·P` points along
    /// `target`; steering any token set with `s·u` for large `s` drives the
    /// embedding towards `target`.
    pub fn readout_direction(&self, target: ArrayView1<'_, f32>) -> Result<Array1<f32>> {
        let (d, d_out) = self.proj.dim();
        if target.len() != d_out {
            return Err(Error::shape(format!(
                "target width {} != d_out {d_out}",
                target.len()
            )));
        }
        // Minimum-norm y with Pᵀy = target and mean(y) = 0, so LN(y) ∝ y.
        let mut a = Array2::<f64>::zeros((d_out + 1, d));
        for i in 0..d {
            for j in 0..d_out {
                a[[j, i]] = self.proj[[i, j]] as f64;
            }
            a[[d_out, i]] = 1.0;
        }
        let mut rhs = Array1::<f64>::zeros(d_out + 1);
        for j in 0..d_out {
            rhs[j] = target[j] as f64;
        }
        let gram = a.dot(&a.t());
        let coef = solve_spd(gram, rhs)?;
        let y = a.t().dot(&coef);
        let norm = y.dot(&y).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("zero readout direction".into()));
        }
        Ok(y.mapv(|v| (v / norm) as f32))
    }
}

/// Solves `m·x = b` for a symmetric positive-definite `m` by Cholesky.
fn solve_spd(m: Array2<f64>, b: Array1<f64>) -> Result<Array1<f64>> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Degenerate("matrix not positive definite".into()));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (b[i] - s) / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
        x[i] = (y[i] - s) / l[[i, i]];
    }
    Ok(x)
}

/// Stacks per-image `[n_tokens, d_model]` activations into one tensor.
pub fn stack(acts: &[Array2<f32>]) -> Result<Array3<f32>> {
    let views: Vec<_> = acts.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyVit {
        ToyVit::new(ToyVitConfig {
            seed: 3,
            ..ToyVitConfig::default()
        })
        .unwrap()
    }

    fn image(seed: u64, m: &ToyVit) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(m.config.image_shape(), |_| rng.sample::<f32, _>(StandardNormal))
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = model();
        let img = image(1, &m);
        let a = m.forward(&img).unwrap();
        let b = m.forward(&img).unwrap();
        assert_eq!(a.resid_post, b.resid_post);
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.resid_post.len(), 4);
        assert_eq!(a.resid_post[2].dim(), (17, 64));
        assert_eq!(a.embedding.len(), 32);
    }

    #[test]
    fn zero_image_gives_finite_nonzero_activations() {
        let m = model();
        let t = m.forward(&Array3::zeros(m.config.image_shape())).unwrap();
        for r in &t.resid_post {
            assert!(r.iter().all(|v| v.is_finite()));
            assert!(r.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn splice_matches_direct_forward() {
        let m = model();
        let img = image(2, &m);
        let t = m.forward(&img).unwrap();
        for (l, acts) in t.resid_post.iter().enumerate() {
            let e = m.forward_from_layer(acts.view(), l).unwrap();
            for (a, b) in e.iter().zip(t.embedding.iter()) {
                assert!((a - b).abs() < 1e-5, "layer {l}: {a} vs {b}");
            }
        }
        assert!(m.forward_from_layer(t.resid_post[0].view(), 4).is_err());
        assert!(m.forward(&Array3::zeros((4, 4, 3))).is_err());
    }

    #[test]
    fn zero_splice_at_last_layer_is_fixed() {
        let m = model();
        let z = Array2::zeros((17, 64));
        let e = m.forward_from_layer(z.view(), 3).unwrap();
        let expected = m.ln_post.apply_row(z.row(0)).dot(&m.proj);
        assert_eq!(e, expected);
    }

    #[test]
    fn readout_direction_points_at_target() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Array1::from_shape_fn(32, |_| rng.sample::<f32, _>(StandardNormal));
        let u = m.readout_direction(target.view()).unwrap();
        assert!((u.dot(&u) - 1.0).abs() < 1e-5);
        let out = m.ln_post.apply_row(u.view()).dot(&m.proj);
        let cos = out.dot(&target) / (out.dot(&out).sqrt() * target.dot(&target).sqrt());
        assert!(cos > 0.9999, "cos {cos}");
    }
}
