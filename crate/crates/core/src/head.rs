//! The trainable OoD head: stacked Conv-BN-ReLU blocks and a 2-channel
//! projection, with hand-written forward and backward passes.
//!
//! Activations are held channel-major as `[C, B, H, W]`, so a single image is
//! the `B = 1` case of a batch and the data of a `[D, H, W]` feature tensor can
//! be used as-is. Gradients with respect to the input features are never
//! formed: the feature extractor is frozen.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::linalg::{gemm, gemm_a_bt, gemm_at_b};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub use_batchnorm: bool,
    /// Weight of the old running statistic in each update.
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            blocks: 3,
            hidden: 32,
            kernel_size: 1,
            use_batchnorm: true,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if self.hidden < 2 {
            return Err(Error::Config("hidden must be >= 2".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("bn_momentum in [0,1), bn_epsilon > 0".into()));
        }
        Ok(())
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut total = 0;
        let mut c_in = self.feature_dim;
        for _ in 0..self.blocks {
            total += self.hidden * c_in * k2 + self.hidden;
            if self.use_batchnorm {
                total += 2 * self.hidden;
            }
            c_in = self.hidden;
        }
        total + 2 * self.hidden + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    config: HeadConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[2, hidden]`
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub scale: Option<Tensor>,
    pub shift: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub blocks: Vec<BlockGrads>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

impl HeadGrads {
    /// Gradient slices in the same order as [`HeadParams::learnable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weight.data());
            out.push(b.bias.data());
            if let (Some(s), Some(t)) = (&b.scale, &b.shift) {
                out.push(s.data());
                out.push(t.data());
            }
        }
        out.push(self.proj_weight.data());
        out.push(self.proj_bias.data());
        out
    }

    pub fn scale(&mut self, factor: f64) {
        let scale = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v *= factor);
        for b in &mut self.blocks {
            scale(&mut b.weight);
            scale(&mut b.bias);
            if let Some(s) = &mut b.scale {
                scale(s);
            }
            if let Some(s) = &mut b.shift {
                scale(s);
            }
        }
        scale(&mut self.proj_weight);
        scale(&mut self.proj_bias);
    }
}

/// Batch statistics of one train-mode forward pass, per BN block.
#[derive(Debug, Clone)]
pub struct BatchStats {
    means: Vec<Vec<f64>>,
    unbiased_vars: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct Cache {
    batch: usize,
    height: usize,
    width: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the post-ReLU output of block `l`.
    acts: Vec<Vec<f64>>,
    /// Normalized pre-activations per block (empty without batchnorm).
    normalized: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    parameter_count: usize,
}

impl Cache {
    /// Post-ReLU activations of block `l`, `[hidden, B, H, W]` flattened.
    pub fn block_output(&self, l: usize) -> &[f64] {
        &self.acts[l + 1]
    }

    /// Batchnorm output (before ReLU) of block `l`, recomputed from the cache.
    pub fn bn_output(&self, params: &HeadParams, l: usize) -> Vec<f64> {
        let n = self.batch * self.height * self.width;
        let bn = params.blocks[l].bn.as_ref().expect("block has batchnorm");
        let mut out = self.normalized[l].clone();
        for (c, row) in out.chunks_mut(n).enumerate() {
            let (g, b) = (bn.scale.data()[c], bn.shift.data()[c]);
            row.iter_mut().for_each(|v| *v = g * *v + b);
        }
        out
    }
}

/// Zero-padded "same" patch matrix `[C * k * k, B * H * W]`.
fn im2col(input: &[f64], channels: usize, batch: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let p = h * w;
    let n = batch * p;
    let mut cols = vec![0.0; channels * k * k * n];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for b in 0..batch {
                    let src = &input[c * n + b * p..][..p];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                row[b * p + y * w + x] = src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], channels: usize, batch: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let p = h * w;
    let n = batch * p;
    let mut out = vec![0.0; channels * n];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for b in 0..batch {
                    let dst = &mut out[c * n + b * p..][..p];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                dst[sy as usize * w + sx as usize] += row[b * p + y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Layout {
    batch: usize,
    height: usize,
    width: usize,
}

impl Layout {
    fn n(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn output_shape(&self, rank: usize, channels: usize) -> Vec<usize> {
        if rank == 3 {
            vec![channels, self.height, self.width]
        } else {
            vec![channels, self.batch, self.height, self.width]
        }
    }
}

impl HeadParams {
    /// Deterministic He-style initialization: `N(0, 2 / fan_in)` weights,
    /// zero biases, identity batchnorm.
    pub fn init(config: &HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut normal = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut c_in = config.feature_dim;
        for _ in 0..config.blocks {
            let fan_in = c_in * k * k;
            let weight = Tensor::new(
                vec![config.hidden, c_in, k, k],
                normal(config.hidden * fan_in, fan_in),
            )?;
            let bn = config.use_batchnorm.then(|| BatchNorm {
                scale: Tensor::filled(vec![config.hidden], 1.0),
                shift: Tensor::zeros(vec![config.hidden]),
                running_mean: Tensor::zeros(vec![config.hidden]),
                running_var: Tensor::filled(vec![config.hidden], 1.0),
            });
            blocks.push(ConvBlock {
                weight,
                bias: Tensor::zeros(vec![config.hidden]),
                bn,
            });
            c_in = config.hidden;
        }
        let proj_weight = Tensor::new(vec![2, config.hidden], normal(2 * config.hidden, config.hidden))?;
        Ok(Self {
            config: config.clone(),
            blocks,
            proj_weight,
            proj_bias: Tensor::zeros(vec![2]),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Learnable parameter slices in a fixed order shared with [`HeadGrads::slices`].
    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(b.weight.data_mut());
            out.push(b.bias.data_mut());
            if let Some(bn) = &mut b.bn {
                out.push(bn.scale.data_mut());
                out.push(bn.shift.data_mut());
            }
        }
        out.push(self.proj_weight.data_mut());
        out.push(self.proj_bias.data_mut());
        out
    }

    pub fn learnable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weight.data());
            out.push(b.bias.data());
            if let Some(bn) = &b.bn {
                out.push(bn.scale.data());
                out.push(bn.shift.data());
            }
        }
        out.push(self.proj_weight.data());
        out.push(self.proj_bias.data());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|s| s.len()).sum()
    }

    fn layout(&self, features: &Tensor) -> Result<Layout> {
        let s = features.shape();
        let layout = match s.len() {
            3 => Layout {
                batch: 1,
                height: s[1],
                width: s[2],
            },
            4 => Layout {
                batch: s[1],
                height: s[2],
                width: s[3],
            },
            _ => {
                return Err(Error::Shape(format!(
                    "head expects [D,H,W] or [D,B,H,W], got {s:?}"
                )))
            }
        };
        if s[0] != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {} != configured {}",
                s[0], self.config.feature_dim
            )));
        }
        Ok(layout)
    }

    fn conv(&self, l: usize, input: &[f64], c_in: usize, layout: &Layout) -> Vec<f64> {
        let block = &self.blocks[l];
        let k = self.config.kernel_size;
        let n = layout.n();
        let c_out = self.config.hidden;
        let mut z = vec![0.0; c_out * n];
        for (c, row) in z.chunks_mut(n).enumerate() {
            row.fill(block.bias.data()[c]);
        }
        if k == 1 {
            gemm(c_out, c_in, n, block.weight.data(), input, 1.0, &mut z);
        } else {
            let cols = im2col(input, c_in, layout.batch, layout.height, layout.width, k);
            gemm(c_out, c_in * k * k, n, block.weight.data(), &cols, 1.0, &mut z);
        }
        z
    }

    fn project(&self, act: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; 2 * n];
        for (c, row) in out.chunks_mut(n).enumerate() {
            row.fill(self.proj_bias.data()[c]);
        }
        gemm(2, self.config.hidden, n, self.proj_weight.data(), act, 1.0, &mut out);
        out
    }

    /// Inference forward pass using running statistics; pure.
    pub fn forward_eval(&self, features: &Tensor) -> Result<Tensor> {
        let layout = self.layout(features)?;
        let n = layout.n();
        let mut act = features.data().to_vec();
        let mut c_in = self.config.feature_dim;
        for l in 0..self.blocks.len() {
            let mut z = self.conv(l, &act, c_in, &layout);
            if let Some(bn) = &self.blocks[l].bn {
                for (c, row) in z.chunks_mut(n).enumerate() {
                    let inv = 1.0 / (bn.running_var.data()[c] + self.config.bn_epsilon).sqrt();
                    let (g, b, m) = (bn.scale.data()[c], bn.shift.data()[c], bn.running_mean.data()[c]);
                    row.iter_mut().for_each(|v| *v = g * (*v - m) * inv + b);
                }
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            act = z;
            c_in = self.config.hidden;
        }
        Tensor::new(
            layout.output_shape(features.rank(), 2),
            self.project(&act, n),
        )
    }

    /// Train-mode forward using batch statistics. Does not touch the running
    /// statistics; see [`HeadParams::forward_train`].
    pub fn forward_batch(&self, features: &Tensor) -> Result<(Tensor, Cache, BatchStats)> {
        let layout = self.layout(features)?;
        let n = layout.n();
        let mut acts = vec![features.data().to_vec()];
        let mut normalized = Vec::new();
        let mut inv_stds = Vec::new();
        let mut stats = BatchStats {
            means: Vec::new(),
            unbiased_vars: Vec::new(),
        };
        let mut c_in = self.config.feature_dim;
        for l in 0..self.blocks.len() {
            let mut z = self.conv(l, acts.last().unwrap(), c_in, &layout);
            if let Some(bn) = &self.blocks[l].bn {
                let mut means = Vec::with_capacity(self.config.hidden);
                let mut vars = Vec::with_capacity(self.config.hidden);
                let mut inv_std = Vec::with_capacity(self.config.hidden);
                for row in z.chunks_mut(n) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + self.config.bn_epsilon).sqrt();
                    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                    means.push(mean);
                    vars.push(if n > 1 { var * n as f64 / (n - 1) as f64 } else { var });
                    inv_std.push(inv);
                }
                let xhat = z.clone();
                for (c, row) in z.chunks_mut(n).enumerate() {
                    let (g, b) = (bn.scale.data()[c], bn.shift.data()[c]);
                    row.iter_mut().for_each(|v| *v = (g * *v + b).max(0.0));
                }
                normalized.push(xhat);
                inv_stds.push(inv_std);
                stats.means.push(means);
                stats.unbiased_vars.push(vars);
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                normalized.push(Vec::new());
                inv_stds.push(Vec::new());
            }
            acts.push(z);
            c_in = self.config.hidden;
        }
        let logits = Tensor::new(
            layout.output_shape(features.rank(), 2),
            self.project(acts.last().unwrap(), n),
        )?;
        let cache = Cache {
            batch: layout.batch,
            height: layout.height,
            width: layout.width,
            acts,
            normalized,
            inv_std: inv_stds,
            parameter_count: self.parameter_count(),
        };
        Ok((logits, cache, stats))
    }

    /// Train-mode forward: batch statistics, then a running-statistics update.
    pub fn forward_train(&mut self, features: &Tensor) -> Result<(Tensor, Cache)> {
        let (logits, cache, stats) = self.forward_batch(features)?;
        self.update_running_stats(&stats);
        Ok((logits, cache))
    }

    pub fn forward(&mut self, features: &Tensor, mode: Mode) -> Result<(Tensor, Option<Cache>)> {
        match mode {
            Mode::Train => self.forward_train(features).map(|(l, c)| (l, Some(c))),
            Mode::Eval => self.forward_eval(features).map(|l| (l, None)),
        }
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        let bns = self.blocks.iter_mut().filter_map(|b| b.bn.as_mut());
        for ((bn, means), vars) in bns.zip(&stats.means).zip(&stats.unbiased_vars) {
            for (r, &v) in bn.running_mean.data_mut().iter_mut().zip(means) {
                *r = m * *r + (1.0 - m) * v;
            }
            for (r, &v) in bn.running_var.data_mut().iter_mut().zip(vars) {
                *r = m * *r + (1.0 - m) * v;
            }
        }
    }

    /// Parameter gradients of `sum(grad_logits * logits)` for the forward that
    /// produced `cache`.
    pub fn backward(&self, cache: &Cache, grad_logits: &Tensor) -> Result<HeadGrads> {
        let n = cache.batch * cache.height * cache.width;
        if cache.parameter_count != self.parameter_count() || cache.acts.len() != self.blocks.len() + 1 {
            return Err(Error::Shape("cache was produced by a different head".into()));
        }
        if grad_logits.len() != 2 * n || grad_logits.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "grad logits {:?} vs {n} pixels",
                grad_logits.shape()
            )));
        }
        let hidden = self.config.hidden;
        let k = self.config.kernel_size;
        let g = grad_logits.data();

        let last = cache.acts.last().unwrap();
        let mut proj_weight = vec![0.0; 2 * hidden];
        gemm_a_bt(2, n, hidden, g, last, &mut proj_weight);
        let proj_bias: Vec<f64> = g.chunks(n).map(|r| r.iter().sum()).collect();
        let mut d_act = vec![0.0; hidden * n];
        gemm_at_b(hidden, 2, n, self.proj_weight.data(), g, &mut d_act);

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for l in (0..self.blocks.len()).rev() {
            let block = &self.blocks[l];
            let out = &cache.acts[l + 1];
            // ReLU gate
            for (d, &a) in d_act.iter_mut().zip(out) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let (d_z, scale, shift) = match &block.bn {
                Some(bn) => {
                    let xhat = &cache.normalized[l];
                    let mut d_scale = vec![0.0; hidden];
                    let mut d_shift = vec![0.0; hidden];
                    let mut d_z = d_act;
                    for c in 0..hidden {
                        let dy = &mut d_z[c * n..][..n];
                        let xh = &xhat[c * n..][..n];
                        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
                        for (&d, &x) in dy.iter().zip(xh) {
                            sum_dy += d;
                            sum_dy_xh += d * x;
                        }
                        d_scale[c] = sum_dy_xh;
                        d_shift[c] = sum_dy;
                        let gamma = bn.scale.data()[c];
                        let coef = gamma * cache.inv_std[l][c] / n as f64;
                        let nf = n as f64;
                        for (d, &x) in dy.iter_mut().zip(xh) {
                            *d = coef * (nf * *d - sum_dy - x * sum_dy_xh);
                        }
                    }
                    (
                        d_z,
                        Some(Tensor::new(vec![hidden], d_scale)?),
                        Some(Tensor::new(vec![hidden], d_shift)?),
                    )
                }
                None => (d_act, None, None),
            };
            let c_in = block.weight.shape()[1];
            let input = &cache.acts[l];
            let mut d_w = vec![0.0; hidden * c_in * k * k];
            let cols_storage;
            let cols: &[f64] = if k == 1 {
                input
            } else {
                cols_storage = im2col(input, c_in, cache.batch, cache.height, cache.width, k);
                &cols_storage
            };
            gemm_a_bt(hidden, n, c_in * k * k, &d_z, cols, &mut d_w);
            let d_b: Vec<f64> = d_z.chunks(n).map(|r| r.iter().sum()).collect();
            d_act = if l > 0 {
                let mut d_cols = vec![0.0; c_in * k * k * n];
                gemm_at_b(c_in * k * k, hidden, n, block.weight.data(), &d_z, &mut d_cols);
                if k == 1 {
                    d_cols
                } else {
                    col2im(&d_cols, c_in, cache.batch, cache.height, cache.width, k)
                }
            } else {
                Vec::new()
            };
            block_grads.push(BlockGrads {
                weight: Tensor::new(block.weight.shape().to_vec(), d_w)?,
                bias: Tensor::new(vec![hidden], d_b)?,
                scale,
                shift,
            });
        }
        block_grads.reverse();
        Ok(HeadGrads {
            blocks: block_grads,
            proj_weight: Tensor::new(vec![2, hidden], proj_weight)?,
            proj_bias: Tensor::new(vec![2], proj_bias)?,
        })
    }

    /// Writes the checkpoint directory: `manifest.txt` plus one TNSR file per tensor.
    pub fn save(&self, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut manifest = format!(
            "feature_dim = {}\nblocks = {}\nhidden = {}\nkernel_size = {}\nuse_batchnorm = {}\nbn_momentum = {}\nbn_epsilon = {}\n",
            c.feature_dim, c.blocks, c.hidden, c.kernel_size, c.use_batchnorm, c.bn_momentum, c.bn_epsilon
        );
        for (k, v) in extra {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for (name, t) in self.named_tensors() {
            write_tensor(dir.join(format!("{name}.tnsr")), t)?;
        }
        Ok(())
    }

    /// Loads a checkpoint; returns the parameters and every manifest entry.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let manifest = read_manifest(&dir.join("manifest.txt"))?;
        let field = |k: &str| -> Result<&String> {
            manifest
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")))
        };
        let parse_err = |k: &str| Error::Checkpoint(format!("bad value for {k}"));
        let config = HeadConfig {
            feature_dim: field("feature_dim")?.parse().map_err(|_| parse_err("feature_dim"))?,
            blocks: field("blocks")?.parse().map_err(|_| parse_err("blocks"))?,
            hidden: field("hidden")?.parse().map_err(|_| parse_err("hidden"))?,
            kernel_size: field("kernel_size")?.parse().map_err(|_| parse_err("kernel_size"))?,
            use_batchnorm: field("use_batchnorm")?.parse().map_err(|_| parse_err("use_batchnorm"))?,
            bn_momentum: field("bn_momentum")?.parse().map_err(|_| parse_err("bn_momentum"))?,
            bn_epsilon: field("bn_epsilon")?.parse().map_err(|_| parse_err("bn_epsilon"))?,
        };
        let mut params = HeadParams::init(&config, 0)?;
        for (name, t) in params.named_tensors_mut() {
            let loaded = read_tensor(dir.join(format!("{name}.tnsr")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok((params, manifest))
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bias"), &b.bias));
            if let Some(bn) = &b.bn {
                out.push((format!("block{i}.bn_scale"), &bn.scale));
                out.push((format!("block{i}.bn_shift"), &bn.shift));
                out.push((format!("block{i}.bn_running_mean"), &bn.running_mean));
                out.push((format!("block{i}.bn_running_var"), &bn.running_var));
            }
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.weight"), &mut b.weight));
            out.push((format!("block{i}.bias"), &mut b.bias));
            if let Some(bn) = &mut b.bn {
                out.push((format!("block{i}.bn_scale"), &mut bn.scale));
                out.push((format!("block{i}.bn_shift"), &mut bn.shift));
                out.push((format!("block{i}.bn_running_mean"), &mut bn.running_mean));
                out.push((format!("block{i}.bn_running_var"), &mut bn.running_var));
            }
        }
        out.push(("proj.weight".into(), &mut self.proj_weight));
        out.push(("proj.bias".into(), &mut self.proj_bias));
        out
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
