//! Miniature text-conditioned video diffusion transformer.
//!
//! Videos are `F × H × W × C` tensors. They are cut into `pt × ps × ps`
//! patches, embedded linearly to width `c` and prefixed with prompt
//! concept tokens, giving the joint sequence `[text, visual]`. Each block
//! is a pre-LN self-attention + MLP block whose normalizations are
//! modulated by the timestep embedding. A block returns its residual
//! branch `f_dit`; the caller adds it to the stream.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_s: usize,
    /// Token width `c`.
    pub hidden: usize,
    /// Block depth `L`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Diffusion step count `T`.
    pub diffusion_steps: usize,
    pub t_dim: usize,
    /// Size of the concept-token table.
    pub vocab: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub positional_encoding: bool,
    /// Add a per-patch linear estimate of the noise in `x_t` to the
    /// prediction, so the network only supplies the residual. Without it
    /// the token width caps how much of the noise can pass through.
    pub output_skip: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            patch_t: 2,
            patch_s: 4,
            hidden: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 2,
            diffusion_steps: 100,
            t_dim: 64,
            vocab: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            positional_encoding: true,
            output_skip: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames % self.patch_t != 0
            || self.height % self.patch_s != 0
            || self.width % self.patch_s != 0
        {
            return bad(format!(
                "video {}x{}x{} not divisible by patch {}x{}x{}",
                self.frames, self.height, self.width, self.patch_t, self.patch_s, self.patch_s
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.depth == 0 || self.diffusion_steps == 0 || self.t_dim < 2 || self.vocab == 0 {
            return bad("depth, diffusion_steps, vocab must be positive and t_dim >= 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad(format!(
                "betas must satisfy 0 < beta_start < beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_s * self.patch_s * self.channels
    }

    pub fn num_visual_tokens(&self) -> usize {
        (self.frames / self.patch_t) * (self.height / self.patch_s) * (self.width / self.patch_s)
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

/// Linear beta schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "bad schedule: {steps} steps, betas {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule {
            betas,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alphas_cumprod[step]
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `x_t = sqrt(ā_t)·x0 + sqrt(1-ā_t)·eps`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, step: usize) -> Result<Tensor> {
        if step >= self.steps() {
            return Err(Error::Invalid(format!("step {step} outside [0, {})", self.steps())));
        }
        add_noise_with(self.alpha_bar(step), x0, eps)
    }

    /// The noise that carries `x0` to `x_t` at `step`.
    pub fn recover_noise(&self, x0: &Tensor, x_t: &Tensor, step: usize) -> Result<Tensor> {
        if x0.shape() != x_t.shape() {
            return Err(Error::shape("recover_noise", x0.shape(), x_t.shape()));
        }
        let ab = self.alpha_bar(step);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0.data().iter().zip(x_t.data()).map(|(x, y)| (y - a * x) / s).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }
}

pub fn add_noise_with(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("add_noise", x0.shape(), eps.shape()));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Sinusoidal embedding of a diffusion step: `sin(step·ω_i)` in the first
/// half, `cos(step·ω_i)` in the second, `ω_i = 10000^(-i/half)`.
pub fn embed_timestep(step: usize, steps: usize, t_dim: usize) -> Result<Tensor> {
    if step >= steps {
        return Err(Error::Invalid(format!("step {step} outside [0, {steps})")));
    }
    let half = t_dim / 2;
    let mut out = vec![0.0; t_dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(Tensor::row(out))
}

/// Rearrange a video into `n_v × patch_dim` rows ordered by (t, y, x)
/// patch position; within a patch the layout is (dt, dy, dx, channel).
pub fn patchify(video: &Tensor, pt: usize, ps: usize) -> Result<Tensor> {
    let [f, h, w, c] = video_dims(video)?;
    if pt == 0 || ps == 0 || f % pt != 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::shape("patchify", video.shape(), &[pt, ps, ps]));
    }
    let (nt, ny, nx) = (f / pt, h / ps, w / ps);
    let pd = pt * ps * ps * c;
    let src = video.data();
    let mut out = Vec::with_capacity(nt * ny * nx * pd);
    for bt in 0..nt {
        for by in 0..ny {
            for bx in 0..nx {
                for dt in 0..pt {
                    for dy in 0..ps {
                        let (fi, yi) = (bt * pt + dt, by * ps + dy);
                        let start = ((fi * h + yi) * w + bx * ps) * c;
                        out.extend_from_slice(&src[start..start + ps * c]);
                    }
                }
            }
        }
    }
    Tensor::matrix(nt * ny * nx, pd, out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, shape: [usize; 4], pt: usize, ps: usize) -> Result<Tensor> {
    let [f, h, w, c] = shape;
    let (nt, ny, nx) = (f / pt, h / ps, w / ps);
    let pd = pt * ps * ps * c;
    if tokens.dims2() != (nt * ny * nx, pd) || f % pt != 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::shape("unpatchify", tokens.shape(), &shape));
    }
    let src = tokens.data();
    let mut out = vec![0.0; f * h * w * c];
    let mut k = 0;
    for bt in 0..nt {
        for by in 0..ny {
            for bx in 0..nx {
                for dt in 0..pt {
                    for dy in 0..ps {
                        let (fi, yi) = (bt * pt + dt, by * ps + dy);
                        let start = ((fi * h + yi) * w + bx * ps) * c;
                        out[start..start + ps * c].copy_from_slice(&src[k..k + ps * c]);
                        k += ps * c;
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn video_dims(video: &Tensor) -> Result<[usize; 4]> {
    match video.shape() {
        &[f, h, w, c] => Ok([f, h, w, c]),
        other => Err(Error::InvalidTensor(format!(
            "expected a F×H×W×C video, got shape {other:?}"
        ))),
    }
}

/// Fixed sinusoidal (t, y, x) position code for every visual token.
fn positional_table(cfg: &BackboneConfig) -> Tensor {
    let (nt, ny, nx) = (
        cfg.frames / cfg.patch_t,
        cfg.height / cfg.patch_s,
        cfg.width / cfg.patch_s,
    );
    let c = cfg.hidden;
    let dt = (c / 4) & !1;
    let dy = ((c - dt) / 2) & !1;
    let fill = |out: &mut [f64], pos: usize| {
        let half = out.len() / 2;
        for i in 0..half {
            let freq = (-(100f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out[2 * i] = (pos as f64 * freq).sin();
            out[2 * i + 1] = (pos as f64 * freq).cos();
        }
    };
    let mut data = Vec::with_capacity(nt * ny * nx * c);
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                let mut row = vec![0.0; c];
                fill(&mut row[..dt], t);
                fill(&mut row[dt..dt + dy], y);
                fill(&mut row[dt + dy..], x);
                data.extend(row);
            }
        }
    }
    Tensor::matrix(nt * ny * nx, c, data).expect("positional table shape")
}

const PRIOR_MEAN: &str = "backbone.prior.mean";
const PRIOR_BASIS: &str = "backbone.prior.basis";
const PRIOR_VAR: &str = "backbone.prior.var";

/// Frozen backbone definition: configuration, schedule and fixed tables.
/// Parameters live in a [`ParamRegistry`] under the `backbone.` prefix.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    schedule: DiffusionSchedule,
    positions: Tensor,
}

/// Values threaded through every block of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    /// `SiLU` of the processed timestep embedding, `1 × c`.
    pub temb: Var,
    pub text_tokens: usize,
    pub step: usize,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = DiffusionSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        let positions = positional_table(&cfg);
        Ok(Backbone {
            cfg,
            schedule,
            positions,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn timestep_embedding(&self, step: usize) -> Result<Tensor> {
        embed_timestep(step, self.cfg.diffusion_steps, self.cfg.t_dim)
    }

    /// Insert freshly initialized backbone parameters into `reg`.
    pub fn init_params<R: Rng + ?Sized>(&self, reg: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        let c = self.cfg.hidden;
        let m = c * self.cfg.mlp_ratio;
        let pd = self.cfg.patch_dim();
        let td = self.cfg.t_dim;
        let mut add = |name: String, shape: [usize; 2], std: f64| -> Result<()> {
            let t = if std == 0.0 {
                Tensor::zeros(shape.to_vec())
            } else {
                Tensor::randn(shape.to_vec(), std, rng)
            };
            reg.insert(name, t, Tag::Backbone)
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        add("backbone.patch.w".into(), [pd, c], fan(pd))?;
        add("backbone.patch.b".into(), [1, c], 0.0)?;
        add("backbone.text.table".into(), [self.cfg.vocab, c], 1.0)?;
        add("backbone.time.w1".into(), [td, c], fan(td))?;
        add("backbone.time.b1".into(), [1, c], 0.0)?;
        add("backbone.time.w2".into(), [c, c], fan(c))?;
        add("backbone.time.b2".into(), [1, c], 0.0)?;
        let out_scale = 1.0 / (2.0 * self.cfg.depth as f64).sqrt();
        for i in 0..self.cfg.depth {
            let p = format!("backbone.block.{i}");
            add(format!("{p}.mod.w"), [c, 4 * c], 0.0)?;
            add(format!("{p}.mod.b"), [1, 4 * c], 0.0)?;
            add(format!("{p}.qkv.w"), [c, 3 * c], fan(c))?;
            add(format!("{p}.qkv.b"), [1, 3 * c], 0.0)?;
            add(format!("{p}.out.w"), [c, c], fan(c) * out_scale)?;
            add(format!("{p}.out.b"), [1, c], 0.0)?;
            add(format!("{p}.mlp.w1"), [c, m], fan(c))?;
            add(format!("{p}.mlp.b1"), [1, m], 0.0)?;
            add(format!("{p}.mlp.w2"), [m, c], fan(m) * out_scale)?;
            add(format!("{p}.mlp.b2"), [1, c], 0.0)?;
        }
        add("backbone.final.mod.w".into(), [c, 2 * c], 0.0)?;
        add("backbone.final.mod.b".into(), [1, 2 * c], 0.0)?;
        add("backbone.final.w".into(), [c, pd], 0.0)?;
        add("backbone.final.b".into(), [1, pd], 0.0)?;
        if self.cfg.output_skip {
            let eye = (0..pd * pd).map(|k| if k % (pd + 1) == 0 { 1.0 } else { 0.0 }).collect();
            reg.insert(PRIOR_MEAN, Tensor::zeros(vec![1, pd]), Tag::Buffer)?;
            reg.insert(PRIOR_BASIS, Tensor::matrix(pd, pd, eye)?, Tag::Buffer)?;
            reg.insert(PRIOR_VAR, Tensor::full(vec![1, pd], 1.0), Tag::Buffer)?;
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, reg: &ParamRegistry, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let wv = g.param(reg, &format!("{prefix}.{w}"))?;
        let bv = g.param(reg, &format!("{prefix}.{b}"))?;
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// Joint input sequence `[text; visual]` for a noisy video `x_t`.
    pub fn embed(&self, g: &mut Graph, reg: &ParamRegistry, x_t: &Tensor, prompt: &[usize]) -> Result<Var> {
        let patches = patchify(x_t, self.cfg.patch_t, self.cfg.patch_s)?;
        if patches.dims2().0 != self.cfg.num_visual_tokens() {
            return Err(Error::shape("embed", x_t.shape(), &self.cfg.video_shape()));
        }
        let p = g.constant(patches);
        let mut visual = self.linear(g, reg, p, "backbone.patch", "w", "b")?;
        if self.cfg.positional_encoding {
            let pos = g.constant(self.positions.clone());
            visual = g.add(visual, pos)?;
        }
        if prompt.is_empty() {
            return Ok(visual);
        }
        let table = g.param(reg, "backbone.text.table")?;
        let text = g.gather_rows(table, prompt)?;
        g.concat_rows(&[text, visual])
    }

    /// Processed timestep features shared by every block.
    pub fn step_context(&self, g: &mut Graph, reg: &ParamRegistry, step: usize, text_tokens: usize) -> Result<StepContext> {
        let t = g.constant(self.timestep_embedding(step)?);
        let h = self.linear(g, reg, t, "backbone.time", "w1", "b1")?;
        let h = g.silu(h);
        let h = self.linear(g, reg, h, "backbone.time", "w2", "b2")?;
        let temb = g.silu(h);
        Ok(StepContext { temb, text_tokens, step })
    }

    /// `LN(x)·(1 + scale) + shift` with row-broadcast modulation.
    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let s1 = g.add_scalar(scale, 1.0);
        let y = g.mul_row(n, s1)?;
        g.add_row(y, shift)
    }

    /// Residual branch `f_dit` of block `i`; the block output is `x + f_dit`.
    pub fn block(&self, g: &mut Graph, reg: &ParamRegistry, i: usize, x: Var, ctx: &StepContext) -> Result<Var> {
        if i >= self.cfg.depth {
            return Err(Error::Invalid(format!("block {i} outside depth {}", self.cfg.depth)));
        }
        let c = self.cfg.hidden;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let p = format!("backbone.block.{i}");
        let m = self.linear(g, reg, ctx.temb, &p, "mod.w", "mod.b")?;
        let shift1 = g.chunk_cols(m, 4, 0)?;
        let scale1 = g.chunk_cols(m, 4, 1)?;
        let shift2 = g.chunk_cols(m, 4, 2)?;
        let scale2 = g.chunk_cols(m, 4, 3)?;

        let h = Self::modulate(g, x, shift1, scale1)?;
        let qkv = self.linear(g, reg, h, &p, "qkv.w", "qkv.b")?;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for j in 0..heads {
            let q = g.slice_cols(qkv, j * dh, dh)?;
            let k = g.slice_cols(qkv, c + j * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * c + j * dh, dh)?;
            let s = g.matmul_t(q, k, false, true)?;
            let s = g.scale(s, inv);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn = self.linear(g, reg, cat, &p, "out.w", "out.b")?;

        let x2 = g.add(x, attn)?;
        let h2 = Self::modulate(g, x2, shift2, scale2)?;
        let h2 = self.linear(g, reg, h2, &p, "mlp.w1", "mlp.b1")?;
        let h2 = g.gelu(h2);
        let mlp = self.linear(g, reg, h2, &p, "mlp.w2", "mlp.b2")?;
        g.add(attn, mlp)
    }

    /// Noise prediction for the visual rows of the final stream, as a
    /// `n_v × patch_dim` matrix. `x_t` is the noisy input the stream was
    /// embedded from.
    pub fn head(&self, g: &mut Graph, reg: &ParamRegistry, x: Var, ctx: &StepContext, x_t: &Tensor) -> Result<Var> {
        let m = self.linear(g, reg, ctx.temb, "backbone.final", "mod.w", "mod.b")?;
        let shift = g.chunk_cols(m, 2, 0)?;
        let scale = g.chunk_cols(m, 2, 1)?;
        let h = Self::modulate(g, x, shift, scale)?;
        let visual = g.slice_rows(h, ctx.text_tokens, self.cfg.num_visual_tokens())?;
        let out = self.linear(g, reg, visual, "backbone.final", "w", "b")?;
        if !self.cfg.output_skip {
            return Ok(out);
        }
        let skip = self.linear_noise_estimate(g, reg, x_t, ctx.step)?;
        g.add(out, skip)
    }

    /// Best linear estimate of the noise in each patch of `x_t` under a
    /// Gaussian patch prior `N(mean, U diag(var) Uᵀ)`:
    /// `U diag(sqrt(1-ab) / (ab·var + 1-ab)) Uᵀ (p - sqrt(ab)·mean)`.
    /// The fresh prior (zero mean, unit variance) gives `sqrt(1-ab)·p`.
    fn linear_noise_estimate(&self, g: &mut Graph, reg: &ParamRegistry, x_t: &Tensor, step: usize) -> Result<Var> {
        let ab = self.schedule.alpha_bar(step);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut p = patchify(x_t, self.cfg.patch_t, self.cfg.patch_s)?;
        let pd = self.cfg.patch_dim();
        let mean = reg.get(PRIOR_MEAN)?.data();
        for row in p.data_mut().chunks_mut(pd) {
            for (v, m) in row.iter_mut().zip(mean) {
                *v -= sa * m;
            }
        }
        let gain: Vec<f64> = reg.get(PRIOR_VAR)?.data().iter().map(|v| sb / (ab * v + (1.0 - ab))).collect();
        let p = g.constant(p);
        let basis = g.constant(reg.get(PRIOR_BASIS)?.clone());
        let gain = g.constant(Tensor::row(gain));
        let coords = g.matmul(p, basis)?;
        let coords = g.mul_row(coords, gain)?;
        g.matmul_t(coords, basis, false, true)
    }

    /// Fit the patch prior used by the output skip to clips in model space.
    pub fn fit_prior(&self, reg: &mut ParamRegistry, clips: &[Tensor]) -> Result<()> {
        let pd = self.cfg.patch_dim();
        let mut rows = Vec::new();
        for clip in clips {
            let p = patchify(clip, self.cfg.patch_t, self.cfg.patch_s)?;
            rows.extend(p.data().chunks(pd).map(|r| DVector::from_column_slice(r)));
        }
        if rows.len() < 2 {
            return Err(Error::Invalid("fitting the patch prior needs at least two patches".into()));
        }
        let n = rows.len() as f64;
        let mean = rows.iter().fold(DVector::zeros(pd), |acc, r| acc + r) / n;
        let mut cov = DMatrix::zeros(pd, pd);
        for r in &rows {
            let c = r - &mean;
            cov.ger(1.0 / n, &c, &c, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let basis: Vec<f64> = (0..pd).flat_map(|i| (0..pd).map(move |j| (i, j))).map(|(i, j)| eig.eigenvectors[(i, j)]).collect();
        reg.set(PRIOR_MEAN, Tensor::row(mean.iter().copied().collect()))?;
        reg.set(PRIOR_BASIS, Tensor::matrix(pd, pd, basis)?)?;
        reg.set(PRIOR_VAR, Tensor::row(eig.eigenvalues.iter().map(|v| v.max(0.0)).collect()))
    }

    /// Backbone-only noise prediction.
    pub fn forward(&self, g: &mut Graph, reg: &ParamRegistry, x_t: &Tensor, prompt: &[usize], step: usize) -> Result<Var> {
        let ctx = self.step_context(g, reg, step, prompt.len())?;
        let mut x = self.embed(g, reg, x_t, prompt)?;
        for i in 0..self.cfg.depth {
            let f_dit = self.block(g, reg, i, x, &ctx)?;
            x = g.add(x, f_dit)?;
        }
        self.head(g, reg, x, &ctx, x_t)
    }

    /// Reshape a `n_v × patch_dim` prediction back into video layout.
    pub fn to_video(&self, tokens: &Tensor) -> Result<Tensor> {
        unpatchify(tokens, self.cfg.video_shape(), self.cfg.patch_t, self.cfg.patch_s)
    }
}

/// Map pixel values in `[0, 1]` to the model's `[-1, 1]` space.
pub fn to_model_space(video: &Tensor) -> Tensor {
    let data = video.data().iter().map(|v| 2.0 * v - 1.0).collect();
    Tensor::new(video.shape().to_vec(), data).expect("same shape")
}

/// Map model-space values back to pixels, clamped to `[0, 1]`.
pub fn to_pixel_space(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
