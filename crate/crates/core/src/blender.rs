//! Stage-aware blend controller.
//!
//! Once per denoising (or training) step the controller maps the first
//! block's input sequence and the timestep embedding to `n` blend weights,
//! one per contiguous group of blocks:
//!
//! ```text
//! f'  = mean_tokens(f_in) · W                      pool_project
//! h   = SiLU(t) · W_gate + b_gate ;  α, β, γ = h   gate chunks
//! f'' = MLP(LN(f')) ⊙ α + β                        adaln_modulate
//! f_g = f'' + γ ⊙ f'                               gate_fuse
//! ω   = pair_softmax(Γ · MLP(f_g))                  group_weights
//! ```
//!
//! The logits head emits a (motion, identity) logit for every block; `Γ`
//! averages them within each group and a two-way softmax per group yields
//! the motion share `ω^(k)`. The chunk width of `h` is `t_dim`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Number of weight groups `n`.
    pub groups: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { groups: 4 }
    }
}

/// Smallest blend weight the controller emits; the largest is one minus it.
pub const OMEGA_FLOOR: f64 = 1.0 / (1u64 << 30) as f64;

/// Contiguous, ordered block-to-group assignment; group sizes differ by at
/// most one.
pub fn partition(depth: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || groups > depth {
        return Err(Error::Config(format!(
            "group count {groups} must be in 1..={depth} (block depth)"
        )));
    }
    Ok((0..depth).map(|b| b * groups / depth).collect())
}

/// Per-step controller output.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendSchedule {
    /// Motion share `ω^(k)` of each group.
    pub weights: Vec<f64>,
    /// Group index of each block.
    pub partition: Vec<usize>,
}

impl BlendSchedule {
    /// Every group at the same fixed weight.
    pub fn uniform(depth: usize, groups: usize, omega: f64) -> Result<Self> {
        Ok(BlendSchedule {
            weights: vec![omega; groups],
            partition: partition(depth, groups)?,
        })
    }

    pub fn weight_for_block(&self, block: usize) -> f64 {
        self.weights[self.partition[block]]
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }
}

/// Graph-side controller output: the `n × 1` weight node plus its values.
#[derive(Clone, Debug)]
pub struct BlendOutput {
    pub omega: Var,
    pub schedule: BlendSchedule,
}

#[derive(Clone, Debug)]
pub struct StageBlender {
    groups: usize,
    depth: usize,
    hidden: usize,
    t_dim: usize,
    gamma: Tensor,
}

impl StageBlender {
    pub fn new(cfg: &ControllerConfig, depth: usize, hidden: usize, t_dim: usize) -> Result<Self> {
        let part = partition(depth, cfg.groups)?;
        let mut sizes = vec![0usize; cfg.groups];
        for &k in &part {
            sizes[k] += 1;
        }
        let mut gamma = vec![0.0; cfg.groups * depth];
        for (b, &k) in part.iter().enumerate() {
            gamma[k * depth + b] = 1.0 / sizes[k] as f64;
        }
        Ok(StageBlender {
            groups: cfg.groups,
            depth,
            hidden,
            t_dim,
            gamma: Tensor::matrix(cfg.groups, depth, gamma)?,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// The fixed `n × L` group-averaging operator `Γ`.
    pub fn projection(&self) -> &Tensor {
        &self.gamma
    }

    /// Insert controller parameters. The gate producer and every bias start
    /// at zero, which makes the initial schedule exactly 0.5 everywhere.
    pub fn init_params<R: Rng + ?Sized>(&self, reg: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        let (c, td, l) = (self.hidden, self.t_dim, self.depth);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut add = |name: &str, shape: [usize; 2], std: f64| -> Result<()> {
            let t = if std == 0.0 {
                Tensor::zeros(shape.to_vec())
            } else {
                Tensor::randn(shape.to_vec(), std, rng)
            };
            reg.insert(name, t, Tag::Controller)
        };
        add("controller.pool.w", [c, td], fan(c))?;
        add("controller.ada.w1", [td, td], fan(td))?;
        add("controller.ada.b1", [1, td], 0.0)?;
        add("controller.ada.w2", [td, td], fan(td))?;
        add("controller.ada.b2", [1, td], 0.0)?;
        add("controller.gate.w", [td, 3 * td], 0.0)?;
        add("controller.gate.b", [1, 3 * td], 0.0)?;
        add("controller.logits.w1", [td, td], fan(td))?;
        add("controller.logits.b1", [1, td], 0.0)?;
        add("controller.logits.w2", [td, 2 * l], fan(td))?;
        add("controller.logits.b2", [1, 2 * l], 0.0)?;
        Ok(())
    }

    fn mlp(g: &mut Graph, reg: &ParamRegistry, x: Var, prefix: &str) -> Result<Var> {
        let w1 = g.param(reg, &format!("{prefix}.w1"))?;
        let b1 = g.param(reg, &format!("{prefix}.b1"))?;
        let w2 = g.param(reg, &format!("{prefix}.w2"))?;
        let b2 = g.param(reg, &format!("{prefix}.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    /// `f' = mean over tokens of f_in, times W`.
    pub fn pool_project(&self, g: &mut Graph, reg: &ParamRegistry, f_in: Var) -> Result<Var> {
        let pooled = g.mean_axis(f_in, 0)?;
        let w = g.param(reg, "controller.pool.w")?;
        g.matmul(pooled, w)
    }

    /// `(α, β, γ)` from `h = SiLU(t)·W_gate + b_gate`.
    pub fn gate_chunks(&self, g: &mut Graph, reg: &ParamRegistry, t: Var) -> Result<(Var, Var, Var)> {
        let s = g.silu(t);
        let w = g.param(reg, "controller.gate.w")?;
        let b = g.param(reg, "controller.gate.b")?;
        let h = g.matmul(s, w)?;
        let h = g.add_row(h, b)?;
        Ok((g.chunk_cols(h, 3, 0)?, g.chunk_cols(h, 3, 1)?, g.chunk_cols(h, 3, 2)?))
    }

    /// `f'' = MLP(LN(f')) ⊙ α + β`.
    pub fn adaln_modulate(&self, g: &mut Graph, reg: &ParamRegistry, f_prime: Var, alpha: Var, beta: Var) -> Result<Var> {
        let n = g.layer_norm(f_prime)?;
        let m = Self::mlp(g, reg, n, "controller.ada")?;
        let y = g.mul(m, alpha)?;
        g.add(y, beta)
    }

    /// `f_g = f'' + γ ⊙ f'`.
    pub fn gate_fuse(g: &mut Graph, f_dprime: Var, f_prime: Var, gamma: Var) -> Result<Var> {
        let gf = g.mul(gamma, f_prime)?;
        g.add(f_dprime, gf)
    }

    /// Per-group motion shares from the fused feature.
    pub fn group_weights(&self, g: &mut Graph, reg: &ParamRegistry, f_g: Var) -> Result<BlendOutput> {
        let logits = Self::mlp(g, reg, f_g, "controller.logits")?;
        self.weights_from_logits(g, logits)
    }

    /// `ω = pair_softmax(Γ·logits)`, squeezed into `[ε, 1-ε]`, for a `1 × 2L` logit row laid out as
    /// `[motion_0..motion_{L-1}, identity_0..identity_{L-1}]`.
    pub fn weights_from_logits(&self, g: &mut Graph, logits: Var) -> Result<BlendOutput> {
        if g.shape(logits) != (1, 2 * self.depth) {
            return Err(Error::shape("group_weights", &[g.shape(logits).0, g.shape(logits).1], &[1, 2 * self.depth]));
        }
        let proj = g.constant(self.gamma.clone());
        let lm = g.slice_cols(logits, 0, self.depth)?;
        let li = g.slice_cols(logits, self.depth, self.depth)?;
        let gm = g.matmul_t(proj, lm, false, true)?;
        let gi = g.matmul_t(proj, li, false, true)?;
        let pair = g.concat_cols(&[gm, gi])?;
        let sm = g.softmax(pair, 1)?;
        let share = g.slice_cols(sm, 0, 1)?;
        // A saturated softmax rounds to exactly 0 or 1; the affine squeeze
        // keeps ω strictly inside (0, 1) and maps 0.5 to itself exactly.
        let squeezed = g.scale(share, 1.0 - 2.0 * OMEGA_FLOOR);
        let omega = g.add_scalar(squeezed, OMEGA_FLOOR);
        let weights = g.value(omega).data().to_vec();
        Ok(BlendOutput {
            omega,
            schedule: BlendSchedule {
                weights,
                partition: partition(self.depth, self.groups)?,
            },
        })
    }

    /// Full controller pass for one step: pool, modulate, fuse, group.
    /// `t` is the `1 × t_dim` timestep embedding node.
    pub fn controller_step(&self, g: &mut Graph, reg: &ParamRegistry, f_in_first: Var, t: Var) -> Result<BlendOutput> {
        let f_prime = self.pool_project(g, reg, f_in_first)?;
        let (alpha, beta, gamma) = self.gate_chunks(g, reg, t)?;
        let f_dprime = self.adaln_modulate(g, reg, f_prime, alpha, beta)?;
        let f_g = Self::gate_fuse(g, f_dprime, f_prime, gamma)?;
        self.group_weights(g, reg, f_g)
    }
}
