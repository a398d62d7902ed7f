//! Identity and motion bottleneck adapters (the DA-Block branches).
//!
//! Every backbone block `i` carries an identity adapter
//! `f_id = f_in + GELU(f_in·W_down + b)·W_up + b'` and a motion adapter
//! that first injects the reference embedding,
//! `f_cond = f_in + r·W_cond` (broadcast over tokens), and then applies
//! its own bottleneck, `f_mo = f_cond + GELU(f_cond·W'_down + b)·W'_up + b'`.
//! Up-projections and `W_cond` start at exactly zero, so freshly attached
//! adapters leave the backbone untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Bottleneck width `d`.
    pub bottleneck: usize,
    /// Reference embedding width `e`.
    pub cond_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            bottleneck: 16,
            cond_dim: 32,
        }
    }
}

/// Which of the two adapters a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Identity,
    Motion,
}

impl Branch {
    fn prefix(self, block: usize) -> String {
        match self {
            Branch::Identity => format!("adapter.{block}.id"),
            Branch::Motion => format!("adapter.{block}.mo"),
        }
    }

    pub fn tag(self) -> Tag {
        match self {
            Branch::Identity => Tag::Identity,
            Branch::Motion => Tag::Motion,
        }
    }
}

pub const COND_WEIGHT: &str = "adapter.cond.w";

/// Adapter parameters for `depth` blocks of width `hidden`.
#[derive(Clone, Debug)]
pub struct AdapterBank {
    cfg: AdapterConfig,
    depth: usize,
    hidden: usize,
}

impl AdapterBank {
    pub fn new(cfg: AdapterConfig, depth: usize, hidden: usize) -> Result<Self> {
        if cfg.bottleneck == 0 || cfg.cond_dim == 0 {
            return Err(Error::Config("adapter bottleneck and cond_dim must be positive".into()));
        }
        Ok(AdapterBank { cfg, depth, hidden })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Insert adapter parameters: random down-projections, zero biases,
    /// zero up-projections and a zero condition map.
    pub fn init_params<R: Rng + ?Sized>(&self, reg: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        let (c, d) = (self.hidden, self.cfg.bottleneck);
        let std = 1.0 / (c as f64).sqrt();
        for i in 0..self.depth {
            for branch in [Branch::Identity, Branch::Motion] {
                let p = branch.prefix(i);
                let tag = branch.tag();
                reg.insert(format!("{p}.down.w"), Tensor::randn(vec![c, d], std, rng), tag)?;
                reg.insert(format!("{p}.down.b"), Tensor::zeros(vec![1, d]), tag)?;
                reg.insert(format!("{p}.up.w"), Tensor::zeros(vec![d, c]), tag)?;
                reg.insert(format!("{p}.up.b"), Tensor::zeros(vec![1, c]), tag)?;
            }
        }
        reg.insert(COND_WEIGHT, Tensor::zeros(vec![self.cfg.cond_dim, c]), Tag::Motion)?;
        Ok(())
    }

    fn bottleneck(&self, g: &mut Graph, reg: &ParamRegistry, branch: Branch, i: usize, x: Var) -> Result<Var> {
        if i >= self.depth {
            return Err(Error::Invalid(format!("adapter {i} outside depth {}", self.depth)));
        }
        let p = branch.prefix(i);
        let wd = g.param(reg, &format!("{p}.down.w"))?;
        let bd = g.param(reg, &format!("{p}.down.b"))?;
        let wu = g.param(reg, &format!("{p}.up.w"))?;
        let bu = g.param(reg, &format!("{p}.up.b"))?;
        let h = g.matmul(x, wd)?;
        let h = g.add_row(h, bd)?;
        let h = g.gelu(h);
        let h = g.matmul(h, wu)?;
        g.add_row(h, bu)
    }

    /// `r·W_cond`, a `1 × c` row. `r` must be a `1 × e` node.
    pub fn condition(&self, g: &mut Graph, reg: &ParamRegistry, r: Var) -> Result<Var> {
        let w = g.param(reg, COND_WEIGHT)?;
        g.matmul(r, w)
    }

    /// Change the identity adapter applies to `f_in`: `f_id - f_in`.
    pub fn identity_delta(&self, g: &mut Graph, reg: &ParamRegistry, i: usize, f_in: Var) -> Result<Var> {
        self.bottleneck(g, reg, Branch::Identity, i, f_in)
    }

    /// Change the motion adapter applies to `f_in`: `f_mo - f_in`, given
    /// the precomputed condition row `cond = r·W_cond`.
    pub fn motion_delta(&self, g: &mut Graph, reg: &ParamRegistry, i: usize, f_in: Var, cond: Var) -> Result<Var> {
        let f_cond = g.add_row(f_in, cond)?;
        let h = self.bottleneck(g, reg, Branch::Motion, i, f_cond)?;
        g.add_row(h, cond)
    }

    /// `f_id = f_in + GELU(f_in·W_down + b)·W_up + b'`.
    pub fn identity_forward(&self, g: &mut Graph, reg: &ParamRegistry, i: usize, f_in: Var) -> Result<Var> {
        let d = self.identity_delta(g, reg, i, f_in)?;
        g.add(f_in, d)
    }

    /// `f_mo = f_cond + GELU(f_cond·W'_down + b)·W'_up + b'` with
    /// `f_cond = f_in + r·W_cond`.
    pub fn motion_forward(&self, g: &mut Graph, reg: &ParamRegistry, i: usize, f_in: Var, r: Var) -> Result<Var> {
        let cond = self.condition(g, reg, r)?;
        let f_cond = g.add_row(f_in, cond)?;
        let h = self.bottleneck(g, reg, Branch::Motion, i, f_cond)?;
        g.add(f_cond, h)
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::Invalid(format!("blend weight {omega} outside (0, 1)")));
    }
    Ok(())
}

/// `ω·f_mo + (1-ω)·f_id + f_dit`.
pub fn blend_residual(g: &mut Graph, f_id: Var, f_mo: Var, f_dit: Var, omega: Var) -> Result<Var> {
    check_omega(g.value(omega).data()[0])?;
    let m = g.scale_by(f_mo, omega)?;
    let neg = g.scale(omega, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let i = g.scale_by(f_id, one_minus)?;
    let mi = g.add(m, i)?;
    g.add(mi, f_dit)
}

/// The same combination written over adapter deltas:
/// `(f_in + f_dit) + ω·Δ_mo + (1-ω)·Δ_id`. Algebraically equal to
/// [`blend_residual`] with `f_mo = f_in + Δ_mo`, `f_id = f_in + Δ_id`;
/// when both deltas are exactly zero the result is bit-identical to the
/// backbone's `f_in + f_dit`.
pub fn blend_deltas(g: &mut Graph, f_in: Var, f_dit: Var, d_id: Var, d_mo: Var, omega: Var) -> Result<Var> {
    check_omega(g.value(omega).data()[0])?;
    let base = g.add(f_in, f_dit)?;
    let m = g.scale_by(d_mo, omega)?;
    let neg = g.scale(omega, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let i = g.scale_by(d_id, one_minus)?;
    let out = g.add(base, m)?;
    g.add(out, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 8;
    const D: usize = 3;
    const E: usize = 5;

    fn bank(seed: u64, random_up: bool) -> (AdapterBank, ParamRegistry) {
        let bank = AdapterBank::new(
            AdapterConfig {
                bottleneck: D,
                cond_dim: E,
            },
            2,
            C,
        )
        .unwrap();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bank.init_params(&mut reg, &mut rng).unwrap();
        if random_up {
            let names: Vec<String> = reg.iter().map(|e| e.name.clone()).collect();
            for n in names {
                let shape = reg.get(&n).unwrap().shape().to_vec();
                reg.set(&n, Tensor::randn(shape, 0.5, &mut rng)).unwrap();
            }
        }
        (bank, reg)
    }

    fn naive_matmul(a: &[f64], rows: usize, k: usize, b: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                for p in 0..k {
                    out[i * cols + j] += a[i * k + p] * b[p * cols + j];
                }
            }
        }
        out
    }

    fn naive_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    fn naive_bottleneck(reg: &ParamRegistry, p: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let wd = reg.get(&format!("{p}.down.w")).unwrap().data();
        let bd = reg.get(&format!("{p}.down.b")).unwrap().data();
        let wu = reg.get(&format!("{p}.up.w")).unwrap().data();
        let bu = reg.get(&format!("{p}.up.b")).unwrap().data();
        let mut h = naive_matmul(x, rows, C, wd, D);
        for r in 0..rows {
            for j in 0..D {
                h[r * D + j] = naive_gelu(h[r * D + j] + bd[j]);
            }
        }
        let mut o = naive_matmul(&h, rows, D, wu, C);
        for r in 0..rows {
            for j in 0..C {
                o[r * C + j] += bu[j] + x[r * C + j];
            }
        }
        o
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let (bank, reg) = bank(1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![4, C], 1.0, &mut rng));
        let y = bank.identity_forward(&mut g, &reg, 0, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (bank, mut reg) = bank(2, true);
        for n in ["adapter.0.id.down.b", "adapter.0.id.up.b"] {
            let shape = reg.get(n).unwrap().shape().to_vec();
            reg.set(n, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, C]));
        let y = bank.identity_forward(&mut g, &reg, 0, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matches_two_matmul_oracle() {
        let (bank, reg) = bank(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(vec![1, C], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = bank.identity_forward(&mut g, &reg, 1, xv).unwrap();
        let oracle = naive_bottleneck(&reg, "adapter.1.id", x.data(), 1);
        let got = g.value(y).data();
        let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn motion_with_zero_reference_and_zero_up_is_identity() {
        let (bank, mut reg) = bank(4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        reg.set(COND_WEIGHT, Tensor::randn(vec![E, C], 1.0, &mut rng)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![4, C], 1.0, &mut rng));
        let r = g.constant(Tensor::zeros(vec![1, E]));
        let y = bank.motion_forward(&mut g, &reg, 0, x, r).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn motion_references_differ_only_by_broadcast_row() {
        let (bank, mut reg) = bank(5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wc = Tensor::randn(vec![E, C], 1.0, &mut rng);
        reg.set(COND_WEIGHT, wc.clone()).unwrap();
        let x = Tensor::randn(vec![4, C], 1.0, &mut rng);
        let r1 = Tensor::randn(vec![1, E], 1.0, &mut rng);
        let r2 = Tensor::randn(vec![1, E], 1.0, &mut rng);
        let run = |r: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let y = bank.motion_forward(&mut g, &reg, 0, xv, rv).unwrap();
            g.value(y).clone()
        };
        let (y1, y2) = (run(&r1), run(&r2));
        let diff_r: Vec<f64> = r1.data().iter().zip(r2.data()).map(|(a, b)| a - b).collect();
        let row = naive_matmul(&diff_r, 1, E, wc.data(), C);
        for t in 0..4 {
            for j in 0..C {
                let d = y1.at2(t, j) - y2.at2(t, j);
                assert!((d - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn motion_matches_oracle_composition() {
        let (bank, reg) = bank(6, true);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(vec![3, C], 1.0, &mut rng);
        let r = Tensor::randn(vec![1, E], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let rv = g.constant(r.clone());
        let y = bank.motion_forward(&mut g, &reg, 1, xv, rv).unwrap();
        let cond = naive_matmul(r.data(), 1, E, reg.get(COND_WEIGHT).unwrap().data(), C);
        let f_cond: Vec<f64> = x.data().iter().enumerate().map(|(k, v)| v + cond[k % C]).collect();
        let oracle = naive_bottleneck(&reg, "adapter.1.mo", &f_cond, 3);
        let err = g
            .value(y)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn blend_of_equal_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![3, C], 1.0, &mut rng));
        let fd = g.constant(Tensor::randn(vec![3, C], 1.0, &mut rng));
        let w = g.constant(Tensor::scalar(0.5));
        let y = blend_residual(&mut g, x, x, fd, w).unwrap();
        let expect = g.add(x, fd).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn blend_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = Tensor::randn(vec![3, C], 1.0, &mut rng);
        let b = Tensor::randn(vec![3, C], 1.0, &mut rng);
        let c = Tensor::randn(vec![3, C], 1.0, &mut rng);
        let mut g = Graph::new();
        let (ia, ib, ic) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
        let w = g.constant(Tensor::scalar(0.3));
        let y = blend_residual(&mut g, ia, ib, ic, w).unwrap();
        for k in 0..a.numel() {
            let oracle = 0.3 * b.data()[k] + 0.7 * a.data()[k] + c.data()[k];
            assert!((g.value(y).data()[k] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_rejects_weights_outside_open_interval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2]));
        for w in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            let wv = g.constant(Tensor::scalar(w));
            assert!(blend_residual(&mut g, x, x, x, wv).is_err());
            assert!(blend_deltas(&mut g, x, x, x, x, wv).is_err());
        }
    }

    #[test]
    fn delta_form_agrees_with_affine_form() {
        let (bank, reg) = bank(7, true);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![4, C], 1.0, &mut rng));
        let fd = g.constant(Tensor::randn(vec![4, C], 1.0, &mut rng));
        let r = g.constant(Tensor::randn(vec![1, E], 1.0, &mut rng));
        let w = g.constant(Tensor::scalar(0.37));
        let f_id = bank.identity_forward(&mut g, &reg, 0, x).unwrap();
        let f_mo = bank.motion_forward(&mut g, &reg, 0, x, r).unwrap();
        let a = blend_residual(&mut g, f_id, f_mo, fd, w).unwrap();
        let d_id = bank.identity_delta(&mut g, &reg, 0, x).unwrap();
        let cond = bank.condition(&mut g, &reg, r).unwrap();
        let d_mo = bank.motion_delta(&mut g, &reg, 0, x, cond).unwrap();
        let b = blend_deltas(&mut g, x, fd, d_id, d_mo, w).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn tags_split_identity_and_motion() {
        let (_, reg) = bank(8, false);
        for e in reg.iter() {
            let expect = if e.name.contains(".id.") { Tag::Identity } else { Tag::Motion };
            assert_eq!(e.tag, expect, "{}", e.name);
            if e.name.ends_with("up.w") || e.name == COND_WEIGHT {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
