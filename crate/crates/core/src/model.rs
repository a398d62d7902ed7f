//! The customized model: frozen backbone blocks wrapped as DA-Blocks,
//! driven by one controller invocation per step.

use rand::Rng;

use crate::adapter::{blend_deltas, AdapterBank, AdapterConfig, Branch};
use crate::autodiff::{Graph, Var};
use crate::blender::{BlendSchedule, ControllerConfig, StageBlender};
use crate::dit::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::sampler::Denoiser;
use crate::tensor::Tensor;

/// Source of the per-group blend weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlendMode {
    /// Weights from the stage-aware controller.
    Controller,
    /// The same weight for every block and step.
    Fixed(f64),
}

/// How a forward pass routes through the DA-Blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Route {
    pub blend: BlendMode,
    /// Drop one adapter's contribution entirely.
    pub skip: Option<Branch>,
}

impl Route {
    pub fn controller() -> Self {
        Route {
            blend: BlendMode::Controller,
            skip: None,
        }
    }

    pub fn fixed(omega: f64) -> Self {
        Route {
            blend: BlendMode::Fixed(omega),
            skip: None,
        }
    }
}

/// Prompt tokens plus the `e`-wide reference embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub prompt: Vec<usize>,
    pub reference: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted noise, `n_v × patch_dim`.
    pub eps: Var,
    pub schedule: BlendSchedule,
}

#[derive(Clone, Debug)]
pub struct DualReal {
    pub backbone: Backbone,
    pub adapters: AdapterBank,
    pub blender: StageBlender,
}

impl DualReal {
    pub fn new(bb: BackboneConfig, ad: AdapterConfig, ctl: &ControllerConfig) -> Result<Self> {
        let backbone = Backbone::new(bb)?;
        let cfg = backbone.config();
        let adapters = AdapterBank::new(ad, cfg.depth, cfg.hidden)?;
        let blender = StageBlender::new(ctl, cfg.depth, cfg.hidden, cfg.t_dim)?;
        Ok(DualReal {
            backbone,
            adapters,
            blender,
        })
    }

    pub fn depth(&self) -> usize {
        self.backbone.config().depth
    }

    /// Attach fresh adapters and controller parameters to `reg`.
    pub fn init_customization<R: Rng + ?Sized>(&self, reg: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.adapters.init_params(reg, rng)?;
        self.blender.init_params(reg, rng)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        x_t: &Tensor,
        cond: &Conditioning,
        step: usize,
        route: Route,
    ) -> Result<ForwardOutput> {
        let e = self.adapters.config().cond_dim;
        if cond.reference.len() != e {
            return Err(Error::shape("forward", &[cond.reference.len()], &[e]));
        }
        let depth = self.depth();
        let ctx = self.backbone.step_context(g, reg, step, cond.prompt.len())?;
        let mut x = self.backbone.embed(g, reg, x_t, &cond.prompt)?;

        let (group_weights, schedule) = match route.blend {
            BlendMode::Controller => {
                let t = g.constant(self.backbone.timestep_embedding(step)?);
                let out = self.blender.controller_step(g, reg, x, t)?;
                let per_group = (0..out.schedule.groups())
                    .map(|k| g.slice_rows(out.omega, k, 1))
                    .collect::<Result<Vec<_>>>()?;
                (per_group, out.schedule)
            }
            BlendMode::Fixed(w) => {
                let v = g.constant(Tensor::scalar(w));
                (vec![v], BlendSchedule::uniform(depth, 1, w)?)
            }
        };

        let r = g.constant(Tensor::row(cond.reference.clone()));
        let c = self.adapters.condition(g, reg, r)?;
        for i in 0..depth {
            let f_dit = self.backbone.block(g, reg, i, x, &ctx)?;
            let d_id = match route.skip {
                Some(Branch::Identity) => g.constant(Tensor::zeros(vec![g.shape(x).0, g.shape(x).1])),
                _ => self.adapters.identity_delta(g, reg, i, x)?,
            };
            let d_mo = match route.skip {
                Some(Branch::Motion) => g.constant(Tensor::zeros(vec![g.shape(x).0, g.shape(x).1])),
                _ => self.adapters.motion_delta(g, reg, i, x, c)?,
            };
            let omega = group_weights[schedule.partition[i]];
            x = blend_deltas(g, x, f_dit, d_id, d_mo, omega)?;
        }
        let eps = self.backbone.head(g, reg, x, &ctx, x_t)?;
        Ok(ForwardOutput { eps, schedule })
    }

    /// Forward-only noise prediction in video layout.
    pub fn predict(
        &self,
        reg: &ParamRegistry,
        x_t: &Tensor,
        cond: &Conditioning,
        step: usize,
        route: Route,
    ) -> Result<(Tensor, BlendSchedule)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, reg, x_t, cond, step, route)?;
        let video = self.backbone.to_video(g.value(out.eps))?;
        Ok((video, out.schedule))
    }

    pub fn denoiser<'a>(&'a self, reg: &'a ParamRegistry, cond: &'a Conditioning, route: Route) -> ModelDenoiser<'a> {
        ModelDenoiser {
            model: self,
            reg,
            cond,
            route,
        }
    }
}

/// Adapts a [`DualReal`] and fixed conditioning to the sampler interface.
pub struct ModelDenoiser<'a> {
    model: &'a DualReal,
    reg: &'a ParamRegistry,
    cond: &'a Conditioning,
    route: Route,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, step: usize) -> Result<(Tensor, Option<BlendSchedule>)> {
        let (eps, sched) = self.model.predict(self.reg, x_t, self.cond, step, self.route)?;
        Ok((eps, Some(sched)))
    }
}

/// Plain backbone as a denoiser.
pub struct BackboneDenoiser<'a> {
    pub backbone: &'a Backbone,
    pub reg: &'a ParamRegistry,
    pub prompt: &'a [usize],
}

impl Denoiser for BackboneDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, step: usize) -> Result<(Tensor, Option<BlendSchedule>)> {
        let mut g = Graph::new();
        let eps = self.backbone.forward(&mut g, self.reg, x_t, self.prompt, step)?;
        Ok((self.backbone.to_video(g.value(eps))?, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (DualReal, ParamRegistry, Conditioning, Tensor) {
        let bb = BackboneConfig {
            frames: 2,
            height: 8,
            width: 8,
            hidden: 16,
            depth: 4,
            heads: 2,
            t_dim: 8,
            diffusion_steps: 20,
            ..BackboneConfig::default()
        };
        let ad = AdapterConfig {
            bottleneck: 4,
            cond_dim: 6,
        };
        let model = DualReal::new(bb, ad, &ControllerConfig { groups: 2 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reg = ParamRegistry::new();
        model.backbone.init_params(&mut reg, &mut rng).unwrap();
        // Stand in for pretraining: the zero-initialized modulation and
        // output layers would otherwise make every prediction zero.
        perturb(&mut reg, Tag::Backbone, 10);
        model.init_customization(&mut reg, &mut rng).unwrap();
        let cond = Conditioning {
            prompt: vec![1, 6],
            reference: vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.7],
        };
        let x = Tensor::randn(vec![2, 8, 8, 3], 1.0, &mut rng);
        (model, reg, cond, x)
    }

    fn perturb(reg: &mut ParamRegistry, tag: Tag, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = reg.names_with_tag(tag).into_iter().map(str::to_owned).collect();
        for n in names {
            let shape = reg.get(&n).unwrap().shape().to_vec();
            reg.set(&n, Tensor::randn(shape, 0.2, &mut rng)).unwrap();
        }
    }

    #[test]
    fn fresh_customization_is_the_backbone() {
        let (model, reg, cond, x) = setup();
        let plain = BackboneDenoiser {
            backbone: &model.backbone,
            reg: &reg,
            prompt: &cond.prompt,
        };
        for route in [Route::controller(), Route::fixed(0.3)] {
            let (ours, sched) = model.predict(&reg, &x, &cond, 7, route).unwrap();
            assert_eq!(ours, plain.predict_eps(&x, 7).unwrap().0);
            if route.blend == BlendMode::Controller {
                assert!(sched.weights.iter().all(|&w| w == 0.5));
            }
        }
    }

    #[test]
    fn skipping_a_trained_branch_changes_the_prediction() {
        let (model, mut reg, cond, x) = setup();
        perturb(&mut reg, Tag::Identity, 1);
        perturb(&mut reg, Tag::Motion, 2);
        let route = Route::controller();
        let (full, _) = model.predict(&reg, &x, &cond, 5, route).unwrap();
        for skip in [Branch::Identity, Branch::Motion] {
            let (cut, _) = model.predict(&reg, &x, &cond, 5, Route { skip: Some(skip), ..route }).unwrap();
            assert!(full.max_abs_diff(&cut) > 1e-6, "{skip:?}");
        }
    }

    #[test]
    fn fixed_weight_must_be_open_interval() {
        let (model, reg, cond, x) = setup();
        for w in [0.0, 1.0, f64::NAN] {
            assert!(model.predict(&reg, &x, &cond, 3, Route::fixed(w)).is_err());
        }
    }

    #[test]
    fn reference_width_is_checked() {
        let (model, reg, mut cond, x) = setup();
        cond.reference.pop();
        assert!(model.predict(&reg, &x, &cond, 0, Route::controller()).is_err());
    }
}
