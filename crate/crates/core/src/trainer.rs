//! Alternating identity/motion customization with gradient-masked updates,
//! plus plain backbone pretraining.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dit::{patchify, to_model_space, Backbone};
use crate::error::{Error, Result};
use crate::model::{Conditioning, DualReal, Route};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

/// Training phase `Z`: identity (0) or motion (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Identity,
    Motion,
}

impl Phase {
    pub fn z(self) -> u8 {
        match self {
            Phase::Identity => 0,
            Phase::Motion => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Identity => "identity",
            Phase::Motion => "motion",
        }
    }

    /// Adapter tag trained in this phase.
    pub fn tag(self) -> Tag {
        match self {
            Phase::Identity => Tag::Identity,
            Phase::Motion => Tag::Motion,
        }
    }
}

/// Seeded Bernoulli draw of the phase with motion probability `ratio`.
#[derive(Clone, Debug)]
pub struct PhaseSelector {
    ratio: f64,
    rng: ChaCha8Rng,
}

impl PhaseSelector {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("motion ratio {ratio} outside [0, 1]")));
        }
        Ok(PhaseSelector {
            ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn next_phase(&mut self) -> Phase {
        let u: f64 = self.rng.random();
        if u < self.ratio {
            Phase::Motion
        } else {
            Phase::Identity
        }
    }
}

/// Per-parameter binary update selector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientMask {
    active: BTreeMap<String, bool>,
}

impl GradientMask {
    /// Every parameter whose tag is in `tags` is active.
    pub fn for_tags(reg: &ParamRegistry, tags: &[Tag]) -> Self {
        let active = reg
            .iter()
            .map(|e| (e.name.clone(), tags.contains(&e.tag)))
            .collect();
        GradientMask { active }
    }

    pub fn is_active(&self, name: &str) -> bool {
        self.active.get(name).copied().unwrap_or(false)
    }

    pub fn active_names(&self) -> impl Iterator<Item = &str> {
        self.active.iter().filter(|(_, &a)| a).map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// `M = Z·M_m + (1−Z)·M_i` over the adapters; the controller is always
/// active and the backbone never is.
pub fn build_mask(phase: Phase, reg: &ParamRegistry) -> GradientMask {
    GradientMask::for_tags(reg, &[phase.tag(), Tag::Controller])
}

pub trait Optimizer {
    /// Update every active parameter in place. Inactive parameters and any
    /// state they own are left untouched.
    fn step(&mut self, reg: &mut ParamRegistry, grads: &HashMap<String, Tensor>, mask: &GradientMask) -> Result<()>;
}

fn grad_for<'a>(grads: &'a HashMap<String, Tensor>, name: &str, like: &Tensor) -> Result<Option<&'a Tensor>> {
    match grads.get(name) {
        Some(g) if g.shape() != like.shape() => Err(Error::shape("masked_update", g.shape(), like.shape())),
        other => Ok(other),
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, reg: &mut ParamRegistry, grads: &HashMap<String, Tensor>, mask: &GradientMask) -> Result<()> {
        let names: Vec<String> = mask.active_names().map(str::to_owned).collect();
        for name in names {
            let p = reg.get_mut(&name)?;
            let Some(g) = grad_for(grads, &name, p)? else { continue };
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments and the number of updates this parameter has seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub count: u64,
}

/// Decoupled weight decay Adam with per-parameter step counts, so a
/// parameter frozen for some steps resumes exactly where it left off.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, reg: &mut ParamRegistry, grads: &HashMap<String, Tensor>, mask: &GradientMask) -> Result<()> {
        let c = self.cfg.clone();
        let names: Vec<String> = mask.active_names().map(str::to_owned).collect();
        for name in names {
            let p = reg.get_mut(&name)?;
            let zeros;
            let g = match grad_for(grads, &name, p)? {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(p.shape().to_vec());
                    &zeros
                }
            };
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                count: 0,
            });
            st.count += 1;
            let bc1 = 1.0 - c.beta1.powi(st.count as i32);
            let bc2 = 1.0 - c.beta2.powi(st.count as i32);
            for (((w, d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * d;
                *v = c.beta2 * *v + (1.0 - c.beta2) * d * d;
                *w *= 1.0 - c.lr * c.weight_decay;
                *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One training clip with its prompt and candidate reference embeddings;
/// each step draws one reference uniformly.
#[derive(Clone, Debug)]
pub struct PhaseSample {
    /// Pixels in `[0, 1]`, `F×H×W×C`.
    pub video: Tensor,
    pub prompt: Vec<usize>,
    pub references: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct CustomizationData {
    pub identity: Vec<PhaseSample>,
    pub motion: Vec<PhaseSample>,
}

impl CustomizationData {
    fn source(&self, phase: Phase) -> Result<&[PhaseSample]> {
        let src = match phase {
            Phase::Identity => &self.identity,
            Phase::Motion => &self.motion,
        };
        if src.is_empty() {
            return Err(Error::Invalid(format!("no {} training clips", phase.as_str())));
        }
        Ok(src)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

/// Everything one masked step touched, for callers that want to inspect it.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub log: StepLog,
    pub mask: GradientMask,
}

/// Draws phases, timesteps, noise and clips from seeded streams and applies
/// masked optimizer updates.
pub struct JointTrainer<'m, O: Optimizer> {
    model: &'m DualReal,
    pub optimizer: O,
    selector: PhaseSelector,
    rng: ChaCha8Rng,
    route: Route,
    step: usize,
}

impl<'m, O: Optimizer> JointTrainer<'m, O> {
    pub fn new(model: &'m DualReal, optimizer: O, motion_ratio: f64, seed: u64, route: Route) -> Result<Self> {
        Ok(JointTrainer {
            model,
            optimizer,
            selector: PhaseSelector::new(motion_ratio, seed)?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            route,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Loss of one noised example without touching any parameter.
    pub fn example_loss(
        model: &DualReal,
        reg: &ParamRegistry,
        x0: &Tensor,
        eps: &Tensor,
        cond: &Conditioning,
        t: usize,
        route: Route,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let x_t = model.backbone.schedule().add_noise(x0, eps, t)?;
        let cfg = model.backbone.config();
        let out = model.forward(&mut g, reg, &x_t, cond, t, route)?;
        let target = g.constant(patchify(eps, cfg.patch_t, cfg.patch_s)?);
        let loss = g.mse(out.eps, target)?;
        Ok(g.value(loss).data()[0])
    }

    pub fn train_step(&mut self, reg: &mut ParamRegistry, data: &CustomizationData) -> Result<StepOutcome> {
        let phase = self.selector.next_phase();
        let src = data.source(phase)?;
        let sample = &src[self.rng.random_range(0..src.len())];
        if sample.references.is_empty() {
            return Err(Error::Invalid("training clip without reference embeddings".into()));
        }
        let r = &sample.references[self.rng.random_range(0..sample.references.len())];
        let cond = Conditioning {
            prompt: sample.prompt.clone(),
            reference: r.clone(),
        };
        let bb = &self.model.backbone;
        let t = self.rng.random_range(0..bb.config().diffusion_steps);
        let x0 = to_model_space(&sample.video);
        let eps = Tensor::randn(x0.shape().to_vec(), 1.0, &mut self.rng);
        let x_t = bb.schedule().add_noise(&x0, &eps, t)?;

        let mask = build_mask(phase, reg);
        let mut g = Graph::with_trainable(&[phase.tag(), Tag::Controller]);
        let out = self.model.forward(&mut g, reg, &x_t, &cond, t, self.route)?;
        let cfg = bb.config();
        let target = g.constant(patchify(&eps, cfg.patch_t, cfg.patch_s)?);
        let loss = g.mse(out.eps, target)?;
        let loss_value = g.value(loss).data()[0];
        let grads = g.backward(loss)?.into_named();
        self.optimizer.step(reg, &grads, &mask)?;
        let log = StepLog {
            step: self.step,
            phase,
            loss: loss_value,
        };
        self.step += 1;
        Ok(StepOutcome { log, mask })
    }

    /// Run `steps` training steps, calling `hook` after each.
    pub fn run<F>(&mut self, reg: &mut ParamRegistry, data: &CustomizationData, steps: usize, mut hook: F) -> Result<Vec<StepLog>>
    where
        F: FnMut(&StepLog, &ParamRegistry) -> Result<()>,
    {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = self.train_step(reg, data)?;
            hook(&out.log, reg)?;
            logs.push(out.log);
        }
        Ok(logs)
    }
}

/// A generic clip for backbone pretraining.
#[derive(Clone, Debug)]
pub struct PretrainClip {
    pub video: Tensor,
    pub prompt: Vec<usize>,
}

/// Train every backbone-tagged parameter on the epsilon objective.
pub fn pretrain_backbone(
    backbone: &Backbone,
    reg: &mut ParamRegistry,
    clips: &[PretrainClip],
    steps: usize,
    opt_cfg: AdamWConfig,
    seed: u64,
    mut hook: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Invalid("no pretraining clips".into()));
    }
    let cfg = backbone.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(opt_cfg);
    let mask = GradientMask::for_tags(reg, &[Tag::Backbone]);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = &clips[rng.random_range(0..clips.len())];
        let t = rng.random_range(0..cfg.diffusion_steps);
        let x0 = to_model_space(&clip.video);
        let eps = Tensor::randn(x0.shape().to_vec(), 1.0, &mut rng);
        let x_t = backbone.schedule().add_noise(&x0, &eps, t)?;
        let mut g = Graph::with_trainable(&[Tag::Backbone]);
        let pred = backbone.forward(&mut g, reg, &x_t, &clip.prompt, t)?;
        let target = g.constant(patchify(&eps, cfg.patch_t, cfg.patch_s)?);
        let loss = g.mse(pred, target)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?.into_named();
        opt.step(reg, &grads, &mask)?;
        hook(step, value)?;
        losses.push(value);
    }
    Ok(losses)
}
