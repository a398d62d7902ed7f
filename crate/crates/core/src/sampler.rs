//! Deterministic DDIM sampling with epsilon prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blender::BlendSchedule;
use crate::dit::{to_pixel_space, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Denoiser {
    /// Predicted noise for `x_t` at diffusion step `step`, plus the blend
    /// schedule used, when the model has one.
    fn predict_eps(&self, x_t: &Tensor, step: usize) -> Result<(Tensor, Option<BlendSchedule>)>;
}

/// `S` ascending diffusion steps spread evenly over `[0, T)`, ending at `T-1`.
pub fn ddim_timesteps(total: usize, sampling_steps: usize) -> Result<Vec<usize>> {
    if sampling_steps == 0 || sampling_steps > total {
        return Err(Error::Invalid(format!(
            "sampling steps {sampling_steps} must be in 1..={total}"
        )));
    }
    Ok((0..sampling_steps)
        .map(|k| (k + 1) * total / sampling_steps - 1)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub diffusion_step: usize,
    pub schedule: BlendSchedule,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Pixels in `[0, 1]`.
    pub video: Tensor,
    /// One record per sampling step, in denoising order.
    pub schedules: Vec<StepRecord>,
}

/// Run `sampling_steps` deterministic DDIM updates starting from seeded
/// Gaussian noise of shape `shape`.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    shape: [usize; 4],
    sampling_steps: usize,
    seed: u64,
) -> Result<SampleOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    sample_from(denoiser, schedule, x, sampling_steps)
}

/// DDIM from a given starting latent.
pub fn sample_from<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    mut x: Tensor,
    sampling_steps: usize,
) -> Result<SampleOutput> {
    let steps = ddim_timesteps(schedule.steps(), sampling_steps)?;
    let mut records = Vec::with_capacity(steps.len());
    for k in (0..steps.len()).rev() {
        let t = steps[k];
        let (eps, sched) = denoiser.predict_eps(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("sample", eps.shape(), x.shape()));
        }
        if let Some(s) = sched {
            records.push(StepRecord {
                diffusion_step: t,
                schedule: s,
            });
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = if k > 0 { schedule.alpha_bar(steps[k - 1]) } else { 1.0 };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, e) in x.data_mut().iter_mut().zip(eps.data()) {
            let x0 = ((*xv - sb * e) / sa).clamp(-1.0, 1.0);
            *xv = pa * x0 + pb * e;
        }
    }
    Ok(SampleOutput {
        video: to_pixel_space(&x),
        schedules: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::to_model_space;
    use rand::Rng;

    /// Knows the clean clip and returns the exact noise that explains `x_t`.
    struct Oracle<'a> {
        x0: &'a Tensor,
        schedule: &'a DiffusionSchedule,
    }

    impl Denoiser for Oracle<'_> {
        fn predict_eps(&self, x_t: &Tensor, step: usize) -> Result<(Tensor, Option<BlendSchedule>)> {
            Ok((self.schedule.recover_noise(self.x0, x_t, step)?, None))
        }
    }

    /// Pulls toward a constant gray frame.
    struct Shrink;

    impl Denoiser for Shrink {
        fn predict_eps(&self, x_t: &Tensor, _step: usize) -> Result<(Tensor, Option<BlendSchedule>)> {
            Ok((x_t.clone(), Some(BlendSchedule::uniform(2, 1, 0.5)?)))
        }
    }

    fn clip() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..2 * 4 * 4 * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![2, 4, 4, 3], data).unwrap()
    }

    #[test]
    fn timesteps_layout() {
        assert_eq!(ddim_timesteps(100, 1).unwrap(), vec![99]);
        let s = ddim_timesteps(100, 20).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s[0], 4);
        assert_eq!(*s.last().unwrap(), 99);
        assert!(ddim_timesteps(100, 101).is_err());
        assert!(ddim_timesteps(100, 0).is_err());
    }

    #[test]
    fn oracle_denoiser_recovers_clip() {
        let schedule = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let pixels = clip();
        let x0 = to_model_space(&pixels);
        let oracle = Oracle {
            x0: &x0,
            schedule: &schedule,
        };
        for steps in [1, 7, 20] {
            let out = sample(&oracle, &schedule, [2, 4, 4, 3], steps, 11).unwrap();
            assert!(out.video.max_abs_diff(&pixels) < 1e-9, "S={steps}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let schedule = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let a = sample(&Shrink, &schedule, [2, 4, 4, 3], 20, 5).unwrap();
        let b = sample(&Shrink, &schedule, [2, 4, 4, 3], 20, 5).unwrap();
        assert_eq!(a.video, b.video);
        assert_eq!(a.schedules.len(), 20);
    }

    #[test]
    fn step_count_matters() {
        let schedule = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let a = sample(&Shrink, &schedule, [2, 4, 4, 3], 1, 5).unwrap();
        let b = sample(&Shrink, &schedule, [2, 4, 4, 3], 20, 5).unwrap();
        assert!(a.video.max_abs_diff(&b.video) > 1e-6);
    }
}
