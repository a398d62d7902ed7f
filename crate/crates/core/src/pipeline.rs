//! End-to-end experiment steps shared by the command line and the test
//! suites: pretraining, customization under each ablation, sampling,
//! evaluation, controller traces and the ablation tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blender::ControllerConfig;
use crate::config::{Mode, RunConfig};
use crate::corpus::{generate_corpus, generic_clips, prompt_tokens, Corpus};
use crate::dit::to_model_space;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate, MetricReport, ToyEncoder};
use crate::model::{Conditioning, DualReal, Route};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;
use crate::sampler::{sample, SampleOutput, StepRecord};
use crate::trainer::{pretrain_backbone, AdamW, AdamWConfig, CustomizationData, JointTrainer, PhaseSample, PretrainClip, StepLog};

/// The six reported metrics, in report-column order.
pub const METRIC_COLUMNS: [&str; 6] = ["identity_sim", "t_flicker", "motion_smooth", "t_cons", "dynamic_degree", "dd_deviation"];

const INIT_STREAM: u64 = 0xada9_7e55;

/// 64-bit FNV-1a, used to key cached artifacts by their settings.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    generate_corpus(&cfg.corpus.identities, &cfg.corpus.motions, cfg.dims(), cfg.corpus.seed)
}

/// Key of the pretrained backbone: everything that determines its weights.
pub fn backbone_key(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(&(&cfg.backbone, &cfg.pretrain)).expect("settings serialize");
    format!("{:016x}", fnv1a(text.as_bytes()))
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub reg: ParamRegistry,
    pub losses: Vec<f64>,
    /// Loaded from the cache rather than trained.
    pub cached: bool,
}

/// Pretrain the backbone on generic clips, or load it from
/// `cfg.cache_dir` when a checkpoint with the same key exists.
pub fn pretrain(cfg: &RunConfig, mut hook: impl FnMut(usize, f64)) -> Result<Pretrained> {
    let cache = cfg.cache_dir.as_ref().map(|d| d.join(format!("backbone-{}.drck", backbone_key(cfg))));
    if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
        return Ok(Pretrained {
            reg: io::load_checkpoint(path)?,
            losses: Vec::new(),
            cached: true,
        });
    }
    let model = DualReal::new(cfg.backbone.clone(), cfg.adapter.clone(), &ControllerConfig { groups: 1 })?;
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    model.backbone.init_params(&mut reg, &mut rng)?;
    let clips: Vec<PretrainClip> = generic_clips(cfg.pretrain.clips, cfg.dims(), cfg.pretrain.seed)?
        .into_iter()
        .map(|(video, prompt)| PretrainClip { video, prompt })
        .collect();
    let model_space: Vec<Tensor> = clips.iter().map(|c| to_model_space(&c.video)).collect();
    model.backbone.fit_prior(&mut reg, &model_space)?;
    let opt = AdamWConfig {
        lr: cfg.pretrain.lr,
        ..AdamWConfig::default()
    };
    let losses = pretrain_backbone(&model.backbone, &mut reg, &clips, cfg.pretrain.steps, opt, cfg.pretrain.seed, |s, l| {
        hook(s, l);
        Ok(())
    })?;
    if let Some(path) = cache {
        ensure_dir(path.parent().expect("cache file has a parent"))?;
        // Write then rename so a concurrent reader never sees a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        io::save_checkpoint(&tmp, &reg)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(Pretrained {
        reg,
        losses,
        cached: false,
    })
}

/// Training clips for one (identity, motion) pair. Identity steps see the
/// static identity clip with its reference embedding; motion steps see the
/// neutral motion clip with the embedding of one of its own frames.
pub fn customization_data(corpus: &Corpus, identity: usize, motion: usize, enc: &ToyEncoder) -> Result<CustomizationData> {
    let m = &corpus.manifest;
    let (id_spec, mo_spec) = match (m.identities.get(identity), m.motions.get(motion)) {
        (Some(i), Some(j)) => (i, j),
        _ => return Err(Error::Invalid(format!("no case ({identity}, {motion}) in the corpus"))),
    };
    Ok(CustomizationData {
        identity: vec![PhaseSample {
            video: corpus.identity_clips[identity].clone(),
            prompt: prompt_tokens(Some(id_spec), None),
            references: vec![enc.embed(&corpus.references[identity])?],
        }],
        motion: vec![PhaseSample {
            video: corpus.motion_clips[motion].clone(),
            prompt: prompt_tokens(None, Some(mo_spec)),
            references: enc.embed_frames(&corpus.motion_clips[motion])?,
        }],
    })
}

/// Prompt and reference for generating the customized pair.
pub fn inference_conditioning(cfg: &RunConfig, corpus: &Corpus, enc: &ToyEncoder) -> Result<Conditioning> {
    let m = &corpus.manifest;
    Ok(Conditioning {
        prompt: prompt_tokens(m.identities.get(cfg.identity), m.motions.get(cfg.motion)),
        reference: enc.embed(&corpus.references[cfg.identity])?,
    })
}

/// A customized model with the route it is meant to be sampled under.
#[derive(Clone, Debug)]
pub struct Customized {
    pub mode: Mode,
    pub model: DualReal,
    pub reg: ParamRegistry,
    pub route: Route,
    pub logs: Vec<StepLog>,
}

pub fn build_model(cfg: &RunConfig, groups: usize) -> Result<DualReal> {
    DualReal::new(cfg.backbone.clone(), cfg.adapter.clone(), &ControllerConfig { groups })
}

/// Run the customization `mode` prescribes, starting from the pretrained
/// backbone weights in `backbone`.
pub fn customize(
    cfg: &RunConfig,
    mode: Mode,
    backbone: &ParamRegistry,
    data: &CustomizationData,
    mut hook: impl FnMut(&StepLog),
) -> Result<Customized> {
    let groups = if mode == Mode::NoGroups { 1 } else { cfg.groups };
    let model = build_model(cfg, groups)?;
    let mut reg = backbone.subset(&[Tag::Backbone, Tag::Buffer]);
    model.init_customization(&mut reg, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM))?;
    let opt = || {
        AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        })
    };
    let mut record = |log: &StepLog, _: &ParamRegistry| {
        hook(log);
        Ok(())
    };
    let (route, logs) = match mode {
        Mode::Full | Mode::NoGroups | Mode::NoController => {
            let route = if mode == Mode::NoController { Route::fixed(0.5) } else { Route::controller() };
            let mut tr = JointTrainer::new(&model, opt(), cfg.motion_ratio, cfg.seed, route)?;
            (route, tr.run(&mut reg, data, cfg.customize_steps, &mut record)?)
        }
        Mode::NoJoint => {
            // Two independent runs sharing the budget, one per modality,
            // then identity weights from the first and motion weights from
            // the second.
            let route = Route::fixed(0.5);
            let first = cfg.customize_steps / 2;
            let mut id_reg = reg.clone();
            let mut tr = JointTrainer::new(&model, opt(), 0.0, cfg.seed, route)?;
            let mut logs = tr.run(&mut id_reg, data, first, &mut record)?;
            let mut tr = JointTrainer::new(&model, opt(), 1.0, cfg.seed, route)?;
            let mut mo_logs = tr.run(&mut reg, data, cfg.customize_steps - first, |log: &StepLog, r: &ParamRegistry| {
                let shifted = StepLog {
                    step: log.step + first,
                    ..log.clone()
                };
                record(&shifted, r)
            })?;
            for l in &mut mo_logs {
                l.step += first;
            }
            logs.append(&mut mo_logs);
            id_reg.merge(&reg.subset(&[Tag::Motion]))?;
            reg = id_reg;
            (route, logs)
        }
    };
    Ok(Customized {
        mode,
        model,
        reg,
        route,
        logs,
    })
}

/// Noise seed of the `k`-th sample of a run seeded with `seed`.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64)
}

/// Draw `cfg.samples` videos from the customized model.
pub fn draw_samples(cfg: &RunConfig, c: &Customized, cond: &Conditioning) -> Result<Vec<SampleOutput>> {
    let den = c.model.denoiser(&c.reg, cond, c.route);
    let bb = &c.model.backbone;
    (0..cfg.samples)
        .map(|k| sample(&den, bb.schedule(), bb.config().video_shape(), cfg.sampling_steps, sample_seed(cfg.seed, k)))
        .collect()
}

pub fn evaluate_samples(cfg: &RunConfig, corpus: &Corpus, videos: &[&Tensor], enc: &ToyEncoder) -> Result<Vec<MetricReport>> {
    let reference = corpus
        .references
        .get(cfg.identity)
        .ok_or_else(|| Error::Invalid(format!("identity {} not in corpus", cfg.identity)))?;
    let motion_ref = corpus
        .motion_clips
        .get(cfg.motion)
        .ok_or_else(|| Error::Invalid(format!("motion {} not in corpus", cfg.motion)))?;
    videos
        .iter()
        .enumerate()
        .map(|(k, v)| evaluate(enc, &format!("{}-{k}", cfg.run_id), v, reference, std::slice::from_ref(motion_ref)))
        .collect()
}

/// Column means of the six metrics.
pub fn mean_metrics(reports: &[MetricReport]) -> [f64; 6] {
    let n = reports.len().max(1) as f64;
    let mut out = [0.0; 6];
    for r in reports {
        let row = [
            r.identity_similarity,
            r.temporal_flickering,
            r.motion_smoothness,
            r.temporal_consistency,
            r.dynamic_degree,
            r.dd_deviation,
        ];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / n;
        }
    }
    out
}

/// Write each sample as a DRV1 video plus one PPM per frame.
pub fn write_samples(dir: &Path, samples: &[SampleOutput]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut paths = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let path = dir.join(format!("sample-{k}.drv"));
        io::write_video(&path, &s.video)?;
        for f in 0..s.video.shape()[0] {
            io::write_ppm(&dir.join(format!("sample-{k}-frame-{f:02}.ppm")), &io::frame(&s.video, f)?)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// `step,group_0,…` with one row per sampling step in denoising order.
pub fn controller_csv(records: &[StepRecord]) -> String {
    let groups = records.first().map_or(0, |r| r.schedule.groups());
    let mut out = String::from("step");
    for k in 0..groups {
        write!(out, ",group_{k}").unwrap();
    }
    out.push('\n');
    for (s, r) in records.iter().enumerate() {
        write!(out, "{s}").unwrap();
        for w in &r.schedule.weights {
            write!(out, ",{w:.9}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Line chart of the group weights over sampling steps.
pub fn controller_svg(records: &[StepRecord]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let groups = records.first().map_or(0, |r| r.schedule.groups());
    let n = records.len().max(2) as f64;
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / (n - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").unwrap();
    writeln!(
        out,
        "<path d=\"M{pad} {pad} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - pad,
        w - pad
    )
    .unwrap();
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        writeln!(out, "<text x=\"4\" y=\"{:.1}\" font-size=\"11\">{label}</text>", y(v) + 4.0).unwrap();
    }
    writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">denoising step</text>", w / 2.0 - 40.0, h - 8.0).unwrap();
    for k in 0..groups {
        let pts: Vec<String> = records
            .iter()
            .enumerate()
            .map(|(s, r)| format!("{:.2},{:.2}", x(s), y(r.schedule.weights[k])))
            .collect();
        writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"><title>group {k}</title></polyline>",
            pts.join(" "),
            palette[k % palette.len()]
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: [f64; 6],
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationTable {
    pub modes: Vec<AblationRow>,
    pub groups: Vec<AblationRow>,
}

fn table_csv(first: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{first},{}\n", METRIC_COLUMNS.join(","));
    for r in rows {
        out.push_str(&r.label);
        for v in r.metrics {
            write!(out, ",{v:.9}").unwrap();
        }
        out.push('\n');
    }
    out
}

impl AblationTable {
    pub fn modes_csv(&self) -> String {
        table_csv("mode", &self.modes)
    }

    pub fn groups_csv(&self) -> String {
        table_csv("groups", &self.groups)
    }
}

/// Group counts swept by the ablation: 1, 2, the configured count and the
/// block depth.
pub fn group_sweep(cfg: &RunConfig) -> Vec<usize> {
    let mut v = vec![1, 2, cfg.groups, cfg.backbone.depth];
    v.retain(|&n| n <= cfg.backbone.depth);
    v.sort_unstable();
    v.dedup();
    v
}

/// Customize, sample and score one mode with `groups` weight groups.
pub fn score_mode(cfg: &RunConfig, mode: Mode, backbone: &ParamRegistry, corpus: &Corpus, enc: &ToyEncoder) -> Result<(Customized, Vec<SampleOutput>, [f64; 6])> {
    let data = customization_data(corpus, cfg.identity, cfg.motion, enc)?;
    let c = customize(cfg, mode, backbone, &data, |_| {})?;
    let cond = inference_conditioning(cfg, corpus, enc)?;
    let samples = draw_samples(cfg, &c, &cond)?;
    let videos: Vec<_> = samples.iter().map(|s| &s.video).collect();
    let reports = evaluate_samples(cfg, corpus, &videos, enc)?;
    Ok((c, samples, mean_metrics(&reports)))
}

/// Every ablation mode plus the group-count sweep, all on the configured
/// case and seed.
pub fn ablate(cfg: &RunConfig, backbone: &ParamRegistry, corpus: &Corpus, mut progress: impl FnMut(&str)) -> Result<AblationTable> {
    let enc = ToyEncoder::standard();
    let mut table = AblationTable::default();
    for mode in Mode::ALL {
        progress(mode.as_str());
        let (_, _, m) = score_mode(cfg, mode, backbone, corpus, enc)?;
        table.modes.push(AblationRow {
            label: mode.to_string(),
            metrics: m,
        });
    }
    for n in group_sweep(cfg) {
        // Rows already produced by the mode pass are reused.
        let reuse = if n == cfg.groups {
            Some(&table.modes[0])
        } else if n == 1 {
            Some(&table.modes[3])
        } else {
            None
        };
        let metrics = match reuse {
            Some(row) => row.metrics,
            None => {
                progress(&format!("groups={n}"));
                let c = RunConfig { groups: n, ..cfg.clone() };
                score_mode(&c, Mode::Full, backbone, corpus, enc)?.2
            }
        };
        table.groups.push(AblationRow {
            label: n.to_string(),
            metrics,
        });
    }
    Ok(table)
}

/// Write the ablation tables into `dir`.
pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("ablation.csv"), &table.modes_csv())?;
    write_text(&dir.join("groups.csv"), &table.groups_csv())
}

pub fn write_controller(dir: &Path, records: &[StepRecord], svg: bool) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("controller.csv"), &controller_csv(records))?;
    if svg {
        write_text(&dir.join("controller.svg"), &controller_svg(records))?;
    }
    Ok(())
}

/// Append training logs as JSON lines.
pub fn write_logs(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_text(path, &text)
}
