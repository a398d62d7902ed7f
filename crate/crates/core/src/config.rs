//! Run configuration: one JSON file, validated with line-anchored errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::corpus::{default_identities, default_motions, ClipDims, IdentitySpec, MotionSpec};
use crate::dit::BackboneConfig;
use crate::error::{Error, Result};

/// Which ablation a customization run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Joint masked training with the stage-aware controller.
    Full,
    /// Each adapter trained alone, parameters merged for inference.
    NoJoint,
    /// Joint training with the blend weight pinned at 0.5.
    NoController,
    /// Joint training with a single weight group.
    NoGroups,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoJoint, Mode::NoController, Mode::NoGroups];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoJoint => "no-joint",
            Mode::NoController => "no-controller",
            Mode::NoGroups => "no-groups",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (full, no-joint, no-controller, no-groups)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub identities: Vec<IdentitySpec>,
    pub motions: Vec<MotionSpec>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            identities: default_identities(),
            motions: default_motions(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Number of generic clips rendered for pretraining.
    pub clips: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            clips: 256,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Weight group count `n`.
    pub groups: usize,
    /// Probability of a motion-phase step.
    pub motion_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub customize_steps: usize,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusConfig,
    /// Identity and motion (indices into the corpus) to customize on.
    pub identity: usize,
    pub motion: usize,
    pub sampling_steps: usize,
    /// Videos drawn per sampling or evaluation run.
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
    pub run_id: String,
    /// Root under which each run gets its own directory.
    pub out_dir: PathBuf,
    /// Directory holding pretrained backbones keyed by their settings.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            groups: 4,
            motion_ratio: 0.5,
            lr: 1e-3,
            weight_decay: 1e-2,
            customize_steps: 1000,
            pretrain: PretrainConfig::default(),
            corpus: CorpusConfig::default(),
            identity: 0,
            motion: 0,
            sampling_steps: 20,
            samples: 2,
            seed: 1,
            mode: Mode::Full,
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            cache_dir: None,
        }
    }
}

/// Line of the first occurrence of `"key"` in `text`, 1-based.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
}

impl RunConfig {
    pub fn dims(&self) -> ClipDims {
        ClipDims {
            frames: self.backbone.frames,
            height: self.backbone.height,
            width: self.backbone.width,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// Checks that need more than one field; the returned key names the
    /// field an error is attributed to.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let b = &self.backbone;
        b.validate().map_err(|e| ("backbone", e.to_string()))?;
        if b.channels != 3 {
            return Err(("channels", "the corpus renders RGB clips; channels must be 3".into()));
        }
        if self.groups == 0 || self.groups > b.depth {
            return Err(("groups", format!("group count {} must be in 1..={} (depth)", self.groups, b.depth)));
        }
        if !(0.0..=1.0).contains(&self.motion_ratio) {
            return Err(("motion_ratio", format!("{} is not a probability", self.motion_ratio)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(("lr", "learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(("weight_decay", "weight decay must be non-negative".into()));
        }
        if self.adapter.bottleneck == 0 || self.adapter.cond_dim == 0 {
            return Err(("adapter", "adapter widths must be positive".into()));
        }
        if self.sampling_steps == 0 || self.sampling_steps > b.diffusion_steps {
            return Err((
                "sampling_steps",
                format!("{} must be in 1..={}", self.sampling_steps, b.diffusion_steps),
            ));
        }
        if self.samples == 0 {
            return Err(("samples", "at least one sample is needed".into()));
        }
        if self.corpus.identities.is_empty() || self.corpus.motions.is_empty() {
            return Err(("corpus", "the corpus needs at least one identity and one motion".into()));
        }
        if self.identity >= self.corpus.identities.len() {
            return Err(("identity", format!("index {} outside the corpus", self.identity)));
        }
        if self.motion >= self.corpus.motions.len() {
            return Err(("motion", format!("index {} outside the corpus", self.motion)));
        }
        for s in &self.corpus.identities {
            s.validate(self.dims()).map_err(|e| ("identities", e.to_string()))?;
        }
        for m in &self.corpus.motions {
            m.validate().map_err(|e| ("motions", e.to_string()))?;
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(("run_id", format!("`{}` is not a plain directory name", self.run_id)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(key, msg)| Error::Config(format!("{key}: {msg}")))
    }

    /// Parse and validate; errors carry `origin:line:column`.
    pub fn from_json(text: &str, origin: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.check().map_err(|(key, msg)| {
            let line = line_of(text, key).unwrap_or(1);
            Error::Config(format!("{origin}:{line}: {key}: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
