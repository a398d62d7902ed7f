//! Parametric sprite identities moving along parametric trajectories,
//! rendered into small clips, plus the on-disk benchmark layout.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Prompt token of the held-out neutral sprite.
pub const NEUTRAL_TOKEN: usize = 4;
/// Motion tokens start here; `MOTION_TOKEN_BASE` itself means "static".
pub const MOTION_TOKEN_BASE: usize = 5;
pub const STATIC_TOKEN: usize = MOTION_TOKEN_BASE;
/// Subject plus motion tokens.
pub const VOCAB: usize = 10;

pub const NEUTRAL_GRAY: [f64; 3] = [0.5, 0.5, 0.5];
const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];
const GRAIN: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn token(self) -> usize {
        self as usize
    }

    /// Whether the point `(u, v)`, in units of the circumradius and with
    /// `v` pointing down, lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.5f64.sqrt() && v.abs() <= 0.5f64.sqrt(),
            Shape::Triangle => point_in_polygon(u, v, &regular_polygon(3, 1.0, 1.0)),
            Shape::Star => point_in_polygon(u, v, &regular_polygon(5, 1.0, 0.5)),
        }
    }
}

/// Vertices of a regular (or star, when `inner < outer`) polygon with its
/// first vertex pointing up.
fn regular_polygon(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    let star = inner < outer;
    let n = if star { 2 * points } else { points };
    (0..n)
        .map(|k| {
            let a = -PI / 2.0 + TAU * k as f64 / n as f64;
            let r = if star && k % 2 == 1 { inner } else { outer };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stripes {
    /// Stripe period in pixels.
    pub period: f64,
    /// Stripe direction in radians.
    pub angle: f64,
    /// Darkening of the dark stripe, in `[0, 1]`.
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub shape: Shape,
    pub color: [f64; 3],
    pub stripes: Stripes,
    /// Circumradius as a fraction of the shorter frame side.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    LinearBounce,
    CircularOrbit,
    Zigzag,
    ScalePulse,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [
        MotionFamily::LinearBounce,
        MotionFamily::CircularOrbit,
        MotionFamily::Zigzag,
        MotionFamily::ScalePulse,
    ];

    pub fn token(self) -> usize {
        MOTION_TOKEN_BASE + 1 + self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub family: MotionFamily,
    /// Peak displacement (or radius change for scale-pulse) in pixels.
    pub amplitude: f64,
    /// Frames per cycle.
    pub period: f64,
    /// Phase offset in radians.
    pub phase: f64,
}

/// Triangle wave with period `2π`, range `[-1, 1]`, `tri(0) = 0`.
fn tri(a: f64) -> f64 {
    let x = (a / TAU).rem_euclid(1.0);
    if x < 0.25 {
        4.0 * x
    } else if x < 0.75 {
        2.0 - 4.0 * x
    } else {
        4.0 * x - 4.0
    }
}

impl MotionSpec {
    /// Sprite center offset `(dx, dy)` and radius change at frame `f`.
    pub fn offset(&self, f: usize) -> (f64, f64, f64) {
        let th = TAU * f as f64 / self.period + self.phase;
        let a = self.amplitude;
        match self.family {
            MotionFamily::LinearBounce => (a * tri(th), 0.0, 0.0),
            MotionFamily::CircularOrbit => (a * th.cos(), a * th.sin(), 0.0),
            MotionFamily::Zigzag => (a * tri(th), 0.5 * a * tri(2.0 * th), 0.0),
            MotionFamily::ScalePulse => (0.0, 0.0, a * th.sin()),
        }
    }

    /// Largest extent the trajectory adds to the sprite's reach.
    fn reach(&self) -> f64 {
        match self.family {
            MotionFamily::Zigzag => self.amplitude * 1.25f64.sqrt(),
            _ => self.amplitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) || !(self.period > 0.0) || !self.phase.is_finite() {
            return Err(Error::Config(format!("invalid motion parameters {self:?}")));
        }
        Ok(())
    }
}

/// Video geometry shared by every clip of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipDims {
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }
}

impl Default for ClipDims {
    fn default() -> Self {
        ClipDims {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

/// Supersampled fraction of the frame covered by the sprite at rest.
pub fn coverage(spec: &IdentitySpec, dims: ClipDims) -> f64 {
    let r = spec.scale * dims.height.min(dims.width) as f64;
    let (cx, cy) = (dims.width as f64 / 2.0, dims.height as f64 / 2.0);
    let mut hits = 0usize;
    for y in 0..dims.height * 2 {
        for x in 0..dims.width * 2 {
            let (px, py) = ((x as f64 + 0.5) / 2.0, (y as f64 + 0.5) / 2.0);
            if spec.shape.contains((px - cx) / r, (py - cy) / r) {
                hits += 1;
            }
        }
    }
    hits as f64 / (4 * dims.height * dims.width) as f64
}

impl IdentitySpec {
    pub fn validate(&self, dims: ClipDims) -> Result<()> {
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("color {:?} outside [0,1]", self.color)));
        }
        let s = &self.stripes;
        if !(s.period > 0.0) || !(0.0..=1.0).contains(&s.contrast) || !s.angle.is_finite() {
            return Err(Error::Config(format!("invalid stripes {s:?}")));
        }
        let area = coverage(self, dims);
        if !(0.10..=0.40).contains(&area) {
            return Err(Error::Config(format!(
                "{:?} at scale {} covers {:.3} of the frame, outside [0.10, 0.40]",
                self.shape, self.scale, area
            )));
        }
        Ok(())
    }

    fn radius(&self, dims: ClipDims) -> f64 {
        self.scale * dims.height.min(dims.width) as f64
    }
}

/// The held-out gray sprite used for every motion training clip.
pub fn neutral_identity() -> IdentitySpec {
    IdentitySpec {
        shape: Shape::Circle,
        color: NEUTRAL_GRAY,
        stripes: Stripes {
            period: 8.0,
            angle: 0.0,
            contrast: 0.0,
        },
        scale: 0.25,
    }
}

/// The default 4-identity benchmark.
pub fn default_identities() -> Vec<IdentitySpec> {
    let mk = |shape, color, period, angle: f64, contrast, scale| IdentitySpec {
        shape,
        color,
        stripes: Stripes {
            period,
            angle: angle.to_radians(),
            contrast,
        },
        scale,
    };
    vec![
        mk(Shape::Circle, [0.90, 0.20, 0.20], 6.0, 0.0, 0.30, 0.25),
        mk(Shape::Square, [0.20, 0.40, 0.90], 8.0, 45.0, 0.40, 0.3125),
        mk(Shape::Triangle, [0.20, 0.80, 0.30], 5.0, 90.0, 0.30, 0.34375),
        mk(Shape::Star, [0.95, 0.85, 0.20], 7.0, 135.0, 0.35, 0.34375),
    ]
}

/// The default 4-motion benchmark.
pub fn default_motions() -> Vec<MotionSpec> {
    let mk = |family, amplitude| MotionSpec {
        family,
        amplitude,
        period: 8.0,
        phase: 0.0,
    };
    vec![
        mk(MotionFamily::LinearBounce, 4.0),
        mk(MotionFamily::CircularOrbit, 4.0),
        mk(MotionFamily::Zigzag, 4.0),
        mk(MotionFamily::ScalePulse, 3.0),
    ]
}

/// Static background with seeded grain, identical in every frame.
pub fn render_background(dims: ClipDims, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.height * dims.width * 3;
    let data = (0..n)
        .map(|i| BACKGROUND[i % 3] + GRAIN * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(vec![dims.height, dims.width, 3], data).expect("background shape")
}

/// Rasterize `identity` following `motion` (or standing still) into an
/// `F×H×W×3` clip with 2×2 supersampling.
pub fn render_clip(identity: &IdentitySpec, motion: Option<&MotionSpec>, dims: ClipDims, seed: u64) -> Result<Tensor> {
    identity.validate(dims)?;
    let r0 = identity.radius(dims);
    let (cx0, cy0) = (dims.width as f64 / 2.0, dims.height as f64 / 2.0);
    if let Some(m) = motion {
        m.validate()?;
        let reach = r0 + m.reach();
        if reach > cx0 || reach > cy0 || r0 - m.amplitude <= 0.0 && m.family == MotionFamily::ScalePulse {
            return Err(Error::Config(format!(
                "{:?} with amplitude {} leaves the {}x{} frame",
                m.family, m.amplitude, dims.width, dims.height
            )));
        }
    }
    let bg = render_background(dims, seed);
    let frame_len = dims.height * dims.width * 3;
    let mut out = Vec::with_capacity(dims.frames * frame_len);
    let st = identity.stripes;
    let (sa, ca) = st.angle.sin_cos();
    for f in 0..dims.frames {
        let (dx, dy, dr) = motion.map_or((0.0, 0.0, 0.0), |m| m.offset(f));
        let (cx, cy, r) = (cx0 + dx, cy0 + dy, r0 + dr);
        for y in 0..dims.height {
            for x in 0..dims.width {
                let base = (y * dims.width + x) * 3;
                let mut acc = [0.0; 3];
                for sy in 0..2 {
                    for sx in 0..2 {
                        let px = x as f64 + 0.25 + 0.5 * sx as f64 - cx;
                        let py = y as f64 + 0.25 + 0.5 * sy as f64 - cy;
                        if identity.shape.contains(px / r, py / r) {
                            // Texture is attached to the sprite and scales with it.
                            let phase = TAU * (px * ca + py * sa) * (r0 / r) / st.period;
                            let shade = 1.0 - st.contrast * 0.5 * (1.0 + phase.sin());
                            for c in 0..3 {
                                acc[c] += identity.color[c] * shade;
                            }
                        } else {
                            for c in 0..3 {
                                acc[c] += bg.data()[base + c];
                            }
                        }
                    }
                }
                out.extend(acc.iter().map(|a| (a / 4.0).clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::new(dims.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub identity: Option<usize>,
    pub motion: Option<usize>,
    pub prompt: Vec<usize>,
    /// Relative to the manifest's directory.
    pub video: PathBuf,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dims: ClipDims,
    pub seed: u64,
    pub identities: Vec<IdentitySpec>,
    pub motions: Vec<MotionSpec>,
    pub clips: Vec<ClipRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn identity_clip(&self, identity: usize) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.identity == Some(identity) && c.motion.is_none())
    }

    pub fn motion_clip(&self, motion: usize) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.motion == Some(motion) && c.identity.is_none())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Prompt for a clip of `identity` (or the neutral sprite) doing `motion`
/// (or standing still).
pub fn prompt_tokens(identity: Option<&IdentitySpec>, motion: Option<&MotionSpec>) -> Vec<usize> {
    vec![
        identity.map_or(NEUTRAL_TOKEN, |i| i.shape.token()),
        motion.map_or(STATIC_TOKEN, |m| m.family.token()),
    ]
}

/// In-memory corpus: static identity clips with references and neutral
/// motion clips.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub identity_clips: Vec<Tensor>,
    pub references: Vec<Tensor>,
    pub motion_clips: Vec<Tensor>,
}

pub fn generate_corpus(identities: &[IdentitySpec], motions: &[MotionSpec], dims: ClipDims, seed: u64) -> Result<Corpus> {
    if identities.is_empty() || motions.is_empty() {
        return Err(Error::Config("corpus needs at least one identity and one motion".into()));
    }
    let neutral = neutral_identity();
    let mut clips = Vec::new();
    let (mut identity_clips, mut references, mut motion_clips) = (Vec::new(), Vec::new(), Vec::new());
    for (i, spec) in identities.iter().enumerate() {
        let v = render_clip(spec, None, dims, seed)?;
        references.push(io::frame(&v, 0)?);
        identity_clips.push(v);
        clips.push(ClipRecord {
            clip_id: format!("identity-{i}"),
            identity: Some(i),
            motion: None,
            prompt: prompt_tokens(Some(spec), None),
            video: PathBuf::from(format!("identity-{i}.drv")),
            reference: Some(PathBuf::from(format!("identity-{i}.ppm"))),
        });
    }
    for (j, m) in motions.iter().enumerate() {
        motion_clips.push(render_clip(&neutral, Some(m), dims, seed)?);
        clips.push(ClipRecord {
            clip_id: format!("motion-{j}"),
            identity: None,
            motion: Some(j),
            prompt: prompt_tokens(None, Some(m)),
            video: PathBuf::from(format!("motion-{j}.drv")),
            reference: None,
        });
    }
    Ok(Corpus {
        manifest: Manifest {
            version: 1,
            dims,
            seed,
            identities: identities.to_vec(),
            motions: motions.to_vec(),
            clips,
        },
        identity_clips,
        references,
        motion_clips,
    })
}

/// Render the corpus and write clips, references and the manifest to `dir`.
pub fn build_corpus(identities: &[IdentitySpec], motions: &[MotionSpec], dims: ClipDims, seed: u64, dir: &Path) -> Result<Manifest> {
    let corpus = generate_corpus(identities, motions, dims, seed)?;
    corpus.write(dir)?;
    Ok(corpus.manifest)
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let m = &self.manifest;
        for (k, rec) in m.clips.iter().enumerate() {
            let video = if k < self.identity_clips.len() {
                &self.identity_clips[k]
            } else {
                &self.motion_clips[k - self.identity_clips.len()]
            };
            io::write_video(&dir.join(&rec.video), video)?;
            if let (Some(path), Some(i)) = (&rec.reference, rec.identity) {
                io::write_ppm(&dir.join(path), &self.references[i])?;
            }
        }
        m.save(dir)
    }

    /// Load a corpus written by [`Corpus::write`].
    pub fn read(dir: &Path) -> Result<Corpus> {
        let manifest = Manifest::load(dir)?;
        let (mut identity_clips, mut references, mut motion_clips) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..manifest.identities.len() {
            let rec = manifest
                .identity_clip(i)
                .ok_or_else(|| Error::Invalid(format!("manifest lacks a clip for identity {i}")))?;
            let video = io::read_video(&dir.join(&rec.video))?;
            // The reference is frame 0 at full precision; the PPM is for people.
            references.push(io::frame(&video, 0)?);
            identity_clips.push(video);
        }
        for j in 0..manifest.motions.len() {
            let rec = manifest
                .motion_clip(j)
                .ok_or_else(|| Error::Invalid(format!("manifest lacks a clip for motion {j}")))?;
            motion_clips.push(io::read_video(&dir.join(&rec.video))?);
        }
        Ok(Corpus {
            manifest,
            identity_clips,
            references,
            motion_clips,
        })
    }
}

/// Random sprites (random colors and stripes, every shape including the
/// neutral one) under random motions, for backbone pretraining. Returns
/// `(clip, prompt)` pairs.
pub fn generic_clips(count: usize, dims: ClipDims, seed: u64) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [0.25, 0.3125, 0.34375, 0.34375];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let neutral = rng.random_bool(0.2);
        let identity = if neutral {
            neutral_identity()
        } else {
            let k = rng.random_range(0..4);
            IdentitySpec {
                shape: Shape::ALL[k],
                color: [rng.random(), rng.random(), rng.random()],
                stripes: Stripes {
                    period: rng.random_range(4.0..9.0),
                    angle: rng.random_range(0.0..PI),
                    contrast: rng.random_range(0.0..0.5),
                },
                scale: scales[k],
            }
        };
        let motion = if rng.random_bool(0.2) {
            None
        } else {
            let family = MotionFamily::ALL[rng.random_range(0..4)];
            let max_amp = if family == MotionFamily::ScalePulse { 3.0 } else { 4.0 };
            Some(MotionSpec {
                family,
                amplitude: rng.random_range(1.5..max_amp),
                period: rng.random_range(6.0..12.0),
                phase: rng.random_range(0.0..TAU),
            })
        };
        let clip_seed = rng.random();
        let video = render_clip(&identity, motion.as_ref(), dims, clip_seed)?;
        let prompt = prompt_tokens((!neutral).then_some(&identity), motion.as_ref());
        out.push((video, prompt));
    }
    Ok(out)
}
