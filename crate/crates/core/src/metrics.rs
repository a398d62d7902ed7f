//! Desk-scale video metrics: a fixed hand-crafted image encoder for
//! identity and temporal consistency, pixel-level flicker and smoothness,
//! and block-matching motion magnitude.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use serde::Serialize;

use crate::corpus::{default_identities, default_motions, neutral_identity, render_clip, ClipDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
const HIST_BINS: usize = 8;
const GRID: usize = 4;
/// 3 histograms, 7 moments, the luminance grid.
pub const RAW_FEATURES: usize = 3 * HIST_BINS + 7 + GRID * GRID;
const MIN_STD: f64 = 0.03;
// Third-order moments of small sprites swing with sub-pixel rendering.
const MOMENT_MIN_STD: f64 = 0.05;
const MOMENTS: std::ops::Range<usize> = 3 * HIST_BINS..3 * HIST_BINS + 7;
const SALIENCY_FLOOR: f64 = 0.05;

pub const BLOCK: usize = 8;
pub const SEARCH: i64 = 4;

fn video_dims(video: &Tensor) -> Result<[usize; 4]> {
    match video.shape() {
        &[f, h, w, 3] => Ok([f, h, w, 3]),
        other => Err(Error::InvalidTensor(format!("expected F×H×W×3 video, got {other:?}"))),
    }
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        &[h, w, 3] => Ok((h, w)),
        other => Err(Error::InvalidTensor(format!("expected H×W×3 image, got {other:?}"))),
    }
}

fn luminance(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Unnormalized features: per-channel 8-bin histograms (fractions),
/// saliency-weighted normalized central moments η20 η11 η02 η30 η21 η12
/// η03, and the mean luminance of a 4×4 grid of cells.
pub fn raw_features(img: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = image_dims(img)?;
    let px = img.data();
    let mut out = vec![0.0; RAW_FEATURES];
    let lum: Vec<f64> = px.chunks_exact(3).map(luminance).collect();
    // Features are taken over the foreground silhouette: pixels whose
    // luminance sits more than a noise floor away from the median. A large
    // flat background then does not dominate, and the features follow the
    // sprite rather than its position or size.
    let mut sorted = lum.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut sal: Vec<f64> = lum
        .iter()
        .map(|l| if (l - median).abs() > SALIENCY_FLOOR { 1.0 } else { 0.0 })
        .collect();
    let mut m00: f64 = sal.iter().sum();
    if m00 <= 0.0 {
        sal = vec![1.0; lum.len()];
        m00 = lum.len() as f64;
    }
    // Colors come from the interior only: anti-aliased rim pixels mix in
    // the background, and their share grows as a sprite shrinks.
    let interior: Vec<f64> = (0..sal.len())
        .map(|k| {
            let (y, x) = (k / w, k % w);
            let inside = |yy: usize, xx: usize| sal[yy * w + xx] > 0.0;
            let solid = inside(y, x)
                && (y == 0 || inside(y - 1, x))
                && (y + 1 == h || inside(y + 1, x))
                && (x == 0 || inside(y, x - 1))
                && (x + 1 == w || inside(y, x + 1));
            if solid { 1.0 } else { 0.0 }
        })
        .collect();
    let hist_w = if interior.iter().any(|&v| v > 0.0) { &interior } else { &sal };
    let hist_total: f64 = hist_w.iter().sum();
    // Linear soft binning between bin centers keeps values near a bin edge
    // from flipping between bins.
    for (p, s) in px.chunks_exact(3).zip(hist_w) {
        for c in 0..3 {
            let pos = (p[c].clamp(0.0, 1.0) * HIST_BINS as f64 - 0.5).clamp(0.0, (HIST_BINS - 1) as f64);
            let lo = (pos as usize).min(HIST_BINS - 2);
            let frac = pos - lo as f64;
            out[c * HIST_BINS + lo] += (1.0 - frac) * s / hist_total;
            out[c * HIST_BINS + lo + 1] += frac * s / hist_total;
        }
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for (k, l) in sal.iter().enumerate() {
        mx += l * (k % w) as f64;
        my += l * (k / w) as f64;
    }
    let (mx, my) = (mx / m00, my / m00);
    let orders = [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];
    let moments = &mut out[3 * HIST_BINS..3 * HIST_BINS + 7];
    for (slot, &(p, q)) in moments.iter_mut().zip(&orders) {
        let mu: f64 = sal
            .iter()
            .enumerate()
            .map(|(k, l)| l * ((k % w) as f64 - mx).powi(p) * ((k / w) as f64 - my).powi(q))
            .sum();
        *slot = mu / m00.powf(1.0 + (p + q) as f64 / 2.0);
    }
    // The grid spans the radius of gyration around the centroid; pixels
    // beyond it fall into the border cells.
    let gyr = ((moments[0] + moments[2]) * m00).sqrt().max(1.0);
    let grid = &mut out[3 * HIST_BINS + 7..];
    let mut weights = [0.0; GRID * GRID];
    let cell_of = |v: f64| (((v / gyr + 1.0) * GRID as f64 / 2.0).floor().max(0.0) as usize).min(GRID - 1);
    for (k, (l, s)) in lum.iter().zip(&sal).enumerate() {
        let cell = cell_of((k / w) as f64 - my) * GRID + cell_of((k % w) as f64 - mx);
        grid[cell] += s * l;
        weights[cell] += s;
    }
    for (g, n) in grid.iter_mut().zip(weights) {
        *g = if n > 0.0 { *g / n } else { median };
    }
    Ok(out)
}

/// Deterministic image encoder: raw features z-scored with fixed
/// constants, then truncated or zero-padded to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    mean: Vec<f64>,
    std: Vec<f64>,
    dim: usize,
}

impl ToyEncoder {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, dim: usize) -> Result<Self> {
        if mean.len() != RAW_FEATURES || std.len() != RAW_FEATURES || dim == 0 {
            return Err(Error::Invalid(format!(
                "encoder needs {RAW_FEATURES} constants and a positive width"
            )));
        }
        Ok(ToyEncoder {
            mean,
            std: std
                .into_iter()
                .enumerate()
                .map(|(j, s)| if MOMENTS.contains(&j) { s.max(MOMENT_MIN_STD) } else { s.max(MIN_STD) })
                .collect(),
            dim,
        })
    }

    /// Constants fitted once to every frame of the default sprites (the
    /// four identities and the neutral one), each static and under every
    /// default motion.
    pub fn standard() -> &'static ToyEncoder {
        static ENC: OnceLock<ToyEncoder> = OnceLock::new();
        ENC.get_or_init(|| {
            let dims = ClipDims::default();
            let mut rows = Vec::new();
            let sprites = default_identities().into_iter().chain([neutral_identity()]);
            for spec in sprites {
                let motions = std::iter::once(None).chain(default_motions().into_iter().map(Some));
                for m in motions {
                    let v = render_clip(&spec, m.as_ref(), dims, 0).expect("default specs render");
                    for f in 0..dims.frames {
                        rows.push(raw_features(&frame_of(&v, f)).expect("frame shape"));
                    }
                }
            }
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..RAW_FEATURES).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let std = (0..RAW_FEATURES)
                .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
                .collect();
            ToyEncoder::new(mean, std, EMBED_DIM).expect("calibrated constants")
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, img: &Tensor) -> Result<Vec<f64>> {
        let raw = raw_features(img)?;
        let mut z: Vec<f64> = raw
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        z.resize(self.dim, 0.0);
        Ok(z)
    }

    pub fn embed_frames(&self, video: &Tensor) -> Result<Vec<Vec<f64>>> {
        let [f, ..] = video_dims(video)?;
        (0..f).map(|t| self.embed(&frame_of(video, t))).collect()
    }
}

fn frame_of(video: &Tensor, f: usize) -> Tensor {
    let s = video.shape();
    let n = s[1] * s[2] * s[3];
    Tensor::new(vec![s[1], s[2], s[3]], video.data()[f * n..(f + 1) * n].to_vec()).expect("frame shape")
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine of each frame embedding to the reference embedding, plus
/// the per-frame values.
pub fn similarity_to_reference(frames: &[Vec<f64>], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if frames.is_empty() {
        return Err(Error::Invalid("no frames".into()));
    }
    let per: Vec<f64> = frames.iter().map(|f| cosine(f, reference)).collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

pub fn identity_similarity(enc: &ToyEncoder, video: &Tensor, reference: &Tensor) -> Result<(f64, Vec<f64>)> {
    let frames = enc.embed_frames(video)?;
    similarity_to_reference(&frames, &enc.embed(reference)?)
}

/// One minus the mean absolute difference between adjacent frames.
pub fn temporal_flickering(video: &Tensor) -> Result<f64> {
    let [f, h, w, c] = video_dims(video)?;
    if f < 2 {
        return Err(Error::Invalid(format!("flickering needs at least 2 frames, got {f}")));
    }
    let n = h * w * c;
    let d = video.data();
    let total: f64 = (0..(f - 1) * n).map(|i| (d[i + n] - d[i]).abs()).sum();
    Ok(1.0 - total / ((f - 1) * n) as f64)
}

/// One minus half the mean absolute second temporal difference.
pub fn motion_smoothness(video: &Tensor) -> Result<f64> {
    let [f, h, w, c] = video_dims(video)?;
    if f < 3 {
        return Err(Error::Invalid(format!("smoothness needs at least 3 frames, got {f}")));
    }
    let n = h * w * c;
    let d = video.data();
    let total: f64 = (n..(f - 1) * n).map(|i| (d[i + n] - 2.0 * d[i] + d[i - n]).abs()).sum();
    Ok(1.0 - total / (2.0 * ((f - 2) * n) as f64))
}

/// Mean cosine between encoder embeddings of adjacent frames.
pub fn temporal_consistency(enc: &ToyEncoder, video: &Tensor) -> Result<f64> {
    let frames = enc.embed_frames(video)?;
    consistency_of(&frames)
}

pub fn consistency_of(frames: &[Vec<f64>]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Invalid("consistency needs at least 2 frames".into()));
    }
    let sims: Vec<f64> = frames.windows(2).map(|p| cosine(&p[0], &p[1])).collect::<Result<_>>()?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Search order: by squared magnitude, then `dy`, then `dx`. The first
/// candidate reaching the minimum SAD wins.
fn displacements() -> Vec<(i64, i64)> {
    let mut d: Vec<(i64, i64)> = (-SEARCH..=SEARCH)
        .flat_map(|dy| (-SEARCH..=SEARCH).map(move |dx| (dy, dx)))
        .collect();
    d.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    d
}

/// Matched displacement of every `8×8` block of frame `a` into frame `b`
/// (wraparound indexing), in block raster order.
pub fn block_flow(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> Vec<(i64, i64)> {
    let cands = displacements();
    let (hi, wi) = (h as i64, w as i64);
    let mut out = Vec::with_capacity((h / BLOCK) * (w / BLOCK));
    for by in 0..h / BLOCK {
        for bx in 0..w / BLOCK {
            let mut best = (f64::INFINITY, (0, 0));
            for &(dy, dx) in &cands {
                let mut sad = 0.0;
                for i in 0..BLOCK {
                    let y = by * BLOCK + i;
                    let ty = (y as i64 + dy).rem_euclid(hi) as usize;
                    for j in 0..BLOCK {
                        let x = bx * BLOCK + j;
                        let tx = (x as i64 + dx).rem_euclid(wi) as usize;
                        let (p, q) = ((y * w + x) * c, (ty * w + tx) * c);
                        for k in 0..c {
                            sad += (a[p + k] - b[q + k]).abs();
                        }
                    }
                }
                if sad < best.0 {
                    best = (sad, (dy, dx));
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Mean block-matching displacement magnitude in px/frame.
pub fn dynamic_degree(video: &Tensor) -> Result<f64> {
    let [f, h, w, c] = video_dims(video)?;
    if f < 2 {
        return Err(Error::Invalid(format!("dynamic degree needs at least 2 frames, got {f}")));
    }
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::Invalid(format!("frame {h}x{w} is not divisible into {BLOCK}x{BLOCK} blocks")));
    }
    let n = h * w * c;
    let d = video.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..f - 1 {
        for (dy, dx) in block_flow(&d[t * n..(t + 1) * n], &d[(t + 1) * n..(t + 2) * n], h, w, c) {
            total += ((dy * dy + dx * dx) as f64).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Distance of a dynamic degree from the mean over reference degrees.
pub fn dd_deviation_from(dd: f64, reference_dds: &[f64]) -> Result<f64> {
    if reference_dds.is_empty() {
        return Err(Error::Invalid("dd_deviation needs at least one reference".into()));
    }
    let mean = reference_dds.iter().sum::<f64>() / reference_dds.len() as f64;
    Ok((dd - mean).abs())
}

pub fn dd_deviation(video: &Tensor, references: &[Tensor]) -> Result<f64> {
    let refs: Vec<f64> = references.iter().map(dynamic_degree).collect::<Result<_>>()?;
    dd_deviation_from(dynamic_degree(video)?, &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub clip_id: String,
    pub identity_similarity: f64,
    pub temporal_flickering: f64,
    pub motion_smoothness: f64,
    pub temporal_consistency: f64,
    pub dynamic_degree: f64,
    pub dd_deviation: f64,
    pub identity_trace: Vec<f64>,
}

pub fn evaluate(enc: &ToyEncoder, clip_id: &str, video: &Tensor, reference: &Tensor, motion_refs: &[Tensor]) -> Result<MetricReport> {
    let frames = enc.embed_frames(video)?;
    let (identity_similarity, identity_trace) = similarity_to_reference(&frames, &enc.embed(reference)?)?;
    let dd = dynamic_degree(video)?;
    let refs: Vec<f64> = motion_refs.iter().map(dynamic_degree).collect::<Result<_>>()?;
    Ok(MetricReport {
        clip_id: clip_id.to_owned(),
        identity_similarity,
        temporal_flickering: temporal_flickering(video)?,
        motion_smoothness: motion_smoothness(video)?,
        temporal_consistency: consistency_of(&frames)?,
        dynamic_degree: dd,
        dd_deviation: dd_deviation_from(dd, &refs)?,
        identity_trace,
    })
}

pub const REPORT_HEADER: &str = "clip_id,identity_sim,t_flicker,motion_smooth,t_cons,dynamic_degree,dd_deviation";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.clip_id,
            self.identity_similarity,
            self.temporal_flickering,
            self.motion_smoothness,
            self.temporal_consistency,
            self.dynamic_degree,
            self.dd_deviation
        )
    }
}

pub fn write_report_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MotionSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_clip(f: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..f * h * w * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![f, h, w, 3], data).unwrap()
    }

    fn repeat(img: &Tensor, f: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..f {
            data.extend_from_slice(img.data());
        }
        let s = img.shape();
        Tensor::new(vec![f, s[0], s[1], s[2]], data).unwrap()
    }

    #[test]
    fn static_clip_extremes() {
        let img = frame_of(&rand_clip(1, 16, 16, 1), 0);
        let v = repeat(&img, 4);
        assert_eq!(temporal_flickering(&v).unwrap(), 1.0);
        assert_eq!(motion_smoothness(&v).unwrap(), 1.0);
        assert!((temporal_consistency(ToyEncoder::standard(), &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(dynamic_degree(&v).unwrap(), 0.0);
        let (sim, _) = identity_similarity(ToyEncoder::standard(), &v, &img).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_frames_flicker_fully() {
        let data: Vec<f64> = (0..4).flat_map(|f| vec![(f % 2) as f64; 8 * 8 * 3]).collect();
        let v = Tensor::new(vec![4, 8, 8, 3], data).unwrap();
        assert_eq!(temporal_flickering(&v).unwrap(), 0.0);
    }

    #[test]
    fn linear_ramp_is_perfectly_smooth() {
        let data: Vec<f64> = (0..5).flat_map(|f| vec![0.2 * f as f64; 8 * 8 * 3]).collect();
        let v = Tensor::new(vec![5, 8, 8, 3], data).unwrap();
        assert!((motion_smoothness(&v).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frame_count_preconditions() {
        let v = rand_clip(1, 8, 8, 2);
        assert!(temporal_flickering(&v).is_err());
        assert!(motion_smoothness(&rand_clip(2, 8, 8, 2)).is_err());
        assert!(dynamic_degree(&rand_clip(2, 12, 8, 2)).is_err());
        assert!(dd_deviation_from(1.0, &[]).is_err());
    }

    #[test]
    fn orthogonal_embeddings_have_zero_similarity() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 2.0, 0.0];
        assert_eq!(similarity_to_reference(&[a.clone()], &b).unwrap().0, 0.0);
        assert_eq!(consistency_of(&[a, b]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dd_deviation_examples() {
        assert!((dd_deviation_from(5.0, &[9.04]).unwrap() - 4.04).abs() < 1e-12);
        let v = rand_clip(3, 16, 16, 4);
        assert_eq!(dd_deviation(&v, &[v.clone()]).unwrap(), 0.0);
    }

    #[test]
    fn wraparound_shift_is_measured_exactly() {
        let base = frame_of(&rand_clip(1, 16, 16, 5), 0);
        for k in 1..=4usize {
            let mut data = Vec::new();
            for f in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        let sx = (x + 16 * 4 - f * k) % 16;
                        data.extend_from_slice(&base.data()[(y * 16 + sx) * 3..(y * 16 + sx) * 3 + 3]);
                    }
                }
            }
            let v = Tensor::new(vec![3, 16, 16, 3], data).unwrap();
            assert_eq!(dynamic_degree(&v).unwrap(), k as f64);
        }
    }

    #[test]
    fn encoder_is_deterministic_and_sized() {
        let enc = ToyEncoder::standard();
        let img = frame_of(&rand_clip(1, 32, 32, 6), 0);
        assert_eq!(enc.embed(&img).unwrap(), enc.embed(&img).unwrap());
        assert_eq!(enc.embed(&img).unwrap().len(), EMBED_DIM);
        let padded = ToyEncoder::new(vec![0.0; RAW_FEATURES], vec![1.0; RAW_FEATURES], 50).unwrap();
        let e = padded.embed(&img).unwrap();
        assert_eq!(e.len(), 50);
        assert!(e[RAW_FEATURES..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identities_are_separable() {
        let enc = ToyEncoder::standard();
        let dims = ClipDims::default();
        let ids = default_identities();
        let refs: Vec<Vec<f64>> = ids
            .iter()
            .map(|s| enc.embed(&frame_of(&render_clip(s, None, dims, 3).unwrap(), 0)).unwrap())
            .collect();
        for i in 0..refs.len() {
            for j in i + 1..refs.len() {
                let c = cosine(&refs[i], &refs[j]).unwrap();
                assert!(c < 0.9, "{i} vs {j}: {c}");
            }
        }
        let moving: Vec<MotionSpec> = default_motions();
        for (s, r) in ids.iter().zip(&refs) {
            for m in &moving {
                let v = render_clip(s, Some(m), dims, 11).unwrap();
                let (sim, _) = similarity_to_reference(&enc.embed_frames(&v).unwrap(), r).unwrap();
                assert!(sim > 0.95, "{:?} {:?}: {sim}", s.shape, m.family);
            }
        }
    }
}
