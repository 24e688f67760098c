//! Synthetic conversations standing in for backbone features.
//!
//! Each class owns an anchor in a small latent space shared by all three
//! modalities. An utterance draws a latent point `anchor + ξ`, and each
//! modality observes a random linear image of that point plus isotropic
//! noise whose scale is a multiple of the modality's mean anchor spacing.
//! Audio and visual observations are produced frame by frame and pooled.
//!
//! Every utterance also carries a multi-face scene: one lip-motion track per
//! visible participant and an audio track correlated with the speaker's lips.

use serde::{Deserialize, Serialize};

use crate::datagen::profile::ClassProfile;
use crate::datagen::sample::{is_held_out, temporal_pool, ConversationSample, Dims, FrameBlock, Modality};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dims: Dims,
    /// Per-modality noise (text, audio, visual) as a multiple of anchor spacing.
    pub noise: [f64; 3],
    pub latent_dim: usize,
    /// Spread of the shared latent deviation relative to latent anchor spacing.
    pub latent_spread: f64,
    pub turns: (usize, usize),
    pub speakers: (usize, usize),
    pub frames: (usize, usize),
    pub sync_dim: usize,
    pub sync_latent: usize,
    pub sync_noise: f64,
    /// Mean length of same-label runs in utterance order; 1 gives
    /// independent labels.
    pub label_run: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            dims: Dims::default(),
            noise: [0.5, 1.0, 1.5],
            latent_dim: 16,
            latent_spread: 0.3,
            turns: (5, 15),
            speakers: (2, 6),
            frames: (3, 8),
            sync_dim: 16,
            sync_latent: 8,
            sync_noise: 0.1,
            label_run: 3.0,
        }
    }
}

/// One visible participant during an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    /// Lip-motion features fed to the sync video encoder.
    pub sync: Vec<f64>,
    /// Pooled expression features used for emotion recognition.
    pub visual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceScene {
    pub faces: Vec<FaceTrack>,
    /// Audio features fed to the sync audio encoder.
    pub audio: Vec<f64>,
    /// Index of the active speaker within `faces`.
    pub speaker: usize,
}

/// Samples with optional index-aligned scenes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<ConversationSample>,
    pub scenes: Option<Vec<FaceScene>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub class_count: usize,
    pub dims: Dims,
    pub train: Split,
    pub test: Split,
}

impl SyntheticDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &ConversationSample> {
        self.train.samples.iter().chain(&self.test.samples)
    }
}

/// Largest-remainder allocation of `n` labels to the profile proportions.
pub fn allocate_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn conversation_lengths(n: usize, turns: (usize, usize), rng: &mut RngStream) -> Vec<usize> {
    let (lo, hi) = turns;
    let mut out = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        if remaining <= hi {
            out.push(remaining);
            break;
        }
        // keep the remainder at least `lo` long
        let max = hi.min(remaining - lo);
        let len = rng.range_inclusive(lo, max.max(lo));
        out.push(len);
        remaining -= len;
    }
    out
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor2 {
    Tensor2::randn(rows, cols, std, rng)
}

fn mat_vec(m: &Tensor2, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += dist(&points[i], &points[j]);
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = f64::from(*x as f32);
    }
}

struct ModalitySpace {
    projection: Tensor2,
    noise_std: f64,
}

struct World<'a> {
    profile: &'a ClassProfile,
    cfg: &'a SyntheticConfig,
    anchors: Vec<Vec<f64>>,
    spaces: [ModalitySpace; 3],
    sync_video: Tensor2,
    sync_audio: Tensor2,
}

impl World<'_> {
    fn latent_point(&self, label: usize, rng: &mut RngStream) -> Vec<f64> {
        self.anchors[label].iter().map(|a| a + self.cfg.latent_spread * rng.normal()).collect()
    }

    fn clean(&self, m: Modality, label: usize, latent: &[f64]) -> Vec<f64> {
        // rescale the anchor component by the class separability
        let sep = self.profile.separability[label][m.index()];
        let shifted: Vec<f64> = latent.iter().zip(&self.anchors[label]).map(|(z, a)| z - a + sep * a).collect();
        mat_vec(&self.spaces[m.index()].projection, &shifted)
    }

    fn observe_text(&self, label: usize, latent: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let std = self.spaces[0].noise_std;
        let mut v = self.clean(Modality::Text, label, latent);
        for x in &mut v {
            *x += std * rng.normal();
        }
        quantize(&mut v);
        v
    }

    /// Frame-level observation pooled over time; per-frame noise is scaled by
    /// `sqrt(T)` so the pooled noise has the configured spread.
    fn observe_frames(&self, m: Modality, label: usize, latent: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let clean = self.clean(m, label, latent);
        let t = rng.range_inclusive(self.cfg.frames.0, self.cfg.frames.1);
        let std = self.spaces[m.index()].noise_std * (t as f64).sqrt();
        let d = clean.len();
        let mut frames = Tensor2::zeros(t, d);
        for r in 0..t {
            for (dst, c) in frames.row_mut(r).iter_mut().zip(&clean) {
                *dst = c + std * rng.normal();
            }
        }
        let mut pooled = temporal_pool(&FrameBlock { frames, modality: m })?;
        quantize(&mut pooled);
        Ok(pooled)
    }

    fn sync_track(&self, proj: &Tensor2, lips: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let mut v = mat_vec(proj, lips);
        for x in &mut v {
            *x += self.cfg.sync_noise * rng.normal();
        }
        quantize(&mut v);
        v
    }
}

fn draw_label(proportions: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    proportions.len() - 1
}

/// Cuts each class count into geometric runs with mean `mean_run` and
/// shuffles the runs, so counts stay exact while neighbouring utterances
/// tend to share an emotion.
fn label_sequence(counts: &[usize], mean_run: f64, rng: &mut RngStream) -> Vec<usize> {
    let stop = 1.0 / mean_run;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        let mut left = k;
        while left > 0 {
            let mut len = 1;
            while len < left && rng.next_f64() >= stop {
                len += 1;
            }
            runs.push((c, len));
            left -= len;
        }
    }
    rng.shuffle(&mut runs);
    runs.into_iter().flat_map(|(c, len)| std::iter::repeat(c).take(len)).collect()
}

/// Generates `cfg.n` utterances with labels allocated exactly to the profile
/// proportions, grouped into conversations and split by conversation id.
pub fn gen_synthetic_dataset(profile: &ClassProfile, cfg: &SyntheticConfig, rng: &RngStream) -> Result<SyntheticDataset> {
    profile.validate()?;
    let classes = profile.num_classes();
    if classes > 256 {
        return Err(Error::Generation(format!("{classes} classes exceed the u8 label range")));
    }
    if cfg.n < classes {
        return Err(Error::Generation(format!("n = {} is smaller than the class count {classes}", cfg.n)));
    }
    if cfg.noise.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Generation(format!("noise must be positive, got {:?}", cfg.noise)));
    }
    if cfg.turns.0 == 0 || cfg.turns.0 > cfg.turns.1 || cfg.speakers.0 == 0 || cfg.speakers.0 > cfg.speakers.1 {
        return Err(Error::Generation("invalid turn or speaker range".into()));
    }
    if !(cfg.label_run >= 1.0) {
        return Err(Error::Generation(format!("label_run must be at least 1, got {}", cfg.label_run)));
    }
    if cfg.frames.0 == 0 || cfg.frames.0 > cfg.frames.1 || cfg.latent_dim == 0 {
        return Err(Error::Generation("invalid frame range or latent dimension".into()));
    }
    let counts = allocate_counts(&profile.proportions, cfg.n);
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Generation(format!(
            "class `{}` receives no samples at n = {}",
            profile.class_names[c], cfg.n
        )));
    }

    let labels = label_sequence(&counts, cfg.label_run, &mut rng.fork("labels"));

    let mut space_rng = rng.fork("spaces");
    let k = cfg.latent_dim;
    let mut anchors: Vec<Vec<f64>> = (0..classes).map(|_| (0..k).map(|_| space_rng.normal()).collect()).collect();
    let spacing = mean_pairwise_distance(&anchors);
    for a in &mut anchors {
        for x in a.iter_mut() {
            *x /= spacing;
        }
    }
    let make_space = |d: usize, noise: f64, rng: &mut RngStream| {
        let projection = gaussian_matrix(d, k, (1.0 / k as f64).sqrt(), rng);
        let images: Vec<Vec<f64>> = anchors.iter().map(|a| mat_vec(&projection, a)).collect();
        let spacing = mean_pairwise_distance(&images);
        ModalitySpace {
            projection,
            noise_std: noise * spacing,
        }
    };
    let spaces = [
        make_space(cfg.dims.text, cfg.noise[0], &mut space_rng),
        make_space(cfg.dims.audio, cfg.noise[1], &mut space_rng),
        make_space(cfg.dims.visual, cfg.noise[2], &mut space_rng),
    ];
    let ks = cfg.sync_latent;
    let world = World {
        profile,
        cfg,
        anchors,
        spaces,
        sync_video: gaussian_matrix(cfg.sync_dim, ks, (1.0 / ks as f64).sqrt(), &mut space_rng),
        sync_audio: gaussian_matrix(cfg.sync_dim, ks, (1.0 / ks as f64).sqrt(), &mut space_rng),
    };

    let mut structure_rng = rng.fork("structure");
    let lengths = conversation_lengths(cfg.n, cfg.turns, &mut structure_rng);
    let mut feat_rng = rng.fork("features");
    let mut train = Split {
        samples: Vec::new(),
        scenes: Some(Vec::new()),
    };
    let mut test = train.clone();
    let mut cursor = 0;
    for (conv, &len) in lengths.iter().enumerate() {
        let conv_id = conv as u32;
        let n_speakers = structure_rng.range_inclusive(cfg.speakers.0, cfg.speakers.1);
        let split = if is_held_out(conv_id) { &mut test } else { &mut train };
        for u in 0..len {
            let label = labels[cursor];
            cursor += 1;
            let speaker = structure_rng.below(n_speakers);
            let latent = world.latent_point(label, &mut feat_rng);
            let feat_text = world.observe_text(label, &latent, &mut feat_rng);
            let feat_audio = world.observe_frames(Modality::Audio, label, &latent, &mut feat_rng)?;

            // participants in a freshly shuffled detection order
            let mut order: Vec<usize> = (0..n_speakers).collect();
            structure_rng.shuffle(&mut order);
            let speaker_slot = order.iter().position(|&p| p == speaker).expect("speaker is visible");
            let speaker_lips: Vec<f64> = (0..ks).map(|_| feat_rng.normal()).collect();
            let mut faces = Vec::with_capacity(n_speakers);
            for &p in &order {
                if p == speaker {
                    faces.push(FaceTrack {
                        sync: world.sync_track(&world.sync_video, &speaker_lips, &mut feat_rng),
                        visual: world.observe_frames(Modality::Visual, label, &latent, &mut feat_rng)?,
                    });
                } else {
                    let lips: Vec<f64> = (0..ks).map(|_| feat_rng.normal()).collect();
                    let other = draw_label(&profile.proportions, &mut feat_rng);
                    let other_latent = world.latent_point(other, &mut feat_rng);
                    faces.push(FaceTrack {
                        sync: world.sync_track(&world.sync_video, &lips, &mut feat_rng),
                        visual: world.observe_frames(Modality::Visual, other, &other_latent, &mut feat_rng)?,
                    });
                }
            }
            let audio = world.sync_track(&world.sync_audio, &speaker_lips, &mut feat_rng);
            let feat_visual = faces[speaker_slot].visual.clone();
            split.samples.push(ConversationSample {
                conversation_id: conv_id,
                utterance_index: u as u32,
                speaker_id: speaker as u32,
                label,
                feat_text,
                feat_audio,
                feat_visual,
            });
            split.scenes.as_mut().expect("generated splits carry scenes").push(FaceScene {
                faces,
                audio,
                speaker: speaker_slot,
            });
        }
    }
    Ok(SyntheticDataset {
        class_count: classes,
        dims: cfg.dims,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::profile::meld_profile;

    fn small(n: usize) -> SyntheticConfig {
        SyntheticConfig {
            n,
            dims: Dims::new(8, 8, 8),
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn too_few_samples_is_a_generation_error() {
        let err = gen_synthetic_dataset(&meld_profile(), &small(3), &RngStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn zero_count_class_is_a_generation_error() {
        // 7 classes at n = 10: disgust and fear round to zero
        let err = gen_synthetic_dataset(&meld_profile(), &small(10), &RngStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn allocation_is_exact() {
        let counts = allocate_counts(&meld_profile().proportions, 10_000);
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
        assert_eq!(counts[4], 4715);
    }

    #[test]
    fn conversations_respect_turn_bounds() {
        let ds = gen_synthetic_dataset(&meld_profile(), &small(1000), &RngStream::new(5)).unwrap();
        let groups = crate::datagen::sample::group_conversations(&ds.train.samples);
        for g in groups {
            assert!((5..=15).contains(&g.len()), "length {}", g.len());
        }
        for scene in ds.train.scenes.as_ref().unwrap() {
            assert!((2..=6).contains(&scene.faces.len()));
            assert!(scene.speaker < scene.faces.len());
        }
        assert!(ds.test.samples.iter().all(|s| is_held_out(s.conversation_id)));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = gen_synthetic_dataset(&meld_profile(), &small(500), &RngStream::new(9)).unwrap();
        let b = gen_synthetic_dataset(&meld_profile(), &small(500), &RngStream::new(9)).unwrap();
        assert!(a.all_samples().zip(b.all_samples()).all(|(x, y)| x.bit_eq(y)));
        let c = gen_synthetic_dataset(&meld_profile(), &small(500), &RngStream::new(10)).unwrap();
        assert!(!a.all_samples().zip(c.all_samples()).all(|(x, y)| x.bit_eq(y)));
    }
}
