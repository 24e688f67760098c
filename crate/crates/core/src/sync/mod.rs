//! Audio-visual speaker synchronisation.
//!
//! Two encoders map lip-motion tracks and audio into a shared unit sphere.
//! The face whose embedding lies closest to the audio embedding is taken to
//! be the active speaker, and only that face feeds the visual branch.

use serde::{Deserialize, Serialize};

use crate::datagen::{ConversationSample, FaceScene, Split};
use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, RngStream, Tape, Tensor2, Var};
use crate::trainer::{clip_grad_norm, AdamW, HyperParams};

const UNIT_TOL: f64 = 1e-6;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Normalization(format!("{what} has norm {norm}, expected 1")));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Negative Euclidean distance between two unit embeddings.
pub fn sync_score(f_v: &[f64], f_a: &[f64]) -> Result<f64> {
    if f_v.len() != f_a.len() {
        return Err(Error::dim("sync_score", (1, f_v.len()), (1, f_a.len())));
    }
    check_unit(f_v, "video embedding")?;
    check_unit(f_a, "audio embedding")?;
    Ok(-distance(f_v, f_a))
}

/// Index of the best-scoring candidate; ties go to the lowest index.
pub fn select_speaker<C: AsRef<[f64]>>(candidates: &[C], f_a: &[f64]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate faces".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in candidates.iter().enumerate() {
        let s = sync_score(c.as_ref(), f_a)?;
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best.0)
}

/// `max(0, m + d_pos − d_neg)`.
pub fn rank_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<f64> {
    if d_pos < 0.0 || d_neg < 0.0 || d_pos.is_nan() || d_neg.is_nan() {
        return Err(Error::Input(format!("distances must be non-negative, got {d_pos} and {d_neg}")));
    }
    Ok((margin + (d_pos - d_neg)).max(0.0))
}

/// Scalar form of the sync objective over paired distances.
pub fn sync_loss_value(d_pos: &[f64], d_neg: &[f64], margin: f64, alpha_sync: f64) -> Result<f64> {
    if d_pos.is_empty() || d_pos.len() != d_neg.len() {
        return Err(Error::Input("need one negative per positive".into()));
    }
    if !(0.0..=1.0).contains(&alpha_sync) {
        return Err(Error::Parameter(format!("alpha_sync must lie in [0, 1], got {alpha_sync}")));
    }
    let n = d_pos.len() as f64;
    let mut rank = 0.0;
    for (&p, &q) in d_pos.iter().zip(d_neg) {
        rank += rank_loss(p, q, margin)?;
    }
    let align = d_pos.iter().sum::<f64>() / n;
    Ok(alpha_sync * rank / n + (1.0 - alpha_sync) * align)
}

/// `l2norm(tanh(xW + b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncEncoder {
    pub lin: Linear,
}

impl SyncEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_emb: usize, rng: &mut RngStream) -> Self {
        Self {
            lin: Linear::new(store, name, d_in, d_emb, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lin.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        tape.l2_normalize_rows(h)
    }
}

/// Positives, audio anchors and one negative per anchor, as row-aligned
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncBatch {
    pub positive: Tensor2,
    pub audio: Tensor2,
    pub negative: Tensor2,
    pub margin: f64,
}

impl SyncBatch {
    /// Negatives are the batch positives rotated by `offset` rows.
    pub fn from_scenes(scenes: &[&FaceScene], offset: usize, margin: f64) -> Result<Self> {
        let b = scenes.len();
        if b < 2 {
            return Err(Error::Input("a sync batch needs at least two scenes".into()));
        }
        if offset % b == 0 {
            return Err(Error::Input(format!("rotation by {offset} maps every anchor onto itself")));
        }
        let pos: Vec<&[f64]> = scenes.iter().map(|s| s.faces[s.speaker].sync.as_slice()).collect();
        let neg: Vec<&[f64]> = (0..b).map(|i| pos[(i + offset) % b]).collect();
        let audio: Vec<&[f64]> = scenes.iter().map(|s| s.audio.as_slice()).collect();
        Ok(Self {
            positive: Tensor2::from_rows(&pos)?,
            audio: Tensor2::from_rows(&audio)?,
            negative: Tensor2::from_rows(&neg)?,
            margin,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyncModel {
    pub store: ParamStore,
    pub video: SyncEncoder,
    pub audio: SyncEncoder,
}

impl SyncModel {
    pub fn new(d_video: usize, d_audio: usize, d_emb: usize, rng: &mut RngStream) -> Self {
        let mut store = ParamStore::new();
        let video = SyncEncoder::new(&mut store, "sync.video", d_video, d_emb, rng);
        let audio = SyncEncoder::new(&mut store, "sync.audio", d_audio, d_emb, rng);
        Self { store, video, audio }
    }

    /// `(d_video, d_audio)` input widths.
    pub fn input_dims(&self) -> (usize, usize) {
        (self.video.lin.d_in, self.audio.lin.d_in)
    }

    fn embed(&self, enc: &SyncEncoder, rows: &[&[f64]]) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(rows)?);
        let z = enc.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(z).clone())
    }

    /// Index of the predicted active speaker in `scene`.
    pub fn select(&self, scene: &FaceScene) -> Result<usize> {
        if scene.faces.is_empty() {
            return Err(Error::Input("scene has no faces".into()));
        }
        let faces: Vec<&[f64]> = scene.faces.iter().map(|f| f.sync.as_slice()).collect();
        let v = self.embed(&self.video, &faces)?;
        let a = self.embed(&self.audio, &[scene.audio.as_slice()])?;
        let rows: Vec<&[f64]> = (0..v.rows()).map(|r| v.row(r)).collect();
        select_speaker(&rows, a.row(0))
    }

    /// Fraction of scenes whose predicted speaker is the labelled one.
    pub fn accuracy(&self, scenes: &[FaceScene]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(Error::Input("no scenes to evaluate".into()));
        }
        let mut hits = 0usize;
        for s in scenes {
            if self.select(s)? == s.speaker {
                hits += 1;
            }
        }
        Ok(hits as f64 / scenes.len() as f64)
    }
}

/// Tape form of the sync objective; returns `(loss, d_pos, d_neg)`.
pub fn sync_objective(tape: &mut Tape, model: &SyncModel, batch: &SyncBatch, alpha_sync: f64) -> Result<(Var, Var, Var)> {
    sync_objective_in(tape, &model.store, model, batch, alpha_sync)
}

/// [`sync_objective`] with parameters read from `store`.
pub fn sync_objective_in(tape: &mut Tape, store: &ParamStore, model: &SyncModel, batch: &SyncBatch, alpha_sync: f64) -> Result<(Var, Var, Var)> {
    let pos = tape.constant(batch.positive.clone());
    let neg = tape.constant(batch.negative.clone());
    let aud = tape.constant(batch.audio.clone());
    let f_pos = model.video.forward(tape, store, pos)?;
    let f_neg = model.video.forward(tape, store, neg)?;
    let f_a = model.audio.forward(tape, store, aud)?;
    let diff = tape.sub(f_pos, f_a)?;
    let d_pos = tape.row_norms(diff)?;
    let diff = tape.sub(f_neg, f_a)?;
    let d_neg = tape.row_norms(diff)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let hinge = tape.affine(gap, 1.0, batch.margin)?;
    let hinge = tape.relu(hinge)?;
    let rank = tape.mean_all(hinge)?;
    let align = tape.mean_all(d_pos)?;
    let rank = tape.scale(rank, alpha_sync)?;
    let align = tape.scale(align, 1.0 - alpha_sync)?;
    Ok((tape.add(rank, align)?, d_pos, d_neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub accuracy: f64,
    pub untrained_accuracy: f64,
    /// Expected accuracy of a uniform guess, `mean(1 / faces)`.
    pub chance: f64,
    pub loss_history: Vec<f64>,
}

pub fn chance_level(scenes: &[FaceScene]) -> f64 {
    if scenes.is_empty() {
        return 0.0;
    }
    scenes.iter().map(|s| 1.0 / s.faces.len() as f64).sum::<f64>() / scenes.len() as f64
}

/// Trains both encoders on `train` and reports held-out selection accuracy.
pub fn train_sync(train: &[FaceScene], test: &[FaceScene], hp: &HyperParams, rng: &RngStream) -> Result<(SyncModel, SyncReport)> {
    let first = train.first().ok_or_else(|| Error::Config("sync training needs scenes".into()))?;
    let d_video = first
        .faces
        .first()
        .map(|f| f.sync.len())
        .ok_or_else(|| Error::Input("scene has no faces".into()))?;
    let mut init = rng.fork("init");
    let mut model = SyncModel::new(d_video, first.audio.len(), hp.sync_dim, &mut init);
    let untrained_accuracy = model.accuracy(test)?;
    let mut opt = AdamW::new(&model.store);
    let mut order_rng = rng.fork("order");
    let batch = hp.batch_size.max(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0u64;
    for _ in 0..hp.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let scenes: Vec<&FaceScene> = chunk.iter().map(|&i| &train[i]).collect();
            let offset = 1 + order_rng.below(chunk.len() - 1);
            let b = SyncBatch::from_scenes(&scenes, offset, hp.margin)?;
            let mut tape = Tape::new();
            let (loss, _, _) = sync_objective(&mut tape, &model, &b, hp.alpha_sync)?;
            step += 1;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("sync loss became {value}"),
                });
            }
            history.push(value);
            tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            clip_grad_norm(&mut [&mut model.store], hp.clip_norm)?;
            opt.step(&mut model.store, hp.lr_sync, hp.weight_decay)?;
        }
    }
    let accuracy = model.accuracy(test)?;
    Ok((
        model,
        SyncReport {
            accuracy,
            untrained_accuracy,
            chance: chance_level(test),
            loss_history: history,
        },
    ))
}

/// Replaces each sample's visual features with the face chosen by `model`,
/// or with the first detected face when no model is given.
pub fn select_visual_features(split: &Split, model: Option<&SyncModel>) -> Result<Vec<ConversationSample>> {
    let scenes = split
        .scenes
        .as_ref()
        .ok_or_else(|| Error::Config("speaker selection needs multi-face scenes".into()))?;
    if scenes.len() != split.samples.len() {
        return Err(Error::Input(format!("{} scenes for {} samples", scenes.len(), split.samples.len())));
    }
    let mut out = split.samples.clone();
    for (sample, scene) in out.iter_mut().zip(scenes) {
        let j = match model {
            Some(m) => m.select(scene)?,
            None => 0,
        };
        sample.feat_visual = scene.faces[j].visual.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FaceTrack;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn score_examples() {
        let a = [1.0, 0.0];
        assert_eq!(sync_score(&a, &a).unwrap(), 0.0);
        assert_eq!(sync_score(&[-1.0, 0.0], &a).unwrap(), -2.0);
        assert!((sync_score(&[0.0, 1.0], &a).unwrap() + 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(sync_score(&[2.0, 0.0], &a), Err(Error::Normalization(_))));
    }

    #[test]
    fn selection_examples() {
        let a = vec![0.6, 0.8];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(select_speaker(&[a.clone()], &a).unwrap(), 0);
        assert_eq!(select_speaker(&[a.clone(), neg], &a).unwrap(), 0);
        assert_eq!(select_speaker(&[vec![0.0, 1.0], vec![0.0, -1.0]], &[1.0, 0.0]).unwrap(), 0);
        let empty: [Vec<f64>; 0] = [];
        assert!(matches!(select_speaker(&empty, &a), Err(Error::Input(_))));
    }

    #[test]
    fn rank_and_sync_loss_examples() {
        assert_eq!(rank_loss(0.2, 2.0, 1.5).unwrap(), 0.0);
        assert!((rank_loss(0.5, 1.0, 1.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rank_loss(0.7, 0.7, 1.5).unwrap(), 1.5);
        assert!(rank_loss(-0.1, 0.0, 1.0).is_err());
        assert_eq!(sync_loss_value(&[0.0, 0.0], &[2.0, 1.9], 1.5, 0.7).unwrap(), 0.0);
        assert!((sync_loss_value(&[0.2, 0.4], &[0.0, 0.0], 1.5, 0.0).unwrap() - 0.3).abs() < 1e-15);
        let pure = sync_loss_value(&[0.5], &[1.0], 1.5, 1.0).unwrap();
        assert!((pure - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tape_objective_matches_scalar_form() {
        let mut rng = RngStream::new(4);
        let model = SyncModel::new(3, 3, 5, &mut rng);
        let scene = |rng: &mut RngStream| FaceScene {
            faces: vec![FaceTrack {
                sync: (0..3).map(|_| rng.normal()).collect(),
                visual: vec![],
            }],
            audio: (0..3).map(|_| rng.normal()).collect(),
            speaker: 0,
        };
        let scenes: Vec<FaceScene> = (0..4).map(|_| scene(&mut rng)).collect();
        let refs: Vec<&FaceScene> = scenes.iter().collect();
        let b = SyncBatch::from_scenes(&refs, 1, 1.5).unwrap();
        let mut tape = Tape::new();
        let (loss, dp, dn) = sync_objective(&mut tape, &model, &b, 0.7).unwrap();
        let expected = sync_loss_value(tape.value(dp).data(), tape.value(dn).data(), 1.5, 0.7).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
        assert!(SyncBatch::from_scenes(&refs, 4, 1.5).is_err());
    }

    #[test]
    fn encoder_rows_are_unit() {
        let mut rng = RngStream::new(5);
        let model = SyncModel::new(4, 4, 6, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::randn(7, 4, 2.0, &mut rng));
        let z = model.video.forward(&mut tape, &model.store, x).unwrap();
        let z = tape.value(z);
        for r in 0..z.rows() {
            let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_face_scenes_are_always_right() {
        let mut rng = RngStream::new(6);
        let model = SyncModel::new(2, 2, 4, &mut rng);
        let s = FaceScene {
            faces: vec![FaceTrack {
                sync: unit(&[1.0, 2.0]),
                visual: vec![],
            }],
            audio: vec![0.3, -0.1],
            speaker: 0,
        };
        assert_eq!(model.accuracy(&[s]).unwrap(), 1.0);
    }
}
