use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{group_conversations, is_held_out, ConversationSample, Dims, FeatureSet, Modality, Split, SyntheticDataset};
use crate::distill::{kd_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{argmax_rows, MetricsReport};
use crate::fusion::{quality_stats, FusionConfig, FusionInput, FusionModel, QualityEma};
use crate::graphnets::{build_conversation_graph, ConvGraph, GraphNet, GraphNetSpec, PreparedGraph};
use crate::losses::{cross_entropy, fusion_loss, total_loss_value};
use crate::numerics::{ParamStore, RngStream, Tape, Tensor2, Var};
use crate::sync::{select_visual_features, train_sync, SyncModel, SyncReport};
use crate::trainer::optim::{clip_grad_norm, AdamW};
use crate::trainer::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sync,
    Teacher,
    Distill,
    Fusion,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Sync, Stage::Teacher, Stage::Distill, Stage::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sync => "sync",
            Stage::Teacher => "teacher",
            Stage::Distill => "distill",
            Stage::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Component removals for the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Skip speaker selection; the first detected face feeds the visual branch.
    pub no_speaker_id: bool,
    /// Train fusion with plain cross-entropy.
    pub no_fusion_loss: bool,
    /// Train students on hard labels only.
    pub no_kd: bool,
    /// Drop the supervised contrastive term.
    pub no_contrastive: bool,
}

pub const ARMS: [&str; 5] = ["full", "no_speaker_id", "no_fusion_loss", "no_kd", "no_contrastive"];

impl AblationFlags {
    pub fn arm(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "full" => {}
            "no_speaker_id" => f.no_speaker_id = true,
            "no_fusion_loss" => f.no_fusion_loss = true,
            "no_kd" => f.no_kd = true,
            "no_contrastive" => f.no_contrastive = true,
            other => return Err(Error::Config(format!("unknown ablation arm `{other}`"))),
        }
        Ok(f)
    }
}

/// Labelled train/test data with class names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub class_names: Vec<String>,
    pub dims: Dims,
    pub train: Split,
    pub test: Split,
}

impl TrainData {
    pub fn from_synthetic(ds: SyntheticDataset, class_names: &[String]) -> Result<Self> {
        if class_names.len() != ds.class_count {
            return Err(Error::Config(format!("{} class names for {} classes", class_names.len(), ds.class_count)));
        }
        Ok(Self {
            class_names: class_names.to_vec(),
            dims: ds.dims,
            train: ds.train,
            test: ds.test,
        })
    }

    /// Splits ingested features by the shared held-out rule. Containers carry
    /// no face scenes.
    pub fn from_features(fs: FeatureSet, class_names: Option<Vec<String>>) -> Result<Self> {
        let class_names = class_names.unwrap_or_else(|| (0..fs.class_count).map(|c| format!("class{c}")).collect());
        if class_names.len() != fs.class_count {
            return Err(Error::Config(format!("{} class names for {} classes", class_names.len(), fs.class_count)));
        }
        let (test, train): (Vec<_>, Vec<_>) = fs.samples.into_iter().partition(|s| is_held_out(s.conversation_id));
        if train.is_empty() || test.is_empty() {
            return Err(Error::Input("both train and held-out conversations are required".into()));
        }
        Ok(Self {
            class_names,
            dims: fs.dims,
            train: Split {
                samples: train,
                scenes: None,
            },
            test: Split { samples: test, scenes: None },
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Default stage list: sync only when face scenes are available.
    pub fn default_stages(&self) -> Vec<Stage> {
        if self.train.scenes.is_some() {
            Stage::ALL.to_vec()
        } else {
            Stage::ALL[1..].to_vec()
        }
    }
}

/// Whole conversations grouped into one disjoint-union graph.
#[derive(Debug, Clone)]
pub struct Pack {
    pub indices: Vec<usize>,
    pub graph: PreparedGraph,
}

struct ConversationIndex {
    groups: Vec<Vec<usize>>,
    graphs: Vec<ConvGraph>,
}

impl ConversationIndex {
    fn new(samples: &[ConversationSample], window: usize) -> Result<Self> {
        let groups = group_conversations(samples);
        let graphs = groups
            .iter()
            .map(|g| {
                let refs: Vec<&ConversationSample> = g.iter().map(|&i| &samples[i]).collect();
                build_conversation_graph(&refs, window)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups, graphs })
    }

    /// Packs conversations in `order` until each pack has `min_nodes` nodes.
    fn packs(&self, order: &[usize], min_nodes: usize) -> Vec<Pack> {
        let mut out = Vec::new();
        let mut idx = Vec::new();
        let mut graphs = Vec::new();
        for &c in order {
            idx.extend_from_slice(&self.groups[c]);
            graphs.push(self.graphs[c].clone());
            if idx.len() >= min_nodes {
                out.push(Pack {
                    indices: std::mem::take(&mut idx),
                    graph: PreparedGraph::new(ConvGraph::disjoint_union(&std::mem::take(&mut graphs))),
                });
            }
        }
        if !idx.is_empty() {
            out.push(Pack {
                indices: idx,
                graph: PreparedGraph::new(ConvGraph::disjoint_union(&graphs)),
            });
        }
        out
    }

    fn len(&self) -> usize {
        self.groups.len()
    }
}

fn rows_of(samples: &[ConversationSample], idx: &[usize], m: Modality) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| samples[i].features(m)).collect();
    Tensor2::from_rows(&rows)
}

fn gather(t: &Tensor2, idx: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(idx.len(), t.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}

fn softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

const EVAL_PACK: usize = 64;

/// Hidden states and logits of `net` for every sample, in sample order.
pub fn predict_samples(net: &GraphNet, samples: &[ConversationSample], m: Modality, window: usize) -> Result<(Tensor2, Tensor2)> {
    let index = ConversationIndex::new(samples, window)?;
    let order: Vec<usize> = (0..index.len()).collect();
    let mut hidden = Tensor2::zeros(samples.len(), net.spec.hidden);
    let mut logits = Tensor2::zeros(samples.len(), net.spec.classes);
    for pack in index.packs(&order, EVAL_PACK) {
        let x = rows_of(samples, &pack.indices, m)?;
        let (h, l) = net.predict(&pack.graph, &x)?;
        for (r, &i) in pack.indices.iter().enumerate() {
            hidden.row_mut(i).copy_from_slice(h.row(r));
            logits.row_mut(i).copy_from_slice(l.row(r));
        }
    }
    Ok((hidden, logits))
}

fn step_store(store: &mut ParamStore, tape: &Tape, opt: &mut AdamW, lr: f64, hp: &HyperParams) -> Result<()> {
    store.zero_grad();
    tape.accumulate_param_grads(store);
    clip_grad_norm(&mut [&mut *store], hp.clip_norm)?;
    opt.step(store, lr, hp.weight_decay)
}

fn check_loss(value: f64, stage: Stage, step: u64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("{} loss became {value}", stage.name()),
        });
    }
    Ok(())
}

/// Trains one graph network over shuffled conversation packs. With
/// `teacher` logits the objective is the distillation loss, otherwise
/// cross-entropy. Returns the mean loss per epoch.
fn train_graph_net(
    net: &mut GraphNet,
    samples: &[ConversationSample],
    m: Modality,
    teacher: Option<(&Tensor2, DistillConfig)>,
    lr: f64,
    hp: &HyperParams,
    rng: &RngStream,
    stage: Stage,
) -> Result<Vec<f64>> {
    let index = ConversationIndex::new(samples, hp.graph_window)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    let mut order_rng = rng.fork("order");
    let mut opt = AdamW::new(&net.store);
    let drop_rng = rng.fork("dropout");
    let mut history = Vec::with_capacity(hp.epochs);
    let mut step = 0u64;
    for _ in 0..hp.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0usize;
        for pack in index.packs(&order, hp.batch_size) {
            let y: Vec<usize> = pack.indices.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(rows_of(samples, &pack.indices, m)?);
            let out = net.forward_train(&mut tape, &pack.graph, x, hp.dropout, &mut drop_rng.fork_index(step))?;
            let loss = match teacher {
                Some((t, cfg)) => {
                    let tl = tape.constant(gather(t, &pack.indices));
                    kd_loss(&mut tape, out.logits, tl, &y, &cfg)?
                }
                None => cross_entropy(&mut tape, out.logits, &y)?,
            };
            step += 1;
            let v = tape.scalar(loss);
            check_loss(v, stage, step)?;
            sum += v * y.len() as f64;
            count += y.len();
            tape.backward(loss)?;
            step_store(&mut net.store, &tape, &mut opt, lr, hp)?;
        }
        history.push(sum / count.max(1) as f64);
    }
    Ok(history)
}

/// Frozen per-modality outputs used as fusion inputs.
#[derive(Debug, Clone)]
struct ModalityOutputs {
    hidden: Vec<Tensor2>,
    probs: Vec<Tensor2>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub sync: Option<SyncReport>,
    pub teacher_loss: Vec<f64>,
    pub audio_loss: Vec<f64>,
    pub visual_loss: Vec<f64>,
    pub fusion_loss: Vec<f64>,
    /// Total objective per fusion epoch, distillation and sync terms held at
    /// their final stage values.
    pub total_loss: Vec<f64>,
    pub l_dis: f64,
    pub l_sync: f64,
}

/// Everything produced by a pipeline run.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub hp: HyperParams,
    pub flags: AblationFlags,
    pub class_names: Vec<String>,
    pub dims: Dims,
    pub stages: Vec<Stage>,
    pub sync: Option<SyncModel>,
    pub teacher: Option<GraphNet>,
    pub audio: Option<GraphNet>,
    pub visual: Option<GraphNet>,
    pub fusion: Option<FusionModel>,
    pub ema: QualityEma,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fusion: Option<MetricsReport>,
    pub teacher: Option<MetricsReport>,
    pub audio: Option<MetricsReport>,
    pub visual: Option<MetricsReport>,
    pub sync_accuracy: Option<f64>,
}

impl TrainedSystem {
    /// Visual features after speaker selection (or the first face when
    /// speaker identification is ablated).
    pub fn prepare_split(&self, split: &Split) -> Result<Vec<ConversationSample>> {
        prepare_samples(split, self.flags, self.sync.as_ref())
    }

    fn modality_outputs(&self, samples: &[ConversationSample]) -> Result<ModalityOutputs> {
        modality_outputs(
            self.teacher.as_ref(),
            self.audio.as_ref(),
            self.visual.as_ref(),
            samples,
            self.hp.graph_window,
        )
    }

    pub fn evaluate(&self, split: &Split) -> Result<EvalReport> {
        if split.samples.is_empty() {
            return Err(Error::Input("nothing to evaluate".into()));
        }
        let samples = self.prepare_split(split)?;
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let names = &self.class_names;
        let c = names.len();
        let report_for = |net: Option<&GraphNet>, m: Modality| -> Result<Option<MetricsReport>> {
            match net {
                Some(n) => {
                    let (_, logits) = predict_samples(n, &samples, m, self.hp.graph_window)?;
                    Ok(Some(MetricsReport::from_predictions(&truth, &argmax_rows(logits.data(), c), names)?))
                }
                None => Ok(None),
            }
        };
        let teacher = report_for(self.teacher.as_ref(), Modality::Text)?;
        let audio = report_for(self.audio.as_ref(), Modality::Audio)?;
        let visual = report_for(self.visual.as_ref(), Modality::Visual)?;
        let fusion = match &self.fusion {
            Some(model) => {
                let outs = self.modality_outputs(&samples)?;
                let logits = fusion_predict(model, &outs, &self.ema)?;
                Some(MetricsReport::from_predictions(&truth, &argmax_rows(logits.data(), c), names)?)
            }
            None => None,
        };
        let sync_accuracy = match (&self.sync, &split.scenes) {
            (Some(s), Some(scenes)) => Some(s.accuracy(scenes)?),
            _ => None,
        };
        Ok(EvalReport {
            fusion,
            teacher,
            audio,
            visual,
            sync_accuracy,
        })
    }
}

fn prepare_samples(split: &Split, flags: AblationFlags, sync: Option<&SyncModel>) -> Result<Vec<ConversationSample>> {
    match (&split.scenes, flags.no_speaker_id, sync) {
        (Some(_), true, _) => select_visual_features(split, None),
        (Some(_), false, Some(model)) => select_visual_features(split, Some(model)),
        _ => Ok(split.samples.clone()),
    }
}

fn modality_outputs(
    teacher: Option<&GraphNet>,
    audio: Option<&GraphNet>,
    visual: Option<&GraphNet>,
    samples: &[ConversationSample],
    window: usize,
) -> Result<ModalityOutputs> {
    let mut hidden = Vec::new();
    let mut probs = Vec::new();
    for (net, m) in [(teacher, Modality::Text), (audio, Modality::Audio), (visual, Modality::Visual)] {
        let net = net.ok_or_else(|| Error::Config(format!("fusion needs the {} network", m.name())))?;
        let (h, l) = predict_samples(net, samples, m, window)?;
        hidden.push(h);
        probs.push(softmax_rows(&l));
    }
    Ok(ModalityOutputs { hidden, probs })
}

const EVAL_CHUNK: usize = 256;

fn fusion_predict(model: &FusionModel, outs: &ModalityOutputs, ema: &QualityEma) -> Result<Tensor2> {
    let n = outs.hidden[0].rows();
    let mut logits = Tensor2::zeros(n, model.cfg.classes);
    let stats: Vec<f64> = (0..outs.hidden.len()).map(|m| ema.current(m)).collect();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let mut tape = Tape::new();
        let input = FusionInput {
            hidden: outs.hidden.iter().map(|h| tape.constant(gather(h, &idx))).collect(),
            probs: outs.probs.iter().map(|p| gather(p, &idx)).collect(),
            stats: stats.clone(),
        };
        let out = model.forward(&mut tape, &input, None)?;
        let l = tape.value(out.logits);
        for (r, &i) in idx.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(l.row(r));
        }
        start += EVAL_CHUNK;
    }
    Ok(logits)
}

/// Stage outputs reusable across runs that share seed, data and
/// hyperparameters.
#[derive(Default)]
pub struct StageCache {
    sync: Option<(SyncModel, SyncReport)>,
    teacher: Option<(GraphNet, Vec<f64>)>,
    students: HashMap<(bool, bool), StudentPair>,
}

#[derive(Clone)]
struct StudentPair {
    audio: GraphNet,
    visual: GraphNet,
    audio_loss: Vec<f64>,
    visual_loss: Vec<f64>,
}

fn validate_stages(stages: &[Stage], data: &TrainData) -> Result<Vec<Stage>> {
    let mut s = stages.to_vec();
    s.sort();
    s.dedup();
    if s.is_empty() {
        return Err(Error::Config("no stages selected".into()));
    }
    let has = |x: Stage| s.contains(&x);
    if has(Stage::Sync) && data.train.scenes.is_none() {
        return Err(Error::Config("the sync stage needs multi-face scenes".into()));
    }
    if has(Stage::Distill) && !has(Stage::Teacher) {
        return Err(Error::Config("the distill stage needs the teacher stage".into()));
    }
    if has(Stage::Fusion) && !(has(Stage::Teacher) && has(Stage::Distill)) {
        return Err(Error::Config("the fusion stage needs the teacher and distill stages".into()));
    }
    Ok(s)
}

pub fn train_pipeline(data: &TrainData, hp: &HyperParams, flags: AblationFlags, stages: &[Stage], rng: &RngStream) -> Result<TrainedSystem> {
    train_pipeline_cached(data, hp, flags, stages, rng, &mut StageCache::default())
}

/// Runs the selected stages in order. Each stage draws from its own fork of
/// `rng`, so results from `cache` are identical to recomputing them.
pub fn train_pipeline_cached(
    data: &TrainData,
    hp: &HyperParams,
    flags: AblationFlags,
    stages: &[Stage],
    rng: &RngStream,
    cache: &mut StageCache,
) -> Result<TrainedSystem> {
    hp.validate()?;
    let stages = validate_stages(stages, data)?;
    let has = |x: Stage| stages.contains(&x);
    let classes = data.classes();
    let dims = data.dims;
    let mut log = TrainLog::default();

    let mut sync = None;
    if has(Stage::Sync) && !flags.no_speaker_id {
        if cache.sync.is_none() {
            let scenes = data.train.scenes.as_deref().expect("validated");
            let test = data.test.scenes.as_deref().unwrap_or(&[]);
            let eval = if test.is_empty() { scenes } else { test };
            cache.sync = Some(train_sync(scenes, eval, hp, &rng.fork("sync"))?);
        }
        let (model, report) = cache.sync.clone().expect("cached");
        log.l_sync = report.loss_history.last().copied().unwrap_or(0.0);
        log.sync = Some(report);
        sync = Some(model);
    }
    let train = prepare_samples(&data.train, flags, sync.as_ref())?;
    if train.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }

    let mut teacher = None;
    if has(Stage::Teacher) {
        if cache.teacher.is_none() {
            let r = rng.fork("teacher");
            let spec = GraphNetSpec::teacher(dims.text, hp.hidden_dim, classes, hp.gat_heads);
            let mut net = GraphNet::new(spec, &mut r.fork("init"))?;
            let hist = train_graph_net(&mut net, &train, Modality::Text, None, hp.lr_text, hp, &r, Stage::Teacher)?;
            cache.teacher = Some((net, hist));
        }
        let (net, hist) = cache.teacher.clone().expect("cached");
        log.teacher_loss = hist;
        teacher = Some(net);
    }

    if hp.joint && has(Stage::Fusion) {
        let teacher = teacher.expect("validated");
        return train_joint(data, hp, flags, stages, rng, sync, teacher, train, log);
    }

    let (mut audio, mut visual) = (None, None);
    if has(Stage::Distill) {
        let key = (flags.no_speaker_id, flags.no_kd);
        if !cache.students.contains_key(&key) {
            let t = teacher.as_ref().expect("validated");
            let (_, teacher_logits) = predict_samples(t, &train, Modality::Text, hp.graph_window)?;
            let kd = if flags.no_kd { hp.distill().hard_labels_only() } else { hp.distill() };
            let r = rng.fork("distill");
            let mut nets = Vec::new();
            let mut losses = Vec::new();
            for (m, lr) in [(Modality::Audio, hp.lr_audio), (Modality::Visual, hp.lr_visual)] {
                let rm = r.fork(m.name());
                let spec = GraphNetSpec::student(m, dims.get(m), hp.hidden_dim, classes, hp.gat_heads)?;
                let mut net = GraphNet::new(spec, &mut rm.fork("init"))?;
                losses.push(train_graph_net(
                    &mut net,
                    &train,
                    m,
                    Some((&teacher_logits, kd)),
                    lr,
                    hp,
                    &rm,
                    Stage::Distill,
                )?);
                nets.push(net);
            }
            let visual = nets.pop().expect("two students");
            let audio = nets.pop().expect("two students");
            let visual_loss = losses.pop().expect("two students");
            let audio_loss = losses.pop().expect("two students");
            cache.students.insert(
                key,
                StudentPair {
                    audio,
                    visual,
                    audio_loss,
                    visual_loss,
                },
            );
        }
        let pair = cache.students[&key].clone();
        log.l_dis = pair.audio_loss.last().copied().unwrap_or(0.0) + pair.visual_loss.last().copied().unwrap_or(0.0);
        log.audio_loss = pair.audio_loss;
        log.visual_loss = pair.visual_loss;
        audio = Some(pair.audio);
        visual = Some(pair.visual);
    }

    let mut fusion = None;
    let mut ema = QualityEma::new(Modality::ALL.len(), hp.quality_ema);
    if has(Stage::Fusion) {
        let outs = modality_outputs(teacher.as_ref(), audio.as_ref(), visual.as_ref(), &train, hp.graph_window)?;
        let (model, e) = train_fusion(&train, &outs, hp, flags, classes, &rng.fork("fusion"), &mut log)?;
        fusion = Some(model);
        ema = e;
    }

    Ok(TrainedSystem {
        hp: hp.clone(),
        flags,
        class_names: data.class_names.clone(),
        dims,
        stages,
        sync,
        teacher,
        audio,
        visual,
        fusion,
        ema,
        log,
    })
}

fn fusion_weights(hp: &HyperParams, flags: AblationFlags) -> crate::losses::LossWeights {
    let mut w = hp.loss_weights();
    if flags.no_contrastive {
        w.lambda_cont = 0.0;
    }
    w
}

/// Fusion objective for one batch: the composite loss, or plain
/// cross-entropy when the fusion loss is ablated.
fn fusion_objective(tape: &mut Tape, logits: Var, z: Var, y: &[usize], hp: &HyperParams, flags: AblationFlags) -> Result<Var> {
    if flags.no_fusion_loss {
        cross_entropy(tape, logits, y)
    } else {
        let w = fusion_weights(hp, flags);
        let z = if y.len() >= 2 { Some(z) } else { None };
        Ok(fusion_loss(tape, logits, y, z, &w)?.total)
    }
}

fn train_fusion(
    train: &[ConversationSample],
    outs: &ModalityOutputs,
    hp: &HyperParams,
    flags: AblationFlags,
    classes: usize,
    rng: &RngStream,
    log: &mut TrainLog,
) -> Result<(FusionModel, QualityEma)> {
    let d_in: Vec<usize> = outs.hidden.iter().map(|h| h.cols()).collect();
    let cfg = FusionConfig::from_hyper(hp, d_in, classes);
    let mut model = FusionModel::new(cfg, &mut rng.fork("init"))?;
    let mut opt = AdamW::new(&model.store);
    let mut ema = QualityEma::new(outs.hidden.len(), hp.quality_ema);
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = rng.fork("order");
    let drop_rng = rng.fork("dropout");
    let mut step = 0u64;
    for _ in 0..hp.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(hp.batch_size) {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut stats = Vec::with_capacity(outs.hidden.len());
            let mut hidden = Vec::with_capacity(outs.hidden.len());
            let mut tape = Tape::new();
            for (m, h) in outs.hidden.iter().enumerate() {
                let hb = gather(h, idx);
                stats.push(ema.observe(m, quality_stats(&hb, &y, hp.eps_stats)?));
                hidden.push(tape.constant(hb));
            }
            let input = FusionInput {
                hidden,
                probs: outs.probs.iter().map(|p| gather(p, idx)).collect(),
                stats,
            };
            let mut dr = drop_rng.fork_index(step);
            let out = model.forward(&mut tape, &input, Some(&mut dr))?;
            let loss = fusion_objective(&mut tape, out.logits, out.z, &y, hp, flags)?;
            step += 1;
            let v = tape.scalar(loss);
            check_loss(v, Stage::Fusion, step)?;
            sum += v * y.len() as f64;
            count += y.len();
            tape.backward(loss)?;
            step_store(&mut model.store, &tape, &mut opt, hp.lr_fusion, hp)?;
        }
        let mean = sum / count.max(1) as f64;
        log.fusion_loss.push(mean);
        log.total_loss
            .push(total_loss_value(mean, log.l_dis, log.l_sync, hp.lambda_dis, hp.lambda_sync)?);
    }
    Ok((model, ema))
}

/// Students and fusion optimised together under
/// `L_fusion + λ_dis (L_kd,a + L_kd,v) + λ_sync L_sync` over conversation
/// packs, with the sync term held at its trained value.
#[allow(clippy::too_many_arguments)]
fn train_joint(
    data: &TrainData,
    hp: &HyperParams,
    flags: AblationFlags,
    stages: Vec<Stage>,
    rng: &RngStream,
    sync: Option<SyncModel>,
    teacher: GraphNet,
    train: Vec<ConversationSample>,
    mut log: TrainLog,
) -> Result<TrainedSystem> {
    let classes = data.classes();
    let dims = data.dims;
    let r = rng.fork("joint");
    let (teacher_hidden, teacher_logits) = predict_samples(&teacher, &train, Modality::Text, hp.graph_window)?;
    let teacher_probs = softmax_rows(&teacher_logits);
    let kd = if flags.no_kd { hp.distill().hard_labels_only() } else { hp.distill() };
    let mut audio = GraphNet::new(
        GraphNetSpec::student(Modality::Audio, dims.audio, hp.hidden_dim, classes, hp.gat_heads)?,
        &mut r.fork("audio_init"),
    )?;
    let mut visual = GraphNet::new(
        GraphNetSpec::student(Modality::Visual, dims.visual, hp.hidden_dim, classes, hp.gat_heads)?,
        &mut r.fork("visual_init"),
    )?;
    let cfg = FusionConfig::from_hyper(hp, vec![hp.hidden_dim; 3], classes);
    let mut fusion = FusionModel::new(cfg, &mut r.fork("fusion_init"))?;
    let (mut oa, mut ov, mut of) = (AdamW::new(&audio.store), AdamW::new(&visual.store), AdamW::new(&fusion.store));
    let mut ema = QualityEma::new(3, hp.quality_ema);
    let index = ConversationIndex::new(&train, hp.graph_window)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    let mut order_rng = r.fork("order");
    let drop_rng = r.fork("dropout");
    let mut step = 0u64;
    for _ in 0..hp.epochs {
        order_rng.shuffle(&mut order);
        let (mut sf, mut sa, mut sv, mut st, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for pack in index.packs(&order, hp.batch_size) {
            let idx = &pack.indices;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xa = tape.constant(rows_of(&train, idx, Modality::Audio)?);
            let xv = tape.constant(rows_of(&train, idx, Modality::Visual)?);
            let mut dr = drop_rng.fork_index(step);
            let fa = audio.forward_train(&mut tape, &pack.graph, xa, hp.dropout, &mut dr)?;
            let fv = visual.forward_train(&mut tape, &pack.graph, xv, hp.dropout, &mut dr)?;
            let tl = tape.constant(gather(&teacher_logits, idx));
            let ka = kd_loss(&mut tape, fa.logits, tl, &y, &kd)?;
            let kv = kd_loss(&mut tape, fv.logits, tl, &y, &kd)?;
            let th = gather(&teacher_hidden, idx);
            let mut stats = Vec::with_capacity(3);
            stats.push(ema.observe(0, quality_stats(&th, &y, hp.eps_stats)?));
            let ha = tape.value(fa.hidden).clone();
            stats.push(ema.observe(1, quality_stats(&ha, &y, hp.eps_stats)?));
            let hv = tape.value(fv.hidden).clone();
            stats.push(ema.observe(2, quality_stats(&hv, &y, hp.eps_stats)?));
            let pa = tape.softmax_rows(fa.logits, 1.0)?;
            let pv = tape.softmax_rows(fv.logits, 1.0)?;
            let th = tape.constant(th);
            let input = FusionInput {
                hidden: vec![th, fa.hidden, fv.hidden],
                probs: vec![gather(&teacher_probs, idx), tape.value(pa).clone(), tape.value(pv).clone()],
                stats,
            };
            let out = fusion.forward(&mut tape, &input, Some(&mut dr))?;
            let lf = fusion_objective(&mut tape, out.logits, out.z, &y, hp, flags)?;
            let kd_sum = tape.add(ka, kv)?;
            let sync_term = tape.constant(Tensor2::scalar(log.l_sync));
            let total = crate::losses::total_loss(&mut tape, lf, kd_sum, sync_term, hp.lambda_dis, hp.lambda_sync)?;
            step += 1;
            let v = tape.scalar(total);
            check_loss(v, Stage::Fusion, step)?;
            let b = y.len() as f64;
            sf += tape.scalar(lf) * b;
            sa += tape.scalar(ka) * b;
            sv += tape.scalar(kv) * b;
            st += v * b;
            count += y.len();
            tape.backward(total)?;
            for s in [&mut audio.store, &mut visual.store, &mut fusion.store] {
                s.zero_grad();
                tape.accumulate_param_grads(s);
            }
            clip_grad_norm(&mut [&mut audio.store, &mut visual.store, &mut fusion.store], hp.clip_norm)?;
            oa.step(&mut audio.store, hp.lr_audio, hp.weight_decay)?;
            ov.step(&mut visual.store, hp.lr_visual, hp.weight_decay)?;
            of.step(&mut fusion.store, hp.lr_fusion, hp.weight_decay)?;
        }
        let n = count.max(1) as f64;
        log.fusion_loss.push(sf / n);
        log.audio_loss.push(sa / n);
        log.visual_loss.push(sv / n);
        log.total_loss.push(st / n);
    }
    log.l_dis = log.audio_loss.last().copied().unwrap_or(0.0) + log.visual_loss.last().copied().unwrap_or(0.0);
    Ok(TrainedSystem {
        hp: hp.clone(),
        flags,
        class_names: data.class_names.clone(),
        dims,
        stages,
        sync,
        teacher: Some(teacher),
        audio: Some(audio),
        visual: Some(visual),
        fusion: Some(fusion),
        ema,
        log,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic_dataset, meld_profile, SyntheticConfig};

    pub(crate) fn tiny_data(n: usize, seed: u64) -> TrainData {
        let cfg = SyntheticConfig {
            n,
            dims: Dims::new(6, 6, 6),
            ..SyntheticConfig::default()
        };
        let profile = meld_profile();
        let ds = gen_synthetic_dataset(&profile, &cfg, &RngStream::new(seed)).unwrap();
        TrainData::from_synthetic(ds, &profile.class_names).unwrap()
    }

    pub(crate) fn tiny_hp() -> HyperParams {
        HyperParams {
            epochs: 1,
            fusion_dim: 8,
            hidden_dim: 8,
            sync_dim: 8,
            proj_dim: 4,
            gat_heads: 2,
            encoder_heads: 2,
            encoder_layers: 1,
            pool_queries: 2,
            experts: 2,
            lr_text: 3e-3,
            lr_audio: 3e-3,
            lr_visual: 3e-3,
            lr_fusion: 3e-3,
            ..HyperParams::default()
        }
    }

    #[test]
    fn stage_dependencies_are_config_errors() {
        let data = tiny_data(120, 1);
        let hp = tiny_hp();
        let rng = RngStream::new(2);
        for stages in [vec![Stage::Distill], vec![Stage::Teacher, Stage::Fusion], vec![]] {
            let err = train_pipeline(&data, &hp, AblationFlags::default(), &stages, &rng).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{stages:?}: {err:?}");
        }
        let mut no_scenes = data.clone();
        no_scenes.train.scenes = None;
        let err = train_pipeline(&no_scenes, &hp, AblationFlags::default(), &[Stage::Sync], &rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn full_pipeline_runs_and_is_deterministic() {
        let data = tiny_data(150, 3);
        let hp = tiny_hp();
        let rng = RngStream::new(4);
        let a = train_pipeline(&data, &hp, AblationFlags::default(), &Stage::ALL, &rng).unwrap();
        let b = train_pipeline(&data, &hp, AblationFlags::default(), &Stage::ALL, &rng).unwrap();
        let ra = a.evaluate(&data.test).unwrap();
        let rb = b.evaluate(&data.test).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.fusion.is_some() && ra.sync_accuracy.is_some());
        assert_eq!(a.log.total_loss.len(), hp.epochs);
    }

    #[test]
    fn cached_stages_match_fresh_runs() {
        let data = tiny_data(150, 5);
        let hp = tiny_hp();
        let rng = RngStream::new(6);
        let mut cache = StageCache::default();
        let flags = AblationFlags::arm("no_contrastive").unwrap();
        let _ = train_pipeline_cached(&data, &hp, AblationFlags::default(), &Stage::ALL, &rng, &mut cache).unwrap();
        let cached = train_pipeline_cached(&data, &hp, flags, &Stage::ALL, &rng, &mut cache).unwrap();
        let fresh = train_pipeline(&data, &hp, flags, &Stage::ALL, &rng).unwrap();
        assert_eq!(cached.evaluate(&data.test).unwrap(), fresh.evaluate(&data.test).unwrap());
    }

    #[test]
    fn joint_mode_trains() {
        let data = tiny_data(150, 7);
        let hp = HyperParams { joint: true, ..tiny_hp() };
        let sys = train_pipeline(&data, &hp, AblationFlags::default(), &Stage::ALL, &RngStream::new(8)).unwrap();
        assert!(sys.log.total_loss[0].is_finite());
        assert!(sys.evaluate(&data.test).unwrap().fusion.is_some());
    }

    #[test]
    fn packs_cover_every_sample_once() {
        let data = tiny_data(200, 9);
        let index = ConversationIndex::new(&data.train.samples, 4).unwrap();
        let order: Vec<usize> = (0..index.len()).collect();
        let packs = index.packs(&order, 16);
        let mut seen: Vec<usize> = packs.iter().flat_map(|p| p.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..data.train.samples.len()).collect::<Vec<_>>());
        assert!(packs[..packs.len() - 1].iter().all(|p| p.indices.len() >= 16));
    }
}
