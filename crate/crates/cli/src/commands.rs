use std::path::{Path, PathBuf};

use emoter_core::datagen::{encode_feature_container, gen_synthetic_dataset, ClassProfile, Dims, Split, SyntheticConfig};
use emoter_core::eval::{paired_t_test, summarize, to_csv, MetricsReport, Summary, TTestResult};
use emoter_core::gradsuite::{gradient_suite, SuiteReport};
use emoter_core::trainer::{
    load_checkpoint, save_checkpoint, train_pipeline, train_pipeline_cached, AblationFlags, EvalReport, Stage, StageCache, TrainLog, TrainedSystem,
    ARMS,
};
use emoter_core::RngStream;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{to_json, write_file, CliError};

pub struct GenArgs {
    pub profile: String,
    pub n: usize,
    pub dims: Dims,
    pub noise: Option<[f64; 3]>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes a synthetic feature container and returns its size in bytes.
pub fn gen(args: &GenArgs) -> Result<usize, CliError> {
    let profile = ClassProfile::by_name(&args.profile)
        .ok_or_else(|| CliError::Config(format!("--profile: unknown profile `{}` (meld, iemocap)", args.profile)))?;
    let mut cfg = SyntheticConfig {
        n: args.n,
        dims: args.dims,
        ..SyntheticConfig::default()
    };
    if let Some(noise) = args.noise {
        cfg.noise = noise;
    }
    let ds = gen_synthetic_dataset(&profile, &cfg, &RngStream::new(args.seed).fork("data"))?;
    let samples: Vec<_> = ds.all_samples().cloned().collect();
    let bytes = encode_feature_container(&samples, ds.dims, ds.class_count)?;
    write_file(&args.out, &bytes)?;
    Ok(bytes.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub test: EvalReport,
    pub log: TrainLog,
}

pub struct TrainOutput {
    pub system: TrainedSystem,
    pub metrics: TrainMetrics,
    pub metrics_json: String,
}

fn headline(report: &EvalReport) -> Option<&MetricsReport> {
    report.fusion.as_ref().or(report.audio.as_ref()).or(report.teacher.as_ref())
}

/// Trains on `cfg` and writes `checkpoint.emoc`, `metrics.json` and, when a
/// classifier was trained, `metrics.csv` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput, CliError> {
    let data = cfg.train_data(cfg.seed)?;
    let stages = cfg.stages_for(&data);
    let system = train_pipeline(&data, &cfg.hyper, cfg.ablation, &stages, &RngStream::new(cfg.seed))?;
    let metrics = TrainMetrics {
        seed: cfg.seed,
        stages: system.stages.clone(),
        test: system.evaluate(&data.test)?,
        log: system.log.clone(),
    };
    let metrics_json = to_json(&metrics)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    save_checkpoint(&dir.join("checkpoint.emoc"), &system)?;
    write_file(&dir.join("metrics.json"), metrics_json.as_bytes())?;
    if let Some(r) = headline(&metrics.test) {
        write_file(&dir.join("metrics.csv"), to_csv(r).as_bytes())?;
    }
    Ok(TrainOutput {
        system,
        metrics,
        metrics_json,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
}

/// Evaluates a checkpoint on the chosen split of the configured data.
pub fn evaluate(checkpoint: &Path, cfg: &RunConfig, split: EvalSplit) -> Result<EvalReport, CliError> {
    let system = load_checkpoint(checkpoint)?;
    let data = cfg.train_data(cfg.seed)?;
    if data.dims != system.dims || data.class_names.len() != system.class_names.len() {
        return Err(CliError::Config(format!(
            "checkpoint expects dims {:?} with {} classes, data has {:?} with {}",
            system.dims,
            system.class_names.len(),
            data.dims,
            data.class_names.len()
        )));
    }
    let split: &Split = match split {
        EvalSplit::Train => &data.train,
        EvalSplit::Test => &data.test,
    };
    Ok(system.evaluate(split)?)
}

/// One ablation arm across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub flags: AblationFlags,
    pub weighted_f1: Vec<f64>,
    pub summary: Summary,
    /// Mean WF1 of this arm minus the full arm.
    pub delta_wf1: f64,
    /// Paired over seeds against the full arm; absent for the full arm.
    pub t_test: Option<TTestResult>,
    /// Per-class fusion F1 averaged over seeds, in `class_names` order.
    pub per_class_f1: Vec<f64>,
    pub audio_wf1: Vec<f64>,
    pub visual_wf1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub class_names: Vec<String>,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

fn wf1(r: &Option<MetricsReport>) -> f64 {
    r.as_ref().map_or(0.0, |m| m.weighted_f1)
}

/// Runs the full system and each single-removal arm over the configured
/// seeds. Arms reuse the sync, teacher and student stages they share.
pub fn ablate(cfg: &RunConfig) -> Result<AblationReport, CliError> {
    let seeds = cfg.seeds();
    if seeds.len() < 2 {
        return Err(CliError::Config("ablate needs at least two seeds".into()));
    }
    let mut runs: Vec<Vec<EvalReport>> = vec![Vec::new(); ARMS.len()];
    let mut class_names = Vec::new();
    for &seed in &seeds {
        let data = cfg.train_data(seed)?;
        class_names = data.class_names.clone();
        let mut stages = cfg.stages_for(&data);
        if !stages.contains(&Stage::Fusion) {
            stages = data.default_stages();
        }
        let rng = RngStream::new(seed);
        let mut cache = StageCache::default();
        for (k, arm) in ARMS.iter().enumerate() {
            let flags = AblationFlags::arm(arm)?;
            let sys = train_pipeline_cached(&data, &cfg.hyper, flags, &stages, &rng, &mut cache)?;
            runs[k].push(sys.evaluate(&data.test)?);
        }
    }
    let fusion_wf1 = |reports: &[EvalReport]| -> Vec<f64> { reports.iter().map(|r| wf1(&r.fusion)).collect() };
    let full = fusion_wf1(&runs[0]);
    let full_mean = summarize(&full)?.mean;
    let mut arms = Vec::with_capacity(ARMS.len());
    for (k, arm) in ARMS.iter().enumerate() {
        let scores = fusion_wf1(&runs[k]);
        let summary = summarize(&scores)?;
        let c = class_names.len();
        let mut per_class = vec![0.0; c];
        for r in &runs[k] {
            if let Some(f) = &r.fusion {
                for (acc, v) in per_class.iter_mut().zip(&f.per_class_f1) {
                    *acc += v / seeds.len() as f64;
                }
            }
        }
        arms.push(ArmResult {
            arm: arm.to_string(),
            flags: AblationFlags::arm(arm)?,
            delta_wf1: summary.mean - full_mean,
            t_test: if k == 0 { None } else { Some(paired_t_test(&scores, &full)?) },
            summary,
            weighted_f1: scores,
            per_class_f1: per_class,
            audio_wf1: runs[k].iter().map(|r| wf1(&r.audio)).collect(),
            visual_wf1: runs[k].iter().map(|r| wf1(&r.visual)).collect(),
        });
    }
    Ok(AblationReport { seeds, class_names, arms })
}

pub fn gradcheck(rounds: usize, seed: u64, rel_tol: f64) -> Result<SuiteReport, CliError> {
    Ok(gradient_suite(rounds, seed, rel_tol)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub a: Summary,
    pub b: Summary,
    pub result: TTestResult,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoreFile {
    Plain(Vec<f64>),
    Scores { scores: Vec<f64> },
    Arm { weighted_f1: Vec<f64> },
}

fn read_scores(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let parsed: ScoreFile = serde_json::from_str(&text).map_err(|_| {
        CliError::Config(format!(
            "{}: expected a JSON array of scores or an object with `scores` or `weighted_f1`",
            path.display()
        ))
    })?;
    Ok(match parsed {
        ScoreFile::Plain(v) | ScoreFile::Scores { scores: v } | ScoreFile::Arm { weighted_f1: v } => v,
    })
}

/// Paired t-test between two per-seed score files.
pub fn ttest_files(a: &Path, b: &Path) -> Result<TTestReport, CliError> {
    let sa = read_scores(a)?;
    let sb = read_scores(b)?;
    Ok(TTestReport {
        result: paired_t_test(&sa, &sb)?,
        a: summarize(&sa)?,
        b: summarize(&sb)?,
    })
}
