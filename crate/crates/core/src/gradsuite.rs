//! Randomised finite-difference checks over every loss and layer.

use serde::Serialize;

use crate::datagen::FaceScene;
use crate::datagen::FaceTrack;
use crate::distill::{kd_loss, DistillConfig};
use crate::error::Result;
use crate::fusion::{
    attend, gate, global_context, quality_neural, quality_score, CrossModalAttention, EncoderBlock, FusionConfig, FusionInput, FusionModel, MoELayer,
};
use crate::graphnets::{ConvGraph, Edge, EdgeKind, GatLayer, GcnLayer, PreparedGraph};
use crate::losses::{cross_entropy, fusion_loss, kl_divergence, label_smoothing_loss, poly_loss, supcon_loss, total_loss, LossWeights};
use crate::numerics::{finite_diff_check, CheckReport, Linear, ParamStore, RngStream, Tape, Tensor2, Var};
use crate::sync::{sync_objective_in, SyncBatch, SyncModel};

pub const CASES: [&str; 19] = [
    "cross_entropy",
    "kl",
    "poly",
    "smoothing",
    "supcon",
    "sync",
    "kd",
    "fusion_loss",
    "total",
    "gcn",
    "gat",
    "gate",
    "quality",
    "cross_attention",
    "moe",
    "encoder",
    "pooling",
    "fusion_model",
    "graph_net",
];

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub config: usize,
    pub report: CheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.report.passed)
    }
}

/// Roundoff in the difference quotient scales as `|f| u / ε` and is compared
/// against the fixed `1e-8` denominator floor for entries with a vanishing
/// gradient; truncation of the five-point stencil grows as `ε⁴`. Layer
/// readouts and whole-model losses are scaled down so both stay below the
/// tolerance at this step.
pub const SUITE_EPSILON: f64 = 1e-4;
const MODEL_SCALE: f64 = 0.01;

/// Runs `rounds` randomised configurations of every case in [`CASES`].
pub fn gradient_suite(rounds: usize, seed: u64, rel_tol: f64) -> Result<SuiteReport> {
    let root = RngStream::new(seed);
    let mut results = Vec::with_capacity(rounds * CASES.len());
    for round in 0..rounds {
        for (c, name) in CASES.iter().enumerate() {
            let mut rng = root.fork(name).fork_index(round as u64);
            let report = run_case(c, &mut rng, rel_tol)?;
            results.push(CaseResult {
                case: name.to_string(),
                config: round,
                report,
            });
        }
    }
    let max_rel_error = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        passed: results.iter().all(|r| r.report.passed),
        max_rel_error,
        results,
    })
}

/// Re-runs a single configuration of the suite, e.g. to inspect a failure.
pub fn check_case(case: &str, seed: u64, round: usize, rel_tol: f64) -> Result<CheckReport> {
    let c = CASES
        .iter()
        .position(|&n| n == case)
        .ok_or_else(|| crate::error::Error::Input(format!("unknown gradient case `{case}`")))?;
    let mut rng = RngStream::new(seed).fork(case).fork_index(round as u64);
    run_case(c, &mut rng, rel_tol)
}

/// `Σ x ⊙ R` with a fixed random `R`, so every output entry matters.
fn readout(tape: &mut Tape, x: Var, rng: &mut RngStream) -> Result<Var> {
    let n = tape.value(x).len();
    let k: Vec<f64> = (0..n).map(|_| rng.uniform(-0.1, 0.1) / n as f64).collect();
    let y = tape.mul_const(x, k)?;
    tape.sum_all(y)
}

fn labels(n: usize, classes: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

fn chain_graph(n: usize, rng: &mut RngStream) -> Result<PreparedGraph> {
    let mut edges = Vec::new();
    for i in 0..n.saturating_sub(1) {
        edges.push(Edge {
            src: i,
            dst: i + 1,
            kind: EdgeKind::Temporal,
        });
        edges.push(Edge {
            src: i + 1,
            dst: i,
            kind: EdgeKind::Temporal,
        });
    }
    if n >= 3 && rng.bernoulli(0.5) {
        edges.push(Edge {
            src: 0,
            dst: n - 1,
            kind: EdgeKind::SameSpeaker,
        });
        edges.push(Edge {
            src: n - 1,
            dst: 0,
            kind: EdgeKind::SameSpeaker,
        });
    }
    Ok(PreparedGraph::new(ConvGraph::new(n, edges)?))
}

fn input_param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut RngStream) -> Result<crate::numerics::ParamId> {
    store.add(name, Tensor2::randn(rows, cols, 1.0, rng), true)
}

/// Moves every parameter off its initial value so zero-initialised biases do
/// not leave ReLU inputs exactly on the kink.
fn jitter(store: &mut ParamStore, rng: &mut RngStream) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
}

fn check<F>(f: F, store: &mut ParamStore, rng: &mut RngStream, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    jitter(store, rng);
    finite_diff_check(f, store, SUITE_EPSILON, tol)
}

fn run_case(case: usize, rng: &mut RngStream, tol: f64) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let n = rng.range_inclusive(2, 5);
    let c = rng.range_inclusive(2, 4);
    let r2 = rng.fork("readout");
    let mut jr = rng.fork("jitter");
    match CASES[case] {
        "cross_entropy" | "poly" | "smoothing" => {
            let y = labels(n, c, rng);
            let id = input_param(&mut store, "logits", n, c, rng)?;
            let (a, g, e) = (rng.uniform(0.0, 2.0), rng.uniform(0.2, 2.0), rng.uniform(0.0, 0.3));
            let which = CASES[case];
            check(
                |t, s| {
                    let x = t.param(s, id);
                    match which {
                        "cross_entropy" => cross_entropy(t, x, &y),
                        "poly" => poly_loss(t, x, &y, a, g),
                        _ => label_smoothing_loss(t, x, &y, e),
                    }
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "kl" => {
            let teacher = Tensor2::randn(n, c, 1.0, rng);
            let id = input_param(&mut store, "student", n, c, rng)?;
            check(
                |t, s| {
                    let tl = t.constant(teacher.clone());
                    let tl = t.log_softmax_rows(tl, 1.0)?;
                    let x = t.param(s, id);
                    let sl = t.log_softmax_rows(x, 1.0)?;
                    kl_divergence(t, tl, sl)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "kd" => {
            let y = labels(n, c, rng);
            let teacher = Tensor2::randn(n, c, 1.0, rng);
            let cfg = DistillConfig {
                alpha_dis: rng.uniform(0.0, 1.0),
                tau_dis: rng.uniform(1.0, 4.0),
            };
            let id = input_param(&mut store, "student", n, c, rng)?;
            check(
                |t, s| {
                    let tl = t.constant(teacher.clone());
                    let x = t.param(s, id);
                    kd_loss(t, x, tl, &y, &cfg)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "supcon" | "fusion_loss" => {
            let n = n.max(3);
            let y = labels(n, 2, rng);
            let d = rng.range_inclusive(2, 4);
            let z = input_param(&mut store, "z", n, d, rng)?;
            let l = input_param(&mut store, "logits", n, 2, rng)?;
            let w = LossWeights {
                tau_cont: rng.uniform(0.1, 1.0),
                ..LossWeights::default()
            };
            let which = CASES[case];
            check(
                |t, s| {
                    let zv = t.param(s, z);
                    let zv = t.l2_normalize_rows(zv)?;
                    if which == "supcon" {
                        Ok(supcon_loss(t, zv, &y, w.tau_cont)?.loss)
                    } else {
                        let lv = t.param(s, l);
                        Ok(fusion_loss(t, lv, &y, Some(zv), &w)?.total)
                    }
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "total" => {
            let y = labels(n, c, rng);
            let f = input_param(&mut store, "fusion_logits", n, c, rng)?;
            let st = input_param(&mut store, "student_logits", n, c, rng)?;
            let teacher = Tensor2::randn(n, c, 1.0, rng);
            let sy = input_param(&mut store, "sync", 1, 1, rng)?;
            let w = LossWeights::default();
            let cfg = DistillConfig::default();
            check(
                |t, s| {
                    let fv = t.param(s, f);
                    let fl = fusion_loss(t, fv, &y, None, &w)?.total;
                    let sv = t.param(s, st);
                    let tl = t.constant(teacher.clone());
                    let dl = kd_loss(t, sv, tl, &y, &cfg)?;
                    let x = t.param(s, sy);
                    let sl = t.square(x)?;
                    total_loss(t, fl, dl, sl, w.lambda_dis, w.lambda_sync)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "sync" => {
            let d = rng.range_inclusive(2, 4);
            let mut model = SyncModel::new(d, d, rng.range_inclusive(2, 5), rng);
            store = std::mem::take(&mut model.store);
            let b = n.max(2);
            let scenes: Vec<FaceScene> = (0..b)
                .map(|_| FaceScene {
                    faces: vec![FaceTrack {
                        sync: (0..d).map(|_| rng.normal()).collect(),
                        visual: Vec::new(),
                    }],
                    audio: (0..d).map(|_| rng.normal()).collect(),
                    speaker: 0,
                })
                .collect();
            let refs: Vec<&FaceScene> = scenes.iter().collect();
            let batch = SyncBatch::from_scenes(&refs, 1 + rng.below(b - 1), rng.uniform(0.5, 2.0))?;
            let alpha = rng.uniform(0.0, 1.0);
            check(
                |t, s| {
                    let l = sync_objective_in(t, s, &model, &batch, alpha)?.0;
                    t.scale(l, MODEL_SCALE)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "gcn" | "gat" => {
            let g = chain_graph(n, rng)?;
            let (d_in, d_out) = (rng.range_inclusive(2, 4), rng.range_inclusive(2, 4));
            let x = input_param(&mut store, "x", n, d_in, rng)?;
            if CASES[case] == "gcn" {
                let layer = GcnLayer::new(&mut store, "gcn", d_in, d_out, rng);
                let a_hat = g.a_hat.clone();
                check(
                    |t, s| {
                        let a = t.constant(a_hat.clone());
                        let xv = t.param(s, x);
                        let out = layer.forward(t, s, a, xv)?;
                        readout(t, out, &mut r2.clone())
                    },
                    &mut store,
                    &mut jr,
                    tol,
                )
            } else {
                let heads = rng.range_inclusive(1, 3);
                let layer = GatLayer::new(&mut store, "gat", d_in, d_out, heads, rng.bernoulli(0.5), rng);
                check(
                    |t, s| {
                        let xv = t.param(s, x);
                        let out = layer.forward(t, s, &g, xv)?.out;
                        readout(t, out, &mut r2.clone())
                    },
                    &mut store,
                    &mut jr,
                    tol,
                )
            }
        }
        "gate" => {
            let d = rng.range_inclusive(2, 4);
            let h: Vec<_> = (0..3)
                .map(|m| input_param(&mut store, &format!("h{m}"), n, d, rng))
                .collect::<Result<_>>()?;
            let q: Vec<_> = (0..3)
                .map(|m| store.add(format!("q{m}"), Tensor2::scalar(rng.uniform(0.1, 1.0)), true))
                .collect::<Result<_>>()?;
            let w = store.add("w_g", Tensor2::glorot(2 * d, d, rng), true)?;
            check(
                |t, s| {
                    let hv: Vec<Var> = h.iter().map(|&id| t.param(s, id)).collect();
                    let qv: Vec<Var> = q.iter().map(|&id| t.param(s, id)).collect();
                    let ctx = global_context(t, &hv, &qv)?;
                    let wv = t.param(s, w);
                    let out = gate(t, hv[0], ctx, wv)?;
                    readout(t, out, &mut r2.clone())
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "quality" => {
            let d = rng.range_inclusive(2, 4);
            let h = input_param(&mut store, "h", n, d, rng)?;
            let w = store.add("w", Tensor2::glorot(d, 1, rng), true)?;
            let b = store.add("b", Tensor2::scalar(0.1), false)?;
            // small mixing weights keep the clamp inactive
            let wq = store.add("w_q", Tensor2::randn(3, 1, 0.3, rng), true)?;
            let fixed = [rng.uniform(0.0, 2.0), rng.uniform(0.0, 1.5)];
            check(
                |t, s| {
                    let hv = t.param(s, h);
                    let (wv, bv) = (t.param(s, w), t.param(s, b));
                    let qn = quality_neural(t, hv, wv, bv)?;
                    let f = t.constant(Tensor2::row_vector(&fixed));
                    let ind = t.concat_cols(&[f, qn])?;
                    let wqv = t.param(s, wq);
                    let q = quality_score(t, ind, wqv)?;
                    t.scale(q, 3.0)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "cross_attention" => {
            let heads = rng.range_inclusive(1, 2);
            let d = heads * rng.range_inclusive(1, 3);
            let m = rng.range_inclusive(2, 3);
            let h: Vec<_> = (0..m)
                .map(|i| input_param(&mut store, &format!("h{i}"), n, d, rng))
                .collect::<Result<_>>()?;
            let layer = CrossModalAttention::new(&mut store, "cross", d, heads, rng);
            let (a, b) = (rng.uniform(0.2, 1.0), rng.uniform(0.0, 1.0));
            check(
                |t, s| {
                    let hv: Vec<Var> = h.iter().map(|&id| t.param(s, id)).collect();
                    let out = layer.forward(t, s, &hv, a, b)?;
                    let cat = t.concat_rows(&out.features)?;
                    readout(t, cat, &mut r2.clone())
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "moe" => {
            let d = rng.range_inclusive(2, 4);
            let x = input_param(&mut store, "x", n, d, rng)?;
            let layer = MoELayer::new(&mut store, "moe", d, d, rng.range_inclusive(1, 3), rng)?;
            check(
                |t, s| {
                    let xv = t.param(s, x);
                    let out = layer.forward(t, s, xv)?.out;
                    readout(t, out, &mut r2.clone())
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "encoder" => {
            let heads = rng.range_inclusive(1, 2);
            let d = 4;
            let groups = 3;
            let x = input_param(&mut store, "x", groups * n, d, rng)?;
            let block = EncoderBlock::new(&mut store, "block", d, heads, rng);
            check(
                |t, s| {
                    let xv = t.param(s, x);
                    let (out, _) = block.forward(t, s, xv, groups, 0.0, &mut None)?;
                    readout(t, out, &mut r2.clone())
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "pooling" => {
            let d = rng.range_inclusive(2, 4);
            let q = input_param(&mut store, "query", 1, d, rng)?;
            let toks: Vec<_> = (0..3)
                .map(|m| input_param(&mut store, &format!("tok{m}"), n, d, rng))
                .collect::<Result<_>>()?;
            let cls = Linear::new(&mut store, "cls", d, c, true, rng);
            check(
                |t, s| {
                    let qv = t.param(s, q);
                    let tv: Vec<Var> = toks.iter().map(|&id| t.param(s, id)).collect();
                    let (pooled, _) = attend(t, qv, &tv, &tv, 1)?;
                    let out = cls.forward(t, s, pooled)?;
                    readout(t, out, &mut r2.clone())
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "fusion_model" => {
            let n = n.min(3);
            let cfg = FusionConfig {
                d_in: vec![rng.range_inclusive(2, 3), rng.range_inclusive(2, 3), rng.range_inclusive(2, 3)],
                d_f: 4,
                classes: c,
                heads: 2,
                layers: 1,
                queries: rng.range_inclusive(1, 2),
                experts: 2,
                proj_dim: 3,
                alpha_cross: 0.7,
                beta_cross: 0.3,
                dropout: 0.0,
            };
            let mut model = FusionModel::new(cfg.clone(), rng)?;
            store = std::mem::take(&mut model.store);
            let hidden: Vec<Tensor2> = cfg.d_in.iter().map(|&d| Tensor2::randn(n, d, 1.0, rng)).collect();
            let probs: Vec<Tensor2> = (0..3)
                .map(|_| {
                    let mut p = Tensor2::zeros(n, c);
                    for r in 0..n {
                        let row: Vec<f64> = (0..c).map(|_| rng.uniform(0.1, 1.0)).collect();
                        let s: f64 = row.iter().sum();
                        for (j, v) in row.iter().enumerate() {
                            p.set(r, j, v / s);
                        }
                    }
                    p
                })
                .collect();
            let stats: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 1.0)).collect();
            let y = labels(n, c, rng);
            let w = LossWeights {
                tau_cont: 0.5,
                ..LossWeights::default()
            };
            check(
                |t, s| {
                    let input = FusionInput {
                        hidden: hidden.iter().map(|h| t.constant(h.clone())).collect(),
                        probs: probs.clone(),
                        stats: stats.clone(),
                    };
                    let out = model.forward_in(t, s, &input, None)?;
                    let l = fusion_loss(t, out.logits, &y, Some(out.z), &w)?.total;
                    t.scale(l, MODEL_SCALE)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        "graph_net" => {
            use crate::graphnets::{GraphNet, GraphNetSpec};
            let g = chain_graph(n, rng)?;
            let d_in = rng.range_inclusive(2, 3);
            let spec = if rng.bernoulli(0.5) {
                GraphNetSpec::teacher(d_in, 4, c, 2)
            } else {
                GraphNetSpec::student(crate::datagen::Modality::Audio, d_in, 3, c, 1)?
            };
            let mut net = GraphNet::new(spec, rng)?;
            store = std::mem::take(&mut net.store);
            let x = Tensor2::randn(n, d_in, 1.0, rng);
            let y = labels(n, c, rng);
            check(
                |t, s| {
                    let xv = t.constant(x.clone());
                    let out = net.forward_in(t, s, &g, xv)?;
                    let l = cross_entropy(t, out.logits, &y)?;
                    t.scale(l, MODEL_SCALE)
                },
                &mut store,
                &mut jr,
                tol,
            )
        }
        other => unreachable!("unknown gradient case {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_round_passes() {
        let r = gradient_suite(1, 11, 1e-4).unwrap();
        let bad: Vec<String> = r.failures().map(|f| format!("{} {:?}", f.case, f.report)).collect();
        assert!(r.passed, "{bad:?}");
        assert_eq!(r.results.len(), CASES.len());
    }
}
