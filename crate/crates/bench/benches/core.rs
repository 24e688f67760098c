use criterion::{black_box, criterion_group, criterion_main, Criterion};
use emoter_core::datagen::Modality;
use emoter_core::eval::{paired_t_test, weighted_f1};
use emoter_core::fusion::{FusionConfig, FusionInput, FusionModel};
use emoter_core::gradsuite::check_case;
use emoter_core::graphnets::{ConvGraph, Edge, EdgeKind, GraphNet, GraphNetSpec, PreparedGraph};
use emoter_core::losses::cross_entropy;
use emoter_core::trainer::HyperParams;
use emoter_core::{RngStream, Tape, Tensor2};

const N: usize = 16;
const CLASSES: usize = 7;

fn chain(n: usize, window: usize) -> PreparedGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i.saturating_sub(window)..(i + window + 1).min(n) {
            if i != j {
                edges.push(Edge {
                    src: j,
                    dst: i,
                    kind: EdgeKind::Temporal,
                });
            }
        }
    }
    PreparedGraph::new(ConvGraph::new(n, edges).expect("graph"))
}

fn labels() -> Vec<usize> {
    (0..N).map(|i| i % CLASSES).collect()
}

fn bench_tensor(c: &mut Criterion) {
    let mut rng = RngStream::new(0);
    let a = Tensor2::randn(64, 64, 1.0, &mut rng);
    let b = Tensor2::randn(64, 64, 1.0, &mut rng);
    c.bench_function("matmul_64", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn bench_graph_net(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let net = GraphNet::new(GraphNetSpec::teacher(32, 32, CLASSES, 4), &mut rng).unwrap();
    let graph = chain(N, 4);
    let x = Tensor2::randn(N, 32, 1.0, &mut rng);
    let y = labels();
    c.bench_function("gat_teacher_step_16", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = net.forward(&mut tape, &graph, xv).unwrap();
            let loss = cross_entropy(&mut tape, out.logits, &y).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.scalar(loss))
        })
    });
}

fn bench_fusion(c: &mut Criterion) {
    let mut rng = RngStream::new(2);
    let hp = HyperParams {
        fusion_dim: 32,
        proj_dim: 16,
        ..HyperParams::default()
    };
    let m = Modality::ALL.len();
    let model = FusionModel::new(FusionConfig::from_hyper(&hp, vec![32; m], CLASSES), &mut rng).unwrap();
    let hidden: Vec<Tensor2> = (0..m).map(|_| Tensor2::randn(N, 32, 1.0, &mut rng)).collect();
    let probs = Tensor2::from_vec(N, CLASSES, vec![1.0 / CLASSES as f64; N * CLASSES]).unwrap();
    let y = labels();
    c.bench_function("fusion_step_16", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let input = FusionInput {
                hidden: hidden.iter().map(|h| tape.constant(h.clone())).collect(),
                probs: vec![probs.clone(); m],
                stats: vec![0.5; m],
            };
            let out = model.forward(&mut tape, &input, None).unwrap();
            let loss = cross_entropy(&mut tape, out.logits, &y).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.scalar(loss))
        })
    });
}

fn bench_checks(c: &mut Criterion) {
    c.bench_function("gradcheck_gat_case", |bch| bch.iter(|| black_box(check_case("gat", 0, 0, 1e-4).unwrap())));
    let m: Vec<Vec<u64>> = (0..CLASSES)
        .map(|r| (0..CLASSES).map(|col| if r == col { 50 } else { 3 }).collect())
        .collect();
    c.bench_function("weighted_f1_7", |bch| bch.iter(|| black_box(weighted_f1(black_box(&m)))));
    let a = [0.62, 0.64, 0.61, 0.63, 0.65];
    let b = [0.60, 0.63, 0.61, 0.60, 0.62];
    c.bench_function("paired_t_test_5", |bch| bch.iter(|| black_box(paired_t_test(&a, &b).unwrap())));
}

criterion_group!(benches, bench_tensor, bench_graph_net, bench_fusion, bench_checks);
criterion_main!(benches);
