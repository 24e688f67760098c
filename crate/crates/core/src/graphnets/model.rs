use serde::{Deserialize, Serialize};

use crate::datagen::Modality;
use crate::error::{Error, Result};
use crate::graphnets::graph::PreparedGraph;
use crate::graphnets::layers::{GatLayer, GcnLayer};
use crate::numerics::{dropout, Linear, ParamStore, RngStream, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Gat,
}

pub const TEACHER_LAYERS: usize = 4;
pub const STUDENT_LAYERS: usize = 2;

/// Architecture of one modality network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNetSpec {
    pub name: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub hidden: usize,
    pub classes: usize,
    pub layers: usize,
    pub heads: usize,
}

impl GraphNetSpec {
    /// Text teacher: four GAT layers.
    pub fn teacher(d_in: usize, hidden: usize, classes: usize, heads: usize) -> Self {
        Self {
            name: "teacher".into(),
            kind: LayerKind::Gat,
            d_in,
            hidden,
            classes,
            layers: TEACHER_LAYERS,
            heads,
        }
    }

    /// Two-layer students: GCN for audio, GAT for visual.
    pub fn student(modality: Modality, d_in: usize, hidden: usize, classes: usize, heads: usize) -> Result<Self> {
        let kind = match modality {
            Modality::Audio => LayerKind::Gcn,
            Modality::Visual => LayerKind::Gat,
            Modality::Text => return Err(Error::Input("students exist for audio and visual only".into())),
        };
        Ok(Self {
            name: format!("student_{}", modality.name()),
            kind,
            d_in,
            hidden,
            classes,
            layers: STUDENT_LAYERS,
            heads,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Gcn(GcnLayer),
    Gat(GatLayer),
}

#[derive(Debug, Clone)]
pub struct GraphNet {
    pub spec: GraphNetSpec,
    pub store: ParamStore,
    layers: Vec<Layer>,
    head: Linear,
}

pub struct GraphForward {
    /// Output of the last graph layer (`N×hidden`).
    pub hidden: Var,
    pub logits: Var,
}

impl GraphNet {
    pub fn new(spec: GraphNetSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.layers == 0 || spec.hidden == 0 || spec.classes == 0 || spec.heads == 0 {
            return Err(Error::Config(format!("degenerate network spec {spec:?}")));
        }
        if spec.kind == LayerKind::Gat && spec.hidden % spec.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                spec.hidden, spec.heads
            )));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers);
        let mut d = spec.d_in;
        for l in 0..spec.layers {
            let name = format!("{}.layer{l}", spec.name);
            let last = l + 1 == spec.layers;
            let layer = match spec.kind {
                LayerKind::Gcn => Layer::Gcn(GcnLayer::new(&mut store, &name, d, spec.hidden, rng)),
                LayerKind::Gat => {
                    let d_head = if last { spec.hidden } else { spec.hidden / spec.heads };
                    Layer::Gat(GatLayer::new(&mut store, &name, d, d_head, spec.heads, !last, rng))
                }
            };
            layers.push(layer);
            d = spec.hidden;
        }
        let head = Linear::new(&mut store, &format!("{}.head", spec.name), spec.hidden, spec.classes, true, rng);
        Ok(Self { spec, store, layers, head })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn forward(&self, tape: &mut Tape, graph: &PreparedGraph, x: Var) -> Result<GraphForward> {
        self.forward_in(tape, &self.store, graph, x)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// network's layout.
    pub fn forward_in(&self, tape: &mut Tape, store: &ParamStore, graph: &PreparedGraph, x: Var) -> Result<GraphForward> {
        self.run(tape, store, graph, x, None)
    }

    /// Training forward with dropout of rate `p` on the input of every graph
    /// layer.
    pub fn forward_train(&self, tape: &mut Tape, graph: &PreparedGraph, x: Var, p: f64, rng: &mut RngStream) -> Result<GraphForward> {
        self.run(tape, &self.store, graph, x, Some((p, rng)))
    }

    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &PreparedGraph,
        x: Var,
        mut drop: Option<(f64, &mut RngStream)>,
    ) -> Result<GraphForward> {
        let (n, d) = tape.shape(x);
        if d != self.spec.d_in || n != graph.nodes() {
            return Err(Error::dim("graph network input", (n, d), (graph.nodes(), self.spec.d_in)));
        }
        let a_hat = match self.spec.kind {
            LayerKind::Gcn => Some(tape.constant(graph.a_hat.clone())),
            LayerKind::Gat => None,
        };
        let mut h = x;
        for layer in &self.layers {
            if let Some((p, rng)) = drop.as_mut() {
                if *p > 0.0 {
                    h = dropout(tape, h, *p, rng)?;
                }
            }
            let out = match layer {
                Layer::Gcn(l) => l.forward(tape, store, a_hat.expect("gcn adjacency"), h)?,
                Layer::Gat(l) => l.forward(tape, store, graph, h)?.out,
            };
            // skip connection wherever the width is unchanged
            h = if tape.shape(out) == tape.shape(h) { tape.add(out, h)? } else { out };
        }
        let logits = self.head.forward(tape, store, h)?;
        Ok(GraphForward { hidden: h, logits })
    }

    /// Evaluation-mode forward returning `(hidden, logits)` values.
    pub fn predict(&self, graph: &PreparedGraph, features: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, graph, x)?;
        Ok((tape.value(out.hidden).clone(), tape.value(out.logits).clone()))
    }
}

pub fn teacher_forward(teacher: &GraphNet, text: &Tensor2, graph: &PreparedGraph) -> Result<Tensor2> {
    Ok(teacher.predict(graph, text)?.1)
}

pub fn student_forward(student: &GraphNet, modality: Modality, features: &Tensor2, graph: &PreparedGraph) -> Result<Tensor2> {
    let expected = GraphNetSpec::student(modality, student.spec.d_in, student.spec.hidden, student.spec.classes, student.spec.heads)?;
    if expected.kind != student.spec.kind {
        return Err(Error::Input(format!(
            "network `{}` is not a {} student",
            student.spec.name,
            modality.name()
        )));
    }
    Ok(student.predict(graph, features)?.1)
}
