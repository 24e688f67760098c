use crate::error::{Error, Result};
use crate::graphnets::graph::PreparedGraph;
use crate::numerics::{Linear, ParamId, ParamStore, RngStream, Tape, Tensor2, Var};

/// `act(Â X W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub lin: Linear,
    pub relu: bool,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Self {
            lin: Linear::new(store, name, d_in, d_out, true, rng),
            relu: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, a_hat: Var, x: Var) -> Result<Var> {
        let (n, d) = tape.shape(x);
        if d != self.lin.d_in {
            return Err(Error::dim("gcn_forward", (n, d), (self.lin.d_in, self.lin.d_out)));
        }
        let w = tape.param(store, self.lin.weight);
        let xw = tape.matmul(x, w)?;
        let mut y = tape.matmul(a_hat, xw)?;
        if let Some(b) = self.lin.bias {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        if self.relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    pub weight: ParamId,
    pub att_dst: ParamId,
    pub att_src: ParamId,
}

/// Multi-head graph attention. Hidden layers concatenate heads; a final
/// layer averages them.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub d_in: usize,
    pub d_head: usize,
    pub concat: bool,
    pub slope: f64,
    pub relu: bool,
}

pub struct GatOutput {
    pub out: Var,
    /// One `n×n` coefficient matrix per head; row `i` is node `i`'s softmax.
    pub attention: Vec<Var>,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_head: usize, heads: usize, concat: bool, rng: &mut RngStream) -> Self {
        let heads = (0..heads)
            .map(|h| GatHead {
                weight: store.weight(format!("{name}.head{h}.weight"), Tensor2::glorot(d_in, d_head, rng)),
                att_dst: store.weight(format!("{name}.head{h}.att_dst"), Tensor2::glorot(d_head, 1, rng)),
                att_src: store.weight(format!("{name}.head{h}.att_src"), Tensor2::glorot(d_head, 1, rng)),
            })
            .collect();
        Self {
            heads,
            d_in,
            d_head,
            concat,
            slope: 0.2,
            relu: true,
        }
    }

    pub fn d_out(&self) -> usize {
        if self.concat {
            self.d_head * self.heads.len()
        } else {
            self.d_head
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &PreparedGraph, x: Var) -> Result<GatOutput> {
        let (n, d) = tape.shape(x);
        if d != self.d_in || n != graph.nodes() {
            return Err(Error::dim("gat_forward", (n, d), (graph.nodes(), self.d_in)));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = tape.param(store, head.weight);
            let wh = tape.matmul(x, w)?;
            let a_dst = tape.param(store, head.att_dst);
            let a_src = tape.param(store, head.att_src);
            let s_dst = tape.matmul(wh, a_dst)?;
            let s_src = tape.matmul(wh, a_src)?;
            let s_src = tape.transpose(s_src)?;
            // e[i][j] = LeakyReLU(a_dst·Wh_i + a_src·Wh_j)
            let e = tape.add(s_dst, s_src)?;
            let e = tape.leaky_relu(e, self.slope)?;
            let alpha = tape.masked_softmax_rows(e, graph.mask.clone())?;
            outs.push(tape.matmul(alpha, wh)?);
            attention.push(alpha);
        }
        let mut out = if self.concat {
            tape.concat_cols(&outs)?
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / outs.len() as f64)?
        };
        if self.relu {
            out = tape.relu(out)?;
        }
        Ok(GatOutput { out, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphnets::graph::{ConvGraph, Edge, EdgeKind};

    fn path(n: usize) -> PreparedGraph {
        let mut edges = Vec::new();
        for i in 0..n.saturating_sub(1) {
            for (s, d) in [(i, i + 1), (i + 1, i)] {
                edges.push(Edge {
                    src: s,
                    dst: d,
                    kind: EdgeKind::Temporal,
                });
            }
        }
        PreparedGraph::new(ConvGraph::new(n, edges).unwrap())
    }

    fn set(store: &mut ParamStore, id: ParamId, rows: &[&[f64]]) {
        store.get_mut(id).value = Tensor2::from_rows(rows).unwrap();
    }

    #[test]
    fn gcn_edgeless_is_pointwise_and_identity_without_relu() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let mut layer = GcnLayer::new(&mut store, "g", 2, 2, &mut rng);
        set(&mut store, layer.lin.weight, &[&[1.0, 0.0], &[0.0, 1.0]]);
        layer.relu = false;
        let g = PreparedGraph::new(ConvGraph::new(3, vec![]).unwrap());
        let mut tape = Tape::new();
        let a = tape.constant(g.a_hat.clone());
        let xv = Tensor2::from_rows(&[[1.0, -2.0], [0.5, 0.0], [-3.0, 4.0]]).unwrap();
        let x = tape.constant(xv.clone());
        let y = layer.forward(&mut tape, &store, a, x).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());

        layer.relu = true;
        let y = layer.forward(&mut tape, &store, a, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn gcn_two_nodes_averages_rows() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let layer = GcnLayer::new(&mut store, "g", 1, 1, &mut rng);
        set(&mut store, layer.lin.weight, &[&[2.0]]);
        let g = path(2);
        let mut tape = Tape::new();
        let a = tape.constant(g.a_hat.clone());
        let x = tape.constant(Tensor2::from_rows(&[[1.0], [3.0]]).unwrap());
        let y = layer.forward(&mut tape, &store, a, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 4.0]);
    }

    #[test]
    fn gat_isolated_node_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        let layer = GatLayer::new(&mut store, "a", 3, 2, 4, true, &mut rng);
        let g = PreparedGraph::new(ConvGraph::new(1, vec![]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[[0.3, -0.1, 2.0]]).unwrap());
        let out = layer.forward(&mut tape, &store, &g, x).unwrap();
        for a in out.attention {
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn gat_identical_neighbours_get_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let layer = GatLayer::new(&mut store, "a", 2, 3, 2, false, &mut rng);
        let g = path(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::filled(3, 2, 0.7));
        let out = layer.forward(&mut tape, &store, &g, x).unwrap();
        for a in out.attention {
            let a = tape.value(a);
            // middle node sees itself and two neighbours
            for j in 0..3 {
                assert!((a.get(1, j) - 1.0 / 3.0).abs() < 1e-15);
            }
            assert!((a.get(0, 0) - 0.5).abs() < 1e-15 && a.get(0, 2) == 0.0);
        }
    }

    #[test]
    fn gat_two_node_path_matches_scalar_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let layer = GatLayer::new(&mut store, "a", 1, 1, 1, false, &mut rng);
        let h = &layer.heads[0];
        set(&mut store, h.weight, &[&[2.0]]);
        set(&mut store, h.att_dst, &[&[0.5]]);
        set(&mut store, h.att_src, &[&[-1.0]]);
        let g = path(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[[1.0], [-1.0]]).unwrap());
        let out = layer.forward(&mut tape, &store, &g, x).unwrap();

        let wh = [2.0, -2.0];
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let mut expected = [0.0; 2];
        for i in 0..2 {
            let e: Vec<f64> = (0..2).map(|j| lrelu(0.5 * wh[i] - wh[j])).collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            let v: f64 = (0..2).map(|j| e[j].exp() / z * wh[j]).sum();
            expected[i] = v.max(0.0);
        }
        let got = tape.value(out.out).data();
        assert!((got[0] - expected[0]).abs() < 1e-14);
        assert!((got[1] - expected[1]).abs() < 1e-14);
    }
}
