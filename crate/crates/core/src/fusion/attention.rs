use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, RngStream, Tape, Tensor2, Var};

/// `d × heads` block indicator: column `h` is 1 on the `d / heads` rows of head `h`.
pub fn head_indicator(d: usize, heads: usize) -> Result<Tensor2> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut t = Tensor2::zeros(d, heads);
    for i in 0..d {
        t.set(i, i / dh, 1.0);
    }
    Ok(t)
}

/// Row-aligned multi-head attention where each query row attends over one
/// row from each key matrix.
///
/// `q` is `N×d` or `1×d` (shared query), every key and value is `N×d`.
/// Returns the attended `N×d` output and one `N×heads` weight matrix per key;
/// across keys the weights of every (row, head) sum to 1.
pub fn attend(tape: &mut Tape, q: Var, keys: &[Var], values: &[Var], heads: usize) -> Result<(Var, Vec<Var>)> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::Input(format!("{} keys for {} values", keys.len(), values.len())));
    }
    let d = tape.shape(q).1;
    let ind = head_indicator(d, heads)?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let ind_t = tape.constant(ind.transpose());
    let ind = tape.constant(ind);
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let qk = tape.mul(q, k)?;
        let s = tape.matmul(qk, ind)?;
        scores.push(tape.scale(s, scale)?);
    }
    // constant shift for stability; it cancels in the normalisation
    let (n, h) = tape.shape(scores[0]);
    let mut max = vec![f64::NEG_INFINITY; n * h];
    for &s in &scores {
        for (m, &v) in max.iter_mut().zip(tape.value(s).data()) {
            *m = m.max(v);
        }
    }
    let shift = tape.constant(Tensor2::from_vec(n, h, max)?);
    let mut exps = Vec::with_capacity(scores.len());
    for &s in &scores {
        let z = tape.sub(s, shift)?;
        exps.push(tape.exp(z)?);
    }
    let mut denom = exps[0];
    for &e in &exps[1..] {
        denom = tape.add(denom, e)?;
    }
    let mut weights = Vec::with_capacity(exps.len());
    let mut out: Option<Var> = None;
    for (&e, &v) in exps.iter().zip(values) {
        let a = tape.div(e, denom)?;
        weights.push(a);
        let wide = tape.matmul(a, ind_t)?;
        let term = tape.mul(wide, v)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok((out.expect("at least one key"), weights))
}

/// Each modality queries the other modalities of the same utterance.
/// Values are the gated features themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalAttention {
    pub query: Linear,
    pub key: Linear,
    pub heads: usize,
}

pub struct CrossModalOutput {
    pub features: Vec<Var>,
    /// `weights[m][j]` is the weight of the `j`-th other modality for queries from `m`.
    pub weights: Vec<Vec<Var>>,
}

impl CrossModalAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngStream) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            heads,
        }
    }

    /// `α · attended + β · gated` per modality.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, gated: &[Var], alpha: f64, beta: f64) -> Result<CrossModalOutput> {
        if gated.len() < 2 {
            return Err(Error::Input(format!("cross-modal attention needs 2+ modalities, got {}", gated.len())));
        }
        let mut keys = Vec::with_capacity(gated.len());
        for &h in gated {
            keys.push(self.key.forward(tape, store, h)?);
        }
        let mut features = Vec::with_capacity(gated.len());
        let mut weights = Vec::with_capacity(gated.len());
        for (m, &h) in gated.iter().enumerate() {
            let q = self.query.forward(tape, store, h)?;
            let others: Vec<usize> = (0..gated.len()).filter(|&j| j != m).collect();
            let ks: Vec<Var> = others.iter().map(|&j| keys[j]).collect();
            let vs: Vec<Var> = others.iter().map(|&j| gated[j]).collect();
            let (att, w) = attend(tape, q, &ks, &vs, self.heads)?;
            let att = tape.scale(att, alpha)?;
            let res = tape.scale(h, beta)?;
            features.push(tape.add(att, res)?);
            weights.push(w);
        }
        Ok(CrossModalOutput { features, weights })
    }
}

/// Standard multi-head self-attention over the modality tokens of each
/// utterance, with query, key, value and output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl TokenSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngStream) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            // a key bias only shifts each query's scores uniformly
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            heads,
        }
    }

    /// `x` stacks `groups` token blocks of `N` rows each.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, groups: usize) -> Result<(Var, Vec<Vec<Var>>)> {
        let rows = tape.shape(x).0;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Input(format!("{rows} token rows do not split into {groups} groups")));
        }
        let n = rows / groups;
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mut ks = Vec::with_capacity(groups);
        let mut vs = Vec::with_capacity(groups);
        for g in 0..groups {
            ks.push(tape.slice_rows(k, g * n, n)?);
            vs.push(tape.slice_rows(v, g * n, n)?);
        }
        let mut outs = Vec::with_capacity(groups);
        let mut weights = Vec::with_capacity(groups);
        for g in 0..groups {
            let qg = tape.slice_rows(q, g * n, n)?;
            let (o, w) = attend(tape, qg, &ks, &vs, self.heads)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = tape.concat_rows(&outs)?;
        Ok((self.out.forward(tape, store, cat)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn matches_brute_force_two_by_two() {
        let q = Tensor2::from_rows(&[[1.0, 0.5], [-0.3, 2.0]]).unwrap();
        let k1 = Tensor2::from_rows(&[[0.2, 0.1], [1.0, -1.0]]).unwrap();
        let k2 = Tensor2::from_rows(&[[-0.7, 0.4], [0.3, 0.3]]).unwrap();
        let v1 = Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let v2 = Tensor2::from_rows(&[[-1.0, 0.0], [0.5, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&q, &k1, &k2, &v1, &v2].iter().map(|t| tape.constant((*t).clone())).collect();
        let (out, w) = attend(&mut tape, vars[0], &vars[1..3], &vars[3..5], 1).unwrap();
        let out = tape.value(out).clone();
        for r in 0..2 {
            let dot = |k: &Tensor2| (q.get(r, 0) * k.get(r, 0) + q.get(r, 1) * k.get(r, 1)) / 2f64.sqrt();
            let a = softmax(&[dot(&k1), dot(&k2)]);
            assert!((tape.value(w[0]).get(r, 0) - a[0]).abs() < 1e-15);
            for c in 0..2 {
                let expected = a[0] * v1.get(r, c) + a[1] * v2.get(r, c);
                assert!((out.get(r, c) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn heads_normalise_independently() {
        let mut rng = RngStream::new(3);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor2::randn(5, 8, 1.0, &mut rng));
        let keys: Vec<Var> = (0..3).map(|_| tape.constant(Tensor2::randn(5, 8, 1.0, &mut rng))).collect();
        let (_, w) = attend(&mut tape, q, &keys, &keys, 4).unwrap();
        for i in 0..20 {
            let s: f64 = w.iter().map(|&a| tape.value(a).data()[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_endpoint_and_constant_values() {
        let mut rng = RngStream::new(4);
        let mut store = ParamStore::new();
        let cm = CrossModalAttention::new(&mut store, "x", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let h: Vec<Var> = (0..3).map(|_| tape.constant(Tensor2::randn(2, 4, 1.0, &mut rng))).collect();
        let out = cm.forward(&mut tape, &store, &h, 0.0, 1.0).unwrap();
        for (o, g) in out.features.iter().zip(&h) {
            assert_eq!(tape.value(*o).data(), tape.value(*g).data());
        }
        let c: Vec<Var> = (0..3).map(|_| tape.constant(Tensor2::filled(2, 4, 0.3))).collect();
        let out = cm.forward(&mut tape, &store, &c, 0.7, 0.3).unwrap();
        for o in out.features {
            assert!(tape.value(o).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
        assert!(cm.forward(&mut tape, &store, &h[..1], 0.7, 0.3).is_err());
    }
}
