//! Space-time memory of keys and per-object values.

use tensorlab::kernels::attention_weights;
use tensorlab::{Tape, Tensor, Var};

use crate::config::Similarity;
use crate::error::{config, input, QmvosError, Result};

/// True iff `frame_idx` is a multiple of `r`.
pub fn should_memorize(frame_idx: usize, r: usize) -> Result<bool> {
    if r == 0 {
        return config("mem_interval", "must be at least 1");
    }
    Ok(frame_idx.is_multiple_of(r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    c_k: usize,
    c_v: usize,
    objects: usize,
    similarity: Similarity,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl MemoryBank {
    pub fn new(c_k: usize, c_v: usize, objects: usize, similarity: Similarity) -> Result<Self> {
        if c_k == 0 || c_v == 0 || objects == 0 {
            return input(format!("memory bank widths must be positive (C^k={c_k}, C^v={c_v}, N={objects})"));
        }
        Ok(Self {
            c_k,
            c_v,
            objects,
            similarity,
            keys: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn keys(&self) -> &[Tensor] {
        &self.keys
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Appends a frame: `key` is `C^k×H×W`, `values` is `N×C^v×H×W`.
    pub fn insert(&mut self, key: Tensor, values: Tensor) -> Result<()> {
        let ks = key.shape();
        if ks.len() != 3 || ks[0] != self.c_k {
            return input(format!("memory key shape {ks:?}, expected C^k = {}", self.c_k));
        }
        let vs = values.shape();
        if vs.len() != 4 || vs[0] != self.objects || vs[1] != self.c_v || vs[2..] != ks[1..] {
            return input(format!(
                "memory values shape {vs:?}, expected [{}, {}, {}, {}]",
                self.objects, self.c_v, ks[1], ks[2]
            ));
        }
        if let Some(first) = self.keys.first() {
            if first.shape()[1..] != ks[1..] {
                return input(format!("memory key extents {:?} differ from stored {:?}", &ks[1..], &first.shape()[1..]));
            }
        }
        self.keys.push(key);
        self.values.push(values);
        Ok(())
    }

    /// Readout `N×C^v×H×W` for a query key `C^k×H×W`.
    pub fn readout(&self, query_key: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let keys: Vec<Var> = self.keys.iter().map(|k| tape.constant(k.clone())).collect();
        let values: Vec<Var> = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        let q = tape.constant(query_key.clone());
        let r = readout_graph(&mut tape, &keys, &values, q, self.similarity)?;
        Ok(tape.value(r).clone())
    }

    /// Affinity `HW×THW`: row `q` is the softmax over every memory pixel.
    pub fn affinity(&self, query_key: &Tensor) -> Result<Tensor> {
        if self.is_empty() {
            return Err(empty_bank());
        }
        let mut tape = Tape::inference();
        let keys: Vec<Var> = self.keys.iter().map(|k| tape.constant(k.clone())).collect();
        let q = tape.constant(query_key.clone());
        let (qm, km) = pixel_rows(&mut tape, &keys, q)?;
        let (scale, bias) = kernel_terms(&mut tape, km, self.c_k, self.similarity)?;
        let bias = bias.map(|b| tape.value(b).clone());
        Ok(attention_weights(tape.value(qm), tape.value(km), scale, bias.as_ref())?)
    }
}

fn empty_bank() -> QmvosError {
    QmvosError::Tensor(tensorlab::TensorError::Precondition {
        op: "readout",
        detail: "memory bank is empty".into(),
    })
}

/// Query pixels `HW×C^k` and memory pixels `THW×C^k`.
fn pixel_rows(tape: &mut Tape, keys: &[Var], query: Var) -> Result<(Var, Var)> {
    let qs = tape.shape(query).to_vec();
    if qs.len() != 3 {
        return input(format!("query key must be C^k×H×W, got {qs:?}"));
    }
    let hw = qs[1] * qs[2];
    let mut rows = Vec::with_capacity(keys.len());
    for &k in keys {
        let ks = tape.shape(k).to_vec();
        if ks != qs {
            return input(format!("memory key {ks:?} does not match query key {qs:?}"));
        }
        let k = tape.reshape(k, &[qs[0], hw])?;
        rows.push(tape.transpose(k)?);
    }
    let km = tape.concat(&rows, 0)?;
    let q = tape.reshape(query, &[qs[0], hw])?;
    let qm = tape.transpose(q)?;
    Ok((qm, km))
}

/// Scale and optional per-key bias so that the logits are
/// `⟨q,k⟩/√C^k` (dot) or `−|q−k|²/√C^k` up to a per-row constant (l2).
fn kernel_terms(tape: &mut Tape, km: Var, c_k: usize, sim: Similarity) -> Result<(f64, Option<Var>)> {
    let s = 1.0 / (c_k as f64).sqrt();
    Ok(match sim {
        Similarity::Dot => (s, None),
        Similarity::L2 => {
            let sq = tape.mul(km, km)?;
            let n = tape.sum_axis(sq, 1)?;
            (2.0 * s, Some(tape.scale(n, -s)))
        }
    })
}

/// Differentiable readout over memory frames held on `tape`.
///
/// `keys[t]` is `C^k×H×W`, `values[t]` is `N×C^v×H×W`; returns `N×C^v×H×W`.
pub fn readout_graph(tape: &mut Tape, keys: &[Var], values: &[Var], query: Var, sim: Similarity) -> Result<Var> {
    if keys.is_empty() {
        return Err(empty_bank());
    }
    if keys.len() != values.len() {
        return input(format!("{} memory keys but {} value sets", keys.len(), values.len()));
    }
    let (qm, km) = pixel_rows(tape, keys, query)?;
    let qs = tape.shape(query).to_vec();
    let hw = qs[1] * qs[2];
    let vs = tape.shape(values[0]).to_vec();
    if vs.len() != 4 || vs[2..] != qs[1..] {
        return input(format!("memory values {vs:?} do not match key extents {:?}", &qs[1..]));
    }
    let (n, c_v) = (vs[0], vs[1]);
    let mut vrows = Vec::with_capacity(values.len());
    for &v in values {
        if tape.shape(v) != vs.as_slice() {
            return input(format!("memory values {:?} differ from {vs:?}", tape.shape(v)));
        }
        let v = tape.reshape(v, &[n * c_v, hw])?;
        vrows.push(tape.transpose(v)?);
    }
    let vm = tape.concat(&vrows, 0)?;
    let (scale, bias) = kernel_terms(tape, km, qs[0], sim)?;
    let out = tape.attention(qm, km, vm, scale, bias)?;
    let out = tape.transpose(out)?;
    Ok(tape.reshape(out, &[n, c_v, qs[1], qs[2]])?)
}
