//! Object queries: scale-aware initialization with multi-object interaction
//! (SIM) and query-content interaction with the memory readout (QCIM).

use tensorlab::{ParamStore, Tape, Tensor, Var};

use crate::config::{CrossSource, InitScales, RunConfig};
use crate::error::{input, Result};
use crate::segnet::{FeaturePyramid, Pyramid};
use crate::weights::{Init, NetWeights, SpecList};

pub(crate) fn specs(cfg: &RunConfig, s: &mut SpecList) {
    let cv = cfg.c_v;
    s.conv("sim.fuse.c1", cfg.c16, cv, 1, Init::Lecun);
    match cfg.init_scales {
        InitScales::F16 => {}
        InitScales::F16F8 => s.conv("sim.fuse.c2", cv + cfg.c8, cv, 1, Init::Lecun),
        InitScales::F16F8F4 => {
            s.conv("sim.fuse.c2", cv + cfg.c8, cv, 1, Init::Lecun);
            s.conv("sim.fuse.c3", cv + cfg.c4, cv, 1, Init::Lecun);
        }
    }
    for i in 0..cfg.sim_blocks {
        let p = format!("sim.b{i}");
        attn_specs(s, &format!("{p}.sa"), cv, cv);
        s.layer_norm(&format!("{p}.ln1"), cv);
        ffn_specs(s, &format!("{p}.ffn"), cv, cfg.ffn_hidden);
        s.layer_norm(&format!("{p}.ln2"), cv);
    }
    let src = match cfg.qcim_source {
        CrossSource::Readout => cv,
        CrossSource::F16 => cfg.c16,
    };
    for i in 0..cfg.qcim_blocks {
        let p = format!("qcim.b{i}");
        attn_specs(s, &format!("{p}.sa"), cv, cv);
        s.layer_norm(&format!("{p}.ln1"), cv);
        attn_specs(s, &format!("{p}.ca"), cv, src);
        s.layer_norm(&format!("{p}.ln2"), cv);
        ffn_specs(s, &format!("{p}.ffn"), cv, cfg.ffn_hidden);
        s.layer_norm(&format!("{p}.ln3"), cv);
    }
}

fn attn_specs(s: &mut SpecList, p: &str, dq: usize, dkv: usize) {
    s.linear(&format!("{p}.q"), dq, dq, Init::Lecun);
    s.linear(&format!("{p}.k"), dkv, dq, Init::Lecun);
    s.linear(&format!("{p}.v"), dkv, dq, Init::Lecun);
}

fn ffn_specs(s: &mut SpecList, p: &str, d: usize, hidden: usize) {
    s.linear(&format!("{p}.l1"), d, hidden, Init::He);
    s.linear(&format!("{p}.l2"), hidden, d, Init::Lecun);
}

/// Per-object query rows `N×C^v` plus flags for objects whose mask was empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectQuerySet {
    pub q: Tensor,
    pub empty: Vec<bool>,
}

impl ObjectQuerySet {
    pub fn len(&self) -> usize {
        self.empty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empty.is_empty()
    }
}

/// Graph builder for SIM and QCIM.
#[derive(Clone, Copy)]
pub struct QueryModule<'a> {
    pub w: &'a ParamStore,
    pub cfg: &'a RunConfig,
}

impl<'a> QueryModule<'a> {
    pub fn new(w: &'a NetWeights, cfg: &'a RunConfig) -> Self {
        Self { w: &w.store, cfg }
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(self.w, name)?)
    }

    fn conv1x1(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        Ok(tape.conv1x1(x, w, b)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        Ok(tape.linear(x, w, b)?)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{name}.g"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w1 = self.p(tape, &format!("{name}.l1.w"))?;
        let b1 = self.p(tape, &format!("{name}.l1.b"))?;
        let w2 = self.p(tape, &format!("{name}.l2.w"))?;
        let b2 = self.p(tape, &format!("{name}.l2.b"))?;
        Ok(tape.ffn(x, w1, b1, w2, b2)?)
    }

    /// Multi-head `softmax(s·QKᵀ)V` with projections under `name`;
    /// `s = 1/√d_head` when `scaled`, else 1.
    pub fn attend(&self, tape: &mut Tape, name: &str, xq: Var, xkv: Var, scaled: bool) -> Result<Var> {
        let q = self.linear(tape, xq, &format!("{name}.q"))?;
        let k = self.linear(tape, xkv, &format!("{name}.k"))?;
        let v = self.linear(tape, xkv, &format!("{name}.v"))?;
        let heads = self.cfg.heads;
        let dh = self.cfg.c_v / heads;
        let scale = if scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
        if heads == 1 {
            return Ok(tape.attention(q, k, v, scale, None)?);
        }
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            outs.push(tape.attention(qh, kh, vh, scale, None)?);
        }
        Ok(tape.concat(&outs, 1)?)
    }

    /// Fused map `C^v×h×w`: `Conv2(Concat(Conv1(Upsample(F16)), F8))` by default.
    pub fn fuse_scales(&self, tape: &mut Tape, pyr: &Pyramid) -> Result<Var> {
        let (s16, s8) = (tape.shape(pyr.f16).to_vec(), tape.shape(pyr.f8).to_vec());
        if s16.len() != 3 || s8.len() != 3 || s16[1] * 2 != s8[1] || s16[2] * 2 != s8[2] {
            return input(format!("F16 {s16:?} is not half of F8 {s8:?}"));
        }
        if self.cfg.init_scales == InitScales::F16 {
            return self.conv1x1(tape, pyr.f16, "sim.fuse.c1");
        }
        let up = tape.upsample2x(pyr.f16)?;
        let f16_hat = self.conv1x1(tape, up, "sim.fuse.c1")?;
        let cat = tape.concat(&[f16_hat, pyr.f8], 0)?;
        let fused = self.conv1x1(tape, cat, "sim.fuse.c2")?;
        if self.cfg.init_scales == InitScales::F16F8 {
            return Ok(fused);
        }
        let up = tape.upsample2x(fused)?;
        let cat = tape.concat(&[up, pyr.f4], 0)?;
        self.conv1x1(tape, cat, "sim.fuse.c3")
    }

    /// Masked global average pooling of `f_fuse` under area-pooled `masks` (`N×H×W`).
    pub fn init_queries(&self, tape: &mut Tape, f_fuse: Var, masks: Var) -> Result<(Var, Vec<bool>)> {
        init_queries_graph(tape, f_fuse, masks)
    }

    /// One SIM block per configured depth; SA is skipped when interaction is off.
    pub fn sim_interact(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut x = x;
        for i in 0..self.cfg.sim_blocks {
            let p = format!("sim.b{i}");
            let pre = if self.cfg.sim_interaction {
                let sa = self.attend(tape, &format!("{p}.sa"), x, x, true)?;
                tape.add(sa, x)?
            } else {
                x
            };
            let xh = self.layer_norm(tape, pre, &format!("{p}.ln1"))?;
            let f = self.ffn(tape, xh, &format!("{p}.ffn"))?;
            let sum = tape.add(f, xh)?;
            x = self.layer_norm(tape, sum, &format!("{p}.ln2"))?;
        }
        Ok(x)
    }

    /// QCIM blocks over content tokens `m` (`rows×d`).
    pub fn qcim_refine(&self, tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
        if tape.shape(m).len() != 2 {
            return input(format!("content tokens must be rows×channels, got {:?}", tape.shape(m)));
        }
        let mut x = x;
        for i in 0..self.cfg.qcim_blocks {
            let p = format!("qcim.b{i}");
            let sa = self.attend(tape, &format!("{p}.sa"), x, x, true)?;
            let sum = tape.add(sa, x)?;
            let x1 = self.layer_norm(tape, sum, &format!("{p}.ln1"))?;
            let ca = self.attend(tape, &format!("{p}.ca"), x1, m, self.cfg.ca_scaling)?;
            let sum = tape.add(ca, x1)?;
            let x2 = self.layer_norm(tape, sum, &format!("{p}.ln2"))?;
            let f = self.ffn(tape, x2, &format!("{p}.ffn"))?;
            let sum = tape.add(f, x2)?;
            x = self.layer_norm(tape, sum, &format!("{p}.ln3"))?;
        }
        Ok(x)
    }

    /// `fuse_scales → init_queries → sim_interact` for masks at any stride
    /// that divides the fused map.
    pub fn propagate(&self, tape: &mut Tape, pyr: &Pyramid, masks: Var) -> Result<(Var, Vec<bool>)> {
        let fused = self.fuse_scales(tape, pyr)?;
        let (x, empty) = self.init_queries(tape, fused, masks)?;
        Ok((self.sim_interact(tape, x)?, empty))
    }
}

pub(crate) fn init_queries_graph(tape: &mut Tape, f_fuse: Var, masks: Var) -> Result<(Var, Vec<bool>)> {
    let fs = tape.shape(f_fuse).to_vec();
    let ms = tape.shape(masks).to_vec();
    if fs.len() != 3 || ms.len() != 3 {
        return input(format!("init_queries: features {fs:?}, masks {ms:?}"));
    }
    let (n, h, w) = (ms[0], fs[1], fs[2]);
    if !ms[1].is_multiple_of(h) || !ms[2].is_multiple_of(w) || ms[1] / h != ms[2] / w {
        return input(format!("mask extents {:?} are not an integer multiple of {h}×{w}", &ms[1..]));
    }
    let k = ms[1] / h;
    let pooled = if k == 1 { masks } else { tape.avg_pool(masks, k)? };
    let pooled = tape.reshape(pooled, &[n, h * w])?;
    let empty = tape
        .value(pooled)
        .data()
        .chunks(h * w)
        .map(|row| row.iter().sum::<f64>() == 0.0)
        .collect();
    let feats = tape.reshape(f_fuse, &[fs[0], h * w])?;
    Ok((tape.masked_mean(pooled, feats)?, empty))
}

/// Flattens per-object readouts `N×C×H×W` into content tokens `NHW×C`.
pub fn serialize_readout(tape: &mut Tape, readout: Var) -> Result<Var> {
    let s = tape.shape(readout).to_vec();
    if s.len() != 4 {
        return input(format!("readout must be N×C×H×W, got {s:?}"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = tape.slice(readout, 0, i, 1)?;
        let r = tape.reshape(r, &[c, hw])?;
        rows.push(tape.transpose(r)?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Flattens a `C×H×W` map into `HW×C` tokens.
pub fn serialize_map(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return input(format!("feature map must be C×H×W, got {s:?}"));
    }
    let r = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok(tape.transpose(r)?)
}

fn pyramid_on(tape: &mut Tape, pyr: &FeaturePyramid) -> Pyramid {
    Pyramid {
        f4: tape.constant(pyr.f4.clone()),
        f8: tape.constant(pyr.f8.clone()),
        f16: tape.constant(pyr.f16.clone()),
    }
}

pub fn fuse_scales(pyr: &FeaturePyramid, w: &NetWeights, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let p = pyramid_on(&mut tape, pyr);
    let f = QueryModule::new(w, cfg).fuse_scales(&mut tape, &p)?;
    Ok(tape.value(f).clone())
}

pub fn init_queries(f_fuse: &Tensor, masks: &Tensor) -> Result<ObjectQuerySet> {
    let mut tape = Tape::inference();
    let f = tape.constant(f_fuse.clone());
    let m = tape.constant(masks.clone());
    let (q, empty) = init_queries_graph(&mut tape, f, m)?;
    Ok(ObjectQuerySet {
        q: tape.value(q).clone(),
        empty,
    })
}

pub fn sim_interact(x: &ObjectQuerySet, w: &NetWeights, cfg: &RunConfig) -> Result<ObjectQuerySet> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.q.clone());
    let out = QueryModule::new(w, cfg).sim_interact(&mut tape, v)?;
    Ok(ObjectQuerySet {
        q: tape.value(out).clone(),
        empty: x.empty.clone(),
    })
}

/// QCIM over a readout `N×C^v×H×W` whose object count must match the queries.
pub fn qcim_refine(x: &ObjectQuerySet, readout: &Tensor, w: &NetWeights, cfg: &RunConfig) -> Result<ObjectQuerySet> {
    if readout.rank() != 4 || readout.dim(0) != x.len() {
        return input(format!("readout {:?} for {} queries", readout.shape(), x.len()));
    }
    let mut tape = Tape::inference();
    let v = tape.constant(x.q.clone());
    let r = tape.constant(readout.clone());
    let m = serialize_readout(&mut tape, r)?;
    let out = QueryModule::new(w, cfg).qcim_refine(&mut tape, v, m)?;
    Ok(ObjectQuerySet {
        q: tape.value(out).clone(),
        empty: x.empty.clone(),
    })
}
