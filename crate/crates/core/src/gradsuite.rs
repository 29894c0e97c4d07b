//! Finite-difference checks of every differentiable block, on small seeded
//! instances.

use tensorlab::gradcheck::{grad_check, probe_weights, DEFAULT_STEP};
use tensorlab::{SplitMix64, Tape, Tensor, Var};

use crate::config::RunConfig;
use crate::error::Result;
use crate::querymod::{serialize_readout, QueryModule};
use crate::segnet::{Pyramid, SegNet};
use crate::weights::NetWeights;

/// Relative-error threshold every block must stay under.
pub const THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub block: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

fn suite_cfg() -> RunConfig {
    RunConfig {
        c_k: 4,
        c_v: 6,
        c_d: 5,
        c4: 3,
        c8: 4,
        c16: 4,
        ffn_hidden: 7,
        ..RunConfig::default()
    }
}

/// Random weights with non-trivial biases and LayerNorm affines.
fn suite_weights(cfg: &RunConfig, seed: u64) -> Result<NetWeights> {
    let mut w = NetWeights::init(cfg, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0xB1A5);
    let names: Vec<String> = w.store.names().map(String::from).collect();
    for n in names {
        let t = w.store.get(&n).expect("listed").clone();
        if t.rank() == 1 {
            let base = if n.ends_with(".g") { 1.0 } else { 0.0 };
            w.store.insert(n, Tensor::from_fn(t.shape(), |_| base + rng.uniform(-0.5, 0.5)));
        }
    }
    Ok(w)
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> tensorlab::Result<Var> {
    let probe = probe_weights(tape.shape(out), seed);
    tape.weighted_sum(out, probe)
}

/// Runs one block over `instances` seeds and keeps the worst error.
fn block(
    name: &'static str,
    instances: usize,
    seed: u64,
    mut check: impl FnMut(&mut SplitMix64, u64) -> Result<f64>,
) -> Result<BlockResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let mut rng = SplitMix64::new(s).fork(name.len() as u64);
        worst = worst.max(check(&mut rng, s)?);
    }
    Ok(BlockResult {
        block: name,
        instances,
        max_rel_error: worst,
    })
}

fn to_core<T>(r: tensorlab::Result<T>) -> Result<T> {
    Ok(r?)
}

/// All blocks: primitives, the SIM and QCIM blocks, scale fusion with query
/// pooling, and mask prediction with respect to the queries.
pub fn run(instances: usize, seed: u64) -> Result<Vec<BlockResult>> {
    let h = DEFAULT_STEP;
    let cfg = suite_cfg();
    let mut out = Vec::new();

    out.push(block("linear", instances, seed, |rng, s| {
        let (w, b) = (rng.tensor(&[4, 5], -1.0, 1.0), rng.tensor(&[5], -1.0, 1.0));
        let x = rng.tensor(&[3, 4], -1.0, 1.0);
        to_core(grad_check(
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.linear(x, w, b)?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("conv1x1", instances, seed, |rng, s| {
        let (w, b) = (rng.tensor(&[4, 3], -1.0, 1.0), rng.tensor(&[4], -1.0, 1.0));
        let x = rng.tensor(&[3, 3, 2], -1.0, 1.0);
        to_core(grad_check(
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv1x1(x, w, b)?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("layer_norm", instances, seed, |rng, s| {
        let (g, b) = (rng.tensor(&[6], 0.5, 1.5), rng.tensor(&[6], -0.5, 0.5));
        let x = rng.tensor(&[3, 6], -2.0, 2.0);
        to_core(grad_check(
            |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, g, b)?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("softmax", instances, seed, |rng, s| {
        let x = rng.tensor(&[3, 5], -2.0, 2.0);
        to_core(grad_check(
            |t, x| {
                let y = t.softmax(x, 1)?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("scaled_dot_attention", instances, seed, |rng, s| {
        let q = rng.tensor(&[3, 4], -1.0, 1.0);
        let k = rng.tensor(&[5, 4], -1.0, 1.0);
        let v = rng.tensor(&[5, 3], -1.0, 1.0);
        let mut worst: f64 = 0.0;
        for which in 0..3 {
            let x = [&q, &k, &v][which].clone();
            let e = grad_check(
                |t, x| {
                    let mut parts = [None, None, None];
                    parts[which] = Some(x);
                    let [qv, kv, vv] = [0, 1, 2].map(|i| parts[i].unwrap_or_else(|| t.constant([&q, &k, &v][i].clone())));
                    let y = t.scaled_dot_attention(qv, kv, vv, true)?;
                    project(t, y, s)
                },
                &x,
                h,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })?);

    out.push(block("ffn", instances, seed, |rng, s| {
        let (w1, b1) = (rng.tensor(&[4, 7], -1.0, 1.0), rng.tensor(&[7], -0.5, 0.5));
        let (w2, b2) = (rng.tensor(&[7, 4], -1.0, 1.0), rng.tensor(&[4], -0.5, 0.5));
        let x = rng.tensor(&[3, 4], -1.0, 1.0);
        to_core(grad_check(
            |t, x| {
                let p = [&w1, &b1, &w2, &b2].map(|p| t.constant(p.clone()));
                let y = t.ffn(x, p[0], p[1], p[2], p[3])?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("sim_interact", instances, seed, |rng, s| {
        let w = suite_weights(&cfg, s)?;
        let x = rng.tensor(&[3, cfg.c_v], -1.0, 1.0);
        to_core(grad_check(
            |t, x| {
                let y = QueryModule::new(&w, &cfg).sim_interact(t, x).map_err(into_tensor)?;
                project(t, y, s)
            },
            &x,
            h,
        ))
    })?);

    out.push(block("qcim_refine", instances, seed, |rng, s| {
        let w = suite_weights(&cfg, s)?;
        let x = rng.tensor(&[3, cfg.c_v], -1.0, 1.0);
        let readout = rng.tensor(&[3, cfg.c_v, 2, 2], -1.0, 1.0);
        let wrt_x = grad_check(
            |t, x| {
                let r = t.constant(readout.clone());
                let m = serialize_readout(t, r).map_err(into_tensor)?;
                let y = QueryModule::new(&w, &cfg).qcim_refine(t, x, m).map_err(into_tensor)?;
                project(t, y, s)
            },
            &x,
            h,
        )?;
        let wrt_readout = grad_check(
            |t, r| {
                let xv = t.constant(x.clone());
                let m = serialize_readout(t, r).map_err(into_tensor)?;
                let y = QueryModule::new(&w, &cfg).qcim_refine(t, xv, m).map_err(into_tensor)?;
                project(t, y, s)
            },
            &readout,
            h,
        )?;
        Ok(wrt_x.max(wrt_readout))
    })?);

    out.push(block("fuse_scales+init_queries", instances, seed, |rng, s| {
        let w = suite_weights(&cfg, s)?;
        let f4 = rng.tensor(&[cfg.c4, 8, 8], 0.0, 1.0);
        let f8 = rng.tensor(&[cfg.c8, 4, 4], 0.0, 1.0);
        let f16 = rng.tensor(&[cfg.c16, 2, 2], 0.0, 1.0);
        let masks = rng.tensor(&[2, 8, 8], 0.0, 1.0);
        let run = |t: &mut Tape, f8: Var, f16: Var, m: Var| -> tensorlab::Result<Var> {
            let pyr = Pyramid {
                f4: t.constant(f4.clone()),
                f8,
                f16,
            };
            let qm = QueryModule::new(&w, &cfg);
            let fused = qm.fuse_scales(t, &pyr).map_err(into_tensor)?;
            let (q, _) = qm.init_queries(t, fused, m).map_err(into_tensor)?;
            project(t, q, s)
        };
        let a = grad_check(
            |t, x| {
                let (f16v, m) = (t.constant(f16.clone()), t.constant(masks.clone()));
                run(t, x, f16v, m)
            },
            &f8,
            h,
        )?;
        let b = grad_check(
            |t, x| {
                let (f8v, m) = (t.constant(f8.clone()), t.constant(masks.clone()));
                run(t, f8v, x, m)
            },
            &f16,
            h,
        )?;
        let c = grad_check(
            |t, x| {
                let (f8v, f16v) = (t.constant(f8.clone()), t.constant(f16.clone()));
                run(t, f8v, f16v, x)
            },
            &masks,
            h,
        )?;
        Ok(a.max(b).max(c))
    })?);

    out.push(block("predict_masks", instances, seed, |rng, s| {
        let w = suite_weights(&cfg, s)?;
        let decs: Vec<Tensor> = (0..3).map(|_| rng.tensor(&[cfg.c_d, 4, 4], -1.0, 1.0)).collect();
        let q = rng.tensor(&[3, cfg.c_v], -1.0, 1.0);
        to_core(grad_check(
            |t, q| {
                let d: Vec<Var> = decs.iter().map(|d| t.constant(d.clone())).collect();
                let l = SegNet::new(&w, &cfg).predict_masks(t, &d, q).map_err(into_tensor)?;
                project(t, l, s)
            },
            &q,
            h,
        ))
    })?);

    Ok(out)
}

fn into_tensor(e: crate::QmvosError) -> tensorlab::TensorError {
    match e {
        crate::QmvosError::Tensor(t) => t,
        other => tensorlab::TensorError::Precondition {
            op: "gradient suite",
            detail: other.to_string(),
        },
    }
}
