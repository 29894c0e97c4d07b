//! Frame-by-frame segmentation, toy training and the overhead benchmark.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use tensorlab::{adamw_step, AdamWConfig, SplitMix64, Tape, Tensor, Var};

use crate::config::{CrossSource, QueryMode, RunConfig};
use crate::error::{input, Result};
use crate::evalsynth::{LabelMap, SyntheticVideo};
use crate::membank::{readout_graph, should_memorize, MemoryBank};
use crate::querymod::{serialize_map, serialize_readout, ObjectQuerySet, QueryModule};
use crate::segnet::{check_image, SegNet};
use crate::weights::NetWeights;

/// Wall-clock seconds per stage for one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode: f64,
    pub readout: f64,
    pub qcim: f64,
    pub decode: f64,
    pub projection: f64,
    pub predict: f64,
    pub upsample: f64,
    pub memorize: f64,
    pub propagate: f64,
    pub total: f64,
}

impl StageTimings {
    /// SIM (propagation), QCIM and the query projection.
    pub fn querymod(&self) -> f64 {
        self.qcim + self.projection + self.propagate
    }

    fn add(&mut self, o: &StageTimings) {
        self.encode += o.encode;
        self.readout += o.readout;
        self.qcim += o.qcim;
        self.decode += o.decode;
        self.projection += o.projection;
        self.predict += o.predict;
        self.upsample += o.upsample;
        self.memorize += o.memorize;
        self.propagate += o.propagate;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> StageTimings {
        StageTimings {
            encode: self.encode * s,
            readout: self.readout * s,
            qcim: self.qcim * s,
            decode: self.decode * s,
            projection: self.projection * s,
            predict: self.predict * s,
            upsample: self.upsample * s,
            memorize: self.memorize * s,
            propagate: self.propagate * s,
            total: self.total * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegResult {
    /// One map per input frame; frame 0 is the given annotation.
    pub labels: Vec<LabelMap>,
    /// `(N+1)×H×W` channel probabilities; `None` for frame 0.
    pub probs: Vec<Option<Tensor>>,
    pub timings: Vec<StageTimings>,
    pub memorized: Vec<usize>,
    /// Queries entering QCIM at each frame `t ≥ 1` (empty when query modulation is off).
    pub qcim_inputs: Vec<ObjectQuerySet>,
}

/// Query rows on the tape plus per-object empty flags.
type Queries = (Var, Vec<bool>);

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

struct Graph<'a> {
    net: SegNet<'a>,
    qm: QueryModule<'a>,
    cfg: &'a RunConfig,
}

struct StepOut {
    logits: Var,
    probs: Var,
    memory: Option<(Var, Var)>,
    next_queries: Option<(Var, Vec<bool>)>,
}

impl<'a> Graph<'a> {
    fn new(w: &'a NetWeights, cfg: &'a RunConfig) -> Self {
        Self {
            net: SegNet::new(w, cfg),
            qm: QueryModule::new(w, cfg),
            cfg,
        }
    }

    /// Memory values `N×C^v×h×w` for masks `N×H×W`.
    fn values(&self, tape: &mut Tape, image: Var, masks: Var) -> Result<Var> {
        let s = tape.shape(masks).to_vec();
        let mut slabs = Vec::with_capacity(s[0]);
        for n in 0..s[0] {
            let m = tape.slice(masks, 0, n, 1)?;
            let v = self.net.encode_mask(tape, image, m)?;
            let vs = tape.shape(v).to_vec();
            slabs.push(tape.reshape(v, &[1, vs[0], vs[1], vs[2]])?);
        }
        Ok(tape.concat(&slabs, 0)?)
    }

    /// Frame 0: key, values and (with query modulation) queries from the annotation.
    fn bootstrap(&self, tape: &mut Tape, image: Var, masks: Var) -> Result<(Var, Var, Option<Queries>)> {
        let pyr = self.net.encode_frame(tape, image)?;
        let key = self.net.key(tape, pyr.f16)?;
        let values = self.values(tape, image, masks)?;
        let queries = if self.cfg.query_modulation {
            Some(self.qm.propagate(tape, &pyr, masks)?)
        } else {
            None
        };
        Ok((key, values, queries))
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        tape: &mut Tape,
        t: usize,
        image: Var,
        keys: &[Var],
        values: &[Var],
        queries: Option<Var>,
        clock: &mut StageTimings,
    ) -> Result<StepOut> {
        let now = Instant::now();
        let pyr = self.net.encode_frame(tape, image)?;
        let key = self.net.key(tape, pyr.f16)?;
        clock.encode += secs(now);

        let now = Instant::now();
        let readout = readout_graph(tape, keys, values, key, self.cfg.similarity)?;
        let n = tape.shape(readout)[0];
        clock.readout += secs(now);

        let refined = match queries {
            Some(q) => {
                let now = Instant::now();
                let content = match self.cfg.qcim_source {
                    CrossSource::Readout => serialize_readout(tape, readout)?,
                    CrossSource::F16 => serialize_map(tape, pyr.f16)?,
                };
                let r = self.qm.qcim_refine(tape, q, content)?;
                clock.qcim += secs(now);
                Some(r)
            }
            None => None,
        };

        let now = Instant::now();
        let skips = self.net.decoder_skips(tape, &pyr)?;
        let mut decs = Vec::with_capacity(n);
        for i in 0..n {
            let r = tape.slice(readout, 0, i, 1)?;
            let rs = tape.shape(r).to_vec();
            let r = tape.reshape(r, &rs[1..])?;
            decs.push(self.net.decode(tape, r, &skips)?);
        }
        clock.decode += secs(now);

        let logits = match refined {
            Some(q) => {
                let now = Instant::now();
                let filters = self.net.project_queries(tape, q)?;
                clock.projection += secs(now);
                let now = Instant::now();
                let l = self.net.apply_filters(tape, filters, &decs)?;
                clock.predict += secs(now);
                l
            }
            None => {
                let now = Instant::now();
                let l = self.net.predict_static(tape, &decs)?;
                clock.predict += secs(now);
                l
            }
        };
        let now = Instant::now();
        let probs = tape.softmax(logits, 0)?;
        clock.predict += secs(now);

        let memory = if should_memorize(t, self.cfg.mem_interval)? {
            let now = Instant::now();
            let is = tape.shape(image).to_vec();
            let full = tape.resize(probs, is[1], is[2])?;
            let masks = tape.slice(full, 0, 1, n)?;
            let v = self.values(tape, image, masks)?;
            clock.memorize += secs(now);
            Some((key, v))
        } else {
            None
        };

        let next_queries = if self.cfg.query_modulation && self.cfg.query_mode == QueryMode::Propagate {
            let now = Instant::now();
            let masks = tape.slice(probs, 0, 1, n)?;
            let q = self.qm.propagate(tape, &pyr, masks)?;
            clock.propagate += secs(now);
            Some(q)
        } else {
            None
        };

        Ok(StepOut {
            logits,
            probs,
            memory,
            next_queries,
        })
    }
}

/// Checks frame shapes and the annotation; returns the object count.
fn check_video(frames: &[Tensor], first_mask: &LabelMap) -> Result<usize> {
    let Some(f0) = frames.first() else {
        return input("video has no frames");
    };
    let (h, w) = check_image(f0.shape(), 3, "frame 0")?;
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != f0.shape()) {
        return input(format!("frame {i} has shape {:?}, frame 0 {:?}", f.shape(), f0.shape()));
    }
    if (first_mask.height, first_mask.width) != (h, w) {
        return input(format!(
            "first mask is {}×{}, frames are {h}×{w}",
            first_mask.height, first_mask.width
        ));
    }
    let n = first_mask.max_label() as usize;
    if n == 0 {
        return input("first mask references no objects");
    }
    for obj in 1..=n as u8 {
        if !first_mask.data.contains(&obj) {
            return input(format!("first mask labels go up to {n} but object {obj} is absent"));
        }
    }
    Ok(n)
}

fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2));
    let hw = h * w;
    let d = probs.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Segments every frame after the first, starting from the annotation `first_mask`.
pub fn segment_video(frames: &[Tensor], first_mask: &LabelMap, w: &NetWeights, cfg: &RunConfig) -> Result<SegResult> {
    cfg.validate()?;
    let n = check_video(frames, first_mask)?;
    let (h, wd) = (first_mask.height, first_mask.width);
    let g = Graph::new(w, cfg);
    let mut bank = MemoryBank::new(cfg.c_k, cfg.c_v, n, cfg.similarity)?;

    let start = Instant::now();
    let mut tape = Tape::inference();
    let image = tape.constant(frames[0].clone());
    let masks = tape.constant(first_mask.one_hot(n));
    let (key, values, queries) = g.bootstrap(&mut tape, image, masks)?;
    bank.insert(tape.value(key).clone(), tape.value(values).clone())?;
    let mut state = queries.map(|(q, empty)| ObjectQuerySet {
        q: tape.value(q).clone(),
        empty,
    });
    let mut result = SegResult {
        labels: vec![first_mask.clone()],
        probs: vec![None],
        timings: vec![StageTimings {
            total: secs(start),
            ..StageTimings::default()
        }],
        memorized: vec![0],
        qcim_inputs: Vec::new(),
    };

    for (t, frame) in frames.iter().enumerate().skip(1) {
        let start = Instant::now();
        let mut clock = StageTimings::default();
        let mut tape = Tape::inference();
        let keys: Vec<Var> = bank.keys().iter().map(|k| tape.constant(k.clone())).collect();
        let vals: Vec<Var> = bank.values().iter().map(|v| tape.constant(v.clone())).collect();
        let q = state.as_ref().map(|s| tape.constant(s.q.clone()));
        if let Some(s) = &state {
            result.qcim_inputs.push(s.clone());
        }
        let image = tape.constant(frame.clone());
        let out = g.step(&mut tape, t, image, &keys, &vals, q, &mut clock)?;

        let now = Instant::now();
        let full = tape.resize(out.probs, h, wd)?;
        let probs = tape.value(full).clone();
        result.labels.push(argmax_labels(&probs)?);
        result.probs.push(Some(probs));
        clock.upsample += secs(now);

        if let Some((k, v)) = out.memory {
            bank.insert(tape.value(k).clone(), tape.value(v).clone())?;
            result.memorized.push(t);
        }
        if let Some((q, empty)) = out.next_queries {
            state = Some(ObjectQuerySet {
                q: tape.value(q).clone(),
                empty,
            });
        }
        clock.total = secs(start);
        result.timings.push(clock);
    }
    Ok(result)
}

/// A video with ground truth for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub masks: Vec<LabelMap>,
}

impl Video {
    pub fn new(frames: Vec<Tensor>, masks: Vec<LabelMap>) -> Result<Self> {
        if frames.len() != masks.len() {
            return input(format!("{} frames but {} masks", frames.len(), masks.len()));
        }
        check_video(&frames, &masks[0])?;
        Ok(Self { frames, masks })
    }

    pub fn objects(&self) -> usize {
        self.masks[0].max_label() as usize
    }
}

impl From<&SyntheticVideo> for Video {
    fn from(v: &SyntheticVideo) -> Self {
        Self {
            frames: v.frames.iter().map(|f| f.to_tensor()).collect(),
            masks: v.masks.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: NetWeights,
    /// Mean per-frame cross-entropy at every step, before that step's update.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Mean per-frame cross-entropy of one clip, built on `tape`.
fn clip_loss(tape: &mut Tape, g: &Graph, frames: &[Tensor], masks: &[LabelMap], n: usize) -> Result<Var> {
    let image = tape.constant(frames[0].clone());
    let gt = tape.constant(masks[0].one_hot(n));
    let (key, values, mut queries) = g.bootstrap(tape, image, gt)?;
    let (mut keys, mut vals) = (vec![key], vec![values]);
    let mut terms = Vec::with_capacity(frames.len() - 1);
    let mut clock = StageTimings::default();
    for t in 1..frames.len() {
        let image = tape.constant(frames[t].clone());
        let q = queries.as_ref().map(|(q, _)| *q);
        let out = g.step(tape, t, image, &keys, &vals, q, &mut clock)?;
        let target = tensorlab::kernels::avg_pool(&masks[t].one_hot_with_background(n), 4)?;
        terms.push(tape.soft_cross_entropy(out.logits, target)?);
        if let Some((k, v)) = out.memory {
            keys.push(k);
            vals.push(v);
        }
        if out.next_queries.is_some() {
            queries = out.next_queries;
        }
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// AdamW on random `seq_len`-frame clips; clip sampling is seeded by `cfg.seed`.
pub fn train_toy(dataset: &[Video], init: NetWeights, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut weights = NetWeights::from_store(init.store, cfg)?;
    let usable: Vec<&Video> = dataset.iter().filter(|v| v.frames.len() >= cfg.seq_len).collect();
    let skipped = dataset.len() - usable.len();
    if skipped > 0 {
        warn!("skipping {skipped} video(s) shorter than seq_len = {}", cfg.seq_len);
    }
    if usable.is_empty() && cfg.steps > 0 {
        return input(format!("no video has at least seq_len = {} frames", cfg.seq_len));
    }
    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut rng = SplitMix64::new(cfg.seed).fork(0x7261_696e);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let v = usable[rng.below(usable.len() as u64) as usize];
        let start = rng.below((v.frames.len() - cfg.seq_len + 1) as u64) as usize;
        let range = start..start + cfg.seq_len;
        let g = Graph::new(&weights, cfg);
        let mut tape = Tape::new();
        let loss = clip_loss(&mut tape, &g, &v.frames[range.clone()], &v.masks[range], v.objects())?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.params();
        drop(tape);
        adamw_step(&mut weights.store, &grads, &opt)?;
        losses.push(value);
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("step {step}: loss {value:.5}");
        }
    }
    Ok(TrainOutcome {
        weights,
        losses,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: bool,
    pub frames: usize,
    pub reps: usize,
    /// Mean seconds per predicted frame, by stage.
    pub per_frame: StageTimings,
    pub per_frame_ms: f64,
    pub querymod_ms: f64,
    /// Fraction of per-frame time spent in SIM, QCIM and the query projection.
    pub query_share: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }
}

/// Times [`segment_video`] after `warmup` untimed runs; frame 0 is excluded.
pub fn bench_overhead(
    frames: &[Tensor],
    first_mask: &LabelMap,
    w: &NetWeights,
    cfg: &RunConfig,
    warmup: usize,
    reps: usize,
) -> Result<BenchReport> {
    if frames.len() < 2 || reps == 0 {
        return input("benchmark needs at least two frames and one repetition");
    }
    for _ in 0..warmup {
        segment_video(frames, first_mask, w, cfg)?;
    }
    let mut sum = StageTimings::default();
    for _ in 0..reps {
        let r = segment_video(frames, first_mask, w, cfg)?;
        for t in &r.timings[1..] {
            sum.add(t);
        }
    }
    let per_frame = sum.scaled(1.0 / (reps * (frames.len() - 1)) as f64);
    let query_share = if per_frame.total > 0.0 {
        per_frame.querymod() / per_frame.total
    } else {
        0.0
    };
    Ok(BenchReport {
        baseline: !cfg.query_modulation,
        frames: frames.len(),
        reps,
        per_frame_ms: per_frame.total * 1e3,
        querymod_ms: per_frame.querymod() * 1e3,
        query_share,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsynth::{gen_synthetic, Scenario};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            c_k: 8,
            c_v: 8,
            c_d: 8,
            c4: 4,
            c8: 8,
            c16: 8,
            ffn_hidden: 16,
            mem_interval: 2,
            seq_len: 4,
            ..RunConfig::default()
        }
    }

    fn video(frames: usize, size: usize) -> Video {
        Video::from(&gen_synthetic(2, 2, frames, size, size, Scenario::Distinct).unwrap())
    }

    #[test]
    fn segment_contract() {
        let cfg = tiny_cfg();
        let w = NetWeights::init(&cfg, 0).unwrap();
        let v = video(6, 32);
        let r = segment_video(&v.frames, &v.masks[0], &w, &cfg).unwrap();
        assert_eq!(r.labels.len(), 6);
        assert_eq!(r.labels[0], v.masks[0]);
        assert!(r.labels.iter().all(|l| l.max_label() <= 2));
        assert_eq!(r.memorized, vec![0, 2, 4]);
        assert_eq!(r.qcim_inputs.len(), 5);
        for p in r.probs.iter().skip(1) {
            let p = p.as_ref().unwrap();
            assert_eq!(p.shape(), [3, 32, 32]);
            for px in 0..32 * 32 {
                let s: f64 = (0..3).map(|c| p.data()[c * 1024 + px]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(r.timings.iter().all(|t| t.total > 0.0));
        let again = segment_video(&v.frames, &v.masks[0], &w, &cfg).unwrap();
        assert_eq!((r.labels, r.probs, r.qcim_inputs), (again.labels, again.probs, again.qcim_inputs));
    }

    #[test]
    fn first_frame_mode_freezes_queries() {
        let cfg = RunConfig {
            query_mode: QueryMode::FirstFrame,
            ..tiny_cfg()
        };
        let w = NetWeights::init(&cfg, 0).unwrap();
        let v = video(5, 32);
        let r = segment_video(&v.frames, &v.masks[0], &w, &cfg).unwrap();
        assert!(r.qcim_inputs.windows(2).all(|p| p[0] == p[1]));
        let prop = segment_video(&v.frames, &v.masks[0], &w, &tiny_cfg()).unwrap();
        assert_ne!(prop.qcim_inputs[0], prop.qcim_inputs[1]);
    }

    #[test]
    fn single_frame_and_bad_inputs() {
        let cfg = tiny_cfg();
        let w = NetWeights::init(&cfg, 0).unwrap();
        let v = video(3, 32);
        let r = segment_video(&v.frames[..1], &v.masks[0], &w, &cfg).unwrap();
        assert_eq!(r.labels, vec![v.masks[0].clone()]);
        assert!(segment_video(&v.frames, &LabelMap::zeros(32, 32), &w, &cfg).is_err());
        assert!(segment_video(&[], &v.masks[0], &w, &cfg).is_err());
        let mut gap = v.masks[0].clone();
        for l in &mut gap.data {
            if *l == 1 {
                *l = 0;
            }
        }
        assert!(segment_video(&v.frames, &gap, &w, &cfg).is_err());
    }

    #[test]
    fn empty_predicted_object_does_not_stop_the_pipeline() {
        let cfg = tiny_cfg();
        let mut w = NetWeights::init(&cfg, 0).unwrap();
        // drive every object logit far below background
        w.store.insert("head.proj.w", Tensor::zeros(&[8, 8]));
        let v = video(4, 32);
        let r = segment_video(&v.frames, &v.masks[0], &w, &cfg).unwrap();
        assert_eq!(r.labels.len(), 4);
    }

    #[test]
    fn baseline_mode_has_no_query_time() {
        let cfg = RunConfig {
            query_modulation: false,
            ..tiny_cfg()
        };
        let w = NetWeights::init(&cfg, 0).unwrap();
        let v = video(4, 32);
        let b = bench_overhead(&v.frames, &v.masks[0], &w, &cfg, 0, 1).unwrap();
        assert_eq!(b.query_share, 0.0);
        assert!(b.per_frame_ms > 0.0);
        let b = bench_overhead(&v.frames, &v.masks[0], &w, &tiny_cfg(), 0, 1).unwrap();
        assert!(b.query_share > 0.0 && b.query_share < 1.0);
    }

    #[test]
    fn zero_steps_keep_weights() {
        let cfg = RunConfig {
            steps: 0,
            ..tiny_cfg()
        };
        let w = NetWeights::init(&cfg, 1).unwrap();
        let out = train_toy(&[video(6, 32)], w.clone(), &cfg).unwrap();
        assert!(out.weights.store.same_values(&w.store));
        assert!(out.losses.is_empty());
    }

    #[test]
    fn zero_lr_gives_flat_curve() {
        let cfg = RunConfig {
            steps: 3,
            lr: 0.0,
            seq_len: 4,
            ..tiny_cfg()
        };
        let w = NetWeights::init(&cfg, 1).unwrap();
        // a 4-frame video has exactly one clip
        let out = train_toy(&[video(4, 32)], w.clone(), &cfg).unwrap();
        assert!(out.losses.windows(2).all(|p| p[0] == p[1]), "{:?}", out.losses);
        assert!(out.weights.store.same_values(&w.store));
    }

    #[test]
    fn short_videos_are_skipped() {
        let cfg = RunConfig {
            steps: 1,
            ..tiny_cfg()
        };
        let w = NetWeights::init(&cfg, 1).unwrap();
        let out = train_toy(&[video(2, 32), video(5, 32)], w.clone(), &cfg).unwrap();
        assert_eq!(out.skipped, 1);
        assert!(train_toy(&[video(2, 32)], w, &cfg).is_err());
    }

    #[test]
    fn clip_loss_gradient_matches_finite_differences() {
        let cfg = RunConfig {
            c_k: 2,
            c_v: 4,
            c_d: 3,
            c4: 2,
            c8: 3,
            c16: 3,
            ffn_hidden: 4,
            mem_interval: 1,
            ..RunConfig::default()
        };
        let w = NetWeights::init(&cfg, 3).unwrap();
        let v = Video::from(&gen_synthetic(0, 2, 3, 16, 16, Scenario::Occluding).unwrap());
        for name in ["sim.fuse.c2.w", "head.proj.w", "menc.l4.b", "enc.s3b.b", "dec.fuse16.w", "qcim.b0.ca.v.w", "sim.b0.ffn.l2.w"] {
            let e = tensorlab::grad_check_param(
                |tape, store| {
                    let g = Graph {
                        net: SegNet { w: store, cfg: &cfg },
                        qm: QueryModule { w: store, cfg: &cfg },
                        cfg: &cfg,
                    };
                    Ok(clip_loss(tape, &g, &v.frames, &v.masks, 2).expect("clip graph"))
                },
                &w.store,
                name,
                1e-4,
            )
            .unwrap();
            assert!(e < 1e-5, "{name}: {e}");
        }
    }
}
