//! Image encoder, mask encoder, FPN decoder and the dynamic-filter head.
//!
//! Encoder: three stages of two 3×3 convs + ReLU. Stage one uses two
//! stride-2 convs (stride 4 out), the other stages one stride-2 and one
//! stride-1 conv, giving F4, F8, F16.

use tensorlab::{ParamStore, Tape, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{input, Result};
use crate::weights::{Init, NetWeights, SpecList};

pub(crate) fn specs(cfg: &RunConfig, s: &mut SpecList) {
    let (c4, c8, c16) = (cfg.c4, cfg.c8, cfg.c16);
    s.conv("enc.s1a", 3, c4, 3, Init::He);
    s.conv("enc.s1b", c4, c4, 3, Init::He);
    s.conv("enc.s2a", c4, c8, 3, Init::He);
    s.conv("enc.s2b", c8, c8, 3, Init::He);
    s.conv("enc.s3a", c8, c16, 3, Init::He);
    s.conv("enc.s3b", c16, c16, 3, Init::He);
    s.conv("key", c16, cfg.c_k, 1, Init::Lecun);

    let m1 = (c4 / 2).max(1);
    s.conv("menc.l1", 4, m1, 3, Init::He);
    s.conv("menc.l2", m1, c4, 3, Init::He);
    s.conv("menc.l3", c4, c8, 3, Init::He);
    s.conv("menc.l4", c8, cfg.c_v, 3, Init::Lecun);

    let cd = cfg.c_d;
    s.conv("dec.fuse16", cfg.c_v + c16, cd, 1, Init::He);
    s.conv("dec.skip8", c8, cd, 1, Init::He);
    s.conv("dec.ref8", cd, cd, 3, Init::He);
    s.conv("dec.skip4", c4, cd, 1, Init::He);
    s.conv("dec.ref4", cd, cd, 3, Init::Lecun);

    s.push("head.proj.w", &[cfg.c_v, cd], cfg.c_v, Init::Lecun);
    s.conv("base.head", cd, 1, 1, Init::Lecun);
}

/// Tape handles for F4, F8, F16.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
}

/// Object-independent decoder inputs, computed once per frame.
#[derive(Clone, Copy, Debug)]
pub struct DecoderSkips {
    pub f16: Var,
    pub s8: Var,
    pub s4: Var,
}

pub(crate) fn check_image(shape: &[usize], channels: usize, what: &str) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != channels {
        return input(format!("{what} must be {channels}×H×W, got {shape:?}"));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return input(format!("{what} sides must be multiples of 16, got {h}×{w}"));
    }
    Ok((h, w))
}

/// Network graph builder over a parameter store.
#[derive(Clone, Copy)]
pub struct SegNet<'a> {
    pub w: &'a ParamStore,
    pub cfg: &'a RunConfig,
}

impl<'a> SegNet<'a> {
    pub fn new(w: &'a NetWeights, cfg: &'a RunConfig) -> Self {
        Self { w: &w.store, cfg }
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
        let w = tape.param(self.w, &format!("{name}.w"))?;
        let b = tape.param(self.w, &format!("{name}.b"))?;
        let y = if tape.shape(w).len() == 4 {
            tape.conv3x3(x, w, b, stride)?
        } else {
            tape.conv1x1(x, w, b)?
        };
        Ok(if relu { tape.relu(y) } else { y })
    }

    pub fn encode_frame(&self, tape: &mut Tape, image: Var) -> Result<Pyramid> {
        check_image(tape.shape(image), 3, "image")?;
        let x = self.conv(tape, image, "enc.s1a", 2, true)?;
        let f4 = self.conv(tape, x, "enc.s1b", 2, true)?;
        let x = self.conv(tape, f4, "enc.s2a", 2, true)?;
        let f8 = self.conv(tape, x, "enc.s2b", 1, true)?;
        let x = self.conv(tape, f8, "enc.s3a", 2, true)?;
        let f16 = self.conv(tape, x, "enc.s3b", 1, true)?;
        Ok(Pyramid { f4, f8, f16 })
    }

    /// Memory/query key `C^k×H/16×W/16`.
    pub fn key(&self, tape: &mut Tape, f16: Var) -> Result<Var> {
        self.conv(tape, f16, "key", 1, false)
    }

    /// Memory value `C^v×H/16×W/16` for one object mask `1×H×W`.
    pub fn encode_mask(&self, tape: &mut Tape, image: Var, mask: Var) -> Result<Var> {
        let (h, w) = check_image(tape.shape(image), 3, "image")?;
        if tape.shape(mask) != [1, h, w] {
            return input(format!("mask shape {:?} for a {h}×{w} image", tape.shape(mask)));
        }
        let x = tape.concat(&[image, mask], 0)?;
        let x = self.conv(tape, x, "menc.l1", 2, true)?;
        let x = self.conv(tape, x, "menc.l2", 2, true)?;
        let x = self.conv(tape, x, "menc.l3", 2, true)?;
        self.conv(tape, x, "menc.l4", 2, false)
    }

    pub fn decoder_skips(&self, tape: &mut Tape, pyr: &Pyramid) -> Result<DecoderSkips> {
        let s8 = self.conv(tape, pyr.f8, "dec.skip8", 1, false)?;
        let s4 = self.conv(tape, pyr.f4, "dec.skip4", 1, false)?;
        Ok(DecoderSkips { f16: pyr.f16, s8, s4 })
    }

    /// Decoder feature `C_d×H/4×W/4` for one object's readout `C^v×H/16×W/16`.
    pub fn decode(&self, tape: &mut Tape, readout: Var, skips: &DecoderSkips) -> Result<Var> {
        let rs = tape.shape(readout).to_vec();
        let fs = tape.shape(skips.f16).to_vec();
        if rs.len() != 3 || rs[0] != self.cfg.c_v || rs[1..] != fs[1..] {
            return input(format!("readout {rs:?} does not match F16 {fs:?}"));
        }
        let x = tape.concat(&[readout, skips.f16], 0)?;
        let x = self.conv(tape, x, "dec.fuse16", 1, true)?;
        let x = tape.upsample2x(x)?;
        let x = tape.add(x, skips.s8)?;
        let x = tape.relu(x);
        let x = self.conv(tape, x, "dec.ref8", 1, true)?;
        let x = tape.upsample2x(x)?;
        let x = tape.add(x, skips.s4)?;
        let x = tape.relu(x);
        self.conv(tape, x, "dec.ref4", 1, false)
    }

    /// Dynamic filters `N×C_d` from queries `N×C^v`.
    pub fn project_queries(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        let w = tape.param(self.w, "head.proj.w")?;
        Ok(tape.matmul(queries, w)?)
    }

    /// Logits `(N+1)×h×w`: channel 0 is the constant-zero background,
    /// channel `n+1` is `⟨filters[n], dec[n](p)⟩`.
    pub fn apply_filters(&self, tape: &mut Tape, filters: Var, decs: &[Var]) -> Result<Var> {
        let n = decs.len();
        if n == 0 {
            return input("predict_masks needs at least one object");
        }
        let fs = tape.shape(filters).to_vec();
        if fs != [n, self.cfg.c_d] {
            return input(format!("filters {fs:?} for {n} decoder features of width {}", self.cfg.c_d));
        }
        let ds = tape.shape(decs[0]).to_vec();
        if ds.len() != 3 || ds[0] != self.cfg.c_d {
            return input(format!("decoder feature shape {ds:?}"));
        }
        let (h, w) = (ds[1], ds[2]);
        let mut rows = vec![tape.constant(Tensor::zeros(&[1, h * w]))];
        for (i, &d) in decs.iter().enumerate() {
            if tape.shape(d) != ds.as_slice() {
                return input(format!("decoder feature {i} has shape {:?}", tape.shape(d)));
            }
            let f = tape.slice(filters, 0, i, 1)?;
            let d = tape.reshape(d, &[self.cfg.c_d, h * w])?;
            rows.push(tape.matmul(f, d)?);
        }
        let logits = tape.concat(&rows, 0)?;
        Ok(tape.reshape(logits, &[n + 1, h, w])?)
    }

    pub fn predict_masks(&self, tape: &mut Tape, decs: &[Var], queries: Var) -> Result<Var> {
        let qs = tape.shape(queries).to_vec();
        if qs.len() != 2 || qs[0] != decs.len() || qs[1] != self.cfg.c_v {
            return input(format!("queries {qs:?} for {} objects", decs.len()));
        }
        let filters = self.project_queries(tape, queries)?;
        self.apply_filters(tape, filters, decs)
    }

    /// Baseline logits from a learned static 1×1 head, no queries.
    pub fn predict_static(&self, tape: &mut Tape, decs: &[Var]) -> Result<Var> {
        let Some(&first) = decs.first() else {
            return input("predict needs at least one object");
        };
        let s = tape.shape(first).to_vec();
        let mut rows = vec![tape.constant(Tensor::zeros(&[1, s[1], s[2]]))];
        for &d in decs {
            rows.push(self.conv(tape, d, "base.head", 1, false)?);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}

/// Tensor-level convenience wrappers around [`SegNet`].
pub fn encode_frame(image: &Tensor, w: &NetWeights, cfg: &RunConfig) -> Result<FeaturePyramid> {
    let mut tape = Tape::inference();
    let x = tape.constant(image.clone());
    let p = SegNet::new(w, cfg).encode_frame(&mut tape, x)?;
    Ok(FeaturePyramid {
        f4: tape.value(p.f4).clone(),
        f8: tape.value(p.f8).clone(),
        f16: tape.value(p.f16).clone(),
    })
}

pub fn encode_mask(image: &Tensor, mask: &Tensor, w: &NetWeights, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(image.clone());
    let m = tape.constant(mask.clone());
    let v = SegNet::new(w, cfg).encode_mask(&mut tape, x, m)?;
    Ok(tape.value(v).clone())
}

pub fn decode(readout: &Tensor, pyr: &FeaturePyramid, w: &NetWeights, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let net = SegNet::new(w, cfg);
    let p = Pyramid {
        f4: tape.constant(pyr.f4.clone()),
        f8: tape.constant(pyr.f8.clone()),
        f16: tape.constant(pyr.f16.clone()),
    };
    let r = tape.constant(readout.clone());
    let skips = net.decoder_skips(&mut tape, &p)?;
    let d = net.decode(&mut tape, r, &skips)?;
    Ok(tape.value(d).clone())
}

pub fn predict_masks(dec_feats: &[Tensor], queries: &Tensor, w: &NetWeights, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let decs: Vec<Var> = dec_feats.iter().map(|d| tape.constant(d.clone())).collect();
    let q = tape.constant(queries.clone());
    let l = SegNet::new(w, cfg).predict_masks(&mut tape, &decs, q)?;
    Ok(tape.value(l).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensorlab::{grad_check, SplitMix64};

    fn setup() -> (RunConfig, NetWeights) {
        let cfg = RunConfig::default();
        let w = NetWeights::init(&cfg, 1).unwrap();
        (cfg, w)
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        SplitMix64::new(seed).tensor(&[3, h, w], 0.0, 1.0)
    }

    fn variance(t: &Tensor) -> f64 {
        let m = t.sum() / t.numel() as f64;
        t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.numel() as f64
    }

    #[test]
    fn pyramid_shapes_for_several_sizes() {
        let (cfg, w) = setup();
        for s in [32, 64, 96, 128] {
            let p = encode_frame(&image(0, s, s), &w, &cfg).unwrap();
            assert_eq!(p.f4.shape(), [32, s / 4, s / 4]);
            assert_eq!(p.f8.shape(), [64, s / 8, s / 8]);
            assert_eq!(p.f16.shape(), [64, s / 16, s / 16]);
            let v = encode_mask(&image(1, s, s), &Tensor::full(&[1, s, s], 0.5), &w, &cfg).unwrap();
            assert_eq!(v.shape(), [64, s / 16, s / 16]);
            let d = decode(&Tensor::zeros(&[64, s / 16, s / 16]), &p, &w, &cfg).unwrap();
            assert_eq!(d.shape(), [32, s / 4, s / 4]);
        }
    }

    #[test]
    fn encoder_outputs_are_finite_with_spread() {
        let (cfg, w) = setup();
        let p = encode_frame(&image(5, 64, 64), &w, &cfg).unwrap();
        for f in [&p.f4, &p.f8, &p.f16] {
            assert!(f.is_finite());
            assert!(variance(f) > 0.0);
        }
        assert_eq!(p, encode_frame(&image(5, 64, 64), &w, &cfg).unwrap());
    }

    #[test]
    fn bad_sides_rejected() {
        let (cfg, w) = setup();
        assert!(encode_frame(&image(0, 40, 64), &w, &cfg).is_err());
        assert!(encode_frame(&Tensor::zeros(&[1, 64, 64]), &w, &cfg).is_err());
        assert!(encode_mask(&image(0, 64, 64), &Tensor::zeros(&[1, 32, 64]), &w, &cfg).is_err());
    }

    #[test]
    fn different_masks_give_different_values() {
        let (cfg, w) = setup();
        let img = image(2, 64, 64);
        let a = Tensor::from_fn(&[1, 64, 64], |i| if i % 64 < 32 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[1, 64, 64], |i| if i / 64 < 20 { 1.0 } else { 0.0 });
        let va = encode_mask(&img, &a, &w, &cfg).unwrap();
        let vb = encode_mask(&img, &b, &w, &cfg).unwrap();
        assert!(va.max_abs_diff(&vb) > 0.0);
        assert_eq!(va, encode_mask(&img, &a, &w, &cfg).unwrap());
    }

    #[test]
    fn decoder_zero_in_zero_out() {
        let (cfg, mut w) = setup();
        let names: Vec<String> = w.store.names().filter(|n| n.starts_with("dec.") && n.ends_with(".b")).map(String::from).collect();
        for n in names {
            let shape = w.store.get(&n).unwrap().shape().to_vec();
            w.store.insert(n, Tensor::zeros(&shape));
        }
        let p = FeaturePyramid {
            f4: Tensor::zeros(&[32, 16, 16]),
            f8: Tensor::zeros(&[64, 8, 8]),
            f16: Tensor::zeros(&[64, 4, 4]),
        };
        let d = decode(&Tensor::zeros(&[64, 4, 4]), &p, &w, &cfg).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_query_gives_uniform_probabilities() {
        let (cfg, w) = setup();
        let mut rng = SplitMix64::new(3);
        let decs = vec![rng.tensor(&[32, 16, 16], -1.0, 1.0), rng.tensor(&[32, 16, 16], -1.0, 1.0)];
        let logits = predict_masks(&decs, &Tensor::zeros(&[2, 64]), &w, &cfg).unwrap();
        assert_eq!(logits.shape(), [3, 16, 16]);
        let p = tensorlab::kernels::softmax(&logits, 0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn one_pixel_dot_product_oracle() {
        let cfg = RunConfig {
            c_v: 3,
            c_d: 2,
            ..RunConfig::default()
        };
        let mut w = NetWeights::init(&cfg, 0).unwrap();
        // W is C^v×C_d
        w.store.insert("head.proj.w", Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap());
        let q = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.25]).unwrap();
        let d = Tensor::new(vec![2, 1, 1], vec![0.5, 4.0]).unwrap();
        let logits = predict_masks(&[d], &q, &w, &cfg).unwrap();
        // filter = qW = [1 - 1 + 0, 2 + 2 + 0.75] = [0, 4.75]
        let expect = 0.0 * 0.5 + 4.75 * 4.0;
        assert_eq!(logits.data(), &[0.0, expect]);
    }

    #[test]
    fn predict_rejects_mismatch() {
        let (cfg, w) = setup();
        assert!(predict_masks(&[], &Tensor::zeros(&[1, 64]), &w, &cfg).is_err());
        let d = Tensor::zeros(&[32, 16, 16]);
        assert!(predict_masks(&[d], &Tensor::zeros(&[2, 64]), &w, &cfg).is_err());
    }

    #[test]
    fn predict_gradient_wrt_queries_and_decoder_weight() {
        let cfg = RunConfig {
            c4: 4,
            c8: 4,
            c16: 4,
            c_v: 6,
            c_d: 5,
            c_k: 4,
            ..RunConfig::default()
        };
        let w = NetWeights::init(&cfg, 4).unwrap();
        let mut rng = SplitMix64::new(8);
        let img = rng.tensor(&[3, 16, 16], 0.0, 1.0);
        let readouts = [rng.tensor(&[6, 1, 1], -1.0, 1.0), rng.tensor(&[6, 1, 1], -1.0, 1.0)];
        let q0 = rng.tensor(&[2, 6], -1.0, 1.0);
        let build = |tape: &mut Tape, store: &ParamStore, q: Option<Var>| -> tensorlab::Result<Var> {
            let net = SegNet { w: store, cfg: &cfg };
            let x = tape.constant(img.clone());
            let pyr = net.encode_frame(tape, x).unwrap();
            let skips = net.decoder_skips(tape, &pyr).unwrap();
            let decs: Vec<Var> = readouts
                .iter()
                .map(|r| {
                    let r = tape.constant(r.clone());
                    net.decode(tape, r, &skips).unwrap()
                })
                .collect();
            let q = q.unwrap_or_else(|| tape.constant(q0.clone()));
            let l = net.predict_masks(tape, &decs, q).unwrap();
            let probe = tensorlab::gradcheck::probe_weights(tape.shape(l), 1);
            tape.weighted_sum(l, probe)
        };
        let e = grad_check(|t, q| build(t, &w.store, Some(q)), &q0, 1e-4).unwrap();
        assert!(e < 1e-5, "queries: {e}");
        let e = tensorlab::grad_check_param(|t, s| build(t, s, None), &w.store, "dec.ref8.w", 1e-4).unwrap();
        assert!(e < 1e-5, "dec.ref8.w: {e}");
    }
}
