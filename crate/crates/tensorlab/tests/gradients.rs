//! Finite-difference checks for every differentiable tape op.

use tensorlab::gradcheck::{grad_check, grad_check_report, probe_weights, DEFAULT_STEP};
use tensorlab::{Result, SplitMix64, Tape, Tensor, Var};

const TOL: f64 = 1e-5;
const INSTANCES: u64 = 10;

/// Projects `y` onto fixed random weights so the scalar has generic gradients.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = probe_weights(tape.shape(y), seed);
    tape.weighted_sum(y, w)
}

fn check_all(name: &str, shape: &[usize], build: impl Fn(&mut Tape, Var, &mut SplitMix64) -> Result<Var>) {
    for seed in 0..INSTANCES {
        let mut rng = SplitMix64::new(seed * 7919 + 17);
        let x = rng.tensor(shape, -1.0, 1.0);
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let mut r = SplitMix64::new(seed);
            let y = build(tape, x, &mut r)?;
            project(tape, y, seed)
        };
        let report = grad_check_report(f, &x, DEFAULT_STEP).unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel error {:.3e}",
            report.max_rel_error
        );
    }
}

#[test]
fn linear_input_weight_and_bias() {
    check_all("linear/x", &[3, 4], |t, x, r| {
        let w = t.constant(r.tensor(&[4, 5], -1.0, 1.0));
        let b = t.constant(r.tensor(&[5], -1.0, 1.0));
        t.linear(x, w, b)
    });
    check_all("linear/w", &[4, 5], |t, w, r| {
        let x = t.constant(r.tensor(&[3, 4], -1.0, 1.0));
        let b = t.constant(r.tensor(&[5], -1.0, 1.0));
        t.linear(x, w, b)
    });
    check_all("linear/b", &[5], |t, b, r| {
        let x = t.constant(r.tensor(&[3, 4], -1.0, 1.0));
        let w = t.constant(r.tensor(&[4, 5], -1.0, 1.0));
        t.linear(x, w, b)
    });
}

#[test]
fn conv1x1_input_and_weight() {
    check_all("conv1x1/x", &[3, 2, 3], |t, x, r| {
        let w = t.constant(r.tensor(&[4, 3], -1.0, 1.0));
        let b = t.constant(r.tensor(&[4], -1.0, 1.0));
        t.conv1x1(x, w, b)
    });
    check_all("conv1x1/w", &[4, 3], |t, w, r| {
        let x = t.constant(r.tensor(&[3, 2, 3], -1.0, 1.0));
        let b = t.constant(r.tensor(&[4], -1.0, 1.0));
        t.conv1x1(x, w, b)
    });
}

#[test]
fn conv3x3_both_strides() {
    for stride in [1, 2] {
        check_all("conv3x3/x", &[2, 5, 4], |t, x, r| {
            let w = t.constant(r.tensor(&[3, 2, 3, 3], -1.0, 1.0));
            let b = t.constant(r.tensor(&[3], -1.0, 1.0));
            t.conv3x3(x, w, b, stride)
        });
        check_all("conv3x3/w", &[3, 2, 3, 3], |t, w, r| {
            let x = t.constant(r.tensor(&[2, 5, 4], -1.0, 1.0));
            let b = t.constant(r.tensor(&[3], -1.0, 1.0));
            t.conv3x3(x, w, b, stride)
        });
    }
}

#[test]
fn layer_norm_all_inputs() {
    check_all("layer_norm/x", &[3, 6], |t, x, r| {
        let g = t.constant(r.tensor(&[6], 0.5, 1.5));
        let b = t.constant(r.tensor(&[6], -1.0, 1.0));
        t.layer_norm(x, g, b)
    });
    check_all("layer_norm/gamma", &[6], |t, g, r| {
        let x = t.constant(r.tensor(&[3, 6], -1.0, 1.0));
        let b = t.constant(r.tensor(&[6], -1.0, 1.0));
        t.layer_norm(x, g, b)
    });
}

#[test]
fn softmax_each_axis() {
    for axis in 0..3 {
        check_all("softmax", &[2, 3, 4], |t, x, _| t.softmax(x, axis));
    }
}

#[test]
fn attention_all_inputs() {
    for scaled in [true, false] {
        check_all("attention/q", &[3, 4], |t, q, r| {
            let k = t.constant(r.tensor(&[5, 4], -1.0, 1.0));
            let v = t.constant(r.tensor(&[5, 2], -1.0, 1.0));
            t.scaled_dot_attention(q, k, v, scaled)
        });
        check_all("attention/k", &[5, 4], |t, k, r| {
            let q = t.constant(r.tensor(&[3, 4], -1.0, 1.0));
            let v = t.constant(r.tensor(&[5, 2], -1.0, 1.0));
            t.scaled_dot_attention(q, k, v, scaled)
        });
        check_all("attention/v", &[5, 2], |t, v, r| {
            let q = t.constant(r.tensor(&[3, 4], -1.0, 1.0));
            let k = t.constant(r.tensor(&[5, 4], -1.0, 1.0));
            t.scaled_dot_attention(q, k, v, scaled)
        });
    }
    check_all("attention/bias", &[5], |t, b, r| {
        let q = t.constant(r.tensor(&[3, 4], -1.0, 1.0));
        let k = t.constant(r.tensor(&[5, 4], -1.0, 1.0));
        let v = t.constant(r.tensor(&[5, 2], -1.0, 1.0));
        t.attention(q, k, v, 0.7, Some(b))
    });
}

#[test]
fn ffn_input() {
    check_all("ffn/x", &[3, 4], |t, x, r| {
        let w1 = t.constant(r.tensor(&[4, 6], -1.0, 1.0));
        let b1 = t.constant(r.tensor(&[6], -0.5, 0.5));
        let w2 = t.constant(r.tensor(&[6, 4], -1.0, 1.0));
        let b2 = t.constant(r.tensor(&[4], -0.5, 0.5));
        t.ffn(x, w1, b1, w2, b2)
    });
}

#[test]
fn resampling_ops() {
    check_all("upsample2x", &[2, 3, 2], |t, x, _| t.upsample2x(x));
    check_all("resize4x", &[2, 2, 3], |t, x, _| t.resize(x, 8, 12));
    check_all("avg_pool", &[2, 4, 6], |t, x, _| t.avg_pool(x, 2));
}

#[test]
fn structural_ops() {
    check_all("concat/slice", &[2, 3, 4], |t, x, r| {
        let other = t.constant(r.tensor(&[2, 1, 4], -1.0, 1.0));
        let c = t.concat(&[x, other, x], 1)?;
        let s = t.slice(c, 1, 2, 4)?;
        let m = t.mul(s, s)?;
        t.sum_axis(m, 2)
    });
    check_all("transpose/matmul/add_row", &[3, 4], |t, x, r| {
        let xt = t.transpose(x)?;
        let m = t.matmul(x, xt)?;
        let row = t.constant(r.tensor(&[3], -1.0, 1.0));
        let y = t.add_row(m, row)?;
        let y = t.reshape(y, &[9])?;
        Ok(t.scale(y, 0.3))
    });
}

#[test]
fn masked_mean_masks_and_features() {
    check_all("masked_mean/feats", &[4, 6], |t, f, r| {
        let m = t.constant(r.tensor(&[3, 6], 0.1, 1.0));
        t.masked_mean(m, f)
    });
    for seed in 0..INSTANCES {
        let mut rng = SplitMix64::new(seed + 100);
        let m = rng.tensor(&[3, 6], 0.1, 1.0);
        let f = rng.tensor(&[4, 6], -1.0, 1.0);
        let err = grad_check(
            |t, m| {
                let fv = t.constant(f.clone());
                let q = t.masked_mean(m, fv)?;
                project(t, q, seed)
            },
            &m,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < TOL, "masked_mean/masks seed {seed}: {err:.3e}");
    }
}

#[test]
fn soft_cross_entropy_logits() {
    for seed in 0..INSTANCES {
        let mut rng = SplitMix64::new(seed + 200);
        let logits = rng.tensor(&[3, 2, 4], -2.0, 2.0);
        let raw = rng.tensor(&[3, 2, 4], 0.0, 1.0);
        let target = tensorlab::kernels::softmax(&raw, 0).unwrap();
        let err = grad_check(|t, x| t.soft_cross_entropy(x, target.clone()), &logits, DEFAULT_STEP).unwrap();
        assert!(err < TOL, "soft CE seed {seed}: {err:.3e}");
    }
}

#[test]
fn empty_mask_row_gives_zero_query_and_zero_gradient() {
    let mut t = Tape::new();
    let m = t.leaf(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.0]).unwrap());
    let f = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let q = t.masked_mean(m, f).unwrap();
    assert_eq!(&t.value(q).data()[..2], &[0.0, 0.0]);
    let s = t.sum(q);
    let g = t.backward(s).unwrap();
    assert_eq!(&g.get(m).data()[..3], &[0.0, 0.0, 0.0]);
}
