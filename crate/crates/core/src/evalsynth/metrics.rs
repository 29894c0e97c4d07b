//! Region similarity J and boundary F-measure.
//!
//! A boundary pixel is a region pixel with at least one 4-neighbour outside
//! the region; pixels beyond the image border count as outside.

use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::error::{QmvosError, Result};

/// `|pred ∩ gt| / |pred ∪ gt|` for object `n`; 1 when both are empty.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, n: u8) -> Result<f64> {
    pred.same_shape(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (p == n, g == n);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn boundary(region: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && region[y as usize * width + x as usize]
    };
    let mut out = vec![false; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// `max(1, round(0.008 · diagonal))`.
pub fn default_tol_radius(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

/// Square (Chebyshev) dilation of a binary map.
fn dilate(map: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return map.to_vec();
    }
    let mut rows = vec![false; map.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = (lo..=hi).any(|xx| map[y * width + xx]);
        }
    }
    let mut out = vec![false; map.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// `2PR/(P+R)` from matched counts.
pub(crate) fn f_measure(matched_pred: usize, n_pred: usize, matched_gt: usize, n_gt: usize) -> f64 {
    match (n_pred, n_gt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let p = matched_pred as f64 / n_pred as f64;
            let r = matched_gt as f64 / n_gt as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

/// Boundary F-measure for object `n` with Chebyshev matching radius `tol_radius`.
pub fn contour_f(pred: &LabelMap, gt: &LabelMap, n: u8, tol_radius: usize) -> Result<f64> {
    pred.same_shape(gt)?;
    let (h, w) = (gt.height, gt.width);
    let bp = boundary(&pred.region(n), h, w);
    let bg = boundary(&gt.region(n), h, w);
    let near_g = dilate(&bg, h, w, tol_radius);
    let near_p = dilate(&bp, h, w, tol_radius);
    let count = |b: &[bool]| b.iter().filter(|&&v| v).count();
    let matched = |b: &[bool], near: &[bool]| b.iter().zip(near).filter(|(&a, &m)| a && m).count();
    Ok(f_measure(matched(&bp, &near_g), count(&bp), matched(&bg, &near_p), count(&bg)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub object: usize,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_and_f: f64,
}

/// Field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j: f64,
    pub f: f64,
    pub j_and_f: f64,
    pub frames_evaluated: usize,
    pub tol_radius: usize,
    pub objects: Vec<ObjectScores>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| QmvosError::Eval(format!("bad report: {e}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates per-object `(J per frame, F per frame)` series: mean over
/// frames, then mean over objects.
pub fn j_and_f(per_object: Vec<(Vec<f64>, Vec<f64>)>, tol_radius: usize) -> Result<MetricReport> {
    if per_object.is_empty() {
        return Err(QmvosError::Eval("no objects to evaluate".into()));
    }
    let frames = per_object[0].0.len();
    if frames == 0 {
        return Err(QmvosError::Eval("no frames to evaluate".into()));
    }
    let mut objects = Vec::with_capacity(per_object.len());
    for (i, (j, f)) in per_object.into_iter().enumerate() {
        if j.len() != frames || f.len() != frames {
            return Err(QmvosError::Eval(format!("object {} has ragged score series", i + 1)));
        }
        let (j_mean, f_mean) = (mean(&j), mean(&f));
        objects.push(ObjectScores {
            object: i + 1,
            j,
            f,
            j_mean,
            f_mean,
            j_and_f: (j_mean + f_mean) / 2.0,
        });
    }
    let j = objects.iter().map(|o| o.j_mean).sum::<f64>() / objects.len() as f64;
    let f = objects.iter().map(|o| o.f_mean).sum::<f64>() / objects.len() as f64;
    Ok(MetricReport {
        j,
        f,
        j_and_f: (j + f) / 2.0,
        frames_evaluated: frames,
        tol_radius,
        objects,
    })
}

/// Scores frames `1..T` of `preds` against `gts`; objects are `1..=N` with
/// `N` the largest label in the first ground-truth frame.
pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap], tol_radius: Option<usize>) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(QmvosError::Eval(format!("{} predicted frames for {} annotated", preds.len(), gts.len())));
    }
    if gts.len() < 2 {
        return Err(QmvosError::Eval("need at least two frames (the first is excluded)".into()));
    }
    let n = gts[0].max_label();
    if n == 0 {
        return Err(QmvosError::Eval("first annotation holds no objects".into()));
    }
    let tol = tol_radius.unwrap_or_else(|| default_tol_radius(gts[0].height, gts[0].width));
    let mut per_object = Vec::with_capacity(n as usize);
    for obj in 1..=n {
        let mut js = Vec::with_capacity(gts.len() - 1);
        let mut fs = Vec::with_capacity(gts.len() - 1);
        for (p, g) in preds.iter().zip(gts).skip(1) {
            js.push(jaccard(p, g, obj)?);
            fs.push(contour_f(p, g, obj, tol)?);
        }
        per_object.push((js, fs));
    }
    j_and_f(per_object, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize, label: u8) -> LabelMap {
        let mut m = LabelMap::zeros(h, w);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                m.data[y * w + x] = label;
            }
        }
        m
    }

    /// Pairwise-distance matcher.
    fn brute_f(pred: &LabelMap, gt: &LabelMap, n: u8, tol: usize) -> f64 {
        let (h, w) = (gt.height, gt.width);
        let pts = |m: &LabelMap| -> Vec<(isize, isize)> {
            let r = m.region(n);
            let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && r[y as usize * w + x as usize];
            let mut v = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if inside(y, x) && [(0, 1), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                        v.push((y, x));
                    }
                }
            }
            v
        };
        let (bp, bg) = (pts(pred), pts(gt));
        let close = |a: &(isize, isize), set: &[(isize, isize)]| {
            set.iter().any(|b| (a.0 - b.0).abs().max((a.1 - b.1).abs()) as usize <= tol)
        };
        let mp = bp.iter().filter(|p| close(p, &bg)).count();
        let mg = bg.iter().filter(|g| close(g, &bp)).count();
        f_measure(mp, bp.len(), mg, bg.len())
    }

    #[test]
    fn jaccard_examples() {
        let a = rect(4, 4, 0, 0, 2, 2, 1);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        let b = rect(4, 4, 2, 2, 2, 2, 1);
        assert_eq!(jaccard(&a, &b, 1).unwrap(), 0.0);
        // 4 cells vs 4 cells sharing 2: 2/6
        let c = rect(4, 4, 0, 1, 2, 2, 1);
        assert_eq!(jaccard(&a, &c, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&LabelMap::zeros(2, 2), &LabelMap::zeros(2, 2), 1).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &LabelMap::zeros(4, 4), 1).unwrap(), 0.0);
        assert!(jaccard(&a, &LabelMap::zeros(4, 5), 1).is_err());
    }

    #[test]
    fn contour_examples() {
        let a = rect(20, 20, 5, 5, 6, 6, 1);
        assert_eq!(contour_f(&a, &a, 1, 1).unwrap(), 1.0);
        let shifted = rect(20, 20, 5, 6, 6, 6, 1);
        assert_eq!(contour_f(&a, &shifted, 1, 1).unwrap(), 1.0);
        assert_eq!(brute_f(&a, &shifted, 1, 1), 1.0);
        let far = rect(20, 20, 14, 14, 4, 4, 1);
        assert_eq!(contour_f(&a, &far, 1, 1).unwrap(), 0.0);
        assert_eq!(contour_f(&LabelMap::zeros(3, 3), &LabelMap::zeros(3, 3), 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn boundary_of_filled_square() {
        let a = rect(5, 5, 1, 1, 3, 3, 1);
        let b = boundary(&a.region(1), 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * 5 + 2]);
        // image edge counts as outside
        let full = boundary(&[true; 9], 3, 3);
        assert_eq!(full.iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn default_radius() {
        assert_eq!(default_tol_radius(64, 64), 1);
        assert_eq!(default_tol_radius(480, 854), 8);
    }

    #[test]
    fn aggregation_examples() {
        let r = j_and_f(vec![(vec![1.0, 1.0], vec![0.0, 0.0])], 1).unwrap();
        assert_eq!(r.j_and_f, 0.5);
        let r = j_and_f(vec![(vec![1.0], vec![1.0]), (vec![0.0], vec![0.0])], 1).unwrap();
        assert_eq!(r.j_and_f, 0.5);
        assert!(j_and_f(vec![], 1).is_err());
        assert!(j_and_f(vec![(vec![], vec![])], 1).is_err());
    }

    #[test]
    fn evaluate_perfect_and_excludes_first_frame() {
        let a = rect(16, 16, 2, 2, 5, 5, 1);
        let mut b = a.clone();
        b.data[200] = 2;
        let gts = vec![b.clone(), b.clone(), b.clone()];
        let r = evaluate(&gts, &gts, None).unwrap();
        assert_eq!(r.j_and_f, 1.0);
        assert_eq!(r.frames_evaluated, 2);
        let mut preds = gts.clone();
        preds[0] = LabelMap::zeros(16, 16);
        assert_eq!(evaluate(&preds, &gts, None).unwrap().j_and_f, 1.0);
        let back = MetricReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().find("\"j\"").unwrap() < r.to_json().find("\"objects\"").unwrap());
    }

    fn arb_map(side: usize) -> impl Strategy<Value = LabelMap> {
        proptest::collection::vec(0u8..3, side * side).prop_map(move |d| LabelMap::new(side, side, d).unwrap())
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (1usize..=32).prop_flat_map(|s| (arb_map(s), arb_map(s)))
    }

    proptest! {
        #[test]
        fn contour_matches_brute_force((p, g) in arb_pair(), tol in 0usize..3) {
            for n in 1..=2u8 {
                prop_assert_eq!(contour_f(&p, &g, n, tol).unwrap(), brute_f(&p, &g, n, tol));
            }
        }

        #[test]
        fn metrics_symmetric_and_bounded((p, g) in arb_pair(), tol in 0usize..3) {
            for n in 1..=2u8 {
                let j = jaccard(&p, &g, n).unwrap();
                let f = contour_f(&p, &g, n, tol).unwrap();
                prop_assert_eq!(j, jaccard(&g, &p, n).unwrap());
                prop_assert_eq!(f, contour_f(&g, &p, n, tol).unwrap());
                prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
            }
        }

        #[test]
        fn jaccard_translation_invariant(y0 in 2usize..6, x0 in 2usize..6, h in 1usize..5, w in 1usize..5,
                                         dy in 0usize..4, dx in 0usize..4, sy in 0usize..5, sx in 0usize..5) {
            let a = rect(24, 24, y0, x0, h, w, 1);
            let b = rect(24, 24, y0 + dy, x0 + dx, h, w, 1);
            let a2 = rect(24, 24, y0 + sy, x0 + sx, h, w, 1);
            let b2 = rect(24, 24, y0 + dy + sy, x0 + dx + sx, h, w, 1);
            prop_assert_eq!(jaccard(&a, &b, 1).unwrap(), jaccard(&a2, &b2, 1).unwrap());
        }
    }
}
