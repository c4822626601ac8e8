//! Segmentation metrics from confusion counts, plus the training loss.
//!
//! Masks are tensors whose elements are exactly 0 or 1. Metrics follow
//! the usual overlap definitions with an explicit zero-denominator
//! convention: when ground truth and prediction are both empty every
//! metric is 1; when exactly one is empty the affected metrics are 0.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    /// False negatives.
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Precision, sensitivity, F1 (Dice) and Jaccard, each in [0,1].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsReport {
    pub pc: f64,
    pub se: f64,
    pub f1: f64,
    pub js: f64,
}

/// Thresholds probabilities into a {0,1} mask; `pixel >= threshold` maps
/// to 1. The threshold must lie strictly inside (0,1).
pub fn binarize<T: Scalar>(pred: &Tensor<T>, threshold: T) -> Result<Tensor<T>> {
    let t = threshold.to_f64();
    if !(0.0 < t && t < 1.0) {
        return Err(Error::Data(format!(
            "threshold {t} outside the open interval (0,1)"
        )));
    }
    Ok(pred.map(|v| if v >= threshold { T::ONE } else { T::ZERO }))
}

fn check_binary<T: Scalar>(name: &str, mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::ZERO && v != T::ONE) {
        return Err(Error::Data(format!("{name} mask contains non-binary values")));
    }
    Ok(())
}

/// Tallies pixelwise agreement between a segmentation result `sr` and
/// ground truth `gt`. Both must be binary and of equal dims.
pub fn confusion<T: Scalar>(sr: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if sr.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "mask dims differ: {} vs {}",
            sr.dims(),
            gt.dims()
        )));
    }
    check_binary("prediction", sr)?;
    check_binary("ground truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in sr.data().iter().zip(gt.data()) {
        match (p == T::ONE, g == T::ONE) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn metrics(c: ConfusionCounts) -> MetricsReport {
    let gt = c.tp + c.fn_;
    let sr = c.tp + c.fp;
    if gt == 0 && sr == 0 {
        return MetricsReport {
            pc: 1.0,
            se: 1.0,
            f1: 1.0,
            js: 1.0,
        };
    }
    let tp = c.tp as f64;
    MetricsReport {
        pc: if sr == 0 { 0.0 } else { tp / sr as f64 },
        se: if gt == 0 { 0.0 } else { tp / gt as f64 },
        f1: 2.0 * tp / (gt + sr) as f64,
        js: tp / (c.tp + c.fp + c.fn_) as f64,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AggregateMode {
    PerImage,
    Global,
}

impl AggregateMode {
    pub fn name(&self) -> &'static str {
        match self {
            AggregateMode::PerImage => "per_image",
            AggregateMode::Global => "global",
        }
    }
}

/// Evaluation summary over a set of images.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub mode: String,
    pub pc: f64,
    pub se: f64,
    pub f1: f64,
    pub js: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Combines per-image confusion counts: either the mean of per-image
/// metrics (the default reporting mode) or metrics of the pooled counts.
pub fn aggregate(images: &[ConfusionCounts], mode: AggregateMode) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Data("no images to aggregate".into()));
    }
    let (pc, se, f1, js) = match mode {
        AggregateMode::PerImage => {
            let n = images.len() as f64;
            let mut sums = (0.0, 0.0, 0.0, 0.0);
            for c in images {
                let m = metrics(*c);
                sums.0 += m.pc;
                sums.1 += m.se;
                sums.2 += m.f1;
                sums.3 += m.js;
            }
            (sums.0 / n, sums.1 / n, sums.2 / n, sums.3 / n)
        }
        AggregateMode::Global => {
            let mut pooled = ConfusionCounts::default();
            for c in images {
                pooled.add(c);
            }
            let m = metrics(pooled);
            (m.pc, m.se, m.f1, m.js)
        }
    };
    Ok(EvalReport {
        n_images: images.len(),
        mode: mode.name().to_string(),
        pc,
        se,
        f1,
        js,
    })
}

/// Mean binary cross-entropy computed from logits, with the sigmoid
/// folded in through the log-sum-exp form
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`, which stays finite for any
/// representable logit. Returns the loss and its gradient with respect
/// to the logits, `(sigmoid(z) - y) / count`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "logits dims {} do not match target dims {}",
            logits.dims(),
            target.dims()
        )));
    }
    check_binary("target", target)?;
    let count = logits.len() as f64;
    let mut loss = 0.0;
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        let z = z.to_f64();
        let y = y.to_f64();
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    loss /= count;

    let probs = ops::sigmoid(logits);
    let inv_count = T::from_f64(1.0 / count);
    let mut grad = probs;
    {
        let g = grad.data_mut();
        for (gi, &y) in g.iter_mut().zip(target.data()) {
            *gi = (*gi - y) * inv_count;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dims;
    use crate::testutil::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(bits: &[u8]) -> Tensor<f64> {
        let side = (bits.len() as f64).sqrt() as usize;
        assert_eq!(side * side, bits.len());
        Tensor::from_vec(
            dims(1, 1, side, side),
            bits.iter().map(|&b| b as f64).collect(),
        )
        .unwrap()
    }

    fn random_mask(seed: u64, h: usize, w: usize, fill: f64) -> Tensor<f64> {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..h * w)
            .map(|_| if r.random_range(0.0..1.0) < fill { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(dims(1, 1, h, w), data).unwrap()
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        let p = Tensor::from_vec(dims(1, 1, 1, 4), vec![0.4, 0.5, 0.6, 0.9]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m.data(), [0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn binarize_rejects_degenerate_thresholds() {
        let p = Tensor::<f64>::zeros(dims(1, 1, 2, 2));
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn confusion_hand_count() {
        // gt has 4 positives of 8 pixels; sr covers 2 of them plus one
        // background pixel.
        let gt = Tensor::from_vec(
            dims(1, 1, 2, 4),
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let sr = Tensor::from_vec(
            dims(1, 1, 2, 4),
            vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let c = confusion(&sr, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 2, 3));
        assert_eq!(c.total(), 8);
    }

    #[test]
    fn confusion_rejects_non_binary_and_mismatched_inputs() {
        let a = Tensor::from_vec(dims(1, 1, 1, 2), vec![0.0, 0.5]).unwrap();
        let b = Tensor::from_vec(dims(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert!(confusion(&a, &b).is_err());
        let c = Tensor::<f64>::zeros(dims(1, 1, 2, 2));
        assert!(confusion(&b, &c).is_err());
    }

    #[test]
    fn metric_values_for_known_counts() {
        let m = metrics(ConfusionCounts { tp: 2, fp: 1, tn: 3, fn_: 2 });
        assert!((m.pc - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.se - 0.5).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.js - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_scores_ones() {
        let m = random_mask(3, 8, 8, 0.4);
        let c = confusion(&m, &m).unwrap();
        assert!(c.tp >= 1);
        let r = metrics(c);
        assert_eq!((r.pc, r.se, r.f1, r.js), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominator_convention() {
        let both_empty = metrics(ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 });
        assert_eq!(
            (both_empty.pc, both_empty.se, both_empty.f1, both_empty.js),
            (1.0, 1.0, 1.0, 1.0)
        );
        let pred_empty = metrics(ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 4 });
        assert_eq!((pred_empty.pc, pred_empty.se, pred_empty.f1, pred_empty.js), (0.0, 0.0, 0.0, 0.0));
        let gt_empty = metrics(ConfusionCounts { tp: 0, fp: 4, tn: 5, fn_: 0 });
        assert_eq!((gt_empty.pc, gt_empty.se, gt_empty.f1, gt_empty.js), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero_overlap() {
        let m = metrics(ConfusionCounts { tp: 0, fp: 3, tn: 2, fn_: 3 });
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.js, 0.0);
    }

    #[test]
    fn swapping_masks_swaps_precision_and_sensitivity() {
        let a = random_mask(10, 8, 8, 0.3);
        let b = random_mask(11, 8, 8, 0.5);
        let ab = metrics(confusion(&a, &b).unwrap());
        let ba = metrics(confusion(&b, &a).unwrap());
        assert_eq!(ab.pc, ba.se);
        assert_eq!(ab.se, ba.pc);
        assert_eq!(ab.f1, ba.f1);
        assert_eq!(ab.js, ba.js);
    }

    #[test]
    fn counts_match_naive_double_loop_on_random_pairs() {
        for seed in 0..1000u64 {
            let sr = random_mask(2 * seed, 16, 16, 0.35);
            let gt = random_mask(2 * seed + 1, 16, 16, 0.35);
            let c = confusion(&sr, &gt).unwrap();
            let mut oracle = ConfusionCounts::default();
            for y in 0..16 {
                for x in 0..16 {
                    let p = sr.get(0, 0, y, x) == 1.0;
                    let g = gt.get(0, 0, y, x) == 1.0;
                    if p && g {
                        oracle.tp += 1;
                    } else if p {
                        oracle.fp += 1;
                    } else if g {
                        oracle.fn_ += 1;
                    } else {
                        oracle.tn += 1;
                    }
                }
            }
            assert_eq!(c, oracle);
        }
    }

    proptest! {
        #[test]
        fn f1_is_two_js_over_one_plus_js(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let m = metrics(ConfusionCounts { tp, fp, tn: 7, fn_ });
            prop_assert!((m.f1 - 2.0 * m.js / (1.0 + m.js)).abs() <= 1e-12);
            prop_assert!(m.f1 >= m.js);
        }

        #[test]
        fn claiming_a_missed_positive_never_hurts(tp in 0u64..100, fp in 0u64..100, fn_ in 1u64..100) {
            let before = metrics(ConfusionCounts { tp, fp, tn: 3, fn_ });
            let after = metrics(ConfusionCounts { tp: tp + 1, fp, tn: 3, fn_: fn_ - 1 });
            prop_assert!(after.se >= before.se);
            prop_assert!(after.f1 >= before.f1);
            prop_assert!(after.js >= before.js);
        }
    }

    #[test]
    fn aggregation_modes_differ_on_skewed_batches() {
        // One empty pair (per-image scores 1) and one poor overlap.
        let images = [
            ConfusionCounts { tp: 0, fp: 0, tn: 16, fn_: 0 },
            ConfusionCounts { tp: 1, fp: 7, tn: 0, fn_: 8 },
        ];
        let per = aggregate(&images, AggregateMode::PerImage).unwrap();
        let glob = aggregate(&images, AggregateMode::Global).unwrap();
        let f1_single = metrics(images[1]).f1;
        assert!((per.f1 - (1.0 + f1_single) / 2.0).abs() < 1e-15);
        assert!((glob.f1 - f1_single).abs() < 1e-15);
        assert_eq!(per.mode, "per_image");
        assert_eq!(glob.n_images, 2);
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(aggregate(&[], AggregateMode::PerImage).is_err());
    }

    #[test]
    fn report_json_has_the_interface_fields() {
        let rep = aggregate(
            &[ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 }],
            AggregateMode::Global,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for key in ["n_images", "mode", "pc", "se", "f1", "js"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn bce_at_zero_logits_is_ln_two() {
        let z = Tensor::<f64>::zeros(dims(1, 1, 3, 3));
        let y = mask_from(&[1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let (loss, grad) = bce_loss(&z, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        for (g, &t) in grad.data().iter().zip(y.data()) {
            assert!((g - (0.5 - t) / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_single_pixel_at_probability_point_nine() {
        let z = Tensor::from_vec(dims(1, 1, 1, 1), vec![(0.9f64 / 0.1).ln()]).unwrap();
        let y = Tensor::from_vec(dims(1, 1, 1, 1), vec![1.0]).unwrap();
        let (loss, _) = bce_loss(&z, &y).unwrap();
        assert!((loss - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn bce_is_finite_for_huge_logits() {
        let z = Tensor::from_vec(dims(1, 1, 1, 2), vec![500.0, -500.0]).unwrap();
        let y = Tensor::from_vec(dims(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let (loss, grad) = bce_loss(&z, &y).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 500.0).abs() < 1e-9);
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut r = rng(77);
        let z0: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = random_mask(78, 3, 4, 0.5);
        let z = Tensor::from_vec(dims(1, 1, 3, 4), z0.clone()).unwrap();
        let (_, grad) = bce_loss(&z, &y).unwrap();
        let h = 1e-6;
        for i in 0..z0.len() {
            let mut plus = z0.clone();
            plus[i] += h;
            let mut minus = z0.clone();
            minus[i] -= h;
            let (lp, _) = bce_loss(&Tensor::from_vec(dims(1, 1, 3, 4), plus).unwrap(), &y).unwrap();
            let (lm, _) =
                bce_loss(&Tensor::from_vec(dims(1, 1, 3, 4), minus).unwrap(), &y).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let ana = grad.data()[i];
            assert!(
                (num - ana).abs() / num.abs().max(ana.abs()).max(1.0) <= 1e-6,
                "pixel {i}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let z = Tensor::<f64>::zeros(dims(1, 1, 1, 2));
        let y = Tensor::from_vec(dims(1, 1, 1, 2), vec![0.0, 0.3]).unwrap();
        assert!(bce_loss(&z, &y).is_err());
    }
}
