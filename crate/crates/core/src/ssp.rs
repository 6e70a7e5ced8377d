//! Support self-prediction: predict the support mask from the support's own
//! global prototype, then split the grid into hard (mispredicted) and
//! normal (correctly predicted) foreground/background regions.

use crate::domain::{BinaryMask, PartitionMasks};
use crate::graph::{Graph, Var};
use crate::{CowError, Real, Result};

/// Masked average pooling: per-channel mean of `f` over the set pixels of
/// `m`, the global prototype of the masked region.
pub fn masked_average_pool<T: Real>(g: &mut Graph<T>, f: Var, m: &BinaryMask) -> Result<Var> {
    let shape = g.value(f).shape();
    if shape.len() != 3 || shape[1] != m.h() || shape[2] != m.w() {
        return Err(CowError::Shape(format!(
            "masked_average_pool: feature map {shape:?} vs mask {}x{}",
            m.h(),
            m.w()
        )));
    }
    if m.count_ones() == 0 {
        return Err(CowError::EmptyRegion("masked_average_pool over an all-zero mask".into()));
    }
    Ok(g.masked_mean(f, m.bits()))
}

/// Concatenates the support features with two spatially constant copies of
/// the prototype, giving the 3C'-channel input of the support decoder.
pub fn build_sp_feature<T: Real>(g: &mut Graph<T>, f_s: Var, proto: Var) -> Result<Var> {
    let fs = g.value(f_s).shape().to_vec();
    let ps = g.value(proto).shape().to_vec();
    if fs.len() != 3 || ps.len() != 1 || ps[0] != fs[0] {
        return Err(CowError::Shape(format!(
            "build_sp_feature: features {fs:?} vs prototype {ps:?}"
        )));
    }
    let wide = g.broadcast_spatial(proto, fs[1], fs[2]);
    Ok(g.concat_channels(&[f_s, wide, wide]))
}

/// The support decoder's output upsampled to image resolution, as a
/// foreground/background probability pair plus the thresholded mask.
pub struct SelfPrediction {
    /// `[1,h,w]` foreground probability.
    pub fg: Var,
    /// `[1,h,w]` background probability, exactly `1 - fg`.
    pub bg: Var,
    /// Argmax mask; a tie at probability 0.5 resolves to background.
    pub mask: BinaryMask,
}

pub fn predict_support_mask<T: Real>(
    g: &mut Graph<T>,
    s: Var,
    out_h: usize,
    out_w: usize,
) -> Result<SelfPrediction> {
    let shape = g.value(s).shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(CowError::Shape(format!("predict_support_mask expects [1,h',w'], got {shape:?}")));
    }
    let fg = g.bilinear_resize(s, out_h, out_w);
    let bg = g.affine(fg, -T::one(), T::one());
    let half = T::from_f64(0.5).unwrap();
    let bits = g.value(fg).data().iter().map(|&v| u8::from(v > half)).collect();
    let mask = BinaryMask::new(out_h, out_w, bits)?;
    Ok(SelfPrediction { fg, bg, mask })
}

/// Truth table of ground truth vs self-prediction: `hf` = fg predicted bg,
/// `hb` = bg predicted fg, `nf` = fg predicted fg, `nb` = bg predicted bg.
pub fn partition_masks(gt: &BinaryMask, pred: &BinaryMask) -> Result<PartitionMasks> {
    if (gt.h(), gt.w()) != (pred.h(), pred.w()) {
        return Err(CowError::Shape(format!(
            "partition_masks: gt {}x{} vs pred {}x{}",
            gt.h(),
            gt.w(),
            pred.h(),
            pred.w()
        )));
    }
    let (h, w) = (gt.h(), gt.w());
    let table = |want_gt: u8, want_pred: u8| {
        let bits = gt
            .bits()
            .iter()
            .zip(pred.bits())
            .map(|(&g, &p)| u8::from(g == want_gt && p == want_pred))
            .collect();
        BinaryMask::new(h, w, bits).expect("bits are 0/1 by construction")
    };
    Ok(PartitionMasks {
        hf: table(1, 0),
        hb: table(0, 1),
        nf: table(1, 1),
        nb: table(0, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_partition;
    use crate::Tensor;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn map_of_uniform_plane_is_its_value() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = mask(2, 2, &[1, 1, 1, 1]);
        let p = masked_average_pool(&mut g, f, &m).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn map_single_pixel_returns_that_column() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let m = mask(2, 2, &[0, 0, 1, 0]);
        let p = masked_average_pool(&mut g, f, &m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn map_ignores_values_outside_mask() {
        let base = Tensor::new(&[1, 2, 2], vec![1.0, 9.0, 1.0, 9.0]).unwrap();
        let changed = Tensor::new(&[1, 2, 2], vec![1.0, -100.0, 1.0, 77.0]).unwrap();
        let m = mask(2, 2, &[1, 0, 1, 0]);
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let f = g.constant(t);
            let p = masked_average_pool(&mut g, f, &m).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run(base), run(changed));
    }

    #[test]
    fn map_rejects_empty_mask() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 2, 2]));
        let m = BinaryMask::zeros(2, 2);
        assert!(matches!(masked_average_pool(&mut g, f, &m), Err(CowError::EmptyRegion(_))));
    }

    #[test]
    fn sp_feature_blocks_are_features_then_constant_prototype() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let p = g.constant(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let sp = build_sp_feature(&mut g, f, p).unwrap();
        let v = g.value(sp);
        assert_eq!(v.shape(), &[6, 2, 2]);
        assert_eq!(&v.data()[0..8], g.value(f).data());
        assert!(v.data()[8..12].iter().all(|&x| x == 10.0));
        assert!(v.data()[12..16].iter().all(|&x| x == 20.0));
        assert_eq!(&v.data()[16..24], &v.data()[8..16]);
    }

    #[test]
    fn predict_support_mask_thresholds_and_sums_to_one() {
        for (val, expect) in [(0.9, 1u8), (0.1, 0u8), (0.5, 0u8)] {
            let mut g = Graph::<f64>::new();
            let s = g.constant(Tensor::full(&[1, 4, 4], val));
            let sp = predict_support_mask(&mut g, s, 8, 8).unwrap();
            assert!(sp.mask.bits().iter().all(|&b| b == expect), "val {val}");
            for (f, b) in g.value(sp.fg).data().iter().zip(g.value(sp.bg).data()) {
                assert!((f + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_truth_table() {
        let gt = mask(2, 2, &[1, 1, 0, 0]);
        let pred = mask(2, 2, &[1, 0, 1, 0]);
        let p = partition_masks(&gt, &pred).unwrap();
        assert_eq!(p.hf.bits(), &[0, 1, 0, 0]);
        assert_eq!(p.hb.bits(), &[0, 0, 1, 0]);
        assert_eq!(p.nf.bits(), &[1, 0, 0, 0]);
        assert_eq!(p.nb.bits(), &[0, 0, 0, 1]);
        assert!(validate_partition(&p).unwrap());
    }

    #[test]
    fn perfect_prediction_has_no_hard_regions() {
        let gt = mask(2, 2, &[1, 0, 0, 1]);
        let p = partition_masks(&gt, &gt).unwrap();
        assert_eq!(p.hf.count_ones(), 0);
        assert_eq!(p.hb.count_ones(), 0);
        assert_eq!(p.nf, gt);
        assert_eq!(p.nb, gt.complement());
    }

    #[test]
    fn inverted_prediction_is_all_hard() {
        let gt = mask(2, 2, &[1, 0, 0, 1]);
        let p = partition_masks(&gt, &gt.complement()).unwrap();
        assert_eq!(p.nf.count_ones(), 0);
        assert_eq!(p.nb.count_ones(), 0);
        assert_eq!(p.hf, gt);
        assert_eq!(p.hb, gt.complement());
    }

    proptest! {
        #[test]
        fn partition_is_always_exact_and_nested(
            bits in proptest::collection::vec(0u8..=1, 2 * 36),
            h in 1usize..=6,
        ) {
            let w = 6;
            let gt = mask(h, w, &bits[..h * w]);
            let pred = mask(h, w, &bits[36..36 + h * w]);
            let p = partition_masks(&gt, &pred).unwrap();
            prop_assert!(validate_partition(&p).unwrap());
            for idx in 0..h * w {
                prop_assert!(p.hf.bits()[idx] <= gt.bits()[idx]);
                prop_assert!(p.nf.bits()[idx] <= gt.bits()[idx]);
                prop_assert!(p.hb.bits()[idx] <= 1 - gt.bits()[idx]);
                prop_assert!(p.nb.bits()[idx] <= 1 - gt.bits()[idx]);
            }
        }
    }
}
