//! Training objectives: segmentation, self-prediction and alignment BCE,
//! prototype intra/inter regularizers, the boundary-F1 surrogate, and the
//! weighted total. The alignment term itself is a full swapped-roles
//! forward pass and lives in the pipeline; its score reuses [`bce_loss`].

use crate::domain::BinaryMask;
use crate::graph::{Graph, Var};
use crate::{CowError, Real, Result};

/// Probability clamp and denominator guard used across all loss terms.
pub const EPS: f64 = 1e-7;

/// Balancing coefficients: the boundary term is scaled by `lambda0`, the
/// three regularizers (intra, inter, ssp) by `lambda1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl LossWeights {
    /// The default weighting: boundary at half strength, regularizers at 0.3.
    pub fn standard() -> Self {
        Self { lambda0: 0.5, lambda1: 0.3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda0 < 0.0 || self.lambda1 < 0.0 || !self.lambda0.is_finite() || !self.lambda1.is_finite() {
            return Err(CowError::Config(format!(
                "loss weights must be finite and non-negative, got {} and {}",
                self.lambda0, self.lambda1
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of a foreground-probability grid against a
/// binary mask, with probabilities clamped to `[EPS, 1-EPS]`.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, prob_fg: Var, gt: &BinaryMask) -> Result<Var> {
    let n = g.value(prob_fg).numel();
    if n != gt.h() * gt.w() {
        return Err(CowError::Shape(format!(
            "bce_loss: {n} probabilities vs {}x{} mask",
            gt.h(),
            gt.w()
        )));
    }
    Ok(g.bce(prob_fg, gt.bits(), T::from_f64(EPS).unwrap()))
}

fn check_bank_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(CowError::Shape(format!("{what}: banks {sa:?} vs {sb:?}")));
    }
    if sa[0] == 0 || sb[0] == 0 {
        return Err(CowError::InvalidArgument(format!("{what}: empty prototype bank")));
    }
    Ok(())
}

/// Intra-class compactness: for each class path, every query prototype is
/// matched to its best support prototype by cosine; the loss is 2 minus the
/// two mean best-match similarities, so it lives in `[0, 4]`.
pub fn intra_loss<T: Real>(
    g: &mut Graph<T>,
    support_fg: Var,
    support_bg: Var,
    query_fg: Var,
    query_bg: Var,
) -> Result<Var> {
    check_bank_pair(g, support_fg, query_fg, "intra_loss fg")?;
    check_bank_pair(g, support_bg, query_bg, "intra_loss bg")?;
    let mut means = Vec::with_capacity(2);
    for (s, q) in [(support_fg, query_fg), (support_bg, query_bg)] {
        let cos = g.cosine_pairs(s, q);
        let best = g.max_axis0(cos);
        means.push(g.mean_all(best));
    }
    let sum = g.add(means[0], means[1]);
    Ok(g.affine(sum, -T::one(), T::from_f64(2.0).unwrap()))
}

/// Inter-class separation: mean pairwise cosine between foreground and
/// background banks, summed over the support and query images; `[-2, 2]`.
pub fn inter_loss<T: Real>(
    g: &mut Graph<T>,
    support_fg: Var,
    support_bg: Var,
    query_fg: Var,
    query_bg: Var,
) -> Result<Var> {
    check_bank_pair(g, support_fg, support_bg, "inter_loss support")?;
    check_bank_pair(g, query_fg, query_bg, "inter_loss query")?;
    let s_cos = g.cosine_pairs(support_fg, support_bg);
    let s_mean = g.mean_all(s_cos);
    let q_cos = g.cosine_pairs(query_fg, query_bg);
    let q_mean = g.mean_all(q_cos);
    Ok(g.add(s_mean, q_mean))
}

/// Inner boundary band `maxpool(1-m, k) * m`. Off-image cells count as
/// background, so a mask touching the border contributes boundary there.
/// Binary input gives a binary band; soft input stays soft.
pub fn boundary_map<T: Real>(g: &mut Graph<T>, m: Var, k: usize) -> Result<Var> {
    if k % 2 == 0 {
        return Err(CowError::InvalidArgument(format!("boundary kernel must be odd, got {k}")));
    }
    let shape = g.value(m).shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(CowError::Shape(format!("boundary_map expects [1,h,w], got {shape:?}")));
    }
    let comp = g.affine(m, -T::one(), T::one());
    let pooled = g.max_pool(comp, k, T::one());
    Ok(g.mul(pooled, m))
}

/// Differentiable boundary loss `1 - BF1` between the soft predicted
/// boundary band and the binary ground-truth band.
pub fn boundary_loss<T: Real>(g: &mut Graph<T>, prob_fg: Var, gt: &BinaryMask, k: usize) -> Result<Var> {
    let shape = g.value(prob_fg).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != gt.h() || shape[2] != gt.w() {
        return Err(CowError::Shape(format!(
            "boundary_loss: probabilities {shape:?} vs mask {}x{}",
            gt.h(),
            gt.w()
        )));
    }
    let b_pred = boundary_map(g, prob_fg, k)?;
    let gt_grid = g.constant(gt.to_tensor::<T>().reshaped(&[1, gt.h(), gt.w()])?);
    let b_gt = boundary_map(g, gt_grid, k)?;

    let overlap = g.mul(b_pred, b_gt);
    let inter = g.sum_all(overlap);
    let num = g.affine(inter, T::from_f64(2.0).unwrap(), T::zero());
    let pred_sum = g.sum_all(b_pred);
    let gt_sum = g.value(b_gt).data().iter().copied().fold(T::zero(), |a, v| a + v);
    let denom = g.affine(pred_sum, T::one(), gt_sum + T::from_f64(EPS).unwrap());
    let bf1 = g.div(num, denom);
    Ok(g.affine(bf1, -T::one(), T::one()))
}

/// Hard-mask boundary F1 used as an evaluation metric. Both-empty boundary
/// bands count as a perfect match.
pub fn boundary_f1_hard(pred: &BinaryMask, gt: &BinaryMask, k: usize) -> Result<f64> {
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(CowError::Shape(format!(
            "boundary_f1_hard: {}x{} vs {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    if k % 2 == 0 {
        return Err(CowError::InvalidArgument(format!("boundary kernel must be odd, got {k}")));
    }
    let bp = boundary_bits(pred, k);
    let bg = boundary_bits(gt, k);
    let inter: usize = bp.bits().iter().zip(bg.bits()).filter(|(&a, &b)| a == 1 && b == 1).count();
    let total = bp.count_ones() + bg.count_ones();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Integer form of [`boundary_map`]: a pixel is boundary when it is set and
/// any cell of its k-window is unset or outside the image.
pub fn boundary_bits(m: &BinaryMask, k: usize) -> BinaryMask {
    let r = (k / 2) as isize;
    let (h, w) = (m.h() as isize, m.w() as isize);
    BinaryMask::from_fn(m.h(), m.w(), |i, j| {
        if m.get(i, j) == 0 {
            return false;
        }
        for u in -r..=r {
            for v in -r..=r {
                let (y, x) = (i as isize + u, j as isize + v);
                if y < 0 || y >= h || x < 0 || x >= w || m.get(y as usize, x as usize) == 0 {
                    return true;
                }
            }
        }
        false
    })
}

/// The six scalar loss nodes of one episode, pre-weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub seg: Var,
    pub align: Var,
    pub bound: Var,
    pub intra: Var,
    pub inter: Var,
    pub ssp: Var,
}

/// `L = L_seg + L_align + lambda0 * L_bound + lambda1 * (L_intra + L_inter + L_ssp)`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossNodes, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    for (name, v) in [
        ("seg", terms.seg),
        ("align", terms.align),
        ("bound", terms.bound),
        ("intra", terms.intra),
        ("inter", terms.inter),
        ("ssp", terms.ssp),
    ] {
        let val = g.value(v).item();
        if !val.is_finite() {
            return Err(CowError::Numeric(format!("loss term {name} is non-finite: {val}")));
        }
    }
    let l0 = T::from_f64(w.lambda0).unwrap();
    let l1 = T::from_f64(w.lambda1).unwrap();
    Ok(g.weighted_sum(&[
        (terms.seg, T::one()),
        (terms.align, T::one()),
        (terms.bound, l0),
        (terms.intra, l1),
        (terms.inter, l1),
        (terms.ssp, l1),
    ]))
}
