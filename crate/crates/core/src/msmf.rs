//! Multiple-similarity-map fusion: per-prototype cosine maps against the
//! query features, one fusion decoder per path, and the final two-way
//! softmax prediction.

use crate::domain::{BinaryMask, PathKind};
use crate::graph::{Graph, Var};
use crate::nets::{self, GraphParams, NetConfig};
use crate::{CowError, Real, Result};

/// Stacks cosine similarities between every bank row and every query
/// feature column: `[N,C'] x [C',h',w'] -> [N,h',w']`, values in `[-1,1]`.
pub fn cosine_similarity_maps<T: Real>(g: &mut Graph<T>, bank_rows: Var, f_q: Var) -> Result<Var> {
    let bs = g.value(bank_rows).shape().to_vec();
    let fs = g.value(f_q).shape().to_vec();
    if bs.len() != 2 || fs.len() != 3 || bs[1] != fs[0] {
        return Err(CowError::Shape(format!("cosine maps: bank {bs:?} vs features {fs:?}")));
    }
    if bs[0] == 0 {
        return Err(CowError::InvalidArgument("cosine maps over an empty bank".into()));
    }
    let (n, c, hw) = (bs[0], bs[1], fs[1] * fs[2]);
    let bd = g.value(bank_rows).data();
    for k in 0..n {
        if bd[k * c..(k + 1) * c].iter().all(|&v| v == T::zero()) {
            return Err(CowError::Numeric(format!("prototype row {k} is zero; cosine undefined")));
        }
    }
    let fd = g.value(f_q).data();
    for p in 0..hw {
        if (0..c).all(|ch| fd[ch * hw + p] == T::zero()) {
            return Err(CowError::Numeric(format!("query feature column {p} is zero; cosine undefined")));
        }
    }
    Ok(g.cosine_maps(bank_rows, f_q))
}

/// Runs the two independent fusion decoders over their similarity stacks.
pub fn fuse_paths<T: Real>(
    g: &mut Graph<T>,
    s_fg: Var,
    s_bg: Var,
    p: &GraphParams,
    cfg: &NetConfig,
) -> Result<(Var, Var)> {
    let logit_fg = nets::fuse_decode(g, s_fg, PathKind::Fg, p, cfg)?;
    let logit_bg = nets::fuse_decode(g, s_bg, PathKind::Bg, p, cfg)?;
    Ok((logit_fg, logit_bg))
}

/// Final prediction from two already-upsampled `[1,h,w]` logit grids.
pub struct QueryPrediction {
    /// `[1,h,w]` foreground probability (softmax over the two channels).
    pub fg: Var,
    /// `[1,h,w]` background probability, exactly `1 - fg`.
    pub bg: Var,
    /// Pixelwise argmax; equal logits resolve to background.
    pub mask: BinaryMask,
}

/// Two-way softmax over {bg, fg} logits followed by argmax. With two
/// channels the softmax reduces to a logistic of the logit difference,
/// which keeps the pair summing to 1 exactly.
pub fn predict_query<T: Real>(g: &mut Graph<T>, logit_fg: Var, logit_bg: Var) -> Result<QueryPrediction> {
    let sf = g.value(logit_fg).shape().to_vec();
    let sb = g.value(logit_bg).shape().to_vec();
    if sf != sb || sf.len() != 3 || sf[0] != 1 {
        return Err(CowError::Shape(format!("predict_query expects matching [1,h,w] logits, got {sf:?} vs {sb:?}")));
    }
    let diff = g.sub(logit_fg, logit_bg);
    let fg = g.sigmoid(diff);
    let bg = g.affine(fg, -T::one(), T::one());
    let half = T::from_f64(0.5).unwrap();
    let bits = g.value(fg).data().iter().map(|&v| u8::from(v > half)).collect();
    let mask = BinaryMask::new(sf[1], sf[2], bits)?;
    Ok(QueryPrediction { fg, bg, mask })
}
