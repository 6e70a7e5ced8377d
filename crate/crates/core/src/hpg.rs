//! Hard-prototype generation: per region, extract the region's feature
//! columns, fill the remaining grid positions with randomly resampled
//! region columns, and push the hole-free map through the region MLP.
//! Region prototypes plus the global prototype per path form the banks the
//! dual-path head matches against.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{BinaryMask, ProtoTag, Region};
use crate::graph::{Graph, Var};
use crate::nets::{self, GraphParams, NetConfig};
use crate::{CowError, Real, Result, Tensor};

/// How many prototypes to mine from each region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrototypeCounts {
    pub n_hf: usize,
    pub n_nf: usize,
    pub n_hb: usize,
    pub n_nb: usize,
}

impl PrototypeCounts {
    /// Full-scale budgets: 50+50 foreground and 100+500 background rows.
    pub fn full_scale() -> Self {
        Self { n_hf: 50, n_nf: 50, n_hb: 100, n_nb: 500 }
    }

    /// Toy budgets keeping the same hard:normal ratios.
    pub fn desk_default() -> Self {
        Self { n_hf: 8, n_nf: 8, n_hb: 16, n_nb: 48 }
    }

    pub fn get(&self, r: Region) -> usize {
        match r {
            Region::Hf => self.n_hf,
            Region::Nf => self.n_nf,
            Region::Hb => self.n_hb,
            Region::Nb => self.n_nb,
        }
    }

    /// Rows in the foreground bank: mined prototypes plus the global row.
    pub fn fg_bank_rows(&self) -> usize {
        self.n_hf + self.n_nf + 1
    }

    pub fn bg_bank_rows(&self) -> usize {
        self.n_hb + self.n_nb + 1
    }

    pub fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Zeroes every feature column outside the region.
pub fn extract_region_features<T: Real>(f: &Tensor<T>, region: &BinaryMask) -> Result<Tensor<T>> {
    let shape = f.shape();
    if shape.len() != 3 || shape[1] != region.h() || shape[2] != region.w() {
        return Err(CowError::Shape(format!(
            "extract_region_features: map {shape:?} vs region {}x{}",
            region.h(),
            region.w()
        )));
    }
    let hw = shape[1] * shape[2];
    let mut out = f.clone();
    for c in 0..shape[0] {
        for (v, &m) in out.data_mut()[c * hw..(c + 1) * hw].iter_mut().zip(region.bits()) {
            if m == 0 {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Uniform sampling with replacement; deterministic for a given rng state.
pub fn sample_points<V: Clone>(points: &[V], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<V>> {
    if points.is_empty() {
        return Err(CowError::EmptyRegion("sample_points over an empty point set".into()));
    }
    Ok((0..n).map(|_| points[rng.gen_range(0..points.len())].clone()).collect())
}

/// Fills the holes of a region map: positions inside the region keep their
/// original column, positions outside receive `fill` vectors in row-major
/// order. `fill` must contain exactly one vector per hole.
pub fn reconstruct_feature_map<T: Real>(
    region_map: &Tensor<T>,
    region: &BinaryMask,
    fill: &[Vec<T>],
) -> Result<Tensor<T>> {
    let shape = region_map.shape().to_vec();
    if shape.len() != 3 || shape[1] != region.h() || shape[2] != region.w() {
        return Err(CowError::Shape(format!(
            "reconstruct_feature_map: map {shape:?} vs region {}x{}",
            region.h(),
            region.w()
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let holes = hw - region.count_ones();
    if fill.len() != holes {
        return Err(CowError::InvalidArgument(format!(
            "reconstruct_feature_map: {holes} holes but {} fill vectors",
            fill.len()
        )));
    }
    if fill.iter().any(|v| v.len() != c) {
        return Err(CowError::Shape(format!("fill vectors must have {c} channels")));
    }
    let mut out = region_map.clone();
    let mut next = 0;
    for (p, &m) in region.bits().iter().enumerate() {
        if m == 0 {
            for ch in 0..c {
                out.data_mut()[ch * hw + p] = fill[next][ch];
            }
            next += 1;
        }
    }
    Ok(out)
}

/// Gather-index form of extract + sample + reconstruct: position `p` reads
/// its own column when inside the region and a uniformly sampled region
/// column otherwise. Returns `None` for an empty region. Holes consume rng
/// draws in row-major order, matching [`sample_points`] exactly.
pub fn reconstruction_indices(region: &BinaryMask, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let pool: Vec<usize> =
        region.bits().iter().enumerate().filter(|(_, &m)| m == 1).map(|(p, _)| p).collect();
    if pool.is_empty() {
        return None;
    }
    Some(
        region
            .bits()
            .iter()
            .enumerate()
            .map(|(p, &m)| if m == 1 { p } else { pool[rng.gen_range(0..pool.len())] })
            .collect(),
    )
}

/// Mined prototype rows for one region: `[n_out, C']` plus per-row tags.
/// An empty region falls back to `n_out` copies of the path's global
/// prototype, tagged `Global`, so bank shapes stay static.
pub fn generate_region_prototypes<T: Real>(
    g: &mut Graph<T>,
    f_s: Var,
    region_mask: &BinaryMask,
    region: Region,
    n_out: usize,
    global_proto: Var,
    p: &GraphParams,
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<ProtoTag>)> {
    let c = cfg.feature_dim;
    if n_out == 0 {
        let empty = g.constant(Tensor::new(&[0, c], Vec::new())?);
        return Ok((empty, Vec::new()));
    }
    match reconstruction_indices(region_mask, rng) {
        None => {
            let stacked = g.broadcast_spatial(global_proto, n_out, 1);
            let flat = g.reshape(stacked, &[c, n_out]);
            let rows = g.transpose2(flat);
            Ok((rows, vec![ProtoTag::Global; n_out]))
        }
        Some(indices) => {
            let recon = g.gather_cols(f_s, indices);
            let rows = nets::mlp_prototypes(g, recon, region, n_out, p, cfg)?;
            let tag = if matches!(region, Region::Hf | Region::Hb) { ProtoTag::Hard } else { ProtoTag::Normal };
            Ok((rows, vec![tag; n_out]))
        }
    }
}

/// One path's assembled bank inside a graph.
pub struct BankVars {
    pub rows: Var,
    pub tags: Vec<ProtoTag>,
}

/// Stacks hard rows, normal rows and the global row, in that order, for
/// both paths.
pub fn assemble_banks<T: Real>(
    g: &mut Graph<T>,
    hf: (Var, Vec<ProtoTag>),
    nf: (Var, Vec<ProtoTag>),
    global_fg: Var,
    hb: (Var, Vec<ProtoTag>),
    nb: (Var, Vec<ProtoTag>),
    global_bg: Var,
) -> Result<(BankVars, BankVars)> {
    let mut assemble = |hard: (Var, Vec<ProtoTag>), normal: (Var, Vec<ProtoTag>), global: Var| -> Result<BankVars> {
        let c = g.value(global).shape()[0];
        for part in [hard.0, normal.0] {
            let s = g.value(part).shape();
            if s.len() != 2 || s[1] != c {
                return Err(CowError::Shape(format!("bank part {s:?} does not match prototype width {c}")));
            }
        }
        let grow = g.reshape(global, &[1, c]);
        let rows = g.concat_rows(&[hard.0, normal.0, grow]);
        let mut tags = hard.1;
        tags.extend(normal.1);
        tags.push(ProtoTag::Global);
        Ok(BankVars { rows, tags })
    };
    let fg = assemble(hf, nf, global_fg)?;
    let bg = assemble(hb, nb, global_bg)?;
    Ok((fg, bg))
}
