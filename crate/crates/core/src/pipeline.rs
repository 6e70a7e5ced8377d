//! End-to-end episode forward pass: encode both images, self-predict the
//! support mask, mine prototype banks from the hard/normal partition, fuse
//! similarity maps into the query prediction, and collect the loss suite,
//! including the swapped-roles alignment pass.

use rand_chacha::ChaCha8Rng;

use crate::domain::{BinaryMask, Episode, EpisodeResult, LossTerms, Region};
use crate::graph::{Graph, Var};
use crate::harness::dice;
use crate::hpg::{assemble_banks, generate_region_prototypes, BankVars, PrototypeCounts};
use crate::losses::{bce_loss, boundary_f1_hard, boundary_loss, inter_loss, intra_loss, total_loss, LossNodes, LossWeights};
use crate::msmf::{cosine_similarity_maps, fuse_paths, predict_query, QueryPrediction};
use crate::nets::{self, GraphParams, NetConfig};
use crate::ssp::{build_sp_feature, masked_average_pool, partition_masks, predict_support_mask};
use crate::{CowError, Real, Result, Tensor};

/// Kernel for boundary-band extraction in the boundary loss and metric.
pub const BOUNDARY_KERNEL: usize = 3;

/// Prototype banks mined from one image acting as the support, plus the
/// self-prediction that produced the partition.
pub struct MinedBanks {
    /// `[1,H,W]` self-predicted foreground probability.
    pub ssp_fg: Var,
    pub fg: BankVars,
    pub bg: BankVars,
}

/// Self-prediction, partition, and prototype mining for one support-role
/// image. `gt_mask` is the mask treated as ground truth at image
/// resolution (the true support mask, or the predicted query mask during
/// the alignment pass).
pub fn mine_banks<T: Real>(
    g: &mut Graph<T>,
    params: &GraphParams,
    f_s: Var,
    gt_mask: &BinaryMask,
    net: &NetConfig,
    counts: &PrototypeCounts,
    rng: &mut ChaCha8Rng,
) -> Result<MinedBanks> {
    let stride = net.encoder_stride;
    let m_feat = gt_mask.downsample(stride)?;
    if !m_feat.is_mixed() {
        return Err(CowError::EmptyRegion(
            "support mask has no foreground or no background at feature resolution".into(),
        ));
    }
    let proto_fg = masked_average_pool(g, f_s, &m_feat)?;
    let proto_bg = masked_average_pool(g, f_s, &m_feat.complement())?;

    let sp_feat = build_sp_feature(g, f_s, proto_fg)?;
    let s_grid = nets::support_decode(g, sp_feat, params, net)?;
    let self_pred = predict_support_mask(g, s_grid, gt_mask.h(), gt_mask.w())?;
    let pred_feat = self_pred.mask.downsample(stride)?;
    let part = partition_masks(&m_feat, &pred_feat)?;

    let hf = generate_region_prototypes(g, f_s, &part.hf, Region::Hf, counts.n_hf, proto_fg, params, net, rng)?;
    let nf = generate_region_prototypes(g, f_s, &part.nf, Region::Nf, counts.n_nf, proto_fg, params, net, rng)?;
    let hb = generate_region_prototypes(g, f_s, &part.hb, Region::Hb, counts.n_hb, proto_bg, params, net, rng)?;
    let nb = generate_region_prototypes(g, f_s, &part.nb, Region::Nb, counts.n_nb, proto_bg, params, net, rng)?;
    let (fg, bg) = assemble_banks(g, hf, nf, proto_fg, hb, nb, proto_bg)?;
    Ok(MinedBanks { ssp_fg: self_pred.fg, fg, bg })
}

/// One direction of the pipeline: mine banks from the support-role image,
/// then predict the query-role image at image resolution.
pub struct PassOutput {
    pub mined: MinedBanks,
    pub query: QueryPrediction,
}

fn run_pass<T: Real>(
    g: &mut Graph<T>,
    params: &GraphParams,
    f_s: Var,
    gt_mask: &BinaryMask,
    f_q: Var,
    net: &NetConfig,
    counts: &PrototypeCounts,
    rng: &mut ChaCha8Rng,
) -> Result<PassOutput> {
    let mined = mine_banks(g, params, f_s, gt_mask, net, counts, rng)?;
    let s_fg = cosine_similarity_maps(g, mined.fg.rows, f_q)?;
    let s_bg = cosine_similarity_maps(g, mined.bg.rows, f_q)?;
    let (logit_fg, logit_bg) = fuse_paths(g, s_fg, s_bg, params, net)?;
    let up_fg = g.bilinear_resize(logit_fg, gt_mask.h(), gt_mask.w());
    let up_bg = g.bilinear_resize(logit_bg, gt_mask.h(), gt_mask.w());
    let query = predict_query(g, up_fg, up_bg)?;
    Ok(PassOutput { mined, query })
}

/// A completed forward pass: the scalar loss node to differentiate and the
/// detached per-episode result.
pub struct ForwardPass<T: Real> {
    pub total: Var,
    pub result: EpisodeResult<T>,
}

/// Runs the complete training computation for one episode. The alignment
/// pass reruns the pipeline with roles swapped, using the predicted query
/// mask as pseudo ground truth; it is skipped (contributing zero, with the
/// skip recorded) when that mask collapses to one class at feature
/// resolution. The intra/inter regularizers compare the support banks with
/// the alignment pass's query banks, so they skip alongside it.
pub fn forward_episode<T: Real>(
    g: &mut Graph<T>,
    params: &GraphParams,
    e: &Episode<T>,
    net: &NetConfig,
    counts: &PrototypeCounts,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass<T>> {
    let img_s = g.constant(e.support_image.as_channels());
    let img_q = g.constant(e.query_image.as_channels());
    let f_s = nets::encode(g, img_s, params, net)?;
    let f_q = nets::encode(g, img_q, params, net)?;

    let main = run_pass(g, params, f_s, &e.support_mask, f_q, net, counts, rng)?;
    let l_ssp = bce_loss(g, main.mined.ssp_fg, &e.support_mask)?;
    let l_seg = bce_loss(g, main.query.fg, &e.query_mask)?;
    let l_bound = boundary_loss(g, main.query.fg, &e.query_mask, BOUNDARY_KERNEL)?;

    let pred_q = main.query.mask.clone();
    let align_feasible = pred_q.downsample(net.encoder_stride)?.is_mixed();
    let (l_align, l_intra, l_inter, align_skipped) = if align_feasible {
        let align = run_pass(g, params, f_q, &pred_q, f_s, net, counts, rng)?;
        let l_align = bce_loss(g, align.query.fg, &e.support_mask)?;
        let l_intra = intra_loss(g, main.mined.fg.rows, main.mined.bg.rows, align.mined.fg.rows, align.mined.bg.rows)?;
        let l_inter = inter_loss(g, main.mined.fg.rows, main.mined.bg.rows, align.mined.fg.rows, align.mined.bg.rows)?;
        (l_align, l_intra, l_inter, false)
    } else {
        let zero = g.constant(Tensor::scalar(T::zero()));
        (zero, zero, zero, true)
    };

    let nodes = LossNodes { seg: l_seg, align: l_align, bound: l_bound, intra: l_intra, inter: l_inter, ssp: l_ssp };
    let total = total_loss(g, &nodes, weights)?;

    let term = |v: Var| g.value(v).item();
    let loss_terms = LossTerms {
        seg: term(l_seg),
        align: term(l_align),
        bound: term(l_bound),
        intra: term(l_intra),
        inter: term(l_inter),
        ssp: term(l_ssp),
        total: term(total),
        align_skipped,
    };
    let dice_score = dice(&main.query.mask, &e.query_mask)?;
    let bf1 = boundary_f1_hard(&main.query.mask, &e.query_mask, BOUNDARY_KERNEL)?;
    let result = EpisodeResult {
        fg_prob: g.value(main.query.fg).clone(),
        bg_prob: g.value(main.query.bg).clone(),
        predicted_mask: main.query.mask,
        loss_terms,
        dice: T::from_f64(dice_score).unwrap(),
        boundary_f1: T::from_f64(bf1).unwrap(),
    };
    Ok(ForwardPass { total, result })
}
