//! Training loop, evaluation, metrics, and checkpointing.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::container::Container;
use crate::data::{derive_seed, generate_episode, FoldSplit};
use crate::domain::{BinaryMask, Episode, EpisodeResult, LossTerms};
use crate::graph::Graph;
use crate::nets::{load_params, ParameterSet};
use crate::pipeline::{forward_episode, mine_banks};
use crate::{nets, CowError, Real, Result};

/// Sorensen-Dice overlap `2|P∩G| / (|P|+|G|)`; two empty masks count as a
/// perfect match.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(CowError::Shape(format!(
            "dice: {}x{} vs {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    let inter: usize = pred.bits().iter().zip(gt.bits()).filter(|(&p, &g)| p == 1 && g == 1).count();
    let total = pred.count_ones() + gt.count_ones();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Episodes whose masks collapse at feature resolution are regenerated
/// with a perturbed seed; this caps the retries.
const MAX_EPISODE_ATTEMPTS: u64 = 64;

/// Draws a valid training or evaluation episode plus the rng that the
/// forward pass should continue with, retrying the generator whenever the
/// episode collapses at feature resolution.
fn draw_episode<T: Real>(
    cfg: &TrainConfig,
    class_ids: &[u32],
    slot: u64,
    base_seed: u64,
) -> Result<(Episode<T>, ChaCha8Rng)> {
    let stride = cfg.net.encoder_stride;
    for attempt in 0..MAX_EPISODE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, slot, attempt));
        let class = class_ids[(rng.next_u64() % class_ids.len() as u64) as usize];
        let e = generate_episode::<T>(&cfg.data, class, &mut rng)?;
        if e.support_mask.downsample(stride)?.is_mixed() {
            return Ok((e, rng));
        }
    }
    Err(CowError::Validation(format!(
        "no usable episode after {MAX_EPISODE_ATTEMPTS} attempts at slot {slot}; masks keep collapsing at stride {stride}",
    )))
}

/// One gradient step plus its per-episode result.
fn train_step<T: Real>(
    cfg: &TrainConfig,
    ps: &mut ParameterSet<T>,
    iter: usize,
    lr: T,
) -> Result<EpisodeResult<T>> {
    let (episode, mut rng) = draw_episode::<T>(cfg, &cfg.fold.train_class_ids, iter as u64, cfg.data.seed)?;
    let mut g = Graph::<T>::new();
    let gp = load_params(&mut g, ps, true);
    let pass = forward_episode(&mut g, &gp, &episode, &cfg.net, &cfg.counts, &cfg.weights, &mut rng)?;
    g.backward(pass.total);
    for (name, t) in ps.entries_mut() {
        if let Some(grad) = g.grad(gp.var(name)) {
            for (p, &gv) in t.data_mut().iter_mut().zip(grad.data()) {
                if !gv.is_finite() {
                    return Err(CowError::Numeric(format!("non-finite gradient in {name}")));
                }
                *p = *p - lr * gv;
            }
        }
    }
    Ok(pass.result)
}

fn metrics_line<T: Real>(iter: usize, lt: &LossTerms<T>) -> String {
    format!(
        "{iter} {} {} {} {} {} {} {}\n",
        lt.seg, lt.align, lt.bound, lt.intra, lt.inter, lt.ssp, lt.total
    )
}

/// Checkpoint container layout: every parameter tensor by name, plus the
/// canonical config text and the number of completed iterations.
pub fn save_checkpoint<T: Real>(cfg: &TrainConfig, ps: &ParameterSet<T>, done: u64, path: &Path) -> Result<()> {
    let mut c = Container::new();
    let text = cfg.to_text();
    c.push_u8("__config__", &[text.len()], text.into_bytes())?;
    c.push_u8("__iter__", &[8], done.to_le_bytes().to_vec())?;
    for (name, t) in ps.entries() {
        c.push_real(name, t)?;
    }
    c.save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(TrainConfig, ParameterSet<T>, u64)> {
    let c = Container::load(path)?;
    let (_, cfg_bytes) = c.get_u8("__config__")?;
    let text = std::str::from_utf8(cfg_bytes)
        .map_err(|e| CowError::Parse { offset: 0, message: format!("checkpoint config is not UTF-8: {e}") })?;
    let cfg = TrainConfig::from_text(text)?;
    let (shape, iter_bytes) = c.get_u8("__iter__")?;
    if shape != [8] {
        return Err(CowError::Parse { offset: 0, message: format!("__iter__ block must be [8], got {shape:?}") });
    }
    let done = u64::from_le_bytes(iter_bytes.try_into().expect("length checked"));

    // template init fixes the canonical entry order and expected shapes
    let template = ParameterSet::<T>::init(&cfg.net, &cfg.counts, cfg.data.image_size)?;
    let mut entries = Vec::with_capacity(template.entries().len());
    for (name, t) in template.entries() {
        let stored = c.get_real::<T>(name)?;
        if stored.shape() != t.shape() {
            return Err(CowError::Shape(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                stored.shape(),
                t.shape()
            )));
        }
        entries.push((name.clone(), stored));
    }
    let ps = ParameterSet::from_entries(entries)?;
    if !ps.is_finite() {
        return Err(CowError::Numeric("checkpoint contains non-finite parameters".into()));
    }
    Ok((cfg, ps, done))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub ckpt_path: PathBuf,
    pub metrics_path: PathBuf,
    pub iterations_done: u64,
    pub final_loss: f64,
}

/// Runs the episodic training loop: SGD with multiplicative lr decay every
/// `decay_every` iterations, per-iteration metrics records, periodic
/// checkpoints, and a final checkpoint. On a numeric failure the last good
/// parameter state is written out before the error propagates.
pub fn train<T: Real>(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.log");
    let final_path = out_dir.join("ckpt_final.cowt");

    let (mut ps, start) = match resume {
        Some(path) => {
            let (stored_cfg, ps, done) = load_checkpoint::<T>(path)?;
            // extending a run is fine; every other setting must match for
            // the continuation to be reproducible
            let mut comparable = stored_cfg;
            comparable.iterations = cfg.iterations;
            if comparable != *cfg {
                return Err(CowError::Config(
                    "checkpoint was produced with a different configuration; resume would not be reproducible".into(),
                ));
            }
            (ps, done)
        }
        None => (ParameterSet::init(&cfg.net, &cfg.counts, cfg.data.image_size)?, 0),
    };
    if start >= cfg.iterations as u64 {
        return Err(CowError::Config(format!(
            "checkpoint already has {start} iterations, config asks for {}",
            cfg.iterations
        )));
    }

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)?;

    let mut last_loss = f64::NAN;
    for iter in (start as usize)..cfg.iterations {
        let lr_f = cfg.lr * cfg.lr_decay.powi((iter / cfg.decay_every) as i32);
        let lr = T::from_f64(lr_f).unwrap();
        let result = match train_step(cfg, &mut ps, iter, lr) {
            Ok(r) => r,
            Err(e @ (CowError::Numeric(_) | CowError::Shape(_))) => {
                save_checkpoint(cfg, &ps, iter as u64, &out_dir.join("ckpt_last_good.cowt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        last_loss = result.loss_terms.total.to_f64().unwrap();
        if (iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.write_all(metrics_line(iter, &result.loss_terms).as_bytes())?;
        }
        if (iter + 1) % cfg.ckpt_every == 0 && iter + 1 != cfg.iterations {
            save_checkpoint(cfg, &ps, iter as u64 + 1, &out_dir.join(format!("ckpt_{:06}.cowt", iter + 1)))?;
        }
    }
    log.flush()?;
    save_checkpoint(cfg, &ps, cfg.iterations as u64, &final_path)?;
    Ok(TrainOutcome {
        ckpt_path: final_path,
        metrics_path,
        iterations_done: cfg.iterations as u64,
        final_loss: last_loss,
    })
}

/// Aggregated held-out results.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mean_dice: f64,
    pub mean_boundary_f1: f64,
    /// `(class_id, mean dice, mean boundary-F1, episode count)` rows.
    pub per_class: Vec<(u32, f64, f64, usize)>,
    /// Mean of the six loss terms and the total, in metrics-log order.
    pub mean_loss_terms: [f64; 7],
    pub episodes: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Evaluates a parameter set on one fold's held-out classes. The classes
/// being evaluated must not intersect the classes the checkpoint was
/// trained on.
pub fn evaluate<T: Real>(
    ckpt_cfg: &TrainConfig,
    ps: &ParameterSet<T>,
    fold: &FoldSplit,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    fold.validate()?;
    if n_episodes == 0 {
        return Err(CowError::Config("evaluation needs at least one episode".into()));
    }
    for c in &fold.test_class_ids {
        if ckpt_cfg.fold.train_class_ids.contains(c) {
            return Err(CowError::Config(format!(
                "class {c} is a training class of this checkpoint; evaluation folds must be disjoint"
            )));
        }
    }
    let started = Instant::now();
    let mut eval_cfg = ckpt_cfg.clone();
    eval_cfg.fold = fold.clone();

    let mut sums = [0.0f64; 7];
    let mut per_class: Vec<(u32, f64, f64, usize)> = Vec::new();
    let (mut dice_sum, mut bf1_sum) = (0.0, 0.0);
    for i in 0..n_episodes {
        // rotate classes for balance, then let the seed pick the episode
        let class = fold.test_class_ids[i % fold.test_class_ids.len()];
        let (episode, mut rng) = draw_episode::<T>(&eval_cfg, &[class], i as u64, seed)?;
        let mut g = Graph::<T>::new();
        let gp = load_params(&mut g, ps, false);
        let pass = forward_episode(&mut g, &gp, &episode, &eval_cfg.net, &eval_cfg.counts, &eval_cfg.weights, &mut rng)?;
        let d = pass.result.dice.to_f64().unwrap();
        let b = pass.result.boundary_f1.to_f64().unwrap();
        dice_sum += d;
        bf1_sum += b;
        for (k, (_, v)) in pass.result.loss_terms.named().iter().enumerate() {
            sums[k] += v.to_f64().unwrap();
        }
        match per_class.iter_mut().find(|(c, ..)| *c == class) {
            Some(row) => {
                row.1 += d;
                row.2 += b;
                row.3 += 1;
            }
            None => per_class.push((class, d, b, 1)),
        }
    }
    for row in &mut per_class {
        row.1 /= row.3 as f64;
        row.2 /= row.3 as f64;
    }
    let n = n_episodes as f64;
    Ok(MetricsReport {
        mean_dice: dice_sum / n,
        mean_boundary_f1: bf1_sum / n,
        per_class,
        mean_loss_terms: sums.map(|s| s / n),
        episodes: n_episodes,
        seed,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mines the support prototype banks of one episode under a trained
/// parameter set and writes them with their provenance tags.
pub fn export_prototypes<T: Real>(
    ckpt_cfg: &TrainConfig,
    ps: &ParameterSet<T>,
    episode: &Episode<T>,
    out: &Path,
) -> Result<()> {
    let mut g = Graph::<T>::new();
    let gp = load_params(&mut g, ps, false);
    let img_s = g.constant(episode.support_image.as_channels());
    let f_s = nets::encode(&mut g, img_s, &gp, &ckpt_cfg.net)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(ckpt_cfg.data.seed, u64::from(episode.class_id), 0x70726f74));
    let mined = mine_banks(&mut g, &gp, f_s, &episode.support_mask, &ckpt_cfg.net, &ckpt_cfg.counts, &mut rng)?;

    let mut c = Container::new();
    for (label, bank) in [("fg", &mined.fg), ("bg", &mined.bg)] {
        c.push_real(&format!("{label}_rows"), g.value(bank.rows))?;
        c.push_u8(
            &format!("{label}_tags"),
            &[bank.tags.len()],
            bank.tags.iter().map(|t| t.as_u8()).collect(),
        )?;
    }
    c.push_u8("class_id", &[4], episode.class_id.to_le_bytes().to_vec())?;
    c.save(out)
}

use rand::RngCore;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Scalar;

    #[test]
    fn dice_reference_values() {
        let a = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let disjoint = BinaryMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        // pred 2 px, gt 2 px, 1 px overlap
        let shifted = BinaryMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(dice(&a, &shifted).unwrap(), 0.5);
        let empty = BinaryMask::zeros(2, 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert!(dice(&a, &BinaryMask::zeros(3, 2)).is_err());
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk_default();
        cfg.data.image_size = 32;
        cfg.net.encoder_channels = vec![4, 8];
        cfg.net.encoder_stride = 4;
        cfg.net.feature_dim = 8;
        cfg.net.aspp_rates = vec![1, 2];
        cfg.net.mlp_hidden = 8;
        cfg.net.decoder_channels = vec![4];
        cfg.counts = crate::hpg::PrototypeCounts { n_hf: 2, n_nf: 2, n_hb: 2, n_nb: 4 };
        cfg.iterations = 2;
        cfg.decay_every = 1;
        cfg.ckpt_every = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn one_iteration_writes_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 1;
        let out = train::<Scalar>(&cfg, dir.path(), None).unwrap();
        assert!(out.ckpt_path.exists());
        let log = fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].split_whitespace().count(), 8);
        assert!(out.final_loss.is_finite());
    }

    #[test]
    fn checkpoints_round_trip_and_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();

        // uninterrupted: 2 iterations
        let full = train::<Scalar>(&cfg, &dir.path().join("full"), None).unwrap();
        let full_log = fs::read_to_string(&full.metrics_path).unwrap();

        // interrupted: 1 iteration, then resume to 2
        let mut short = cfg.clone();
        short.iterations = 1;
        let first = train::<Scalar>(&short, &dir.path().join("short"), None).unwrap();
        let resumed = train::<Scalar>(&cfg, &dir.path().join("resumed"), Some(&first.ckpt_path)).unwrap();
        let resumed_log = fs::read_to_string(&resumed.metrics_path).unwrap();

        let full_lines: Vec<&str> = full_log.lines().collect();
        let resumed_lines: Vec<&str> = resumed_log.lines().collect();
        assert_eq!(resumed_lines.len(), 1, "resume continues from iteration 1");
        assert_eq!(full_lines[1], resumed_lines[0], "post-resume record matches the uninterrupted run");

        // checkpoint parameter round trip is bit-exact
        let (cfg_back, ps_back, done) = load_checkpoint::<Scalar>(&full.ckpt_path).unwrap();
        assert_eq!(cfg_back, cfg);
        assert_eq!(done, 2);
        let (_, ps_again, _) = load_checkpoint::<Scalar>(&full.ckpt_path).unwrap();
        for ((n1, t1), (n2, t2)) in ps_back.entries().iter().zip(ps_again.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 1;
        let out = train::<Scalar>(&cfg, dir.path(), None).unwrap();
        let mut other = cfg.clone();
        other.iterations = 3;
        other.lr = 0.5;
        match train::<Scalar>(&other, &dir.path().join("r"), Some(&out.ckpt_path)) {
            Err(CowError::Config(msg)) => assert!(msg.contains("different configuration"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_enforces_fold_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 1;
        let out = train::<Scalar>(&cfg, dir.path(), None).unwrap();
        let (ckpt_cfg, ps, _) = load_checkpoint::<Scalar>(&out.ckpt_path).unwrap();

        let report = evaluate(&ckpt_cfg, &ps, &ckpt_cfg.fold, 3, 9).unwrap();
        assert!(report.mean_dice >= 0.0 && report.mean_dice <= 1.0);
        assert!(report.mean_boundary_f1 >= 0.0 && report.mean_boundary_f1 <= 1.0);
        assert_eq!(report.episodes, 3);
        assert_eq!(report.per_class.len(), 1);

        // fold 1's test class is one of fold 0's training classes
        let other = FoldSplit::for_fold(1, &ckpt_cfg.data).unwrap();
        match evaluate(&ckpt_cfg, &ps, &other, 2, 9) {
            Err(CowError::Config(msg)) => assert!(msg.contains("training class"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn export_writes_banks_with_tags() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 1;
        let out = train::<Scalar>(&cfg, dir.path(), None).unwrap();
        let (ckpt_cfg, ps, _) = load_checkpoint::<Scalar>(&out.ckpt_path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let episode = generate_episode::<Scalar>(&ckpt_cfg.data, 0, &mut rng).unwrap();
        let path = dir.path().join("protos.cowt");
        export_prototypes(&ckpt_cfg, &ps, &episode, &path).unwrap();

        let c = Container::load(&path).unwrap();
        let fg = c.get_real::<Scalar>("fg_rows").unwrap();
        let bg = c.get_real::<Scalar>("bg_rows").unwrap();
        assert_eq!(fg.shape(), &[ckpt_cfg.counts.fg_bank_rows(), ckpt_cfg.net.feature_dim]);
        assert_eq!(bg.shape(), &[ckpt_cfg.counts.bg_bank_rows(), ckpt_cfg.net.feature_dim]);
        let (ts, tags) = c.get_u8("fg_tags").unwrap();
        assert_eq!(ts, &[ckpt_cfg.counts.fg_bank_rows()]);
        assert!(tags.iter().all(|&t| t <= 2));
        assert_eq!(*tags.last().unwrap(), crate::domain::ProtoTag::Global.as_u8());
    }
}
