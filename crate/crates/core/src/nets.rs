//! Learnable sub-networks and their parameter registry.
//!
//! Four nets share one [`ParameterSet`]: the feature encoder, the support
//! decoder (feature-processing conv, ASPP, conv stack, logistic head), the
//! per-region prototype MLPs, and the two fusion decoders of the dual-path
//! head. Forward passes are pure graph builders; parameters enter a
//! [`Graph`] once per iteration via [`load_params`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::{PathKind, Region};
use crate::graph::{Graph, Var};
use crate::hpg::PrototypeCounts;
use crate::{CowError, Real, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Output channels of each encoder block; the first `log2(stride)`
    /// blocks downsample by 2.
    pub encoder_channels: Vec<usize>,
    pub encoder_stride: usize,
    /// C', the embedding width every prototype and similarity op works in.
    pub feature_dim: usize,
    pub aspp_rates: Vec<usize>,
    pub mlp_hidden: usize,
    /// Channels of the conv stacks inside the support and fusion decoders.
    pub decoder_channels: Vec<usize>,
    pub seed: u64,
}

impl NetConfig {
    pub fn desk_default() -> Self {
        Self {
            encoder_channels: vec![8, 16, 16, 32],
            encoder_stride: 4,
            feature_dim: 32,
            aspp_rates: vec![1, 2, 4],
            mlp_hidden: 64,
            decoder_channels: vec![16, 16],
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.encoder_stride) {
            return Err(CowError::Config(format!(
                "encoder_stride must be 2, 4 or 8, got {}",
                self.encoder_stride
            )));
        }
        if self.feature_dim < 8 {
            return Err(CowError::Config(format!("feature_dim must be at least 8, got {}", self.feature_dim)));
        }
        let downs = self.encoder_stride.trailing_zeros() as usize;
        if self.encoder_channels.len() < downs {
            return Err(CowError::Config(format!(
                "encoder needs at least {downs} blocks for stride {}, got {}",
                self.encoder_stride,
                self.encoder_channels.len()
            )));
        }
        for (what, list) in [
            ("encoder_channels", &self.encoder_channels),
            ("aspp_rates", &self.aspp_rates),
            ("decoder_channels", &self.decoder_channels),
        ] {
            if list.is_empty() || list.iter().any(|&v| v == 0) {
                return Err(CowError::Config(format!("{what} must be non-empty positive integers, got {list:?}")));
            }
        }
        if self.mlp_hidden == 0 {
            return Err(CowError::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Feature-grid side lengths for an image of the given size.
    pub fn feature_hw(&self, image_h: usize, image_w: usize) -> Result<(usize, usize)> {
        if image_h % self.encoder_stride != 0 || image_w % self.encoder_stride != 0 {
            return Err(CowError::Config(format!(
                "image {image_h}x{image_w} is not divisible by encoder stride {}",
                self.encoder_stride
            )));
        }
        Ok((image_h / self.encoder_stride, image_w / self.encoder_stride))
    }
}

/// Ordered, name-addressed parameter tensors for all nets.
#[derive(Clone, Debug)]
pub struct ParameterSet<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
}

enum Init {
    He { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

impl<T: Real> ParameterSet<T> {
    /// Builds every tensor the pipeline will touch for the given shapes.
    /// `image_size` fixes the MLP input width (the flattened feature grid);
    /// `counts` fixes the per-region MLP output rows and the fusion
    /// decoders' input widths.
    pub fn init(net: &NetConfig, counts: &PrototypeCounts, image_size: usize) -> Result<Self> {
        net.validate()?;
        counts.validate()?;
        let (fh, fw) = net.feature_hw(image_size, image_size)?;
        let hw = fh * fw;
        let c = net.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(net.seed);
        let mut ps = Self { entries: Vec::new() };

        // encoder: conv blocks with instance norm, then a linear 1x1
        // projection to C' (no terminal ReLU, so feature columns are
        // generically nonzero and cosine similarity stays defined).
        let mut in_ch = 1;
        for (i, &ch) in net.encoder_channels.iter().enumerate() {
            ps.push(&format!("enc.b{i}.conv.w"), &[ch, in_ch, 3, 3], Init::He { fan_in: in_ch * 9 }, &mut rng);
            ps.push(&format!("enc.b{i}.conv.b"), &[ch], Init::Const(0.0), &mut rng);
            ps.push(&format!("enc.b{i}.norm.g"), &[ch], Init::Const(1.0), &mut rng);
            ps.push(&format!("enc.b{i}.norm.b"), &[ch], Init::Const(0.0), &mut rng);
            in_ch = ch;
        }
        // a small random projection bias keeps feature columns nonzero
        // even where every ReLU channel is dead, so cosine stays defined
        ps.push("enc.proj.w", &[c, in_ch, 1, 1], Init::He { fan_in: in_ch }, &mut rng);
        ps.push("enc.proj.b", &[c], Init::Normal { std: 0.02 }, &mut rng);

        // support decoder: FPM conv (3C' -> C'), ASPP at the configured
        // rates fused by a 1x1 conv, decoder conv stack, logistic head.
        ps.push("sup.fpm.w", &[c, 3 * c, 3, 3], Init::He { fan_in: 3 * c * 9 }, &mut rng);
        ps.push("sup.fpm.b", &[c], Init::Const(0.0), &mut rng);
        for (i, _) in net.aspp_rates.iter().enumerate() {
            ps.push(&format!("sup.aspp{i}.w"), &[c, c, 3, 3], Init::He { fan_in: c * 9 }, &mut rng);
            ps.push(&format!("sup.aspp{i}.b"), &[c], Init::Const(0.0), &mut rng);
        }
        let cat = net.aspp_rates.len() * c;
        ps.push("sup.asppfuse.w", &[c, cat, 1, 1], Init::He { fan_in: cat }, &mut rng);
        ps.push("sup.asppfuse.b", &[c], Init::Const(0.0), &mut rng);
        let mut prev = c;
        for (i, &dc) in net.decoder_channels.iter().enumerate() {
            ps.push(&format!("sup.dec{i}.w"), &[dc, prev, 3, 3], Init::He { fan_in: prev * 9 }, &mut rng);
            ps.push(&format!("sup.dec{i}.b"), &[dc], Init::Const(0.0), &mut rng);
            prev = dc;
        }
        ps.push("sup.out.w", &[1, prev, 1, 1], Init::He { fan_in: prev }, &mut rng);
        ps.push("sup.out.b", &[1], Init::Const(0.0), &mut rng);

        // per-region prototype MLPs over the flattened spatial axis
        for region in Region::ALL {
            let n_out = counts.get(region);
            if n_out == 0 {
                continue;
            }
            let key = region.key();
            ps.push(&format!("mlp.{key}.fc1.w"), &[net.mlp_hidden, hw], Init::He { fan_in: hw }, &mut rng);
            ps.push(&format!("mlp.{key}.fc1.b"), &[net.mlp_hidden], Init::Const(0.0), &mut rng);
            // nonzero output bias keeps reconstructed prototype rows away
            // from the exact-zero vector that cosine similarity rejects
            ps.push(&format!("mlp.{key}.fc2.w"), &[n_out, net.mlp_hidden], Init::He { fan_in: net.mlp_hidden }, &mut rng);
            ps.push(&format!("mlp.{key}.fc2.b"), &[n_out], Init::Normal { std: 0.02 }, &mut rng);
        }

        // dual-path fusion decoders; input width is the bank size per path
        for (path, n_in) in [(PathKind::Fg, counts.fg_bank_rows()), (PathKind::Bg, counts.bg_bank_rows())] {
            let key = path.key();
            let mut prev = n_in;
            for (i, &dc) in net.decoder_channels.iter().enumerate() {
                ps.push(&format!("fuse.{key}.c{i}.w"), &[dc, prev, 3, 3], Init::He { fan_in: prev * 9 }, &mut rng);
                ps.push(&format!("fuse.{key}.c{i}.b"), &[dc], Init::Const(0.0), &mut rng);
                prev = dc;
            }
            ps.push(&format!("fuse.{key}.out.w"), &[1, prev, 1, 1], Init::He { fan_in: prev }, &mut rng);
            ps.push(&format!("fuse.{key}.out.b"), &[1], Init::Const(0.0), &mut rng);
        }

        Ok(ps)
    }

    fn push(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) {
        let t = match init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)).unwrap())
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)).unwrap())
            }
            Init::Const(v) => Tensor::full(shape, T::from_f64(v).unwrap()),
        };
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.entries
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Rebuilds a set from named tensors (checkpoint loading). Order is
    /// taken from the loaded list; names must be unique.
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        for (i, (n, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(m, _)| m == n) {
                return Err(CowError::Validation(format!("duplicate parameter name {n:?}")));
            }
        }
        Ok(Self { entries })
    }
}

/// Handles of all parameters inside one graph, in registry order.
pub struct GraphParams {
    vars: Vec<(String, Var)>,
}

impl GraphParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| panic!("parameter {name:?} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Inserts every parameter into the graph, as differentiable leaves when
/// `trainable`, otherwise as constants.
pub fn load_params<T: Real>(g: &mut Graph<T>, ps: &ParameterSet<T>, trainable: bool) -> GraphParams {
    let vars = ps
        .entries()
        .iter()
        .map(|(n, t)| {
            let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            (n.clone(), v)
        })
        .collect();
    GraphParams { vars }
}

fn conv_block<T: Real>(g: &mut Graph<T>, x: Var, p: &GraphParams, prefix: &str, stride: usize) -> Var {
    let y = g.conv2d(x, p.var(&format!("{prefix}.conv.w")), p.var(&format!("{prefix}.conv.b")), stride, 1, 1);
    let y = g.instance_norm(y, p.var(&format!("{prefix}.norm.g")), p.var(&format!("{prefix}.norm.b")));
    g.relu(y)
}

/// Shared feature encoder: `[1,h,w] -> [C',h/stride,w/stride]`.
pub fn encode<T: Real>(g: &mut Graph<T>, image: Var, p: &GraphParams, cfg: &NetConfig) -> Result<Var> {
    let shape = g.value(image).shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(CowError::Shape(format!("encoder expects [1,h,w], got {shape:?}")));
    }
    let downs = cfg.encoder_stride.trailing_zeros() as usize;
    let mut x = image;
    for i in 0..cfg.encoder_channels.len() {
        let stride = if i < downs { 2 } else { 1 };
        x = conv_block(g, x, p, &format!("enc.b{i}"), stride);
        if !g.value(x).is_finite() {
            return Err(CowError::Numeric(format!("encoder block {i} produced non-finite activations")));
        }
    }
    let out = g.conv2d(x, p.var("enc.proj.w"), p.var("enc.proj.b"), 1, 1, 0);
    if !g.value(out).is_finite() {
        return Err(CowError::Numeric("encoder projection produced non-finite activations".into()));
    }
    Ok(out)
}

/// Support decoder: `[3C',h',w'] -> [1,h',w']` with values in (0,1).
pub fn support_decode<T: Real>(g: &mut Graph<T>, f_sp: Var, p: &GraphParams, cfg: &NetConfig) -> Result<Var> {
    let shape = g.value(f_sp).shape();
    if shape.len() != 3 || shape[0] != 3 * cfg.feature_dim {
        return Err(CowError::Shape(format!(
            "support decoder expects {} channels, got {shape:?}",
            3 * cfg.feature_dim
        )));
    }
    let x = g.conv2d(f_sp, p.var("sup.fpm.w"), p.var("sup.fpm.b"), 1, 1, 1);
    let x = g.relu(x);
    let branches: Vec<Var> = cfg
        .aspp_rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| {
            let y = g.conv2d(x, p.var(&format!("sup.aspp{i}.w")), p.var(&format!("sup.aspp{i}.b")), 1, rate, rate);
            g.relu(y)
        })
        .collect();
    let cat = g.concat_channels(&branches);
    let mut x = g.conv2d(cat, p.var("sup.asppfuse.w"), p.var("sup.asppfuse.b"), 1, 1, 0);
    x = g.relu(x);
    for i in 0..cfg.decoder_channels.len() {
        x = g.conv2d(x, p.var(&format!("sup.dec{i}.w")), p.var(&format!("sup.dec{i}.b")), 1, 1, 1);
        x = g.relu(x);
    }
    let logit = g.conv2d(x, p.var("sup.out.w"), p.var("sup.out.b"), 1, 1, 0);
    Ok(g.sigmoid(logit))
}

/// Region MLP: a reconstructed `[C',h',w']` map becomes `n_out` prototype
/// rows `[n_out, C']`. The two fully connected layers act on the flattened
/// spatial axis, identically for every channel.
pub fn mlp_prototypes<T: Real>(
    g: &mut Graph<T>,
    recon: Var,
    region: Region,
    n_out: usize,
    p: &GraphParams,
    cfg: &NetConfig,
) -> Result<Var> {
    if n_out == 0 {
        return Err(CowError::InvalidArgument("mlp_prototypes requires n_out > 0".into()));
    }
    let shape = g.value(recon).shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.feature_dim {
        return Err(CowError::Shape(format!(
            "mlp_prototypes expects [{},h',w'], got {shape:?}",
            cfg.feature_dim
        )));
    }
    let key = region.key();
    let hw = shape[1] * shape[2];
    let x = g.reshape(recon, &[cfg.feature_dim, hw]);
    let h = g.linear(x, p.var(&format!("mlp.{key}.fc1.w")), p.var(&format!("mlp.{key}.fc1.b")));
    let h = g.relu(h);
    let out = g.linear(h, p.var(&format!("mlp.{key}.fc2.w")), p.var(&format!("mlp.{key}.fc2.b")));
    Ok(g.transpose2(out))
}

/// Fusion decoder for one path: a stack of `[N,h',w']` similarity maps
/// becomes a single-channel logit grid. The two paths use disjoint weights.
pub fn fuse_decode<T: Real>(g: &mut Graph<T>, stack: Var, path: PathKind, p: &GraphParams, cfg: &NetConfig) -> Result<Var> {
    let key = path.key();
    let shape = g.value(stack).shape().to_vec();
    let expected = g.value(p.var(&format!("fuse.{key}.c0.w"))).shape()[1];
    if shape.len() != 3 || shape[0] != expected {
        return Err(CowError::Shape(format!(
            "{key} fusion decoder expects {expected} channels, got {shape:?}"
        )));
    }
    let mut x = stack;
    for i in 0..cfg.decoder_channels.len() {
        x = g.conv2d(x, p.var(&format!("fuse.{key}.c{i}.w")), p.var(&format!("fuse.{key}.c{i}.b")), 1, 1, 1);
        x = g.relu(x);
    }
    Ok(g.conv2d(x, p.var(&format!("fuse.{key}.out.w")), p.var(&format!("fuse.{key}.out.b")), 1, 1, 0))
}
