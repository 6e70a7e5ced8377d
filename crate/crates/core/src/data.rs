//! Synthetic episodic dataset: parameterized shape classes rendered as
//! grayscale images with exact masks, fold splits over disjoint class ids,
//! and portable episode files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Container;
use crate::domain::{BinaryMask, Episode, Image, MIN_IMAGE_SIDE};
use crate::tensor::Tensor;
use crate::{CowError, Real, Result};

/// Foreground area must stay inside this band, mirroring the small-organ
/// imbalance the pipeline is built for.
pub const FG_FRACTION_MIN: f64 = 0.02;
pub const FG_FRACTION_MAX: f64 = 0.20;

/// Generator settings. Shape family is derived from the class id; classes
/// used for training and testing are disjoint id ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTaskConfig {
    pub image_size: usize,
    /// Target foreground fraction range, a sub-range of the global band.
    pub size_min: f64,
    pub size_max: f64,
    /// Amplitude of the radial contour perturbation, 0 disables it.
    pub boundary_roughness: f64,
    /// Intensity step between background and foreground.
    pub intensity_contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_std: f64,
    pub n_classes_train: usize,
    pub n_classes_test: usize,
    pub seed: u64,
}

impl ShapeTaskConfig {
    pub fn desk_default() -> Self {
        Self {
            image_size: 64,
            size_min: 0.05,
            size_max: 0.16,
            boundary_roughness: 0.18,
            intensity_contrast: 0.35,
            noise_std: 0.03,
            n_classes_train: 4,
            n_classes_test: 1,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CowError::Config(msg));
        if self.image_size < MIN_IMAGE_SIDE {
            return fail(format!("image_size must be at least {MIN_IMAGE_SIDE}, got {}", self.image_size));
        }
        if !(self.size_min.is_finite() && self.size_max.is_finite() && self.size_min <= self.size_max) {
            return fail(format!("size range [{}, {}] is not ordered", self.size_min, self.size_max));
        }
        if self.size_min < FG_FRACTION_MIN + 0.005 || self.size_max > FG_FRACTION_MAX - 0.01 {
            return fail(format!(
                "size range [{}, {}] must sit inside [{}, {}] with margin",
                self.size_min,
                self.size_max,
                FG_FRACTION_MIN + 0.005,
                FG_FRACTION_MAX - 0.01
            ));
        }
        if !(self.boundary_roughness >= 0.0 && self.boundary_roughness <= 0.5) {
            return fail(format!("boundary_roughness must be in [0, 0.5], got {}", self.boundary_roughness));
        }
        if !(self.intensity_contrast > 0.0 && self.intensity_contrast <= 0.6) {
            return fail(format!("intensity_contrast must be in (0, 0.6], got {}", self.intensity_contrast));
        }
        if !(self.noise_std >= 0.0 && self.noise_std <= 0.2) {
            return fail(format!("noise_std must be in [0, 0.2], got {}", self.noise_std));
        }
        if self.n_classes_train == 0 || self.n_classes_test == 0 {
            return fail("both class counts must be positive".into());
        }
        Ok(())
    }

    pub fn n_classes_total(&self) -> usize {
        self.n_classes_train + self.n_classes_test
    }
}

/// One train/test class split. Folds rotate which contiguous id block is
/// held out, so every class is a test class in exactly one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_class_ids: Vec<u32>,
    pub test_class_ids: Vec<u32>,
}

impl FoldSplit {
    pub fn n_folds(cfg: &ShapeTaskConfig) -> usize {
        cfg.n_classes_total() / cfg.n_classes_test
    }

    pub fn for_fold(fold_id: usize, cfg: &ShapeTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.n_classes_total();
        if total % cfg.n_classes_test != 0 {
            return Err(CowError::Config(format!(
                "test block of {} classes does not tile {} total classes",
                cfg.n_classes_test, total
            )));
        }
        let n_folds = Self::n_folds(cfg);
        if fold_id >= n_folds {
            return Err(CowError::Config(format!("fold_id {fold_id} out of range, {n_folds} folds available")));
        }
        let lo = (fold_id * cfg.n_classes_test) as u32;
        let hi = lo + cfg.n_classes_test as u32;
        let test: Vec<u32> = (lo..hi).collect();
        let train: Vec<u32> = (0..total as u32).filter(|c| !(lo..hi).contains(c)).collect();
        let fold = Self { fold_id, train_class_ids: train, test_class_ids: test };
        fold.validate()?;
        Ok(fold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_class_ids.is_empty() || self.test_class_ids.is_empty() {
            return Err(CowError::Config("fold must have both train and test classes".into()));
        }
        for c in &self.test_class_ids {
            if self.train_class_ids.contains(c) {
                return Err(CowError::Config(format!("class {c} appears in both train and test sets")));
            }
        }
        Ok(())
    }
}

/// Splittable seed derivation (splitmix64 finalizer over a mixed word) so
/// that workers, iterations, and retries get independent streams.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Ellipse,
    RoundedRect,
    Blob,
}

impl Family {
    fn of(class_id: u32) -> Self {
        match class_id % 3 {
            0 => Family::Ellipse,
            1 => Family::RoundedRect,
            _ => Family::Blob,
        }
    }
}

/// Stable per-class appearance drawn from (cfg.seed, class_id): background
/// level, contour harmonic signature, and superellipse exponent.
struct ClassSignature {
    family: Family,
    bg_level: f64,
    exponent: f64,
    /// (frequency, relative amplitude, phase) triples for the contour.
    harmonics: Vec<(f64, f64, f64)>,
}

impl ClassSignature {
    fn of(cfg: &ShapeTaskConfig, class_id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::from(class_id), 0xc1a5));
        let family = Family::of(class_id);
        let bg_level = rng.gen_range(0.25..0.40);
        let exponent = rng.gen_range(3.0..6.0);
        let ks: &[f64] = match family {
            // blobs lean on low frequencies for lobed outlines
            Family::Blob => &[2.0, 3.0, 4.0, 5.0],
            _ => &[3.0, 4.0, 6.0, 8.0],
        };
        let harmonics = ks
            .iter()
            .map(|&k| (k, rng.gen_range(0.3..1.0) / ks.len() as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { family, bg_level, exponent, harmonics }
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    theta: f64,
    a: f64,
    b: f64,
    phase_shift: f64,
}

fn draw_pose(cfg: &ShapeTaskConfig, sig: &ClassSignature, rng: &mut ChaCha8Rng) -> Pose {
    let s = cfg.image_size as f64;
    let target = rng.gen_range(cfg.size_min..=cfg.size_max);
    // unit-contour area: pi for the round families, a bit under 4 for the
    // superellipse; roughness averages out to first order
    let unit_area = match sig.family {
        Family::RoundedRect => {
            let p = sig.exponent;
            4.0 * (1.0 - 0.85 / p)
        }
        _ => std::f64::consts::PI,
    };
    let ab = target * s * s / unit_area;
    let rho = rng.gen_range(0.6..1.6);
    let a = (ab * rho).sqrt();
    let b = (ab / rho).sqrt();
    Pose {
        cx: rng.gen_range(0.32..0.68) * s,
        cy: rng.gen_range(0.32..0.68) * s,
        theta: rng.gen_range(0.0..std::f64::consts::TAU),
        a,
        b,
        phase_shift: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

fn render_mask(cfg: &ShapeTaskConfig, sig: &ClassSignature, pose: &Pose) -> BinaryMask {
    let (ct, st) = (pose.theta.cos(), pose.theta.sin());
    BinaryMask::from_fn(cfg.image_size, cfg.image_size, |row, col| {
        let dx = col as f64 + 0.5 - pose.cx;
        let dy = row as f64 + 0.5 - pose.cy;
        let u = (ct * dx + st * dy) / pose.a;
        let v = (-st * dx + ct * dy) / pose.b;
        let r = match sig.family {
            Family::RoundedRect => {
                let p = sig.exponent;
                (u.abs().powf(p) + v.abs().powf(p)).powf(1.0 / p)
            }
            _ => (u * u + v * v).sqrt(),
        };
        let phi = v.atan2(u);
        let mut edge = 1.0;
        for &(k, amp, ph) in &sig.harmonics {
            edge += cfg.boundary_roughness * amp * (k * phi + ph + pose.phase_shift).cos();
        }
        r <= edge.max(0.3)
    })
}

/// 3x3 box blur with clamped borders, used to soften mask edges in the
/// intensity image while the stored mask stays exact.
fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    acc += src[y * w + x];
                }
            }
            out[i * w + j] = acc / 9.0;
        }
    }
    out
}

fn render_image<T: Real>(
    cfg: &ShapeTaskConfig,
    sig: &ClassSignature,
    mask: &BinaryMask,
    rng: &mut ChaCha8Rng,
) -> Result<Image<T>> {
    let (h, w) = (mask.h(), mask.w());
    let soft: Vec<f64> = mask.bits().iter().map(|&b| f64::from(b)).collect();
    let soft = box_blur(&box_blur(&soft, h, w), h, w);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).map_err(|e| CowError::Numeric(e.to_string()))?;
    let (gx, gy) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
    let mut vals = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let gradient = gx * (j as f64 / w as f64) + gy * (i as f64 / h as f64);
            let mut v = sig.bg_level + gradient + cfg.intensity_contrast * soft[i * w + j];
            if cfg.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            vals.push(T::from_f64(v.clamp(0.0, 1.0)).unwrap());
        }
    }
    Image::new(Tensor::new(&[h, w], vals)?)
}

fn fg_fraction(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64 / (mask.h() * mask.w()) as f64
}

fn draw_instance<T: Real>(
    cfg: &ShapeTaskConfig,
    sig: &ClassSignature,
    rng: &mut ChaCha8Rng,
) -> Result<(Image<T>, BinaryMask)> {
    for _ in 0..1000 {
        let pose = draw_pose(cfg, sig, rng);
        let mask = render_mask(cfg, sig, &pose);
        let f = fg_fraction(&mask);
        if (FG_FRACTION_MIN..=FG_FRACTION_MAX).contains(&f) {
            let image = render_image(cfg, sig, &mask, rng)?;
            return Ok((image, mask));
        }
    }
    Err(CowError::Validation(
        "could not draw a shape inside the foreground fraction band; size range too extreme".into(),
    ))
}

/// Render one support/query pair of the given class. Both instances share
/// the class appearance but have independent poses and noise.
pub fn generate_episode<T: Real>(cfg: &ShapeTaskConfig, class_id: u32, rng: &mut ChaCha8Rng) -> Result<Episode<T>> {
    cfg.validate()?;
    if class_id as usize >= cfg.n_classes_total() {
        return Err(CowError::InvalidArgument(format!(
            "class_id {class_id} out of range, {} classes configured",
            cfg.n_classes_total()
        )));
    }
    let sig = ClassSignature::of(cfg, class_id);
    let (support_image, support_mask) = draw_instance::<T>(cfg, &sig, rng)?;
    let (query_image, query_mask) = draw_instance::<T>(cfg, &sig, rng)?;
    Episode::new(support_image, support_mask, query_image, query_mask, class_id)
}

/// Write an episode as a portable tensor container.
pub fn save_episode<T: Real>(e: &Episode<T>, path: &Path) -> Result<()> {
    episode_container(e)?.save(path)
}

pub fn episode_container<T: Real>(e: &Episode<T>) -> Result<Container> {
    let mut c = Container::new();
    c.push_real("support_image", e.support_image.pixels())?;
    c.push_u8("support_mask", &[e.h(), e.w()], e.support_mask.bits().to_vec())?;
    c.push_real("query_image", e.query_image.pixels())?;
    c.push_u8("query_mask", &[e.h(), e.w()], e.query_mask.bits().to_vec())?;
    c.push_u8("class_id", &[4], e.class_id.to_le_bytes().to_vec())?;
    Ok(c)
}

pub fn load_episode<T: Real>(path: &Path) -> Result<Episode<T>> {
    episode_from_container(&Container::load(path)?)
}

pub fn episode_from_container<T: Real>(c: &Container) -> Result<Episode<T>> {
    let mask = |name: &str| -> Result<BinaryMask> {
        let (shape, bits) = c.get_u8(name)?;
        if shape.len() != 2 {
            return Err(CowError::Parse { offset: 0, message: format!("block {name} must be 2-d, got {shape:?}") });
        }
        BinaryMask::new(shape[0], shape[1], bits.to_vec())
    };
    let (id_shape, id_bytes) = c.get_u8("class_id")?;
    if id_shape != [4] {
        return Err(CowError::Parse { offset: 0, message: format!("class_id block must be [4], got {id_shape:?}") });
    }
    let class_id = u32::from_le_bytes(id_bytes.try_into().expect("length checked"));
    Episode::new(
        Image::new(c.get_real::<T>("support_image")?)?,
        mask("support_mask")?,
        Image::new(c.get_real::<T>("query_image")?)?,
        mask("query_mask")?,
        class_id,
    )
}
