//! Shared domain types: images, masks, episodes, prototype banks and the
//! hard/normal partition, together with their validity checks.

use crate::{CowError, Real, Result, Tensor};

/// Minimum spatial extent of an [`Image`].
pub const MIN_IMAGE_SIDE: usize = 16;

/// Single-channel image with values in `[0, 1]`, stored as an `[h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Real> {
    pixels: Tensor<T>,
}

impl<T: Real> Image<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 2 {
            return Err(CowError::Shape(format!("image must be 2-d, got {shape:?}")));
        }
        if shape[0] < MIN_IMAGE_SIDE || shape[1] < MIN_IMAGE_SIDE {
            return Err(CowError::Validation(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                shape[0], shape[1]
            )));
        }
        if !pixels.is_finite() {
            return Err(CowError::Validation("image contains non-finite pixels".into()));
        }
        if pixels.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(CowError::Validation("image pixels must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn h(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    /// The image as a one-channel `[1, h, w]` tensor, the encoder's input layout.
    pub fn as_channels(&self) -> Tensor<T> {
        let (h, w) = (self.h(), self.w());
        self.pixels.clone().reshaped(&[1, h, w]).expect("reshape cannot fail")
    }
}

/// Binary mask over an `h x w` grid, one byte per pixel, values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(CowError::Shape(format!(
                "mask data length {} does not match {h}x{w}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CowError::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                bits.push(u8::from(f(i, j)));
            }
        }
        Self { h, w, bits }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.w + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self { h: self.h, w: self.w, bits: self.bits.iter().map(|&b| 1 - b).collect() }
    }

    /// True when the mask has at least one foreground and one background pixel.
    pub fn is_mixed(&self) -> bool {
        let ones = self.count_ones();
        ones > 0 && ones < self.bits.len()
    }

    /// Nearest-neighbor downsample by an integer stride, sampling at
    /// half-pixel centers (the same alignment the bilinear resize uses).
    pub fn downsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.h % stride != 0 || self.w % stride != 0 {
            return Err(CowError::InvalidArgument(format!(
                "stride {stride} must evenly divide {}x{}",
                self.h, self.w
            )));
        }
        let (oh, ow) = (self.h / stride, self.w / stride);
        let pick = stride / 2;
        let mut bits = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                bits.push(self.get(i * stride + pick, j * stride + pick));
            }
        }
        Ok(Self { h: oh, w: ow, bits })
    }

    /// The mask as a `[0,1]`-valued tensor of shape `[h, w]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.h, self.w], data).expect("mask length checked at construction")
    }
}

/// One support/query pair for a 1-way 1-shot segmentation task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T: Real> {
    pub support_image: Image<T>,
    pub support_mask: BinaryMask,
    pub query_image: Image<T>,
    pub query_mask: BinaryMask,
    pub class_id: u32,
}

impl<T: Real> Episode<T> {
    pub fn new(
        support_image: Image<T>,
        support_mask: BinaryMask,
        query_image: Image<T>,
        query_mask: BinaryMask,
        class_id: u32,
    ) -> Result<Self> {
        let shape = (support_image.h(), support_image.w());
        for (h, w, what) in [
            (support_mask.h(), support_mask.w(), "support mask"),
            (query_image.h(), query_image.w(), "query image"),
            (query_mask.h(), query_mask.w(), "query mask"),
        ] {
            if (h, w) != shape {
                return Err(CowError::Shape(format!(
                    "{what} is {h}x{w} but the support image is {}x{}",
                    shape.0, shape.1
                )));
            }
        }
        if !support_mask.is_mixed() {
            return Err(CowError::Validation(
                "support mask must contain at least one foreground and one background pixel".into(),
            ));
        }
        Ok(Self { support_image, support_mask, query_image, query_mask, class_id })
    }

    pub fn h(&self) -> usize {
        self.support_image.h()
    }

    pub fn w(&self) -> usize {
        self.support_image.w()
    }
}

/// One of the four partition regions: hard/normal crossed with fg/bg.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Hf,
    Hb,
    Nf,
    Nb,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Hf, Region::Hb, Region::Nf, Region::Nb];

    pub fn key(self) -> &'static str {
        match self {
            Region::Hf => "hf",
            Region::Hb => "hb",
            Region::Nf => "nf",
            Region::Nb => "nb",
        }
    }

    pub fn is_foreground(self) -> bool {
        matches!(self, Region::Hf | Region::Nf)
    }
}

/// Foreground or background branch of the dual-path head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Fg,
    Bg,
}

impl PathKind {
    pub fn key(self) -> &'static str {
        match self {
            PathKind::Fg => "fg",
            PathKind::Bg => "bg",
        }
    }
}

/// Where a prototype row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoTag {
    Hard,
    Normal,
    Global,
}

impl ProtoTag {
    pub fn as_u8(self) -> u8 {
        match self {
            ProtoTag::Hard => 0,
            ProtoTag::Normal => 1,
            ProtoTag::Global => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ProtoTag::Hard),
            1 => Ok(ProtoTag::Normal),
            2 => Ok(ProtoTag::Global),
            other => Err(CowError::Validation(format!("unknown prototype tag {other}"))),
        }
    }
}

/// Ordered prototype rows `[n, c]` with per-row provenance.
#[derive(Clone, Debug)]
pub struct PrototypeBank<T: Real> {
    pub rows: Tensor<T>,
    pub tags: Vec<ProtoTag>,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new(rows: Tensor<T>, tags: Vec<ProtoTag>) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(CowError::Shape(format!("bank rows must be 2-d, got {:?}", rows.shape())));
        }
        if rows.shape()[0] != tags.len() {
            return Err(CowError::Shape(format!(
                "bank has {} rows but {} tags",
                rows.shape()[0],
                tags.len()
            )));
        }
        let bank = Self { rows, tags };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    /// Checks finiteness, the no-zero-row rule, and the global-row rule.
    /// The final row is always the path's global prototype; earlier rows are
    /// tagged by provenance, so `Global` may also appear where an empty
    /// region was backfilled with copies of the global prototype.
    pub fn validate(&self) -> Result<()> {
        if !self.rows.is_finite() {
            return Err(CowError::Numeric("prototype bank contains non-finite values".into()));
        }
        let c = self.dim();
        for (i, row) in self.rows.data().chunks(c).enumerate() {
            if row.iter().all(|&v| v == T::zero()) {
                return Err(CowError::Validation(format!(
                    "prototype row {i} is the zero vector; cosine similarity is undefined"
                )));
            }
        }
        match self.tags.last() {
            Some(ProtoTag::Global) => Ok(()),
            Some(other) => Err(CowError::Validation(format!(
                "final bank row must be the global prototype, found {other:?}"
            ))),
            None => Err(CowError::Validation("prototype bank is empty".into())),
        }
    }
}

/// The four-way split of the support grid by ground truth vs self-prediction:
/// `hf` and `hb` are foreground/background pixels the self-prediction got
/// wrong, `nf` and `nb` the ones it got right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMasks {
    pub hf: BinaryMask,
    pub hb: BinaryMask,
    pub nf: BinaryMask,
    pub nb: BinaryMask,
}

impl PartitionMasks {
    pub fn masks(&self) -> [&BinaryMask; 4] {
        [&self.hf, &self.hb, &self.nf, &self.nb]
    }

    pub fn get(&self, r: Region) -> &BinaryMask {
        match r {
            Region::Hf => &self.hf,
            Region::Hb => &self.hb,
            Region::Nf => &self.nf,
            Region::Nb => &self.nb,
        }
    }
}

/// True iff the four masks are pairwise disjoint and cover every pixel
/// exactly once.
pub fn validate_partition(p: &PartitionMasks) -> Result<bool> {
    let (h, w) = (p.hf.h(), p.hf.w());
    for m in p.masks() {
        if (m.h(), m.w()) != (h, w) {
            return Err(CowError::Shape(format!(
                "partition masks disagree on shape: {}x{} vs {h}x{w}",
                m.h(),
                m.w()
            )));
        }
    }
    for idx in 0..h * w {
        let total: u8 = p.masks().iter().map(|m| m.bits()[idx]).sum();
        if total != 1 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-episode loss values. `align_skipped` records the fallback where the
/// predicted query mask collapsed to a single class and the alignment term
/// was zeroed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms<T: Real> {
    pub seg: T,
    pub align: T,
    pub bound: T,
    pub intra: T,
    pub inter: T,
    pub ssp: T,
    pub total: T,
    pub align_skipped: bool,
}

impl<T: Real> LossTerms<T> {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.align, self.bound, self.intra, self.inter, self.ssp, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn named(&self) -> [(&'static str, T); 7] {
        [
            ("seg", self.seg),
            ("align", self.align),
            ("bound", self.bound),
            ("intra", self.intra),
            ("inter", self.inter),
            ("ssp", self.ssp),
            ("total", self.total),
        ]
    }
}

/// Everything produced by one forward pass over an episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult<T: Real> {
    pub fg_prob: Tensor<T>,
    pub bg_prob: Tensor<T>,
    pub predicted_mask: BinaryMask,
    pub loss_terms: LossTerms<T>,
    pub dice: T,
    pub boundary_f1: T,
}
