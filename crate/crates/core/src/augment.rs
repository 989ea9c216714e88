//! Augmentation policy and the training/evaluation preprocessing pipelines.
//!
//! The training chain is fixed: resize, random horizontal flip, one random
//! affine policy (rotation OR horizontal translation OR vertical
//! translation), random erasing, normalization. Evaluation runs resize and
//! normalization only. There is deliberately no crop stage and no
//! brightness or contrast stage anywhere; [`StageKind`] enumerates the full
//! closed set.

use crate::image::{normalize, resize_bilinear, ImageTensor};
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("{name} = {value} is not a probability in [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("max_rotation_deg = {value} exceeds the hard cap of {cap} degrees")]
    RotationTooLarge { value: f64, cap: f64 },
    #[error("max_translate_frac = {value} exceeds the hard cap of {cap}")]
    TranslationTooLarge { value: f64, cap: f64 },
    #[error("erase_area_range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")]
    BadEraseArea { lo: f64, hi: f64 },
    #[error("erase_aspect_range ({lo}, {hi}) must satisfy 0 < lo <= hi")]
    BadEraseAspect { lo: f64, hi: f64 },
    #[error("normalization constants must have 3 channels, got mean {mean} / std {std}")]
    BadNormalizationArity { mean: usize, std: usize },
    #[error("std[{index}] = {value} must be positive")]
    BadStd { index: usize, value: f64 },
    #[error("target_size {value} must be positive")]
    BadTargetSize { value: usize },
}

/// Hard caps: the augmentations must stay within a small range, whatever the
/// configuration says.
pub const MAX_ROTATION_CAP_DEG: f64 = 15.0;
pub const MAX_TRANSLATE_CAP_FRAC: f64 = 0.10;

/// Configuration for the preprocessing chain.
///
/// The defaults are a reconstruction: flip 0.5, affine 0.25, rotation up to
/// 10 degrees, translation up to 5% of a side, erasing 0.25 covering
/// 2-10% of the image, and the widely used large-corpus normalization
/// triple. All of it is overridable from the run configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub target_size: usize,
    pub flip_prob: f64,
    pub affine_prob: f64,
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub erase_prob: f64,
    pub erase_area_range: (f64, f64),
    pub erase_aspect_range: (f64, f64),
    pub erase_fill: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            target_size: 224,
            flip_prob: 0.5,
            affine_prob: 0.25,
            max_rotation_deg: 10.0,
            max_translate_frac: 0.05,
            erase_prob: 0.25,
            erase_area_range: (0.02, 0.1),
            erase_aspect_range: (0.3, 3.3),
            erase_fill: 0.0,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl AugmentPolicy {
    /// Defaults with a specific resize target.
    pub fn for_size(target_size: usize) -> Self {
        AugmentPolicy {
            target_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.target_size == 0 {
            return Err(PolicyError::BadTargetSize {
                value: self.target_size,
            });
        }
        for (name, value) in [
            ("flip_prob", self.flip_prob),
            ("affine_prob", self.affine_prob),
            ("erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(PolicyError::BadProbability { name, value });
            }
        }
        if !(0.0..=MAX_ROTATION_CAP_DEG).contains(&self.max_rotation_deg) {
            return Err(PolicyError::RotationTooLarge {
                value: self.max_rotation_deg,
                cap: MAX_ROTATION_CAP_DEG,
            });
        }
        if !(0.0..=MAX_TRANSLATE_CAP_FRAC).contains(&self.max_translate_frac) {
            return Err(PolicyError::TranslationTooLarge {
                value: self.max_translate_frac,
                cap: MAX_TRANSLATE_CAP_FRAC,
            });
        }
        let (alo, ahi) = self.erase_area_range;
        if !(alo > 0.0 && alo <= ahi && ahi < 1.0) {
            return Err(PolicyError::BadEraseArea { lo: alo, hi: ahi });
        }
        let (rlo, rhi) = self.erase_aspect_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(PolicyError::BadEraseAspect { lo: rlo, hi: rhi });
        }
        if self.mean.len() != 3 || self.std.len() != 3 {
            return Err(PolicyError::BadNormalizationArity {
                mean: self.mean.len(),
                std: self.std.len(),
            });
        }
        for (index, &value) in self.std.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PolicyError::BadStd { index, value });
            }
        }
        Ok(())
    }
}

/// The closed set of pipeline stages. There is no crop variant and no
/// brightness or contrast variant; tests pin that.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Resize,
    HorizontalFlip,
    Affine,
    RandomErase,
    Normalize,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::Resize,
        StageKind::HorizontalFlip,
        StageKind::Affine,
        StageKind::RandomErase,
        StageKind::Normalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Resize => "resize",
            StageKind::HorizontalFlip => "horizontal_flip",
            StageKind::Affine => "affine",
            StageKind::RandomErase => "random_erase",
            StageKind::Normalize => "normalize",
        }
    }
}

/// Which affine policy a draw selected, for logging and cap auditing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffineDraw {
    None,
    Rotation { degrees: f64 },
    TranslateX { pixels: f64 },
    TranslateY { pixels: f64 },
}

// ── randomized stages ────────────────────────────────────────────────

/// With probability `p`, reverse the columns.
pub fn random_hflip(img: &ImageTensor, p: f64, rng: &mut Stream) -> ImageTensor {
    let apply = rng.uniform() < p;
    if !apply {
        return img.clone();
    }
    hflip(img)
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = ImageTensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ci, y, x, img.get(ci, y, w - 1 - x));
            }
        }
    }
    out
}

/// With probability `affine_prob`, apply exactly one of rotation,
/// horizontal translation, or vertical translation (chosen uniformly).
/// Returns the drawn policy alongside the image.
pub fn random_affine(
    img: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut Stream,
) -> (ImageTensor, AffineDraw) {
    if rng.uniform() >= policy.affine_prob {
        return (img.clone(), AffineDraw::None);
    }
    match rng.below(3) {
        0 => {
            let degrees = rng.uniform_in(-policy.max_rotation_deg, policy.max_rotation_deg);
            (rotate(img, degrees), AffineDraw::Rotation { degrees })
        }
        1 => {
            let max = policy.max_translate_frac * img.width() as f64;
            let pixels = rng.uniform_in(-max, max);
            (translate(img, pixels, 0.0), AffineDraw::TranslateX { pixels })
        }
        _ => {
            let max = policy.max_translate_frac * img.height() as f64;
            let pixels = rng.uniform_in(-max, max);
            (translate(img, 0.0, pixels), AffineDraw::TranslateY { pixels })
        }
    }
}

/// Sample the input at `(sy, sx)` with bilinear weights; out-of-frame
/// contributions are zero (black background).
fn sample_bilinear_zero(img: &ImageTensor, c: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let mut acc = 0.0f64;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            if yy >= 0 && (yy as usize) < img.height() && xx >= 0 && (xx as usize) < img.width() {
                acc += wy * wx * img.get(c, yy as usize, xx as usize) as f64;
            }
        }
    }
    acc as f32
}

/// Rotate about the image center by `degrees` (counterclockwise in image
/// coordinates), bilinear resampling, zero fill.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // inverse map: destination -> source
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                out.set(ci, y, x, sample_bilinear_zero(img, ci, sy, sx));
            }
        }
    }
    out
}

/// Translate by `(dx, dy)` pixels (positive moves content right/down),
/// bilinear resampling, zero fill.
pub fn translate(img: &ImageTensor, dx: f64, dy: f64) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = ImageTensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(
                    ci,
                    y,
                    x,
                    sample_bilinear_zero(img, ci, y as f64 - dy, x as f64 - dx),
                );
            }
        }
    }
    out
}

/// The erased region, if one was placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

const ERASE_ATTEMPTS: usize = 10;

/// With probability `erase_prob`, overwrite one rectangle (area fraction and
/// aspect ratio drawn from the policy ranges) with the fill value. Placement
/// is rejection-sampled; after 10 failed attempts the image is returned
/// unchanged.
pub fn random_erasing(
    img: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut Stream,
) -> (ImageTensor, Option<EraseRect>) {
    if rng.uniform() >= policy.erase_prob {
        return (img.clone(), None);
    }
    let (h, w) = (img.height(), img.width());
    let total = (h * w) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let area = rng.uniform_in(policy.erase_area_range.0, policy.erase_area_range.1) * total;
        let aspect = rng.uniform_in(policy.erase_aspect_range.0, policy.erase_aspect_range.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        let mut out = img.clone();
        let fill = policy.erase_fill as f32;
        for c in 0..img.channels() {
            for y in top..top + eh {
                for x in left..left + ew {
                    out.set(c, y, x, fill);
                }
            }
        }
        return (
            out,
            Some(EraseRect {
                top,
                left,
                height: eh,
                width: ew,
            }),
        );
    }
    (img.clone(), None)
}

// ── pipelines ────────────────────────────────────────────────────────

/// A pipeline result: the transformed image plus the ordered trace of the
/// stages that ran.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub image: ImageTensor,
    pub trace: Vec<StageKind>,
    pub affine: AffineDraw,
    pub erased: Option<EraseRect>,
}

/// Full training chain. Deterministic given (image, policy, rng seed).
/// The caller is responsible for having validated the policy.
pub fn train_pipeline(
    img: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut Stream,
) -> PipelineOutput {
    debug_assert!(policy.validate().is_ok(), "unvalidated policy");
    let mut trace = Vec::with_capacity(5);
    let resized = resize_bilinear(img, policy.target_size, policy.target_size);
    trace.push(StageKind::Resize);
    let flipped = random_hflip(&resized, policy.flip_prob, rng);
    trace.push(StageKind::HorizontalFlip);
    let (affined, affine) = random_affine(&flipped, policy, rng);
    trace.push(StageKind::Affine);
    let (erased_img, erased) = random_erasing(&affined, policy, rng);
    trace.push(StageKind::RandomErase);
    let rgb = erased_img.to_rgb();
    let image = normalize(&rgb, &policy.mean, &policy.std);
    trace.push(StageKind::Normalize);
    PipelineOutput {
        image,
        trace,
        affine,
        erased,
    }
}

/// Training chain with the normalization stage skipped, for writing
/// previews back out as viewable images. The trace records only the stages
/// that ran.
pub fn train_preview(
    img: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut Stream,
) -> PipelineOutput {
    debug_assert!(policy.validate().is_ok(), "unvalidated policy");
    let mut trace = Vec::with_capacity(4);
    let resized = resize_bilinear(img, policy.target_size, policy.target_size);
    trace.push(StageKind::Resize);
    let flipped = random_hflip(&resized, policy.flip_prob, rng);
    trace.push(StageKind::HorizontalFlip);
    let (affined, affine) = random_affine(&flipped, policy, rng);
    trace.push(StageKind::Affine);
    let (erased_img, erased) = random_erasing(&affined, policy, rng);
    trace.push(StageKind::RandomErase);
    PipelineOutput {
        image: erased_img.to_rgb(),
        trace,
        affine,
        erased,
    }
}

/// Evaluation chain: resize and normalize only; nothing random.
pub fn eval_pipeline(img: &ImageTensor, policy: &AugmentPolicy) -> PipelineOutput {
    debug_assert!(policy.validate().is_ok(), "unvalidated policy");
    let mut trace = Vec::with_capacity(2);
    let resized = resize_bilinear(img, policy.target_size, policy.target_size);
    trace.push(StageKind::Resize);
    let rgb = resized.to_rgb();
    let image = normalize(&rgb, &policy.mean, &policy.std);
    trace.push(StageKind::Normalize);
    PipelineOutput {
        image,
        trace,
        affine: AffineDraw::None,
        erased: None,
    }
}
