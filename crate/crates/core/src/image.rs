//! Image container, binary PNM (P5/P6) codec, and the deterministic image
//! transforms (resize, normalize). Randomized augmentation stages live in
//! [`crate::augment`].

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String },
    #[error("unsupported format magic {magic:?} (only binary P5/P6 are accepted)")]
    UnsupportedFormat { magic: String },
    #[error("unsupported maxval {maxval} (only 8-bit, 1..=255, is accepted)")]
    UnsupportedMaxval { maxval: u64 },
    #[error("truncated payload: header promises {expected} bytes, stream holds {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("cannot encode {channels}-channel image as {format}")]
    ChannelMismatch {
        channels: usize,
        format: &'static str,
    },
}

/// Dense image in channel-major (CHW) layout. Values are in [0,1] straight
/// after decode; normalization legitimately moves them outside that range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// `data` is channel-major: all of channel 0, then channel 1, ...
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert!(
            channels == 1 || channels == 3,
            "channels must be 1 or 3, got {channels}"
        );
        assert_eq!(data.len(), channels * height * width, "buffer size mismatch");
        ImageTensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Replicate a grayscale image to 3 channels; 3-channel images pass
    /// through unchanged.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageTensor::new(3, self.height, self.width, data)
    }

    /// Copy into a `[C, H, W]` tensor leaf.
    pub fn into_tensor<E: Scalar>(&self) -> Tensor<E> {
        let data: Vec<E> = self.data.iter().map(|&v| E::from_f64(v as f64)).collect();
        Tensor::from_vec(data, &[self.channels, self.height, self.width])
            .expect("image buffer matches its own shape")
    }
}

// ── PNM codec ────────────────────────────────────────────────────────

/// Reject dimension pairs whose payload would be absurd before allocating.
const MAX_PAYLOAD_BYTES: usize = 1 << 28;

struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenReader { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], ImageError> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ImageError::MalformedHeader {
                reason: "unexpected end of header".into(),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn unsigned(&mut self, what: &str) -> Result<u64, ImageError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| ImageError::MalformedHeader {
                reason: format!("{what} is not a non-negative integer"),
            })
    }
}

/// Decode a binary PGM (P5, grayscale) or PPM (P6, RGB) stream with 8-bit
/// samples. Values are scaled by the header maxval into [0,1].
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    let mut rd = TokenReader::new(bytes);
    let magic = rd.token().map_err(|_| ImageError::MalformedHeader {
        reason: "empty stream".into(),
    })?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(ImageError::UnsupportedFormat {
                magic: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let width = rd.unsigned("width")?;
    let height = rd.unsigned("height")?;
    let maxval = rd.unsigned("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader {
            reason: format!("degenerate dimensions {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::UnsupportedMaxval { maxval });
    }
    let expected = (width * height * channels as u64) as usize;
    if expected > MAX_PAYLOAD_BYTES {
        return Err(ImageError::MalformedHeader {
            reason: format!("dimensions {width}x{height} exceed the decoder limit"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => {
            return Err(ImageError::MalformedHeader {
                reason: "missing whitespace between maxval and payload".into(),
            })
        }
    }
    let payload = &bytes[rd.pos.min(bytes.len())..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    let (w, h) = (width as usize, height as usize);
    let scale = 1.0 / maxval as f32;
    // payload is pixel-interleaved; our layout is channel-major
    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = payload[(y * w + x) * channels + c] as f32 * scale;
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok(ImageTensor::new(channels, h, w, data))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as binary PPM (P6). Grayscale inputs are replicated to RGB;
/// values are clamped to [0,1] and quantized to 8 bits.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let rgb = img.to_rgb();
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            for c in 0..3 {
                out.push(quantize(rgb.get(c, y, x)));
            }
        }
    }
    out
}

/// Encode as binary PGM (P5); input must be single-channel.
pub fn encode_pgm(img: &ImageTensor) -> Result<Vec<u8>, ImageError> {
    if img.channels != 1 {
        return Err(ImageError::ChannelMismatch {
            channels: img.channels,
            format: "P5",
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        out.push(quantize(v));
    }
    Ok(out)
}

// ── deterministic transforms ─────────────────────────────────────────

/// Corner-aligned bilinear resize: output corners sample input corners
/// exactly, so resizing to the same size is the identity.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be positive");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let src_pos = |i: usize, out_len: usize, in_len: usize| -> f64 {
        if out_len <= 1 || in_len <= 1 {
            0.0
        } else {
            i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        }
    };
    let mut out = ImageTensor::zeros(img.channels, out_h, out_w);
    for c in 0..img.channels {
        for oy in 0..out_h {
            let sy = src_pos(oy, out_h, img.height);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_pos(ox, out_w, img.width);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let fx = sx - x0 as f64;
                let v00 = img.get(c, y0, x0) as f64;
                let v01 = img.get(c, y0, x1) as f64;
                let v10 = img.get(c, y1, x0) as f64;
                let v11 = img.get(c, y1, x1) as f64;
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.set(c, oy, ox, (top + (bot - top) * fy) as f32);
            }
        }
    }
    out
}

/// Per-channel standardization `(v - mean[c]) / std[c]`. The image channel
/// count must equal the constants' length; all std entries must be positive.
pub fn normalize(img: &ImageTensor, mean: &[f64], std: &[f64]) -> ImageTensor {
    assert_eq!(mean.len(), img.channels, "mean length != channels");
    assert_eq!(std.len(), img.channels, "std length != channels");
    assert!(std.iter().all(|&s| s > 0.0), "std must be positive");
    let mut out = img.clone();
    let plane = img.height * img.width;
    for c in 0..img.channels {
        let (m, s) = (mean[c], std[c]);
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_full_scale_white_decodes_to_ones() {
        let bytes = b"P5\n2 2\n255\n\xff\xff\xff\xff";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (1, 2, 2));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p6_single_pixel_scales_by_255() {
        let bytes = b"P6\n1 1\n255\n\x00\x80\xff";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!((img.get(1, 0, 0) - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(img.get(2, 0, 0), 1.0);
    }

    #[test]
    fn p7_magic_is_unsupported_format() {
        let err = decode_pnm(b"P7\n1 1\n255\n\x00").unwrap_err();
        assert!(matches!(err, ImageError::UnsupportedFormat { magic } if magic == "P7"));
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let err = decode_pnm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, ImageError::UnsupportedMaxval { maxval: 65535 }));
    }

    #[test]
    fn short_payload_is_truncation() {
        let err = decode_pnm(b"P5\n2 2\n255\n\x01\x02").unwrap_err();
        assert!(matches!(
            err,
            ImageError::TruncatedPayload {
                expected: 4,
                actual: 2
            }
        ));
    }

    #[test]
    fn garbage_header_is_malformed() {
        let err = decode_pnm(b"P5\nnot a number\n255\n").unwrap_err();
        assert!(matches!(err, ImageError::MalformedHeader { .. }));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5 # a comment\n# another\n1 1\n255\n\x80";
        let img = decode_pnm(bytes).unwrap();
        assert!((img.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn codec_roundtrip_is_identity_on_8bit_data() {
        let data: Vec<f32> = (0..12).map(|v| (v * 20) as f32 / 255.0).collect();
        let img = ImageTensor::new(3, 2, 2, data);
        let back = decode_pnm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_refuses_rgb() {
        let img = ImageTensor::zeros(3, 1, 1);
        assert!(matches!(
            encode_pgm(&img),
            Err(ImageError::ChannelMismatch { channels: 3, .. })
        ));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let data: Vec<f32> = (0..16).map(|v| v as f32 / 15.0).collect();
        let img = ImageTensor::new(1, 4, 4, data);
        let out = resize_bilinear(&img, 4, 4);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageTensor::new(1, 3, 5, vec![0.37; 15]);
        let out = resize_bilinear(&img, 7, 2);
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_row_interpolates_corner_aligned() {
        let img = ImageTensor::new(1, 1, 2, vec![0.0, 1.0]);
        let out = resize_bilinear(&img, 1, 3);
        let want = [0.0f32, 0.5, 1.0];
        for (v, w) in out.data().iter().zip(want) {
            assert!((v - w).abs() < 1e-7, "{v} vs {w}");
        }
    }

    #[test]
    fn normalize_hand_values() {
        let img = ImageTensor::new(1, 1, 2, vec![0.5, 1.0]);
        let out = normalize(&img, &[0.5], &[0.25]);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 1), 2.0);
    }

    #[test]
    fn normalize_identity_constants() {
        let img = ImageTensor::new(1, 2, 2, vec![0.1, 0.4, 0.7, 1.0]);
        let out = normalize(&img, &[0.0], &[1.0]);
        assert_eq!(img, out);
    }

    #[test]
    fn grayscale_replication_copies_plane() {
        let img = ImageTensor::new(1, 1, 2, vec![0.25, 0.75]);
        let rgb = img.to_rgb();
        assert_eq!(rgb.channels(), 3);
        for c in 0..3 {
            assert_eq!(rgb.get(c, 0, 0), 0.25);
            assert_eq!(rgb.get(c, 0, 1), 0.75);
        }
    }

    #[test]
    fn tensor_conversion_has_chw_shape() {
        let img = ImageTensor::zeros(3, 4, 5);
        let t = img.into_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 4, 5]);
    }
}
