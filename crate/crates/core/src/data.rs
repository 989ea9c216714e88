//! Dataset manifests and a seeded synthetic image generator.
//!
//! A dataset is a CSV manifest (`path,label` rows, paths relative to the
//! manifest's directory) over a directory of P5/P6 images. The synthetic
//! generator produces a three-class set with class-dependent geometric
//! patterns whose mean intensities are linearly separable by construction,
//! so end-to-end runs are testable without external data.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsio::write_atomic;
use crate::image::{decode_pnm, encode_pgm, ImageTensor};
use crate::rng::Stream;

/// The three diagnosis classes in their fixed index order. Every probability
/// vector, confusion matrix, and CSV column in the pipeline uses this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Covid19 = 0,
    Normal = 1,
    Pneumonia = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Covid19,
        ClassLabel::Normal,
        ClassLabel::Pneumonia,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Canonical label string as it appears in manifests and reports.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Covid19 => "COVID-19",
            ClassLabel::Normal => "Normal",
            ClassLabel::Pneumonia => "Pneumonia",
        }
    }

    /// Parse the canonical label string. Matching is exact; manifests with
    /// ad-hoc capitalization are rejected rather than silently coerced.
    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: expected `path,label`, got {row:?}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        row: String,
    },
    #[error("{path}:{line}: unknown label {label:?} (expected COVID-19, Normal or Pneumonia)")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{path}:{line}: duplicate image path {image:?}")]
    DuplicatePath {
        path: PathBuf,
        line: usize,
        image: String,
    },
    #[error("{path}: manifest lists no images")]
    EmptyManifest { path: PathBuf },
    #[error("{path}: unreadable image: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("synthetic generator needs {name} >= {min}, got {got}")]
    BadSyntheticSpec {
        name: &'static str,
        min: usize,
        got: usize,
    },
}

/// One manifest row. `path` is kept verbatim (relative, forward slashes) and
/// doubles as the image id in prediction records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: ClassLabel,
}

/// A labeled image list rooted at the manifest's directory. Paths are only
/// checked for uniqueness at load time; existence is checked when an image
/// is actually read.
#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parse a `path,label` CSV. A literal `path,label` header line is
    /// tolerated; blank lines are skipped. Row order is preserved.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let row = raw.trim();
            if row.is_empty() || (line == 1 && row == "path,label") {
                continue;
            }
            let (image, label_str) = row.split_once(',').ok_or_else(|| {
                DataError::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    row: row.to_string(),
                }
            })?;
            let image = image.trim();
            let label_str = label_str.trim();
            if image.is_empty() || label_str.contains(',') {
                return Err(DataError::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    row: row.to_string(),
                });
            }
            let label =
                ClassLabel::parse(label_str).ok_or_else(|| DataError::UnknownLabel {
                    path: path.to_path_buf(),
                    line,
                    label: label_str.to_string(),
                })?;
            if !seen.insert(image.to_string()) {
                return Err(DataError::DuplicatePath {
                    path: path.to_path_buf(),
                    line,
                    image: image.to_string(),
                });
            }
            entries.push(ManifestEntry {
                path: image.to_string(),
                label,
            });
        }
        if entries.is_empty() {
            return Err(DataError::EmptyManifest {
                path: path.to_path_buf(),
            });
        }
        Ok(Manifest { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absolute (root-joined) path of entry `idx`.
    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.entries[idx].path)
    }

    /// Decode entry `idx` from disk.
    pub fn load_image(&self, idx: usize) -> Result<ImageTensor, DataError> {
        let path = self.image_path(idx);
        let bytes = fs::read(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        decode_pnm(&bytes).map_err(|e| DataError::BadImage {
            path,
            reason: e.to_string(),
        })
    }
}

/// Per-class base intensity. The pattern and noise amplitudes below keep each
/// image's mean within about 0.08 of its base, so class means never overlap.
fn class_base(label: ClassLabel) -> f32 {
    match label {
        ClassLabel::Covid19 => 0.25,
        ClassLabel::Normal => 0.50,
        ClassLabel::Pneumonia => 0.75,
    }
}

fn file_stem(label: ClassLabel) -> &'static str {
    match label {
        ClassLabel::Covid19 => "covid19",
        ClassLabel::Normal => "normal",
        ClassLabel::Pneumonia => "pneumonia",
    }
}

/// Render one synthetic grayscale image. Each class gets a distinct geometric
/// pattern around its base intensity: diagonal stripes, a centered disc, or
/// horizontal bands, plus low-amplitude pixel noise.
fn render_synthetic(label: ClassLabel, size: usize, rng: &mut Stream) -> ImageTensor {
    const PATTERN_AMP: f32 = 0.08;
    const NOISE_AMP: f64 = 0.04;
    let base = class_base(label);
    let mut data = vec![0.0f32; size * size];
    match label {
        ClassLabel::Covid19 => {
            let period = 4 + rng.below(5);
            let phase = rng.below(period);
            for y in 0..size {
                for x in 0..size {
                    let s = if ((x + y + phase) / period) % 2 == 0 {
                        PATTERN_AMP
                    } else {
                        -PATTERN_AMP
                    };
                    data[y * size + x] = base + s;
                }
            }
        }
        ClassLabel::Normal => {
            let radius = size as f64 * rng.uniform_in(0.25, 0.40);
            let center = (size as f64 - 1.0) / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f64 - center;
                    let dx = x as f64 - center;
                    let s = if (dx * dx + dy * dy).sqrt() < radius {
                        PATTERN_AMP
                    } else {
                        -PATTERN_AMP
                    };
                    data[y * size + x] = base + s;
                }
            }
        }
        ClassLabel::Pneumonia => {
            let period = 4 + rng.below(5);
            let phase = rng.below(period);
            for y in 0..size {
                let s = if ((y + phase) / period) % 2 == 0 {
                    PATTERN_AMP
                } else {
                    -PATTERN_AMP
                };
                for x in 0..size {
                    data[y * size + x] = base + s;
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v + rng.uniform_in(-NOISE_AMP, NOISE_AMP) as f32).clamp(0.0, 1.0);
    }
    ImageTensor::new(1, size, size, data)
}

/// Generate `per_class` P5 images for each of the three classes under
/// `dir/images/` plus a `manifest.csv`, all written atomically. The content
/// is a pure function of `(seed, per_class, size)`: image `i` of a class
/// draws from its own derived stream, so the set is stable under reordering
/// or parallel generation. Returns the manifest path.
pub fn generate_synthetic(
    dir: &Path,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<PathBuf, DataError> {
    if per_class < 1 {
        return Err(DataError::BadSyntheticSpec {
            name: "per-class count",
            min: 1,
            got: per_class,
        });
    }
    if size < 16 {
        return Err(DataError::BadSyntheticSpec {
            name: "image size",
            min: 16,
            got: size,
        });
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| DataError::Io {
        path: images_dir.clone(),
        source,
    })?;
    let mut manifest = String::from("path,label\n");
    for label in ClassLabel::ALL {
        for i in 0..per_class {
            let mut rng = Stream::derived(seed, &[label.index() as u64, i as u64]);
            let img = render_synthetic(label, size, &mut rng);
            let bytes = encode_pgm(&img).expect("generator renders single-channel");
            let rel = format!("images/{}_{i:03}.pgm", file_stem(label));
            let target = dir.join(&rel);
            write_atomic(&target, &bytes).map_err(|source| DataError::Io {
                path: target,
                source,
            })?;
            manifest.push_str(&rel);
            manifest.push(',');
            manifest.push_str(label.name());
            manifest.push('\n');
        }
    }
    let manifest_path = dir.join("manifest.csv");
    write_atomic(&manifest_path, manifest.as_bytes()).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn label_order_names_and_parsing() {
        assert_eq!(ClassLabel::Covid19.index(), 0);
        assert_eq!(ClassLabel::Normal.index(), 1);
        assert_eq!(ClassLabel::Pneumonia.index(), 2);
        for label in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_index(label.index()), Some(label));
            assert_eq!(ClassLabel::parse(label.name()), Some(label));
        }
        assert_eq!(ClassLabel::from_index(3), None);
        assert_eq!(ClassLabel::parse("covid-19"), None);
        assert_eq!(ClassLabel::parse("NORMAL"), None);
        assert_eq!(ClassLabel::Covid19.name(), "COVID-19");
    }

    #[test]
    fn manifest_loads_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let body = "path,label\na.pgm,COVID-19\nsub/b.pgm,Normal\nc.pgm,Pneumonia\n";
        let m = Manifest::load(&write_manifest(dir.path(), body)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries()[0].path, "a.pgm");
        assert_eq!(m.entries()[1].label, ClassLabel::Normal);
        assert_eq!(m.image_path(1), dir.path().join("sub/b.pgm"));
        assert_eq!(m.root(), dir.path());

        let headerless = Manifest::load(&write_manifest(dir.path(), "a.pgm,Normal\n")).unwrap();
        assert_eq!(headerless.len(), 1);
    }

    #[test]
    fn manifest_rejects_duplicate_paths() {
        let dir = tempfile::tempdir().unwrap();
        let body = "a.pgm,Normal\nb.pgm,Normal\na.pgm,COVID-19\n";
        let err = Manifest::load(&write_manifest(dir.path(), body)).unwrap_err();
        match err {
            DataError::DuplicatePath { line, image, .. } => {
                assert_eq!(line, 3);
                assert_eq!(image, "a.pgm");
            }
            other => panic!("expected DuplicatePath, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_unknown_label_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let err =
            Manifest::load(&write_manifest(dir.path(), "a.pgm,Normal\nb.pgm,Viral\n"))
                .unwrap_err();
        match err {
            DataError::UnknownLabel { line, label, .. } => {
                assert_eq!(line, 2);
                assert_eq!(label, "Viral");
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Manifest::load(&write_manifest(dir.path(), "no-comma-here\n")),
            Err(DataError::MalformedRow { line: 1, .. })
        ));
        assert!(matches!(
            Manifest::load(&write_manifest(dir.path(), "a.pgm,Normal,extra\n")),
            Err(DataError::MalformedRow { .. })
        ));
        assert!(matches!(
            Manifest::load(&write_manifest(dir.path(), "path,label\n\n")),
            Err(DataError::EmptyManifest { .. })
        ));
        assert!(matches!(
            Manifest::load(&dir.path().join("missing.csv")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn synthetic_counts_match_and_manifest_is_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = generate_synthetic(dir.path(), 2, 32, 7).unwrap();
        let m = Manifest::load(&manifest_path).unwrap();
        assert_eq!(m.len(), 6);
        let files: Vec<_> = fs::read_dir(dir.path().join("images"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(files.len(), 6);
        assert!(files.iter().all(|f| f.ends_with(".pgm")));
        for idx in 0..m.len() {
            let img = m.load_image(idx).unwrap();
            assert_eq!((img.channels(), img.height(), img.width()), (1, 32, 32));
        }
        // two images per class, in class order
        let labels: Vec<_> = m.entries().iter().map(|e| e.label).collect();
        assert_eq!(
            labels,
            vec![
                ClassLabel::Covid19,
                ClassLabel::Covid19,
                ClassLabel::Normal,
                ClassLabel::Normal,
                ClassLabel::Pneumonia,
                ClassLabel::Pneumonia
            ]
        );
    }

    #[test]
    fn synthetic_is_bytewise_deterministic_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        generate_synthetic(a.path(), 3, 24, 42).unwrap();
        generate_synthetic(b.path(), 3, 24, 42).unwrap();
        generate_synthetic(c.path(), 3, 24, 43).unwrap();
        let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
            let mut out: Vec<_> = fs::read_dir(dir.join("images"))
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (
                        e.file_name().into_string().unwrap(),
                        fs::read(e.path()).unwrap(),
                    )
                })
                .collect();
            out.sort();
            out.push((
                "manifest.csv".into(),
                fs::read(dir.join("manifest.csv")).unwrap(),
            ));
            out
        };
        assert_eq!(read_all(a.path()), read_all(b.path()));
        assert_ne!(read_all(a.path()), read_all(c.path()));
    }

    #[test]
    fn synthetic_classes_separate_by_mean_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::load(&generate_synthetic(dir.path(), 8, 48, 11).unwrap()).unwrap();
        let mut extremes = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for idx in 0..m.len() {
            let img = m.load_image(idx).unwrap();
            let mean = img.data().iter().map(|&v| v as f64).sum::<f64>()
                / img.data().len() as f64;
            let slot = &mut extremes[m.entries()[idx].label.index()];
            slot.0 = slot.0.min(mean);
            slot.1 = slot.1.max(mean);
        }
        // strict ordering with a clear margin: max(class k) + 0.05 < min(class k+1)
        assert!(
            extremes[0].1 + 0.05 < extremes[1].0,
            "COVID-19 means {extremes:?} overlap Normal"
        );
        assert!(
            extremes[1].1 + 0.05 < extremes[2].0,
            "Normal means {extremes:?} overlap Pneumonia"
        );
    }

    #[test]
    fn synthetic_rejects_degenerate_specs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic(dir.path(), 0, 32, 1),
            Err(DataError::BadSyntheticSpec { .. })
        ));
        assert!(matches!(
            generate_synthetic(dir.path(), 1, 8, 1),
            Err(DataError::BadSyntheticSpec { .. })
        ));
    }
}
