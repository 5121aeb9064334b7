//! Sample and manifest model, image preprocessing, the per-dataset cap, and
//! the balanced batch sampler. The synthetic two-domain generator lives in
//! [`synth`].
//!
//! A manifest is a flat CSV (`path,y_C,y_D,dataset,split`) next to the image
//! files, plus a JSON sidecar holding the per-channel normalization
//! statistics computed over the whole training split.

pub mod sampler;
pub mod synth;

pub use sampler::BalancedSampler;
pub use synth::{generate_synthetic, ClassGeometry, DomainShift, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Splitmix64-style seed derivation, so independent streams (data, init,
/// sampler, ...) never share raw seeds.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Raw interleaved RGB8 pixels of a square patch held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InlinePatch {
    pub size: usize,
    pub rgb: Vec<u8>,
}

#[derive(Debug, Clone)]
pub enum PatchSource {
    File(PathBuf),
    Inline(InlinePatch),
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub source: PatchSource,
    pub y_c: u8,
    pub y_d: u8,
    pub dataset: String,
    pub split: Split,
}

/// Per-channel normalization statistics over the training split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StatsSidecar {
    patch_size: usize,
    stats: ChannelStats,
}

#[derive(Debug)]
pub struct Manifest {
    /// Side length patches are cropped or padded to.
    pub patch_size: usize,
    pub records: Vec<ManifestRecord>,
    pub stats: Option<ChannelStats>,
}

impl Manifest {
    pub fn new(patch_size: usize) -> Self {
        Manifest {
            patch_size,
            records: Vec::new(),
            stats: None,
        }
    }

    fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut name = csv_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into());
        name.push_str(".stats.json");
        csv_path.with_file_name(name)
    }

    /// Reads `path,y_C,y_D,dataset,split` rows; image paths resolve relative
    /// to the CSV location. The stats sidecar is required (it also records
    /// the patch size).
    pub fn load_csv(csv_path: &Path) -> Result<Manifest> {
        let sidecar = Self::sidecar_path(csv_path);
        let sidecar: StatsSidecar = serde_json::from_slice(&std::fs::read(&sidecar).map_err(
            |e| Error::Data(format!("missing stats sidecar {}: {e}", sidecar.display())),
        )?)?;
        let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            if row.len() != 5 {
                return Err(Error::Data(format!(
                    "{}: row {} has {} columns, expected 5",
                    csv_path.display(),
                    line + 2,
                    row.len()
                )));
            }
            let parse_label = |s: &str, what: &str| -> Result<u8> {
                match s {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Data(format!(
                        "{}: row {}: {what} must be 0 or 1, got '{other}'",
                        csv_path.display(),
                        line + 2
                    ))),
                }
            };
            records.push(ManifestRecord {
                source: PatchSource::File(base.join(&row[0])),
                y_c: parse_label(&row[1], "y_C")?,
                y_d: parse_label(&row[2], "y_D")?,
                dataset: row[3].to_string(),
                split: row[4].parse()?,
            });
        }
        Ok(Manifest {
            patch_size: sidecar.patch_size,
            records,
            stats: Some(sidecar.stats),
        })
    }

    /// Writes images (lossless PNG), the manifest CSV, and the stats sidecar
    /// into `dir`. Inline patches become files; file-backed records are
    /// copied by reference path. Output is byte-identical for identical
    /// content.
    pub fn materialize(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        let csv_path = dir.join("manifest.csv");
        let mut writer = csv::Writer::from_path(&csv_path)?;
        writer.write_record(["path", "y_C", "y_D", "dataset", "split"])?;
        for (i, rec) in self.records.iter().enumerate() {
            let rel = format!("images/{i:06}.png");
            match &rec.source {
                PatchSource::Inline(patch) => {
                    let img = image::RgbImage::from_raw(
                        patch.size as u32,
                        patch.size as u32,
                        patch.rgb.clone(),
                    )
                    .ok_or_else(|| Error::Data("inline patch buffer size mismatch".into()))?;
                    img.save_with_format(dir.join(&rel), image::ImageFormat::Png)?;
                }
                PatchSource::File(src) => {
                    std::fs::copy(src, dir.join(&rel))?;
                }
            }
            writer.write_record([
                rel.as_str(),
                &rec.y_c.to_string(),
                &rec.y_d.to_string(),
                &rec.dataset,
                &rec.split.to_string(),
            ])?;
        }
        writer.flush()?;
        let stats = self.stats.ok_or_else(|| {
            Error::Data("manifest has no normalization stats; call compute_stats first".into())
        })?;
        let sidecar = StatsSidecar {
            patch_size: self.patch_size,
            stats,
        };
        std::fs::write(
            Self::sidecar_path(&csv_path),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    /// Caps each dataset at `cap` records chosen by a seeded shuffle; the
    /// surviving records keep their original relative order.
    pub fn cap_per_dataset(&mut self, cap: usize, seed: u64) {
        let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            by_dataset.entry(rec.dataset.as_str()).or_default().push(i);
        }
        let mut keep = vec![false; self.records.len()];
        for (stream, (_, mut indices)) in by_dataset.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream as u64));
            indices.shuffle(&mut rng);
            for &i in indices.iter().take(cap) {
                keep[i] = true;
            }
        }
        let mut idx = 0;
        self.records.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
    }

    pub fn indices_for_split(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Decodes a record to interleaved RGB8 at its native size.
    pub fn load_patch(&self, index: usize) -> Result<(usize, usize, Vec<u8>)> {
        match &self.records[index].source {
            PatchSource::Inline(patch) => Ok((patch.size, patch.size, patch.rgb.clone())),
            PatchSource::File(path) => {
                let img = image::open(path)?.to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                Ok((w, h, img.into_raw()))
            }
        }
    }

    /// Per-channel mean/std of the training split in `[0, 1]` units,
    /// computed over all pixels of all training records. The std is floored
    /// at 1e-6 so degenerate datasets stay usable.
    pub fn compute_stats(&mut self) -> Result<()> {
        let train = self.indices_for_split(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("cannot compute stats: empty training split".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut count = 0.0f64;
        for &i in &train {
            let (w, h, rgb) = self.load_patch(i)?;
            for px in rgb.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += (w * h) as f64;
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count;
            std[c] = (sum_sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        self.stats = Some(ChannelStats { mean, std });
        Ok(())
    }

    /// Decode, center-crop or zero-pad to the manifest patch size, scale to
    /// `[0, 1]`, then normalize per channel. Returns planar CHW data.
    pub fn load_and_preprocess<T: Scalar>(&self, index: usize) -> Result<Vec<T>> {
        let s = self.patch_size;
        let (w, h, rgb) = self.load_patch(index)?;
        let stats = self.stats.ok_or_else(|| {
            Error::Data("manifest has no normalization stats; call compute_stats first".into())
        })?;
        let mut out = vec![T::ZERO; 3 * s * s];
        // Offsets of the overlapping region, centered in both frames.
        let copy_w = w.min(s);
        let copy_h = h.min(s);
        let src_x = (w - copy_w) / 2;
        let src_y = (h - copy_h) / 2;
        let dst_x = (s - copy_w) / 2;
        let dst_y = (s - copy_h) / 2;
        for c in 0..3 {
            let plane = c * s * s;
            let norm_mean = stats.mean[c];
            let norm_std = stats.std[c];
            // Zero-padded border normalizes like a black pixel.
            let pad = T::from_f64((0.0 - norm_mean) / norm_std);
            for v in &mut out[plane..plane + s * s] {
                *v = pad;
            }
            for y in 0..copy_h {
                for x in 0..copy_w {
                    let px = rgb[((src_y + y) * w + (src_x + x)) * 3 + c] as f64 / 255.0;
                    out[plane + (dst_y + y) * s + (dst_x + x)] =
                        T::from_f64((px - norm_mean) / norm_std);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_manifest(value: u8, size: usize) -> Manifest {
        let mut m = Manifest::new(size);
        m.records.push(ManifestRecord {
            source: PatchSource::Inline(InlinePatch {
                size,
                rgb: vec![value; size * size * 3],
            }),
            y_c: 0,
            y_d: 0,
            dataset: "gray".into(),
            split: Split::Train,
        });
        m
    }

    #[test]
    fn solid_gray_normalizes_to_identical_values() {
        let mut m = gray_manifest(128, 8);
        m.compute_stats().unwrap();
        let x: Vec<f64> = m.load_and_preprocess(0).unwrap();
        assert!(x.iter().all(|&v| v == x[0]));
    }

    #[test]
    fn native_size_patch_keeps_geometry() {
        let mut m = gray_manifest(100, 6);
        // A recognizable pixel to track: top-left red channel.
        if let PatchSource::Inline(p) = &mut m.records[0].source {
            p.rgb[0] = 250;
        }
        m.stats = Some(ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        });
        let x: Vec<f64> = m.load_and_preprocess(0).unwrap();
        assert_eq!(x.len(), 3 * 36);
        assert!((x[0] - 250.0 / 255.0).abs() < 1e-12);
        assert!((x[1] - 100.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn crop_and_pad_center_the_content() {
        // 4x4 content into a 2x2 frame crops the middle.
        let mut m = Manifest::new(2);
        let mut rgb = vec![0u8; 4 * 4 * 3];
        for y in 0..4 {
            for x in 0..4 {
                rgb[(y * 4 + x) * 3] = (y * 4 + x) as u8 * 10;
            }
        }
        m.records.push(ManifestRecord {
            source: PatchSource::Inline(InlinePatch { size: 4, rgb }),
            y_c: 0,
            y_d: 0,
            dataset: "d".into(),
            split: Split::Train,
        });
        m.stats = Some(ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        });
        let x: Vec<f64> = m.load_and_preprocess(0).unwrap();
        // Center 2x2 of the red plane is pixels (1,1),(1,2),(2,1),(2,2).
        assert!((x[0] - 50.0 / 255.0).abs() < 1e-12);
        assert!((x[1] - 60.0 / 255.0).abs() < 1e-12);
        assert!((x[2] - 90.0 / 255.0).abs() < 1e-12);
        assert!((x[3] - 100.0 / 255.0).abs() < 1e-12);

        // 2x2 content into a 4x4 frame pads a zero border. Zeros normalize
        // to (0 - mean)/std like black pixels.
        let mut m = Manifest::new(4);
        m.records.push(ManifestRecord {
            source: PatchSource::Inline(InlinePatch {
                size: 2,
                rgb: vec![255; 2 * 2 * 3],
            }),
            y_c: 0,
            y_d: 0,
            dataset: "d".into(),
            split: Split::Train,
        });
        m.stats = Some(ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        });
        let x: Vec<f64> = m.load_and_preprocess(0).unwrap();
        assert_eq!(x[0], 0.0); // corner is padding
        assert!((x[4 + 1] - 1.0).abs() < 1e-12); // (1,1) is content
    }

    #[test]
    fn cap_is_seed_stable_and_bounded() {
        let mut m = Manifest::new(4);
        for i in 0..30 {
            m.records.push(ManifestRecord {
                source: PatchSource::Inline(InlinePatch {
                    size: 4,
                    rgb: vec![i as u8; 48],
                }),
                y_c: (i % 2) as u8,
                y_d: 0,
                dataset: if i < 20 { "big" } else { "small" }.into(),
                split: Split::Train,
            });
        }
        let survivors = |seed: u64| {
            let mut m2 = Manifest::new(4);
            m2.records = m.records.clone();
            m2.cap_per_dataset(8, seed);
            m2.records
                .iter()
                .map(|r| match &r.source {
                    PatchSource::Inline(p) => p.rgb[0],
                    _ => unreachable!(),
                })
                .collect::<Vec<u8>>()
        };
        let a = survivors(7);
        let b = survivors(7);
        assert_eq!(a, b);
        let m2 = {
            let mut m2 = Manifest::new(4);
            m2.records = m.records.clone();
            m2.cap_per_dataset(8, 7);
            m2
        };
        let big = m2.records.iter().filter(|r| r.dataset == "big").count();
        let small = m2.records.iter().filter(|r| r.dataset == "small").count();
        assert_eq!(big, 8);
        assert_eq!(small, 8); // under the cap already: kept whole
        assert_ne!(a, survivors(8));
    }

    #[test]
    fn stats_round_trip_after_normalization() {
        // Normalizing by the computed stats and re-measuring must give
        // mean 0, std 1 within 1e-3.
        let cfg = synth::SynthConfig {
            per_class_per_domain: 12,
            patch_size: 32,
            ..synth::SynthConfig::default()
        };
        let m = synth::generate_synthetic(&cfg).unwrap();
        let train = m.indices_for_split(Split::Train);
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut count = 0.0;
        for &i in &train {
            let x: Vec<f64> = m.load_and_preprocess(i).unwrap();
            let plane = m.patch_size * m.patch_size;
            for c in 0..3 {
                for &v in &x[c * plane..(c + 1) * plane] {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += plane as f64;
        }
        for c in 0..3 {
            let mean = sum[c] / count;
            let std = (sum_sq[c] / count - mean * mean).sqrt();
            assert!(mean.abs() < 1e-3, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 1e-3, "channel {c} std {std}");
        }
    }

    #[test]
    fn csv_round_trip_via_materialize() {
        let cfg = synth::SynthConfig {
            per_class_per_domain: 3,
            patch_size: 32,
            ..synth::SynthConfig::default()
        };
        let m = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.materialize(dir.path()).unwrap();
        let loaded = Manifest::load_csv(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.records.len(), m.records.len());
        assert_eq!(loaded.patch_size, m.patch_size);
        for (a, b) in m.records.iter().zip(&loaded.records) {
            assert_eq!(a.y_c, b.y_c);
            assert_eq!(a.y_d, b.y_d);
            assert_eq!(a.dataset, b.dataset);
            assert_eq!(a.split, b.split);
        }
        // PNG decode restores the exact bytes.
        let (_, _, restored) = loaded.load_patch(0).unwrap();
        match &m.records[0].source {
            PatchSource::Inline(p) => assert_eq!(p.rgb, restored),
            _ => unreachable!(),
        }
        let s = loaded.stats.unwrap();
        let t = m.stats.unwrap();
        assert_eq!(s.mean, t.mean);
        assert_eq!(s.std, t.std);
    }

    #[test]
    fn load_csv_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("manifest.csv");
        std::fs::write(&csv, "path,y_C,y_D,dataset,split\nimg.png,2,0,d,train\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.stats.json"),
            serde_json::json!({"patch_size": 8, "stats": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]}})
                .to_string(),
        )
        .unwrap();
        let err = Manifest::load_csv(&csv).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("y_C"), "{err}");
    }
}
