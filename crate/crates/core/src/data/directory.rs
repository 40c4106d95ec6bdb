//! On-disk dataset layout: `root/images/*.png` plus `root/labels.csv` with
//! columns `filename,label,identity,split`. Filenames are relative to
//! `root/images`; split is one of `train_forget`, `train_retain`, `test`,
//! `unseen`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
    identity: u64,
    split: String,
}

fn ingest(path: &Path, row: Option<usize>, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn decode(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, bytes) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    // Interleaved HWC bytes -> planar CHW in [0, 1].
    let mut data = vec![0f32; c * h * w];
    for (i, &b) in bytes.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = b as f32 / 255.0;
    }
    Tensor::new(vec![c, h, w], data)
}

/// Reads a dataset directory. `labels` defaults to `root/labels.csv`.
///
/// Rows are rejected, never repaired: a missing image, an unknown split tag,
/// an identity shared between forget, retain and unseen, or an image whose
/// shape differs from the first one all fail with the offending row number.
pub fn load_directory_dataset(root: &Path, labels: Option<&Path>) -> Result<DatasetBundle> {
    let labels_path = labels
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join("labels.csv"));
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| ingest(&labels_path, None, e.to_string()))?;
    let images_dir = root.join("images");

    let mut tagged = Vec::new();
    let mut identity_split: HashMap<u64, (Split, usize)> = HashMap::new();
    let mut train_files = HashSet::new();
    let mut test_files = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut max_label = 0;
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let n = i + 1;
        let row = row.map_err(|e| ingest(&labels_path, Some(n), e.to_string()))?;
        let split = Split::from_tag(row.split.trim()).ok_or_else(|| {
            ingest(&labels_path, Some(n), format!("unknown split tag {:?}", row.split))
        })?;
        if split != Split::Test {
            if let Some(&(prev, prev_row)) = identity_split.get(&row.identity) {
                if prev != split {
                    return Err(ingest(
                        &labels_path,
                        Some(n),
                        format!(
                            "identity {} is tagged {split} here but {prev} on row {prev_row}",
                            row.identity
                        ),
                    ));
                }
            } else {
                identity_split.insert(row.identity, (split, n));
            }
        }
        let file = images_dir.join(&row.filename);
        if !file.is_file() {
            return Err(ingest(
                &labels_path,
                Some(n),
                format!("image {} not found", file.display()),
            ));
        }
        let image = decode(&file).map_err(|e| ingest(&labels_path, Some(n), e.to_string()))?;
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s != image.shape() => {
                return Err(ingest(
                    &labels_path,
                    Some(n),
                    format!("image shape {:?} differs from {:?}", image.shape(), s),
                ))
            }
            Some(_) => {}
        }
        match split {
            Split::Forget | Split::Retain => {
                train_files.insert(row.filename.clone());
            }
            Split::Test => test_files.push((n, row.filename.clone())),
            Split::Unseen => {}
        }
        max_label = max_label.max(row.label);
        tagged.push((
            split,
            ImageRecord {
                image,
                label: row.label,
                identity: row.identity,
            },
        ));
    }
    if let Some((n, f)) = test_files.iter().find(|(_, f)| train_files.contains(f)) {
        return Err(ingest(&labels_path, Some(*n), format!("test image {f} is also a train image")));
    }
    let shape = shape.ok_or_else(|| ingest(&labels_path, None, "no rows"))?;
    let image_shape = [shape[0], shape[1], shape[2]];
    DatasetBundle::assemble((max_label + 1).max(2), image_shape, tagged)
        .map_err(|e| ingest(&labels_path, None, e.to_string()))
}

/// Writes a `(C, H, W)` tensor with values in `[0, 1]` as an 8-bit PNG
/// (grey for one channel, RGB for three).
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::contract(format!("PNG export needs 1 or 3 channels, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let px = image.data();
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = Vec::with_capacity(c * h * w);
    for pix in 0..h * w {
        for ch in 0..c {
            raw.push(byte(px[ch * h * w + pix]));
        }
    }
    let img = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("sized"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized"))
    };
    img.save(path)?;
    Ok(())
}

/// Writes `bundle` in the directory layout. Pixels are quantised to 8 bits.
pub fn export_directory(bundle: &DatasetBundle, root: &Path) -> Result<PathBuf> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels).map_err(|e| ingest(&labels, None, e.to_string()))?;
    for split in [Split::Forget, Split::Retain, Split::Test, Split::Unseen] {
        for (i, r) in bundle.split(split).iter().enumerate() {
            let filename = format!("{}_{i:05}.png", split.tag());
            write_png(&r.image, &images.join(&filename))?;
            w.serialize(LabelRow {
                filename,
                label: r.label,
                identity: r.identity,
                split: split.tag().to_string(),
            })
            .map_err(|e| ingest(&labels, None, e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(labels)
}
