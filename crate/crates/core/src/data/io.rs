//! On-disk layout:
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/images/<id>.png
//! <root>/masks/<LESION>/<id>.png     (0 or 255; absent file = empty mask)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{
    DataError, Dataset, DatasetKind, FundusSample, LesionFlags, LesionKind, Mask, RgbImage, DISEASE_NAMES, NUM_DISEASES,
};

pub const MANIFEST_FILE: &str = "manifest.tsv";

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

struct ManifestRow {
    id: String,
    grade: Option<u8>,
    flags: Option<LesionFlags>,
    diseases: Option<[bool; NUM_DISEASES]>,
}

fn parse_bit(v: &str, line: usize, column: &str) -> Result<Option<bool>, DataError> {
    match v {
        "-" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(DataError::Manifest {
            line,
            message: format!("column {column}: expected 0, 1 or -, got {other:?}"),
        }),
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 + NUM_DISEASES {
            return Err(DataError::Manifest {
                line: lineno,
                message: format!("expected {} columns, found {}", 4 + NUM_DISEASES, cols.len()),
            });
        }
        let id = cols[0].to_string();
        let grade = match cols[1] {
            "-" => None,
            g => {
                let value: i64 = g.parse().map_err(|_| DataError::Manifest {
                    line: lineno,
                    message: format!("grade {g:?} is not an integer"),
                })?;
                if !(0..=4).contains(&value) {
                    return Err(DataError::GradeOutOfRange { id, grade: value });
                }
                Some(value as u8)
            }
        };
        let lm = parse_bit(cols[2], lineno, "LM")?;
        let pm = parse_bit(cols[3], lineno, "PM")?;
        let flags = match (lm, pm) {
            (Some(lm), Some(pm)) => Some(LesionFlags { lm, pm }),
            (None, None) => None,
            _ => {
                return Err(DataError::Manifest {
                    line: lineno,
                    message: "LM and PM must both be present or both be -".into(),
                })
            }
        };
        let bits: Vec<Option<bool>> = cols[4..]
            .iter()
            .zip(DISEASE_NAMES)
            .map(|(v, name)| parse_bit(v, lineno, name))
            .collect::<Result<_, _>>()?;
        let diseases = if bits.iter().all(Option::is_none) {
            None
        } else if bits.iter().all(Option::is_some) {
            let mut d = [false; NUM_DISEASES];
            for (slot, b) in d.iter_mut().zip(&bits) {
                *slot = b.expect("checked");
            }
            Some(d)
        } else {
            return Err(DataError::Manifest {
                line: lineno,
                message: "disease bits must be all present or all -".into(),
            });
        };
        rows.push(ManifestRow {
            id,
            grade,
            flags,
            diseases,
        });
    }
    Ok(rows)
}

fn load_image(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data: img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
    })
}

/// Decode a mask PNG; pixels above 127 are positive.
pub fn read_mask_png(path: &Path) -> Result<Mask, DataError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.as_raw().iter().map(|&v| v > 127).collect(),
    })
}

/// Load and validate a dataset stored in the standard layout.
pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<Dataset, DataError> {
    let manifest = root.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(DataError::MissingMaskFile {
            id: "<manifest>".into(),
            path: manifest.display().to_string(),
            loaded: 0,
        });
    }
    let rows = read_manifest(&manifest)?;
    let masks_root = root.join("masks");
    let wants_masks = matches!(kind, DatasetKind::SegSet | DatasetKind::Phantom);
    if wants_masks {
        if !masks_root.is_dir() {
            return Err(DataError::MissingMaskFile {
                id: rows.first().map_or("<none>".into(), |r| r.id.clone()),
                path: masks_root.display().to_string(),
                loaded: 0,
            });
        }
        for entry in fs::read_dir(&masks_root).map_err(|e| io_err(&masks_root, e))? {
            let entry = entry.map_err(|e| io_err(&masks_root, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if name.parse::<LesionKind>().is_err() || LesionKind::ALL.iter().all(|k| k.name() != name) {
                return Err(DataError::UnknownLesionKind {
                    id: rows.first().map_or(String::new(), |r| r.id.clone()),
                    name,
                });
            }
        }
    }
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let img_path = root.join("images").join(format!("{}.png", row.id));
        if !img_path.is_file() {
            return Err(DataError::MissingMaskFile {
                id: row.id.clone(),
                path: img_path.display().to_string(),
                loaded: samples.len(),
            });
        }
        let image = load_image(&img_path)?;
        let lesion_masks = if wants_masks {
            let mut map = BTreeMap::new();
            for kind in LesionKind::ALL {
                let p = masks_root.join(kind.name()).join(format!("{}.png", row.id));
                let mask = if p.is_file() {
                    read_mask_png(&p)?
                } else {
                    Mask::new(image.width, image.height)
                };
                map.insert(kind, mask);
            }
            Some(map)
        } else {
            None
        };
        let sample = FundusSample {
            id: row.id,
            image,
            lesion_masks,
            lesion_flags: row.flags,
            grade: row.grade,
            disease_labels: row.diseases,
        };
        sample.validate()?;
        samples.push(sample);
    }
    let dataset = Dataset {
        name: root
            .file_name()
            .map_or_else(|| "dataset".into(), |n| n.to_string_lossy().to_string()),
        kind,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn manifest_text(dataset: &Dataset) -> String {
    let mut out = String::from("id\tgrade\tLM\tPM");
    for name in DISEASE_NAMES {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    let bit = |b: bool| if b { "1" } else { "0" };
    for s in &dataset.samples {
        out.push_str(&s.id);
        out.push('\t');
        out.push_str(&s.grade.map_or("-".into(), |g| g.to_string()));
        match s.lesion_flags {
            Some(f) => {
                out.push('\t');
                out.push_str(bit(f.lm));
                out.push('\t');
                out.push_str(bit(f.pm));
            }
            None => out.push_str("\t-\t-"),
        }
        for i in 0..NUM_DISEASES {
            out.push('\t');
            out.push_str(s.disease_labels.map_or("-", |d| bit(d[i])));
        }
        out.push('\n');
    }
    out
}

/// Write `dataset` in the standard layout under `root`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let has_masks = dataset.samples.iter().any(|s| s.lesion_masks.is_some());
    if has_masks {
        for kind in LesionKind::ALL {
            let dir = root.join("masks").join(kind.name());
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
    }
    for s in &dataset.samples {
        write_rgb_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        if let Some(masks) = &s.lesion_masks {
            for (kind, m) in masks {
                if !m.any() {
                    continue;
                }
                let path = root.join("masks").join(kind.name()).join(format!("{}.png", s.id));
                write_mask_png(m, &path)?;
            }
        }
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest_text(dataset)).map_err(|e| io_err(&path, e))
}

pub(crate) fn write_rgb_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|e| io_err(path, e))
}

pub(crate) fn write_mask_png(m: &Mask, path: &Path) -> Result<(), DataError> {
    let bytes: Vec<u8> = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(m.width as u32, m.height as u32, bytes)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|e| io_err(path, e))
}
