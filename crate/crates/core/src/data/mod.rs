//! Synthetic corpus generation, image and label I/O, augmentations.

pub mod augment;
pub mod pgm;
pub mod scene;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};

pub use augment::{augment, resize_bilinear, AugmentOp};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, pgm_dims, save_pgm};
pub use scene::{generate_scene, Gradient, SceneSpec, ThermalScene};

/// Side of the images in the shipped desk-scale corpus.
pub const DESK_IMAGE_SIZE: usize = 64;
/// Objects per desk-scale scene.
pub const DESK_OBJECTS: usize = 4;
pub const DESK_CLASSES: usize = 3;

/// A labelled object in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Formats labels as YOLO lines `class cx cy w h`, normalised by the image
/// size.
pub fn format_yolo(labels: &[Label], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    let mut out = String::new();
    for l in labels {
        let b = &l.bbox;
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            l.class_id,
            (b.x1 + b.x2) / 2.0 / w,
            (b.y1 + b.y2) / 2.0 / h,
            b.width() / w,
            b.height() / h
        ));
    }
    out
}

pub fn parse_yolo(text: &str, width: usize, height: usize, source_name: &str) -> Result<Vec<Label>> {
    let (w, h) = (width as f64, height as f64);
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`")))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(err(format!("value {f} outside [0, 1]")));
            }
        }
        let bbox = BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h);
        if !bbox.is_valid() {
            return Err(err("degenerate box".into()));
        }
        labels.push(Label { class_id, bbox });
    }
    Ok(labels)
}

/// One corpus item: paths as written in the manifest, resolved against the
/// manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

impl ManifestEntry {
    /// Image file stem, used as the image id in detection files.
    pub fn image_id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Reads a manifest of `image label` lines.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                source_name: name.clone(),
                line: i + 1,
                reason: format!("expected `image label`, found {} fields", fields.len()),
            });
        }
        out.push(ManifestEntry {
            image: base.join(fields[0]),
            label: base.join(fields[1]),
        });
    }
    Ok(out)
}

/// Loads the labels of one manifest entry, taking the image size from the
/// PGM header.
pub fn load_labels(entry: &ManifestEntry) -> Result<Vec<Label>> {
    let bytes = fs::read(&entry.image)?;
    let (w, h) = pgm_dims(&bytes)?;
    let text = fs::read_to_string(&entry.label)?;
    parse_yolo(&text, w, h, &entry.label.display().to_string())
}

/// Writes scenes as `images/scene_NNNN.pgm`, `labels/scene_NNNN.txt` and a
/// `manifest.txt` under `dir`. Returns the manifest path.
pub fn write_corpus(dir: &Path, scenes: &[ThermalScene]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let (_, h, w) = s.image.dims3()?;
        let image = format!("images/scene_{i:04}.pgm");
        let label = format!("labels/scene_{i:04}.txt");
        save_pgm(&s.image, &dir.join(&image))?;
        fs::write(dir.join(&label), format_yolo(&s.objects, w, h))?;
        manifest.push_str(&format!("{image} {label}\n"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Scenes for seeds `seed..seed + count`, generated in parallel.
pub fn generate_corpus(base: &SceneSpec, count: usize) -> Result<Vec<ThermalScene>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            generate_scene(&SceneSpec {
                seed: base.seed.wrapping_add(i),
                ..base.clone()
            })
        })
        .collect()
}

/// Spec of the desk-scale corpus scenes.
pub fn desk_scene_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        num_classes: DESK_CLASSES,
        ..SceneSpec::square(DESK_IMAGE_SIZE, DESK_OBJECTS, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yolo_round_trip_is_exact_on_integer_boxes() {
        let labels = vec![
            Label {
                class_id: 1,
                bbox: BBox::new(3.0, 5.0, 9.0, 12.0),
            },
            Label {
                class_id: 0,
                bbox: BBox::new(0.0, 0.0, 64.0, 64.0),
            },
        ];
        let text = format_yolo(&labels, 64, 64);
        assert_eq!(parse_yolo(&text, 64, 64, "t").unwrap(), labels);
    }

    #[test]
    fn yolo_errors_carry_line_numbers() {
        let text = "0 0.5 0.5 0.1 0.1\n\n1 0.5 nope 0.1 0.1\n";
        match parse_yolo(text, 10, 10, "lbl.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_corpus(&desk_scene_spec(7), 3).unwrap();
        let manifest = write_corpus(dir.path(), &scenes).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        for (e, s) in entries.iter().zip(&scenes) {
            assert_eq!(load_labels(e).unwrap(), s.objects);
            let img = load_pgm(&e.image).unwrap();
            assert!(img.max_abs_diff(&s.image).unwrap() <= 0.5 / 65535.0 + 1e-7);
        }
        assert_eq!(entries[1].image_id(), "scene_0001");
    }
}
