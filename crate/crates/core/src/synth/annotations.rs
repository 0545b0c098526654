//! Manifest documents.
//!
//! A split is stored as one UTF-8 JSON document plus one 8-bit RGB PNG per
//! scene. Top-level keys: `split` (`"train"`/`"test"`), `seed`, `samples`,
//! `query_list` (`[[scene_id, box_index], ...]`). Each sample carries
//! `scene_id`, `image_path` (relative to the manifest's directory), `boxes`
//! (`[[x1, y1, x2, y2], ...]` in pixels), `true_identity`, and the optional
//! `occluded` flags and `occluders` boxes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

use super::{DatasetManifest, QueryRef, SceneSample, Split, SynthDataset};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    split: Split,
    seed: u64,
    samples: Vec<SampleDoc>,
    query_list: Vec<QueryRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    scene_id: u64,
    image_path: String,
    boxes: Vec<BBox>,
    true_identity: Vec<usize>,
    #[serde(default)]
    occluded: Vec<bool>,
    #[serde(default)]
    occluders: Vec<BBox>,
}

fn image_rel_path(split: Split, scene_id: u64) -> String {
    format!("images/{}_{scene_id:06}.png", split.as_str())
}

/// Writes the manifest to `path` and its images next to it under `images/`.
pub fn write_annotations(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(dir.join("images"))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let rel = image_rel_path(manifest.split, s.scene_id);
        s.image.save_png(&dir.join(&rel))?;
        samples.push(SampleDoc {
            scene_id: s.scene_id,
            image_path: rel,
            boxes: s.boxes.clone(),
            true_identity: s.true_identity.clone(),
            occluded: s.occluded.clone(),
            occluders: s.occluders.clone(),
        });
    }
    let doc = ManifestDoc {
        split: manifest.split,
        seed: manifest.seed,
        samples,
        query_list: manifest.query_list.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `train.json`, `test.json` and `identities.json` into `dir`.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let train = dir.join("train.json");
    let test = dir.join("test.json");
    write_annotations(&dataset.train, &train)?;
    write_annotations(&dataset.test, &test)?;
    let mut ids = serde_json::to_string_pretty(&dataset.identities)?;
    ids.push('\n');
    fs::write(dir.join("identities.json"), ids)?;
    Ok((train, test))
}

pub fn read_annotations(path: &Path) -> Result<DatasetManifest> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let doc: ManifestDoc =
        serde_json::from_str(&text).map_err(|e| load_err(format!("malformed manifest: {e}")))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut samples = Vec::with_capacity(doc.samples.len());
    for s in doc.samples {
        let scene_err = |reason: String| Error::SceneLoad {
            scene_id: s.scene_id,
            reason,
        };
        let image = Image::load_png(&dir.join(&s.image_path))
            .map_err(|e| scene_err(format!("image {}: {e}", s.image_path)))?;
        if s.true_identity.len() != s.boxes.len() {
            return Err(scene_err("boxes and true_identity differ in length".into()));
        }
        let occluded = if s.occluded.is_empty() {
            super::occlusion_flags(&s.boxes, &s.occluders)
        } else {
            s.occluded
        };
        if occluded.len() != s.boxes.len() {
            return Err(scene_err("boxes and occluded differ in length".into()));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        for (k, b) in s.boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(scene_err(format!("box {k} {b:?} is degenerate")));
            }
            if !b.within(w, h) {
                return Err(scene_err(format!("box {k} {b:?} is outside the {w}x{h} image")));
            }
        }
        let mut ids = s.true_identity.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(scene_err("an identity appears twice in one scene".into()));
        }
        samples.push(SceneSample {
            scene_id: s.scene_id,
            image,
            boxes: s.boxes,
            true_identity: s.true_identity,
            occluded,
            occluders: s.occluders,
        });
    }
    for q in &doc.query_list {
        let ok = samples
            .iter()
            .find(|s| s.scene_id == q.scene_id)
            .is_some_and(|s| q.box_index < s.boxes.len());
        if !ok {
            return Err(load_err(format!("query {q:?} does not name an annotated box")));
        }
    }
    Ok(DatasetManifest {
        split: doc.split,
        seed: doc.seed,
        samples,
        query_list: doc.query_list,
    })
}
