//! Corpus generation and persistence: edge-map scenes, annotations, splits,
//! manifests, and detection CSV files. Every format carries a schema
//! version.

mod generate;

pub use generate::{
    default_desk_spec, generate, Corpus, GeneratorSpec, ObjectAnnotation, PartSpec, Scene,
    ViewSpec, CORPUS_SCHEMA_VERSION,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contour::Contour;
use crate::error::{Error, Result};
use crate::eval::ScoredBox;
use crate::geometry::{Point, Rect};
use crate::learning::TrainingSample;
use crate::model::EdgeMap;

#[derive(Serialize, Deserialize)]
struct SceneFile {
    schema_version: u32,
    width: f64,
    height: f64,
    contours: Vec<Vec<[f64; 2]>>,
    objects: Vec<ObjectAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    generator: GeneratorSpec,
    num_images: usize,
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    schema_version: u32,
    train: Vec<String>,
    test: Vec<String>,
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != CORPUS_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: CORPUS_SCHEMA_VERSION,
            path: path.display().to_string(),
        });
    }
    Ok(())
}

/// Writes one scene as the edge-map JSON schema.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let file = SceneFile {
        schema_version: CORPUS_SCHEMA_VERSION,
        width: scene.map.width,
        height: scene.map.height,
        contours: scene
            .map
            .contours
            .iter()
            .map(|c| c.points.iter().map(|p| [p.x, p.y]).collect())
            .collect(),
        objects: scene.objects.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::parse(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads one scene, validating geometry; malformed contours are reported
/// with their index.
pub fn load_scene(id: &str, path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    check_version(file.schema_version, path)?;
    let mut contours = Vec::with_capacity(file.contours.len());
    for (index, pts) in file.contours.iter().enumerate() {
        let points: Vec<Point> = pts.iter().map(|p| Point::new(p[0], p[1])).collect();
        let contour = Contour::new(index, points).map_err(|e| Error::MalformedGeometry {
            index,
            reason: e.to_string(),
        })?;
        contours.push(contour);
    }
    let map = EdgeMap::new(file.width, file.height, contours)?;
    Ok(Scene {
        id: id.to_string(),
        map,
        objects: file.objects,
    })
}

/// Writes a corpus directory: `manifest.json`, `splits.json`, and
/// `images/<id>.json` per scene.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = ManifestFile {
        schema_version: CORPUS_SCHEMA_VERSION,
        generator: corpus.spec.clone(),
        num_images: corpus.scenes.len(),
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let splits = SplitsFile {
        schema_version: CORPUS_SCHEMA_VERSION,
        train: corpus.train.clone(),
        test: corpus.test.clone(),
    };
    let spath = dir.join("splits.json");
    let json = serde_json::to_string_pretty(&splits).map_err(|e| Error::parse(&spath, e))?;
    fs::write(&spath, json).map_err(|e| Error::io(&spath, e))?;
    for scene in &corpus.scenes {
        save_scene(scene, &images.join(format!("{}.json", scene.id)))?;
    }
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
    check_version(manifest.schema_version, &mpath)?;
    let spath = dir.join("splits.json");
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let splits: SplitsFile = serde_json::from_str(&text).map_err(|e| Error::parse(&spath, e))?;
    check_version(splits.schema_version, &spath)?;
    let mut scenes = Vec::new();
    for id in splits.train.iter().chain(&splits.test) {
        let path = dir.join("images").join(format!("{id}.json"));
        scenes.push(load_scene(id, &path)?);
    }
    Ok(Corpus {
        spec: manifest.generator,
        scenes,
        train: splits.train,
        test: splits.test,
    })
}

/// Turns the scenes of one split into training samples. Generator identities
/// (view, variant ids) are dropped here: training sees only edge maps,
/// labels, and boxes.
pub fn training_samples(corpus: &Corpus, split: &[String]) -> Vec<TrainingSample> {
    let by_id: BTreeMap<&str, &Scene> =
        corpus.scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    split
        .iter()
        .filter_map(|id| by_id.get(id.as_str()))
        .map(|scene| {
            let positive = !scene.objects.is_empty();
            TrainingSample {
                id: scene.id.clone(),
                map: scene.map.clone(),
                label: if positive { 1 } else { -1 },
                gt_window: scene.objects.first().map(|o| o.rect()),
            }
        })
        .collect()
}

/// Ground-truth boxes per image id for one split.
pub fn ground_truth(corpus: &Corpus, split: &[String]) -> BTreeMap<String, Vec<Rect>> {
    let by_id: BTreeMap<&str, &Scene> =
        corpus.scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    split
        .iter()
        .filter_map(|id| by_id.get(id.as_str()))
        .map(|scene| {
            (
                scene.id.clone(),
                scene.objects.iter().map(|o| o.rect()).collect(),
            )
        })
        .collect()
}

/// One row of the detections CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub image_id: String,
    pub bbox: Rect,
    pub scale: usize,
    pub score: f64,
}

impl DetectionRow {
    pub fn scored_box(&self) -> ScoredBox {
        ScoredBox {
            image: self.image_id.clone(),
            bbox: self.bbox,
            score: self.score,
        }
    }
}

pub const DETECTIONS_HEADER: &str = "image_id,x,y,w,h,scale,score";

pub fn save_detections(rows: &[DetectionRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(DETECTIONS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.image_id, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.scale, r.score
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != DETECTIONS_HEADER {
                return Err(Error::parse(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("unexpected header {line:?}"),
                    ),
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: expected 7 fields, got {}", ln + 1, fields.len()),
                ),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::parse(path, e))
        };
        rows.push(DetectionRow {
            image_id: fields[0].to_string(),
            bbox: Rect::new(num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?),
            scale: fields[5].parse::<usize>().map_err(|e| Error::parse(path, e))?,
            score: num(fields[6])?,
        });
    }
    Ok(rows)
}

/// Writes a two-column CSV of curve points.
pub fn save_curve(header: (&str, &str), points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{},{}", header.0, header.1);
    for (x, y) in points {
        let _ = writeln!(out, "{x},{y}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
