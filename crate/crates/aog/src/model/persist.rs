//! Versioned JSON persistence of trained models.
//!
//! The flat parameter array is written with shortest-round-trip decimal
//! formatting, so save/load round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contour::FeatureConfig;
use crate::error::{Error, Result};

use super::structure::{IndexMap, Structure};
use super::Model;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StructureFile {
    m: usize,
    per_and: Vec<super::structure::AndNodeStructure>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    flat: Vec<f64>,
    index_map: IndexMap,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    structure: StructureFile,
    params: ParamsFile,
    feature_config: FeatureConfig,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        structure: StructureFile {
            m: model.structure.num_and_nodes(),
            per_and: model.structure.and_nodes.clone(),
        },
        params: ParamsFile {
            flat: model.params.flat.clone(),
            index_map: model.index.clone(),
        },
        feature_config: model.features.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::parse(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: file.schema_version,
            expected: MODEL_SCHEMA_VERSION,
            path: path.display().to_string(),
        });
    }
    if file.structure.m != file.structure.per_and.len() {
        return Err(Error::InvalidModel(format!(
            "declared m = {} but {} and-nodes present",
            file.structure.m,
            file.structure.per_and.len()
        )));
    }
    let structure = Structure::new(file.structure.per_and)?;
    let model = Model::with_params(structure, file.feature_config, file.params.flat)?;
    if model.index != file.params.index_map {
        return Err(Error::InvalidModel(
            "stored index map does not match the structure".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AndNodeStructure, Structure};

    fn model() -> Model {
        let structure = Structure::new(vec![AndNodeStructure {
            b1: 1,
            b2: 2,
            window: [40.0, 20.0],
            leaf_counts: vec![2, 1],
        }])
        .unwrap();
        let mut m = Model::zeroed(structure, FeatureConfig::default()).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for v in &mut m.params.flat {
            *v = rng.random_range(-1.0..1.0) * std::f64::consts::PI;
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m.params.flat.len(), back.params.flat.len());
        for (a, b) in m.params.flat.iter().zip(&back.params.flat) {
            assert_eq!(a.to_bits(), b.to_bits(), "flat array must round-trip bit-exactly");
        }
        assert_eq!(m.structure, back.structure);
        assert_eq!(m.features, back.features);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_model(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&path, text).unwrap();
        match load_model(&path) {
            Err(Error::SchemaVersion { found: 99, .. }) => {}
            other => panic!("expected schema version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_model(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        match load_model(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
