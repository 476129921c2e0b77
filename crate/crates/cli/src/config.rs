//! JSON configuration loading: class schemas and maps, scene specs, model
//! and training configs, and the ordered postprocessing pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use urbanseg_core::cloud::{ClassMap, ClassSchema};
use urbanseg_core::network::{LayerConfig, TrainConfig};
use urbanseg_core::postprocess::MorphMode;
use urbanseg_core::synth::{source8_schema, SceneSpec};

use crate::error::{CliError, Result};

/// Resolve a schema by its registered name.
pub fn schema_by_name(name: &str) -> Option<ClassSchema> {
    match name {
        "urban5" => Some(ClassSchema::target5()),
        "sensaturban13" => Some(ClassSchema::sensat_urban()),
        "toronto3d9" => Some(ClassSchema::toronto3d()),
        "synth-source8" => Some(source8_schema()),
        _ => None,
    }
}

fn resolve_schema(name: &str) -> Result<ClassSchema> {
    schema_by_name(name).ok_or_else(|| {
        urbanseg_core::Error::InvalidParam {
            name: "schema",
            reason: format!("unknown schema name `{name}`"),
        }
        .into()
    })
}

/// Built-in remap tables, looked up by `(source, target)` names.
pub fn builtin_class_map(source: &str, target: &str) -> Option<ClassMap> {
    match (source, target) {
        ("sensaturban13", "urban5") => Some(ClassMap::sensat_urban_to_target5()),
        ("toronto3d9", "urban5") => Some(ClassMap::toronto3d_to_target5()),
        ("synth-source8", "urban5") => Some(urbanseg_core::synth::source8_to_target5()),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
struct ClassMapFile {
    source: String,
    target: String,
    mapping: BTreeMap<String, String>,
}

/// Load `{"source": ..., "target": ..., "mapping": {src_name: tgt_name}}`.
/// Schema and class names must all resolve; anything unknown is an error.
pub fn load_class_map(path: &Path) -> Result<ClassMap> {
    let file: ClassMapFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let source = resolve_schema(&file.source)?;
    let target = resolve_schema(&file.target)?;
    let pairs: Vec<(&str, &str)> = file
        .mapping
        .iter()
        .map(|(s, t)| (s.as_str(), t.as_str()))
        .collect();
    ClassMap::from_pairs(&source, &target, &pairs).map_err(CliError::Validation)
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn load_layer_config(path: &Path) -> Result<LayerConfig> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// One postprocessing step; steps run in file order.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepSpec {
    StatisticalOutlierRemoval {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_std_ratio")]
        std_ratio: f64,
    },
    RadiusOutlierRemoval {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_min_neighbors")]
        min_neighbors: usize,
    },
    VoxelDownsample {
        #[serde(default = "default_voxel")]
        voxel_size: f64,
    },
    Morphology {
        mode: MorphMode,
        class: String,
        #[serde(default = "default_morph_threshold")]
        threshold: usize,
        #[serde(default = "default_k")]
        k: usize,
    },
    HeightFilter {
        #[serde(default = "default_cell")]
        cell_size: f64,
        #[serde(default = "default_percentile")]
        percentile: f64,
        rules: Vec<RuleSpec>,
    },
    /// Act on points of `class` whose local z spread within `radius` falls
    /// below `min_variation` (flat false positives of tall classes).
    LocalHeightVariationFilter {
        #[serde(default = "default_radius")]
        radius: f64,
        min_variation: f64,
        class: String,
        action: ActionSpec,
    },
}

fn default_k() -> usize {
    16
}
fn default_std_ratio() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    1.0
}
fn default_min_neighbors() -> usize {
    4
}
fn default_voxel() -> f64 {
    0.5
}
fn default_morph_threshold() -> usize {
    8
}
fn default_cell() -> f64 {
    2.0
}
fn default_percentile() -> f64 {
    5.0
}

/// A height rule with class names instead of ids.
#[derive(Debug, Clone, Deserialize)]
pub struct RuleSpec {
    pub class: String,
    #[serde(default)]
    pub min_height: Option<f64>,
    #[serde(default)]
    pub max_height: Option<f64>,
    pub action: ActionSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpec {
    Relabel(String),
    Remove,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PostprocessFile {
    pub steps: Vec<StepSpec>,
}

pub fn load_postprocess(path: &Path) -> Result<PostprocessFile> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Resolve a class name against a schema, as a label id.
pub fn class_id(schema: &ClassSchema, name: &str) -> Result<u8> {
    schema
        .id_of(name)
        .map(|i| i as u8)
        .ok_or_else(|| {
            urbanseg_core::Error::InvalidParam {
                name: "class",
                reason: format!("`{name}` is not a class of schema `{}`", schema.name),
            }
            .into()
        })
}

/// By-name transfer correspondence file: `{target_name: source_name}`.
pub fn load_correspondence(
    path: &Path,
    target: &ClassSchema,
    source: &ClassSchema,
) -> Result<BTreeMap<usize, usize>> {
    let raw: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(path)?)?;
    let pairs: Vec<(&str, &str)> = raw.iter().map(|(t, s)| (t.as_str(), s.as_str())).collect();
    urbanseg_core::transfer::correspondence_by_name(target, source, &pairs)
        .map_err(CliError::Validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("urbanseg-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn class_map_file_loads_and_validates() {
        let path = write_temp(
            "map.json",
            r#"{
                "source": "toronto3d9",
                "target": "urban5",
                "mapping": {
                    "Unclassified": "Background",
                    "Ground": "Road",
                    "Road Markings": "Road",
                    "Natural": "Vegetation",
                    "Building": "Building",
                    "Utility Line": "Background",
                    "Pole": "Background",
                    "Car": "Background",
                    "Fence": "Background"
                }
            }"#,
        );
        let map = load_class_map(&path).unwrap();
        assert_eq!(map, ClassMap::toronto3d_to_target5());
    }

    #[test]
    fn unknown_names_are_load_errors() {
        let bad_schema = write_temp(
            "bad_schema.json",
            r#"{"source": "nope", "target": "urban5", "mapping": {}}"#,
        );
        assert!(matches!(
            load_class_map(&bad_schema),
            Err(CliError::Validation(_))
        ));

        let bad_class = write_temp(
            "bad_class.json",
            r#"{"source": "urban5", "target": "urban5", "mapping": {"Sky": "Background"}}"#,
        );
        assert!(load_class_map(&bad_class).is_err());

        // Partial maps are not total functions.
        let partial = write_temp(
            "partial.json",
            r#"{"source": "urban5", "target": "urban5", "mapping": {"Water": "Water"}}"#,
        );
        assert!(load_class_map(&partial).is_err());
    }

    #[test]
    fn postprocess_file_parses_in_order() {
        let path = write_temp(
            "rules.json",
            r#"{"steps": [
                {"op": "statistical_outlier_removal", "k": 8, "std_ratio": 2.0},
                {"op": "radius_outlier_removal"},
                {"op": "voxel_downsample", "voxel_size": 0.25},
                {"op": "morphology", "mode": "erode", "class": "Water", "threshold": 4, "k": 8},
                {"op": "height_filter", "rules": [
                    {"class": "Building", "max_height": 2.0, "action": {"relabel": "Background"}},
                    {"class": "Vegetation", "min_height": 40.0, "action": "remove"}
                ]}
            ]}"#,
        );
        let file = load_postprocess(&path).unwrap();
        assert_eq!(file.steps.len(), 5);
        match &file.steps[0] {
            StepSpec::StatisticalOutlierRemoval { k, std_ratio } => {
                assert_eq!(*k, 8);
                assert_eq!(*std_ratio, 2.0);
            }
            other => panic!("wrong first step: {other:?}"),
        }
        match &file.steps[1] {
            StepSpec::RadiusOutlierRemoval {
                radius,
                min_neighbors,
            } => {
                assert_eq!(*radius, 1.0);
                assert_eq!(*min_neighbors, 4);
            }
            other => panic!("wrong second step: {other:?}"),
        }
        match &file.steps[4] {
            StepSpec::HeightFilter { rules, .. } => {
                assert!(matches!(rules[0].action, ActionSpec::Relabel(_)));
                assert!(matches!(rules[1].action, ActionSpec::Remove));
            }
            other => panic!("wrong last step: {other:?}"),
        }
    }

    #[test]
    fn layer_config_partial_json_uses_defaults() {
        let path = write_temp("model.json", r#"{"k": 8, "feature_dims": [8, 16], "num_layers": 2}"#);
        let config = load_layer_config(&path).unwrap();
        assert_eq!(config.k, 8);
        assert_eq!(config.decimation_ratio, 4);
        assert_eq!(config.num_classes, 5);
    }
}
