//! Transfer-learning initialization: reuse a trained backbone under a new
//! class schema, rebuilding only the classification head.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::cloud::ClassSchema;
use crate::error::{Error, Result};
use crate::network::{init_weight, is_head, ModelParams};
use crate::tensor::Tensor;

/// Build target-schema parameters from a source model.
///
/// Every non-head tensor is copied bitwise. The head is rebuilt for the
/// target class count: rows listed in `correspondence` (target id -> source
/// id) copy the source head row and bias bitwise; the rest are freshly
/// initialized, weights uniform in `±sqrt(6/fan_in)` under `seed` and biases
/// zero.
pub fn init_from_source(
    source: &ModelParams,
    target_schema: &ClassSchema,
    correspondence: Option<&BTreeMap<usize, usize>>,
    seed: u64,
) -> Result<ModelParams> {
    source.validate_shapes()?;
    target_schema.validate()?;
    if target_schema.is_empty() {
        return Err(Error::EmptyInput("target schema"));
    }

    let mut config = source.config.clone();
    config.num_classes = target_schema.len();
    if !config.backbone_compatible(&source.config) {
        // Unreachable by construction; kept as a guard if the clone above
        // ever stops covering every field.
        return Err(Error::IncompatibleConfig("backbone mismatch".into()));
    }

    let src_head_w = source
        .tensors
        .get("head.out.weight")
        .ok_or_else(|| Error::IncompatibleConfig("source lacks head.out.weight".into()))?;
    let src_head_b = source
        .tensors
        .get("head.out.bias")
        .ok_or_else(|| Error::IncompatibleConfig("source lacks head.out.bias".into()))?;
    let hidden = src_head_w.cols();

    let mut head_w: Tensor<f32> =
        init_weight(target_schema.len(), hidden, seed, "head.out.weight");
    let mut head_b: Tensor<f32> = Tensor::zeros(1, target_schema.len());

    if let Some(map) = correspondence {
        for (&target_id, &source_id) in map {
            if target_id >= target_schema.len() {
                return Err(Error::LabelOutOfRange {
                    index: target_id,
                    label: target_id as u32,
                    class_count: target_schema.len(),
                });
            }
            if source_id >= source.config.num_classes {
                return Err(Error::LabelOutOfRange {
                    index: source_id,
                    label: source_id as u32,
                    class_count: source.config.num_classes,
                });
            }
            head_w
                .row_mut(target_id)
                .copy_from_slice(src_head_w.row(source_id));
            *head_b.at_mut(0, target_id) = src_head_b.at(0, source_id);
        }
    }

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, tensor) in &source.tensors {
        if !is_head(name) {
            tensors.insert(name.clone(), tensor.clone());
        }
    }
    tensors.insert("head.out.weight".into(), head_w);
    tensors.insert("head.out.bias".into(), head_b);

    let out = ModelParams {
        config,
        schema: target_schema.clone(),
        tensors,
    };
    out.validate_shapes()?;
    Ok(out)
}

/// Resolve a by-name correspondence `{target_name: source_name}` into the
/// id map [`init_from_source`] takes.
pub fn correspondence_by_name(
    target: &ClassSchema,
    source: &ClassSchema,
    pairs: &[(&str, &str)],
) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for (target_name, source_name) in pairs {
        let t = target.id_of(target_name).ok_or_else(|| Error::InvalidParam {
            name: "correspondence",
            reason: alloc::format!("`{target_name}` not in schema `{}`", target.name),
        })?;
        let s = source.id_of(source_name).ok_or_else(|| Error::InvalidParam {
            name: "correspondence",
            reason: alloc::format!("`{source_name}` not in schema `{}`", source.name),
        })?;
        if map.insert(t, s).is_some() {
            return Err(Error::InvalidParam {
                name: "correspondence",
                reason: alloc::format!("target `{target_name}` mapped twice"),
            });
        }
    }
    Ok(map)
}
