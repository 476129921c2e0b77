//! Point-cloud domain types, class schemas, and label remapping.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the five-class target schema used throughout the pipeline.
pub const TARGET_SCHEMA_NAME: &str = "urban5";

/// A point cloud: positions in meters, optional per-point colors and class
/// labels, and the name of the schema the labels are expressed in.
///
/// Invariants (checked by [`validate_cloud`]): colors and labels, when
/// present, have exactly one entry per point; every label is a valid class id
/// of the governing schema; positions are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub labels: Option<Vec<u8>>,
    pub schema_name: String,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, schema_name: &str) -> Self {
        PointCloud {
            positions,
            colors: None,
            labels: None,
            schema_name: schema_name.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn with_colors(mut self, colors: Vec<[u8; 3]>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    /// New cloud containing the given rows, in order. Indices may repeat.
    pub fn select(&self, indices: &[u32]) -> PointCloud {
        let positions = indices
            .iter()
            .map(|&i| self.positions[i as usize])
            .collect();
        let colors = self
            .colors
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i as usize]).collect());
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i as usize]).collect());
        PointCloud {
            positions,
            colors,
            labels,
            schema_name: self.schema_name.clone(),
        }
    }
}

/// An ordered set of class names; the index of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub name: String,
    pub class_names: Vec<String>,
}

impl ClassSchema {
    pub fn new(name: &str, class_names: &[&str]) -> Self {
        ClassSchema {
            name: name.to_string(),
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The segmentation target schema: Background, Building, Vegetation,
    /// Road, Water, with ids 0..4 in that order.
    pub fn target5() -> Self {
        Self::new(
            TARGET_SCHEMA_NAME,
            &["Background", "Building", "Vegetation", "Road", "Water"],
        )
    }

    /// SensatUrban's 13 published classes, in their published order.
    pub fn sensat_urban() -> Self {
        Self::new(
            "sensaturban13",
            &[
                "Ground",
                "Vegetation",
                "Building",
                "Wall",
                "Bridge",
                "Parking",
                "Rail",
                "Traffic Road",
                "Street Furniture",
                "Car",
                "Footpath",
                "Bike",
                "Water",
            ],
        )
    }

    /// Toronto-3D's 9 classes.
    pub fn toronto3d() -> Self {
        Self::new(
            "toronto3d9",
            &[
                "Unclassified",
                "Ground",
                "Road Markings",
                "Natural",
                "Building",
                "Utility Line",
                "Pole",
                "Car",
                "Fence",
            ],
        )
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn id_of(&self, class_name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == class_name)
    }

    /// Check the schema's own invariants: names unique and non-empty.
    pub fn validate(&self) -> Result<()> {
        for (i, name) in self.class_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidParam {
                    name: "class_names",
                    reason: alloc::format!("class {i} has an empty name"),
                });
            }
            if self.class_names[..i].contains(name) {
                return Err(Error::InvalidParam {
                    name: "class_names",
                    reason: alloc::format!("duplicate class name `{name}`"),
                });
            }
        }
        Ok(())
    }
}

/// A total function from one schema's class ids onto another's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub source_schema: String,
    pub target_schema: String,
    /// `mapping[source_id] = target_id`; covers every source id.
    pub mapping: Vec<u8>,
}

impl ClassMap {
    /// Build a map from `(source_name, target_name)` pairs. Every source
    /// class must be mapped exactly once and every target name must exist.
    pub fn from_pairs(
        source: &ClassSchema,
        target: &ClassSchema,
        pairs: &[(&str, &str)],
    ) -> Result<Self> {
        let mut mapping: Vec<Option<u8>> = vec![None; source.len()];
        for (src_name, tgt_name) in pairs {
            let sid = source.id_of(src_name).ok_or_else(|| Error::InvalidParam {
                name: "mapping",
                reason: alloc::format!(
                    "`{src_name}` is not a class of schema `{}`",
                    source.name
                ),
            })?;
            let tid = target.id_of(tgt_name).ok_or_else(|| Error::InvalidParam {
                name: "mapping",
                reason: alloc::format!(
                    "`{tgt_name}` is not a class of schema `{}`",
                    target.name
                ),
            })?;
            if mapping[sid].is_some() {
                return Err(Error::InvalidParam {
                    name: "mapping",
                    reason: alloc::format!("source class `{src_name}` mapped twice"),
                });
            }
            mapping[sid] = Some(tid as u8);
        }
        let mapping = mapping
            .into_iter()
            .enumerate()
            .map(|(sid, m)| {
                m.ok_or_else(|| Error::InvalidParam {
                    name: "mapping",
                    reason: alloc::format!(
                        "source class `{}` (id {sid}) is unmapped",
                        source.class_names[sid]
                    ),
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(ClassMap {
            source_schema: source.name.clone(),
            target_schema: target.name.clone(),
            mapping,
        })
    }

    /// The identity map on a schema.
    pub fn identity(schema: &ClassSchema) -> Self {
        ClassMap {
            source_schema: schema.name.clone(),
            target_schema: schema.name.clone(),
            mapping: (0..schema.len() as u8).collect(),
        }
    }

    /// Default SensatUrban -> urban5 table.
    pub fn sensat_urban_to_target5() -> Self {
        let src = ClassSchema::sensat_urban();
        let tgt = ClassSchema::target5();
        Self::from_pairs(
            &src,
            &tgt,
            &[
                ("Ground", "Background"),
                ("Vegetation", "Vegetation"),
                ("Building", "Building"),
                ("Wall", "Building"),
                ("Bridge", "Road"),
                ("Parking", "Road"),
                ("Rail", "Road"),
                ("Traffic Road", "Road"),
                ("Street Furniture", "Background"),
                ("Car", "Background"),
                ("Footpath", "Road"),
                ("Bike", "Background"),
                ("Water", "Water"),
            ],
        )
        .expect("built-in table is total")
    }

    /// Default Toronto-3D -> urban5 table.
    pub fn toronto3d_to_target5() -> Self {
        let src = ClassSchema::toronto3d();
        let tgt = ClassSchema::target5();
        Self::from_pairs(
            &src,
            &tgt,
            &[
                ("Unclassified", "Background"),
                ("Ground", "Road"),
                ("Road Markings", "Road"),
                ("Natural", "Vegetation"),
                ("Building", "Building"),
                ("Utility Line", "Background"),
                ("Pole", "Background"),
                ("Car", "Background"),
                ("Fence", "Background"),
            ],
        )
        .expect("built-in table is total")
    }

    pub fn source_class_count(&self) -> usize {
        self.mapping.len()
    }

    pub fn apply(&self, source_id: u8) -> Option<u8> {
        self.mapping.get(source_id as usize).copied()
    }
}

/// One invariant violation found by [`validate_cloud`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    LabelOutOfRange {
        index: usize,
        label: u8,
        class_count: usize,
    },
    NonFiniteCoordinate {
        index: usize,
    },
    SchemaName {
        expected: String,
        got: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                field,
                expected,
                got,
            } => write!(f, "{field} length {got} != point count {expected}"),
            Violation::LabelOutOfRange {
                index,
                label,
                class_count,
            } => write!(f, "label out of range: {label} at point {index} (schema has {class_count} classes)"),
            Violation::NonFiniteCoordinate { index } => {
                write!(f, "non-finite coordinate at point {index}")
            }
            Violation::SchemaName { expected, got } => {
                write!(f, "cloud schema `{got}` is not `{expected}`")
            }
        }
    }
}

/// Result of structural validation; violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every [`PointCloud`] invariant against a schema.
pub fn validate_cloud(cloud: &PointCloud, schema: &ClassSchema) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = cloud.len();
    if cloud.schema_name != schema.name {
        report.violations.push(Violation::SchemaName {
            expected: schema.name.clone(),
            got: cloud.schema_name.clone(),
        });
    }
    if let Some(colors) = &cloud.colors {
        if colors.len() != n {
            report.violations.push(Violation::LengthMismatch {
                field: "colors",
                expected: n,
                got: colors.len(),
            });
        }
    }
    if let Some(labels) = &cloud.labels {
        if labels.len() != n {
            report.violations.push(Violation::LengthMismatch {
                field: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        for (i, &label) in labels.iter().enumerate() {
            if label as usize >= schema.len() {
                report.violations.push(Violation::LabelOutOfRange {
                    index: i,
                    label,
                    class_count: schema.len(),
                });
            }
        }
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            report
                .violations
                .push(Violation::NonFiniteCoordinate { index: i });
        }
    }
    report
}

/// Replace every label through a [`ClassMap`], leaving geometry and colors
/// untouched. The cloud must carry labels and be expressed in the map's
/// source schema.
pub fn remap_labels(cloud: &PointCloud, map: &ClassMap) -> Result<PointCloud> {
    if cloud.schema_name != map.source_schema {
        return Err(Error::SchemaMismatch {
            expected: map.source_schema.clone(),
            found: cloud.schema_name.clone(),
        });
    }
    let labels = cloud.labels()?;
    let remapped = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            map.apply(l).ok_or(Error::LabelOutOfRange {
                index: i,
                label: l as u32,
                class_count: map.source_class_count(),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(PointCloud {
        positions: cloud.positions.clone(),
        colors: cloud.colors.clone(),
        labels: Some(remapped),
        schema_name: map.target_schema.clone(),
    })
}

/// Per-class point counts over a raw label slice; `counts[id]` for
/// `id < class_count`. Errors on any label outside the schema.
pub fn label_histogram(labels: &[u8], class_count: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; class_count];
    for (i, &l) in labels.iter().enumerate() {
        let slot = counts.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
            index: i,
            label: l as u32,
            class_count,
        })?;
        *slot += 1;
    }
    Ok(counts)
}

/// Per-class point counts of a labeled cloud under its schema. The counts
/// always sum to the point count.
pub fn class_histogram(cloud: &PointCloud, schema: &ClassSchema) -> Result<Vec<u64>> {
    label_histogram(cloud.labels()?, schema.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn smallest_valid_cloud_is_ok() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0]], TARGET_SCHEMA_NAME).with_labels(vec![0]);
        assert!(validate_cloud(&cloud, &ClassSchema::target5()).is_ok());
    }

    #[test]
    fn label_out_of_range_is_a_violation() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0]], TARGET_SCHEMA_NAME).with_labels(vec![7]);
        let report = validate_cloud(&cloud, &ClassSchema::target5());
        assert_eq!(
            report.violations,
            vec![Violation::LabelOutOfRange {
                index: 0,
                label: 7,
                class_count: 5
            }]
        );
    }

    #[test]
    fn nan_position_is_a_violation() {
        let cloud = PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], TARGET_SCHEMA_NAME);
        let report = validate_cloud(&cloud, &ClassSchema::target5());
        assert_eq!(
            report.violations,
            vec![Violation::NonFiniteCoordinate { index: 0 }]
        );
    }

    #[test]
    fn target5_order_is_fixed() {
        let schema = ClassSchema::target5();
        assert_eq!(
            schema.class_names,
            ["Background", "Building", "Vegetation", "Road", "Water"]
        );
        schema.validate().unwrap();
        ClassSchema::sensat_urban().validate().unwrap();
        ClassSchema::toronto3d().validate().unwrap();
    }

    #[test]
    fn sensat_vegetation_maps_to_target_vegetation() {
        let map = ClassMap::sensat_urban_to_target5();
        let src = ClassSchema::sensat_urban();
        let veg = src.id_of("Vegetation").unwrap() as u8;
        assert_eq!(map.apply(veg), Some(2));
    }

    #[test]
    fn identity_map_keeps_labels_bitwise() {
        let schema = ClassSchema::target5();
        let labels = vec![0u8, 3, 4, 2, 2, 1];
        let cloud = PointCloud::new(vec![[0.0; 3]; 6], TARGET_SCHEMA_NAME)
            .with_labels(labels.clone());
        let out = remap_labels(&cloud, &ClassMap::identity(&schema)).unwrap();
        assert_eq!(out.labels.unwrap(), labels);
        assert_eq!(out.schema_name, TARGET_SCHEMA_NAME);
    }

    #[test]
    fn remap_thousand_sensat_points_matches_table() {
        // Brute-force oracle: look the expected target up per point straight
        // from the pair table, independent of ClassMap's internals.
        let pairs = [
            ("Ground", "Background"),
            ("Vegetation", "Vegetation"),
            ("Building", "Building"),
            ("Wall", "Building"),
            ("Bridge", "Road"),
            ("Parking", "Road"),
            ("Rail", "Road"),
            ("Traffic Road", "Road"),
            ("Street Furniture", "Background"),
            ("Car", "Background"),
            ("Footpath", "Road"),
            ("Bike", "Background"),
            ("Water", "Water"),
        ];
        let src = ClassSchema::sensat_urban();
        let tgt = ClassSchema::target5();
        let map = ClassMap::sensat_urban_to_target5();

        let mut rng = Rng::new(42);
        let labels: Vec<u8> = (0..1000).map(|_| rng.below(13) as u8).collect();
        let cloud = PointCloud::new(vec![[0.0; 3]; 1000], "sensaturban13")
            .with_labels(labels.clone());
        let out = remap_labels(&cloud, &map).unwrap();
        let out_labels = out.labels.unwrap();
        assert_eq!(out_labels.len(), 1000);
        for (i, (&src_label, &out_label)) in labels.iter().zip(&out_labels).enumerate() {
            let src_name = &src.class_names[src_label as usize];
            let tgt_name = pairs
                .iter()
                .find(|(s, _)| s == src_name)
                .map(|(_, t)| *t)
                .unwrap();
            let expected = tgt.id_of(tgt_name).unwrap() as u8;
            assert_eq!(out_label, expected, "point {i}");
            assert!(out_label < 5);
        }
    }

    #[test]
    fn remap_requires_matching_schema_and_labels() {
        let map = ClassMap::sensat_urban_to_target5();
        let wrong_schema =
            PointCloud::new(vec![[0.0; 3]], TARGET_SCHEMA_NAME).with_labels(vec![0]);
        assert!(matches!(
            remap_labels(&wrong_schema, &map),
            Err(Error::SchemaMismatch { .. })
        ));
        let unlabeled = PointCloud::new(vec![[0.0; 3]], "sensaturban13");
        assert!(matches!(
            remap_labels(&unlabeled, &map),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn histogram_counts_directly() {
        let schema = ClassSchema::target5();
        let cloud =
            PointCloud::new(vec![[0.0; 3]; 3], TARGET_SCHEMA_NAME).with_labels(vec![1, 1, 4]);
        let h = class_histogram(&cloud, &schema).unwrap();
        assert_eq!(h, vec![0, 2, 0, 0, 1]);

        let empty = PointCloud::new(Vec::new(), TARGET_SCHEMA_NAME).with_labels(Vec::new());
        assert_eq!(class_histogram(&empty, &schema).unwrap(), vec![0; 5]);
    }

    #[test]
    fn histogram_reproduces_published_area_counts() {
        // Per-class point counts of one published survey area. A full cloud
        // at this size would need gigabytes of positions, so the label-level
        // core that class_histogram wraps is driven directly.
        let counts: [u64; 5] = [22_398_111, 9_156_839, 19_363_119, 12_821_506, 4_260_425];
        let total: u64 = counts.iter().sum();
        let mut labels = Vec::with_capacity(total as usize);
        for (class, &count) in counts.iter().enumerate() {
            labels.resize(labels.len() + count as usize, class as u8);
        }
        let hist = label_histogram(&labels, 5).unwrap();
        assert_eq!(hist, counts);
        assert_eq!(hist.iter().sum::<u64>(), total);
    }

    #[test]
    fn histogram_sums_to_n_and_commutes_with_remap() {
        // remap then histogram == histogram then push-forward through the map
        let src = ClassSchema::sensat_urban();
        let map = ClassMap::sensat_urban_to_target5();
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let n = 1 + rng.below(300) as usize;
            let labels: Vec<u8> = (0..n).map(|_| rng.below(13) as u8).collect();
            let cloud =
                PointCloud::new(vec![[0.0; 3]; n], "sensaturban13").with_labels(labels);
            let h_src = class_histogram(&cloud, &src).unwrap();
            assert_eq!(h_src.iter().sum::<u64>(), n as u64);

            let remapped = remap_labels(&cloud, &map).unwrap();
            let h_tgt = class_histogram(&remapped, &ClassSchema::target5()).unwrap();
            assert_eq!(h_tgt.iter().sum::<u64>(), n as u64);

            let mut pushed = vec![0u64; 5];
            for (sid, &count) in h_src.iter().enumerate() {
                pushed[map.mapping[sid] as usize] += count;
            }
            assert_eq!(h_tgt, pushed);
        }
    }

    #[test]
    fn remap_never_exceeds_target_count_on_random_maps() {
        let mut rng = Rng::new(77);
        for round in 0..30 {
            let src_k = 2 + rng.below(20) as usize;
            let tgt_k = 1 + rng.below(9) as usize;
            let mapping: Vec<u8> = (0..src_k).map(|_| rng.below(tgt_k as u64) as u8).collect();
            let map = ClassMap {
                source_schema: alloc::format!("src{round}"),
                target_schema: alloc::format!("tgt{round}"),
                mapping,
            };
            let n = 1 + rng.below(200) as usize;
            let labels: Vec<u8> = (0..n).map(|_| rng.below(src_k as u64) as u8).collect();
            let cloud = PointCloud::new(vec![[0.0; 3]; n], &map.source_schema)
                .with_labels(labels);
            let out = remap_labels(&cloud, &map).unwrap();
            assert_eq!(out.len(), n);
            assert!(out.labels.unwrap().iter().all(|&l| (l as usize) < tgt_k));
        }
    }
}
