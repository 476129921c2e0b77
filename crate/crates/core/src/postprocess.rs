//! Cleanup filters for labeled clouds: outlier removal, voxel downsampling,
//! morphological label smoothing, and ground-height-based filtering.
//!
//! Every filter reads immutable pre-pass state, preserves the order of
//! surviving points, and accounts for its effect in a [`FilterReport`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kdtree::{KdTree, NeighborGraph};

/// Bookkeeping of a single filter application.
/// Invariant: `points_in == points_out + points_removed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub points_in: usize,
    pub points_out: usize,
    pub points_removed: usize,
    pub points_relabeled: usize,
    /// Per class id, output count minus input count (labeled clouds only).
    pub per_class_delta: BTreeMap<u8, i64>,
}

impl FilterReport {
    fn between(input: &PointCloud, output: &PointCloud, relabeled: usize) -> Self {
        let mut delta: BTreeMap<u8, i64> = BTreeMap::new();
        if let Some(labels) = &input.labels {
            for &l in labels {
                *delta.entry(l).or_insert(0) -= 1;
            }
        }
        if let Some(labels) = &output.labels {
            for &l in labels {
                *delta.entry(l).or_insert(0) += 1;
            }
        }
        delta.retain(|_, d| *d != 0);
        FilterReport {
            points_in: input.len(),
            points_out: output.len(),
            points_removed: input.len() - output.len(),
            points_relabeled: relabeled,
            per_class_delta: delta,
        }
    }

    pub fn balances(&self) -> bool {
        self.points_in == self.points_out + self.points_removed
    }
}

fn keep_subset(cloud: &PointCloud, keep: &[bool]) -> PointCloud {
    let indices: Vec<u32> = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| i as u32)
        .collect();
    cloud.select(&indices)
}

/// Remove points whose mean distance to their `k` nearest neighbors (self
/// excluded) exceeds `mu + std_ratio * sigma`, where `mu` and `sigma` are the
/// mean and population standard deviation of those mean distances.
pub fn statistical_outlier_removal(
    cloud: &PointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<(PointCloud, FilterReport)> {
    if k == 0 {
        return Err(Error::InvalidParam {
            name: "k",
            reason: "must be at least 1".into(),
        });
    }
    if !(std_ratio > 0.0) {
        return Err(Error::InvalidParam {
            name: "std_ratio",
            reason: "must be positive".into(),
        });
    }
    if cloud.len() <= k {
        return Err(Error::KTooLarge {
            requested: k,
            available: cloud.len().saturating_sub(1),
        });
    }
    let tree = KdTree::build(&cloud.positions)?;
    let graph = tree.knn_graph(k, false)?;
    let n = cloud.len();
    let mut mean_dist = vec![0.0f64; n];
    for i in 0..n {
        let d = graph.row_distances(i);
        mean_dist[i] = d.iter().sum::<f64>() / k as f64;
    }
    let mu = mean_dist.iter().sum::<f64>() / n as f64;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64;
    let cutoff = mu + std_ratio * libm::sqrt(var);
    let keep: Vec<bool> = mean_dist.iter().map(|&d| d <= cutoff).collect();
    let out = keep_subset(cloud, &keep);
    let report = FilterReport::between(cloud, &out, 0);
    Ok((out, report))
}

/// Remove points with strictly fewer than `min_neighbors` other points
/// within distance `r` (inclusive).
pub fn radius_outlier_removal(
    cloud: &PointCloud,
    r: f64,
    min_neighbors: usize,
) -> Result<(PointCloud, FilterReport)> {
    if min_neighbors == 0 {
        return Err(Error::InvalidParam {
            name: "min_neighbors",
            reason: "must be at least 1".into(),
        });
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("radius_outlier_removal"));
    }
    let tree = KdTree::build(&cloud.positions)?;
    let lists = tree.radius_graph(r, false)?;
    let keep: Vec<bool> = lists.iter().map(|l| l.len() >= min_neighbors).collect();
    let out = keep_subset(cloud, &keep);
    let report = FilterReport::between(cloud, &out, 0);
    Ok((out, report))
}

/// Collapse the cloud onto an axis-aligned voxel grid: one point per
/// occupied voxel at the member centroid, with component-wise mean color and
/// majority label (ties to the lowest class id). Output is ordered by voxel
/// key.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<(PointCloud, FilterReport)> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidParam {
            name: "voxel_size",
            reason: "must be positive".into(),
        });
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<u32>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = (
            libm::floor(p[0] / voxel_size) as i64,
            libm::floor(p[1] / voxel_size) as i64,
            libm::floor(p[2] / voxel_size) as i64,
        );
        voxels.entry(key).or_default().push(i as u32);
    }
    let mut positions = Vec::with_capacity(voxels.len());
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(voxels.len()));
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(voxels.len()));
    for members in voxels.values() {
        let m = members.len() as f64;
        let mut centroid = [0.0f64; 3];
        for &i in members {
            let p = cloud.positions[i as usize];
            for d in 0..3 {
                centroid[d] += p[d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= m;
        }
        positions.push(centroid);
        if let (Some(out), Some(src)) = (&mut colors, &cloud.colors) {
            let mut sums = [0.0f64; 3];
            for &i in members {
                for d in 0..3 {
                    sums[d] += src[i as usize][d] as f64;
                }
            }
            out.push([
                libm::round(sums[0] / m).clamp(0.0, 255.0) as u8,
                libm::round(sums[1] / m).clamp(0.0, 255.0) as u8,
                libm::round(sums[2] / m).clamp(0.0, 255.0) as u8,
            ]);
        }
        if let (Some(out), Some(src)) = (&mut labels, &cloud.labels) {
            let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
            for &i in members {
                *counts.entry(src[i as usize]).or_insert(0) += 1;
            }
            // BTreeMap iterates ascending, so strict > keeps the lowest id
            // among ties.
            let mut best = (0u8, 0usize);
            for (&label, &count) in &counts {
                if count > best.1 {
                    best = (label, count);
                }
            }
            out.push(best.0);
        }
    }
    let out = PointCloud {
        positions,
        colors,
        labels,
        schema_name: cloud.schema_name.clone(),
    };
    let report = FilterReport::between(cloud, &out, 0);
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphMode {
    Erode,
    Dilate,
}

/// One synchronous erosion/dilation pass on the labels of class `c` over a
/// KNN graph (self excluded). Dilation relabels a point to `c` when at least
/// `m` of its neighbors are `c`; erosion keeps `c` only under the same
/// condition, otherwise the point takes the majority label among its non-`c`
/// neighbors (ties to the lowest id). All decisions read pre-pass labels.
pub fn morphological_label_filter(
    cloud: &PointCloud,
    graph: &NeighborGraph,
    mode: MorphMode,
    class: u8,
    m: usize,
) -> Result<(PointCloud, FilterReport)> {
    let labels = cloud.labels()?;
    if graph.rows() != cloud.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "graph has {} rows for {} points",
            graph.rows(),
            cloud.len()
        )));
    }
    if m == 0 || m > graph.k {
        return Err(Error::InvalidParam {
            name: "m",
            reason: alloc::format!("threshold {m} outside 1..={}", graph.k),
        });
    }
    let mut new_labels = labels.to_vec();
    let mut relabeled = 0usize;
    for i in 0..cloud.len() {
        let neighbors = graph.row(i);
        let class_count = neighbors
            .iter()
            .filter(|&&j| labels[j as usize] == class)
            .count();
        match mode {
            MorphMode::Dilate => {
                if labels[i] != class && class_count >= m {
                    new_labels[i] = class;
                    relabeled += 1;
                }
            }
            MorphMode::Erode => {
                if labels[i] == class && class_count < m {
                    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
                    for &j in neighbors {
                        let l = labels[j as usize];
                        if l != class {
                            *counts.entry(l).or_insert(0) += 1;
                        }
                    }
                    // class_count < m <= k guarantees a non-class neighbor.
                    let mut best = (class, 0usize);
                    for (&label, &count) in &counts {
                        if count > best.1 {
                            best = (label, count);
                        }
                    }
                    if best.0 != class {
                        new_labels[i] = best.0;
                        relabeled += 1;
                    }
                }
            }
        }
    }
    let mut out = cloud.clone();
    out.labels = Some(new_labels);
    let report = FilterReport::between(cloud, &out, relabeled);
    Ok((out, report))
}

/// Per-cell terrain elevation on an XY grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundModel {
    pub cell_size: f64,
    pub cells: BTreeMap<(i64, i64), f64>,
}

impl GroundModel {
    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            libm::floor(x / self.cell_size) as i64,
            libm::floor(y / self.cell_size) as i64,
        )
    }

    /// Ground elevation at an XY location; empty cells fall back to the
    /// nearest non-empty cell (by cell-center distance, ties to the
    /// lexicographically smallest key).
    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let key = self.cell_of(x, y);
        if let Some(&z) = self.cells.get(&key) {
            return z;
        }
        let mut best = (f64::INFINITY, 0.0f64);
        for (&(ix, iy), &z) in &self.cells {
            let dx = (ix - key.0) as f64;
            let dy = (iy - key.1) as f64;
            let d2 = dx * dx + dy * dy;
            if d2 < best.0 {
                best = (d2, z);
            }
        }
        best.1
    }

    /// Height of a point above the modeled ground.
    pub fn height_above(&self, p: &[f64; 3]) -> f64 {
        p[2] - self.elevation(p[0], p[1])
    }
}

/// Estimate ground elevation per XY cell as the given percentile
/// (nearest-rank) of the member z values.
pub fn build_ground_model(cloud: &PointCloud, cell_size: f64, percentile: f64) -> Result<GroundModel> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("build_ground_model"));
    }
    if !(cell_size > 0.0) {
        return Err(Error::InvalidParam {
            name: "cell_size",
            reason: "must be positive".into(),
        });
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidParam {
            name: "percentile",
            reason: "must lie in [0, 100]".into(),
        });
    }
    let mut cells: BTreeMap<(i64, i64), Vec<f64>> = BTreeMap::new();
    for p in &cloud.positions {
        let key = (
            libm::floor(p[0] / cell_size) as i64,
            libm::floor(p[1] / cell_size) as i64,
        );
        cells.entry(key).or_default().push(p[2]);
    }
    let cells = cells
        .into_iter()
        .map(|(key, mut zs)| {
            zs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let n = zs.len();
            let rank = libm::ceil(percentile / 100.0 * n as f64) as usize;
            let idx = rank.saturating_sub(1).min(n - 1);
            (key, zs[idx])
        })
        .collect();
    Ok(GroundModel { cell_size, cells })
}

/// What to do with a point matched by a height rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    RelabelTo(u8),
    Remove,
}

/// A height-band rule: applies to points of `class` whose height above
/// ground lies in `[min_height, max_height)` (either bound optional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightRule {
    pub class: u8,
    pub min_height: Option<f64>,
    pub max_height: Option<f64>,
    pub action: RuleAction,
}

impl HeightRule {
    fn matches(&self, label: u8, height: f64) -> bool {
        label == self.class
            && self.min_height.map_or(true, |lo| height >= lo)
            && self.max_height.map_or(true, |hi| height < hi)
    }
}

/// Apply an ordered height-rule list: for each point the first matching
/// rule's action decides; unmatched points pass through. An empty rule list
/// is the identity.
pub fn height_filter(
    cloud: &PointCloud,
    ground: &GroundModel,
    rules: &[HeightRule],
) -> Result<(PointCloud, FilterReport)> {
    let labels = cloud.labels()?;
    let mut new_labels = labels.to_vec();
    let mut keep = vec![true; cloud.len()];
    let mut relabeled = 0usize;
    for (i, p) in cloud.positions.iter().enumerate() {
        let height = ground.height_above(p);
        for rule in rules {
            if rule.matches(labels[i], height) {
                match rule.action {
                    RuleAction::RelabelTo(target) => {
                        if new_labels[i] != target {
                            new_labels[i] = target;
                            relabeled += 1;
                        }
                    }
                    RuleAction::Remove => keep[i] = false,
                }
                break;
            }
        }
    }
    let mut relabeled_cloud = cloud.clone();
    relabeled_cloud.labels = Some(new_labels);
    let out = keep_subset(&relabeled_cloud, &keep);
    let report = FilterReport::between(cloud, &out, relabeled);
    Ok((out, report))
}

/// Relabel or remove points of `class` whose local height variation within
/// `radius` is below `min_variation` — flat impostors of classes that should
/// show significant elevation change.
pub fn height_variation_filter(
    cloud: &PointCloud,
    radius: f64,
    min_variation: f64,
    class: u8,
    action: RuleAction,
) -> Result<(PointCloud, FilterReport)> {
    let labels = cloud.labels()?;
    let variation = local_height_variation(cloud, radius)?;
    let mut new_labels = labels.to_vec();
    let mut keep = vec![true; cloud.len()];
    let mut relabeled = 0usize;
    for i in 0..cloud.len() {
        if labels[i] != class || variation[i] >= min_variation {
            continue;
        }
        match action {
            RuleAction::RelabelTo(target) => {
                if new_labels[i] != target {
                    new_labels[i] = target;
                    relabeled += 1;
                }
            }
            RuleAction::Remove => keep[i] = false,
        }
    }
    let mut relabeled_cloud = cloud.clone();
    relabeled_cloud.labels = Some(new_labels);
    let out = keep_subset(&relabeled_cloud, &keep);
    let report = FilterReport::between(cloud, &out, relabeled);
    Ok((out, report))
}

/// Per point, the z spread (max minus min) among radius-`r` neighbors, the
/// point itself included.
pub fn local_height_variation(cloud: &PointCloud, r: f64) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("local_height_variation"));
    }
    let tree = KdTree::build(&cloud.positions)?;
    let lists = tree.radius_graph(r, true)?;
    Ok(lists
        .iter()
        .map(|neighbors| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &j in neighbors {
                let z = cloud.positions[j as usize][2];
                lo = lo.min(z);
                hi = hi.max(z);
            }
            hi - lo
        })
        .collect())
}
