//! Turn raw area clouds into uniform training batches: grid tiling,
//! fixed-count resampling, centering, and per-layer neighborhood graphs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kdtree::{KdTree, NeighborGraph};
use crate::network::LayerConfig;
use crate::rng::{derive_seed, Rng};

// Substream tags for batch construction stages.
const STREAM_RESAMPLE: u64 = 0x01;
const STREAM_DOWNSAMPLE: u64 = 0x02;

/// Partition of a cloud's point indices into square XY tiles.
///
/// The tile of a point is `floor((xy - origin) / tile_size)` with the origin
/// at the minimum corner of the bounding box; empty tiles are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: f64,
    pub origin: [f64; 2],
    pub tiles: BTreeMap<(i64, i64), Vec<u32>>,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }
}

/// Assign every point to exactly one tile.
pub fn tile(cloud: &PointCloud, tile_size: f64) -> Result<TileGrid> {
    if !(tile_size > 0.0) {
        return Err(Error::InvalidParam {
            name: "tile_size",
            reason: "must be positive".into(),
        });
    }
    let mut origin = [f64::INFINITY; 2];
    for p in &cloud.positions {
        origin[0] = origin[0].min(p[0]);
        origin[1] = origin[1].min(p[1]);
    }
    if cloud.is_empty() {
        origin = [0.0, 0.0];
    }
    let mut tiles: BTreeMap<(i64, i64), Vec<u32>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let ix = libm::floor((p[0] - origin[0]) / tile_size) as i64;
        let iy = libm::floor((p[1] - origin[1]) / tile_size) as i64;
        tiles.entry((ix, iy)).or_default().push(i as u32);
    }
    Ok(TileGrid {
        tile_size,
        origin,
        tiles,
    })
}

/// Row indices realizing [`resample_to_count`]'s contract: identity when
/// `n == n_points`; a sorted without-replacement subsample when shrinking;
/// all originals followed by with-replacement duplicates when growing.
pub fn resample_indices(n: usize, n_points: usize, seed: u64) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::EmptyInput("resample"));
    }
    if n_points == 0 {
        return Err(Error::InvalidParam {
            name: "n_points",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = Rng::new(seed);
    if n == n_points {
        return Ok((0..n as u32).collect());
    }
    if n > n_points {
        return Ok(rng.sample_without_replacement(n, n_points));
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for _ in n..n_points {
        idx.push(rng.below(n as u64) as u32);
    }
    Ok(idx)
}

/// Resample a cloud to exactly `n_points`, deterministically under `seed`.
pub fn resample_to_count(cloud: &PointCloud, n_points: usize, seed: u64) -> Result<PointCloud> {
    let idx = resample_indices(cloud.len(), n_points, seed)?;
    Ok(cloud.select(&idx))
}

/// Rigid transform record produced by [`center_and_scale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub translation: [f64; 3],
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] + self.translation[0],
            p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Transform {
        Transform {
            translation: [
                -self.translation[0],
                -self.translation[1],
                -self.translation[2],
            ],
        }
    }
}

/// Translate the cloud so its centroid sits at the origin. Labels and colors
/// are untouched; the returned transform maps original positions to centered
/// ones (its inverse restores them).
pub fn center_and_scale(cloud: &PointCloud) -> (PointCloud, Transform) {
    if cloud.is_empty() {
        return (cloud.clone(), Transform::identity());
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.positions {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    let t = Transform {
        translation: [-centroid[0] / n, -centroid[1] / n, -centroid[2] / n],
    };
    let mut out = cloud.clone();
    for p in out.positions.iter_mut() {
        *p = t.apply(*p);
    }
    (out, t)
}

/// A network-ready batch: a fixed-size centered cloud plus the per-layer
/// neighbor graphs and decimation index sets the encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub cloud: PointCloud,
    pub transform: Transform,
    /// Original cloud index of every batch row (provenance for stitching
    /// predictions back).
    pub source_indices: Vec<u32>,
    pub tile: (i64, i64),
    pub seed: u64,
    /// One KNN graph per layer; row counts follow the decimation schedule.
    pub graphs: Vec<NeighborGraph>,
    /// Per layer, the retained row indices into that layer's point set.
    pub down_indices: Vec<Vec<u32>>,
}

impl Batch {
    pub fn n_points(&self) -> usize {
        self.cloud.len()
    }

    /// Point counts per encoder level, including the bottleneck.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.graphs.len() + 1);
        let mut n = self.cloud.len();
        counts.push(n);
        for d in &self.down_indices {
            n = d.len();
            counts.push(n);
        }
        counts
    }

    /// Positions of every encoder level, from full resolution down to the
    /// bottleneck.
    pub fn level_positions(&self) -> Vec<Vec<[f64; 3]>> {
        let mut levels = Vec::with_capacity(self.down_indices.len() + 1);
        levels.push(self.cloud.positions.clone());
        for d in &self.down_indices {
            let prev: &Vec<[f64; 3]> = levels.last().unwrap();
            levels.push(d.iter().map(|&i| prev[i as usize]).collect());
        }
        levels
    }
}

/// Build one batch from a tile's cloud.
///
/// `source_indices`, when given, carries the tile rows' indices into the
/// original (pre-tiling) cloud; otherwise rows index the tile cloud itself.
pub fn make_batch(
    tile_cloud: &PointCloud,
    source_indices: Option<&[u32]>,
    config: &LayerConfig,
    n_points: usize,
    tile_id: (i64, i64),
    seed: u64,
) -> Result<Batch> {
    config.validate(n_points)?;
    if let Some(src) = source_indices {
        if src.len() != tile_cloud.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} source indices for {} tile points",
                src.len(),
                tile_cloud.len()
            )));
        }
    }

    let rows = resample_indices(tile_cloud.len(), n_points, derive_seed(seed, STREAM_RESAMPLE))?;
    let resampled = tile_cloud.select(&rows);
    let (centered, transform) = center_and_scale(&resampled);

    let source_of_row: Vec<u32> = match source_indices {
        Some(src) => rows.iter().map(|&r| src[r as usize]).collect(),
        None => rows.clone(),
    };

    let mut graphs = Vec::with_capacity(config.num_layers);
    let mut down_indices = Vec::with_capacity(config.num_layers);
    let mut level_positions = centered.positions.clone();
    for layer in 0..config.num_layers {
        if config.k > level_positions.len() {
            return Err(Error::KTooLarge {
                requested: config.k,
                available: level_positions.len(),
            });
        }
        let tree = KdTree::build(&level_positions)?;
        // LocSE neighborhoods include the point itself as neighbor 0.
        graphs.push(tree.knn_graph(config.k, true)?);
        let retained = crate::network::random_downsample(
            level_positions.len(),
            config.decimation_ratio,
            derive_seed(seed, STREAM_DOWNSAMPLE | ((layer as u64) << 8)),
        )?;
        level_positions = retained
            .iter()
            .map(|&i| level_positions[i as usize])
            .collect();
        down_indices.push(retained);
    }

    Ok(Batch {
        cloud: centered,
        transform,
        source_indices: source_of_row,
        tile: tile_id,
        seed,
        graphs,
        down_indices,
    })
}

/// Split a tile into enough batches that every point is forwarded at least
/// once: a seeded shuffle partitioned into `n_points`-sized parts, the last
/// part padded by resampling. Used by prediction, where coverage matters.
pub fn coverage_batches(
    tile_cloud: &PointCloud,
    source_indices: &[u32],
    config: &LayerConfig,
    n_points: usize,
    tile_id: (i64, i64),
    seed: u64,
) -> Result<Vec<Batch>> {
    if tile_cloud.is_empty() {
        return Err(Error::EmptyInput("coverage_batches"));
    }
    let n = tile_cloud.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = Rng::new(derive_seed(seed, 0xC0FE));
    rng.shuffle(&mut order);

    let part_count = n.div_ceil(n_points);
    let mut batches = Vec::with_capacity(part_count);
    for part in 0..part_count {
        let start = part * n_points;
        let end = (start + n_points).min(n);
        let part_rows = &order[start..end];
        let part_cloud = tile_cloud.select(part_rows);
        let part_sources: Vec<u32> = part_rows
            .iter()
            .map(|&r| source_indices[r as usize])
            .collect();
        batches.push(make_batch(
            &part_cloud,
            Some(&part_sources),
            config,
            n_points,
            tile_id,
            derive_seed(seed, 0xBA7C_0000 | part as u64),
        )?);
    }
    Ok(batches)
}

/// Seed for a tile's batch, per the pipeline's parallelism contract:
/// tiles get independent streams so worker scheduling can never matter.
pub fn tile_seed(global_seed: u64, tile_index: u64) -> u64 {
    global_seed ^ tile_index
}

/// Human-readable tile name used in file names and manifests.
pub fn tile_name(tile: (i64, i64)) -> String {
    alloc::format!("tile_{}_{}", tile.0, tile.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::TARGET_SCHEMA_NAME;

    fn grid_cloud(nx: usize, ny: usize, spacing: f64) -> PointCloud {
        let mut positions = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                positions.push([i as f64 * spacing, j as f64 * spacing, 0.0]);
            }
        }
        PointCloud::new(positions, TARGET_SCHEMA_NAME)
    }

    #[test]
    fn tiling_square_into_four() {
        // Uniform 100x100 m square, tile size 50 -> exactly 4 non-empty tiles.
        let mut rng = Rng::new(1);
        let positions: Vec<[f64; 3]> = (0..4000)
            .map(|_| [rng.range_f64(0.0, 100.0), rng.range_f64(0.0, 100.0), 0.0])
            .collect();
        let cloud = PointCloud::new(positions, TARGET_SCHEMA_NAME);
        let grid = tile(&cloud, 50.0).unwrap();
        // The max corner lands in a 3rd row/col tile only if a coordinate is
        // exactly 100.0, which a half-open uniform draw never produces.
        assert_eq!(grid.tile_count(), 4);
    }

    #[test]
    fn tile_size_at_least_extent_gives_one_tile() {
        let cloud = grid_cloud(10, 10, 1.0);
        let grid = tile(&cloud, 100.0).unwrap();
        assert_eq!(grid.tile_count(), 1);
        assert_eq!(grid.tiles.values().next().unwrap().len(), 100);
    }

    #[test]
    fn tiling_is_a_partition() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let n = 1 + rng.below(500) as usize;
            let positions: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.range_f64(-30.0, 30.0),
                        rng.range_f64(-30.0, 30.0),
                        rng.range_f64(0.0, 5.0),
                    ]
                })
                .collect();
            let cloud = PointCloud::new(positions, TARGET_SCHEMA_NAME);
            let grid = tile(&cloud, 7.5).unwrap();
            let mut seen = alloc::vec![false; n];
            for members in grid.tiles.values() {
                for &i in members {
                    assert!(!seen[i as usize], "point {i} in two tiles");
                    seen[i as usize] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn tile_rejects_non_positive_size() {
        let cloud = grid_cloud(2, 2, 1.0);
        assert!(tile(&cloud, 0.0).is_err());
        assert!(tile(&cloud, -1.0).is_err());
    }

    #[test]
    fn resample_identity_when_counts_match() {
        let cloud = grid_cloud(3, 4, 1.0);
        let out = resample_to_count(&cloud, 12, 7).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn resample_shrink_gives_distinct_originals() {
        let idx = resample_indices(10, 4, 3).unwrap();
        assert_eq!(idx.len(), 4);
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert!(idx.iter().all(|&i| i < 10));
    }

    #[test]
    fn resample_exact_count_for_all_sizes() {
        for n in 1..20usize {
            for n_points in 1..20usize {
                let idx = resample_indices(n, n_points, 11).unwrap();
                assert_eq!(idx.len(), n_points);
            }
        }
        assert!(resample_indices(0, 5, 0).is_err());
    }

    #[test]
    fn resample_grow_keeps_all_originals_with_replacement_stats() {
        // N=3 -> n=5: the multiset always contains all three originals, and
        // over many seeds each original's duplicate count matches the
        // uniform-with-replacement expectation within 3 sigma.
        let trials: u64 = 10_000;
        let mut extra_counts = [0u64; 3];
        for seed in 0..trials {
            let idx = resample_indices(3, 5, seed).unwrap();
            assert_eq!(&idx[..3], &[0, 1, 2]);
            for &i in &idx[3..] {
                extra_counts[i as usize] += 1;
            }
        }
        // Each of the 2 extra draws hits class i with p = 1/3.
        let n_draws = (2 * trials) as f64;
        let mean = n_draws / 3.0;
        let sigma = libm::sqrt(n_draws * (1.0 / 3.0) * (2.0 / 3.0));
        for &c in &extra_counts {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "count {c} vs mean {mean} sigma {sigma}"
            );
        }
    }

    #[test]
    fn centering_and_inverse() {
        let mut rng = Rng::new(5);
        let positions: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.range_f64(100.0, 200.0),
                    rng.range_f64(-50.0, 50.0),
                    rng.range_f64(0.0, 30.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(positions.clone(), TARGET_SCHEMA_NAME);
        let (centered, t) = center_and_scale(&cloud);
        let mut c = [0.0f64; 3];
        for p in &centered.positions {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        for d in 0..3 {
            assert!((c[d] / 200.0).abs() < 1e-12);
        }
        let inv = t.inverse();
        for (orig, cent) in positions.iter().zip(&centered.positions) {
            let back = inv.apply(*cent);
            for d in 0..3 {
                assert!((back[d] - orig[d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_point_moves_to_origin() {
        let cloud = PointCloud::new(alloc::vec![[5.0, -3.0, 2.0]], TARGET_SCHEMA_NAME);
        let (centered, _) = center_and_scale(&cloud);
        assert_eq!(centered.positions[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn make_batch_level_counts_and_graph_rows() {
        let config = LayerConfig {
            k: 8,
            ..LayerConfig::default()
        };
        let cloud = grid_cloud(40, 40, 0.5); // 1600 points
        let batch = make_batch(&cloud, None, &config, 1024, (0, 0), 9).unwrap();
        assert_eq!(batch.level_counts(), alloc::vec![1024, 256, 64, 16, 4]);
        let rows: Vec<usize> = batch.graphs.iter().map(|g| g.rows()).collect();
        assert_eq!(rows, alloc::vec![1024, 256, 64, 16]);
        for g in &batch.graphs {
            assert_eq!(g.k, 8);
        }
    }

    #[test]
    fn make_batch_is_deterministic() {
        let config = LayerConfig {
            k: 4,
            ..LayerConfig::default()
        };
        let cloud = grid_cloud(20, 20, 1.0);
        let a = make_batch(&cloud, None, &config, 256, (1, 2), 42).unwrap();
        let b = make_batch(&cloud, None, &config, 256, (1, 2), 42).unwrap();
        assert_eq!(a, b);
        let c = make_batch(&cloud, None, &config, 256, (1, 2), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn make_batch_graphs_match_independent_knn() {
        let config = LayerConfig {
            k: 4,
            ..LayerConfig::default()
        };
        let cloud = grid_cloud(16, 16, 1.0);
        let batch = make_batch(&cloud, None, &config, 256, (0, 0), 17).unwrap();
        let levels = batch.level_positions();
        for (layer, graph) in batch.graphs.iter().enumerate() {
            let tree = KdTree::build(&levels[layer]).unwrap();
            let rebuilt = tree.knn_graph(4, true).unwrap();
            assert_eq!(graph, &rebuilt, "layer {layer}");
        }
    }

    #[test]
    fn coverage_batches_cover_every_point() {
        let config = LayerConfig {
            k: 4,
            ..LayerConfig::default()
        };
        let cloud = grid_cloud(25, 25, 1.0); // 625 points
        let sources: Vec<u32> = (0..625).collect();
        let batches = coverage_batches(&cloud, &sources, &config, 256, (0, 0), 3).unwrap();
        assert_eq!(batches.len(), 3);
        let mut covered = alloc::vec![false; 625];
        for b in &batches {
            assert_eq!(b.n_points(), 256);
            for &s in &b.source_indices {
                covered[s as usize] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }
}
