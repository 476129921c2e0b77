//! PCB1: a compact self-describing binary container for named arrays,
//! used for neighborhood/feature export and batch files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PCB1" | version u32 | array count u32 |
//!   per array: name_len u32 | name (utf-8) | dtype u8 | rank u8 |
//!              dims u64 x rank | payload (little-endian scalars)
//! ```
//!
//! Dtype codes: 1 = u8, 2 = u32, 3 = f32, 4 = f64, 5 = i64, 6 = u64.

use std::path::Path;

use urbanseg_core::kdtree::NeighborGraph;
use urbanseg_core::preprocess::{Batch, Transform};
use urbanseg_core::tensor::Tensor;
use urbanseg_core::PointCloud;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"PCB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    U8 { dims: Vec<u64>, data: Vec<u8> },
    U32 { dims: Vec<u64>, data: Vec<u32> },
    F32 { dims: Vec<u64>, data: Vec<f32> },
    F64 { dims: Vec<u64>, data: Vec<f64> },
    I64 { dims: Vec<u64>, data: Vec<i64> },
    U64 { dims: Vec<u64>, data: Vec<u64> },
}

impl Array {
    pub fn dims(&self) -> &[u64] {
        match self {
            Array::U8 { dims, .. }
            | Array::U32 { dims, .. }
            | Array::F32 { dims, .. }
            | Array::F64 { dims, .. }
            | Array::I64 { dims, .. }
            | Array::U64 { dims, .. } => dims,
        }
    }

    fn element_count(&self) -> usize {
        match self {
            Array::U8 { data, .. } => data.len(),
            Array::U32 { data, .. } => data.len(),
            Array::F32 { data, .. } => data.len(),
            Array::F64 { data, .. } => data.len(),
            Array::I64 { data, .. } => data.len(),
            Array::U64 { data, .. } => data.len(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Array::U8 { .. } => 1,
            Array::U32 { .. } => 2,
            Array::F32 { .. } => 3,
            Array::F64 { .. } => 4,
            Array::I64 { .. } => 5,
            Array::U64 { .. } => 6,
        }
    }

    fn check(&self) -> Result<()> {
        let expect: u64 = self.dims().iter().product();
        if expect != self.element_count() as u64 {
            return Err(CliError::format(format!(
                "array dims {:?} do not match {} elements",
                self.dims(),
                self.element_count()
            )));
        }
        Ok(())
    }
}

/// Ordered collection of uniquely named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayBundle {
    entries: Vec<(String, Array)>,
}

impl ArrayBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, array: Array) -> Result<()> {
        array.check()?;
        if self.get(name).is_some() {
            return Err(CliError::format(format!("duplicate array `{name}`")));
        }
        self.entries.push((name.to_string(), array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.dtype_code());
            out.push(array.dims().len() as u8);
            for &d in array.dims() {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match array {
                Array::U8 { data, .. } => out.extend_from_slice(data),
                Array::U32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Array::F32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Array::F64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Array::I64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Array::U64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if bytes.len() < *pos + n {
                return Err(CliError::format("truncated bundle"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(CliError::format("bad magic: not a PCB1 bundle"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CliError::format(format!(
                "unsupported bundle version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut bundle = ArrayBundle::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = core::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CliError::format("array name is not utf-8"))?
                .to_string();
            let dtype = take(&mut pos, 1)?[0];
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let elements: u64 = dims.iter().product();
            let elements = usize::try_from(elements)
                .map_err(|_| CliError::format("array too large"))?;
            let array = match dtype {
                1 => Array::U8 {
                    dims,
                    data: take(&mut pos, elements)?.to_vec(),
                },
                2 => {
                    let raw = take(&mut pos, elements * 4)?;
                    Array::U32 {
                        dims,
                        data: raw
                            .chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                3 => {
                    let raw = take(&mut pos, elements * 4)?;
                    Array::F32 {
                        dims,
                        data: raw
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                4 => {
                    let raw = take(&mut pos, elements * 8)?;
                    Array::F64 {
                        dims,
                        data: raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                5 => {
                    let raw = take(&mut pos, elements * 8)?;
                    Array::I64 {
                        dims,
                        data: raw
                            .chunks_exact(8)
                            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                6 => {
                    let raw = take(&mut pos, elements * 8)?;
                    Array::U64 {
                        dims,
                        data: raw
                            .chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                other => {
                    return Err(CliError::format(format!("unknown dtype code {other}")))
                }
            };
            bundle.push(&name, array)?;
        }
        if pos != bytes.len() {
            return Err(CliError::format(format!(
                "{} trailing bytes after last array",
                bytes.len() - pos
            )));
        }
        Ok(bundle)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn require<'a>(bundle: &'a ArrayBundle, name: &str) -> Result<&'a Array> {
    bundle
        .get(name)
        .ok_or_else(|| CliError::format(format!("bundle lacks array `{name}`")))
}

/// Export a neighbor graph alongside a feature matrix with matching rows.
pub fn write_array_bundle(graph: &NeighborGraph, features: &Tensor<f64>, path: &Path) -> Result<()> {
    if graph.rows() != features.rows() {
        return Err(urbanseg_core::Error::ShapeMismatch(format!(
            "graph has {} rows, features {}",
            graph.rows(),
            features.rows()
        ))
        .into());
    }
    let mut bundle = ArrayBundle::new();
    bundle.push(
        "neighbor_indices",
        Array::U32 {
            dims: vec![graph.rows() as u64, graph.k as u64],
            data: graph.indices.clone(),
        },
    )?;
    bundle.push(
        "neighbor_distances",
        Array::F64 {
            dims: vec![graph.rows() as u64, graph.k as u64],
            data: graph.distances.clone(),
        },
    )?;
    bundle.push(
        "features",
        Array::F64 {
            dims: vec![features.rows() as u64, features.cols() as u64],
            data: features.data().to_vec(),
        },
    )?;
    bundle.write(path)
}

/// Inverse of [`write_array_bundle`].
pub fn read_array_bundle(path: &Path) -> Result<(NeighborGraph, Tensor<f64>)> {
    let bundle = ArrayBundle::read(path)?;
    let idx = match require(&bundle, "neighbor_indices")? {
        Array::U32 { dims, data } if dims.len() == 2 => (dims.clone(), data.clone()),
        _ => return Err(CliError::format("`neighbor_indices` must be a u32 matrix")),
    };
    let dist = match require(&bundle, "neighbor_distances")? {
        Array::F64 { dims, data } if dims == &idx.0 => data.clone(),
        _ => {
            return Err(CliError::format(
                "`neighbor_distances` must be an f64 matrix matching indices",
            ))
        }
    };
    let features = match require(&bundle, "features")? {
        Array::F64 { dims, data } if dims.len() == 2 => {
            Tensor::from_vec(dims[0] as usize, dims[1] as usize, data.clone())
        }
        _ => return Err(CliError::format("`features` must be an f64 matrix")),
    };
    let graph = NeighborGraph {
        k: idx.0[1] as usize,
        indices: idx.1,
        distances: dist,
    };
    if graph.rows() != features.rows() {
        return Err(CliError::format("graph/feature row mismatch in bundle"));
    }
    Ok((graph, features))
}

/// Encode a bare point cloud as a PCB1 bundle (the `convert` subcommand).
pub fn cloud_to_bundle(cloud: &PointCloud) -> Result<ArrayBundle> {
    let n = cloud.len() as u64;
    let mut bundle = ArrayBundle::new();
    bundle.push(
        "positions",
        Array::F64 {
            dims: vec![n, 3],
            data: cloud
                .positions
                .iter()
                .flat_map(|p| p.iter().copied())
                .collect(),
        },
    )?;
    if let Some(colors) = &cloud.colors {
        bundle.push(
            "colors",
            Array::U8 {
                dims: vec![n, 3],
                data: colors.iter().flat_map(|c| c.iter().copied()).collect(),
            },
        )?;
    }
    if let Some(labels) = &cloud.labels {
        bundle.push(
            "labels",
            Array::U8 {
                dims: vec![n],
                data: labels.clone(),
            },
        )?;
    }
    Ok(bundle)
}

/// Decode a cloud bundle produced by [`cloud_to_bundle`].
pub fn cloud_from_bundle(bundle: &ArrayBundle, schema_name: &str) -> Result<PointCloud> {
    let positions = match require(bundle, "positions")? {
        Array::F64 { dims, data } if dims.len() == 2 && dims[1] == 3 => data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect::<Vec<_>>(),
        _ => return Err(CliError::format("`positions` must be an f64 (n, 3) matrix")),
    };
    let n = positions.len();
    let mut cloud = PointCloud::new(positions, schema_name);
    if let Some(array) = bundle.get("colors") {
        cloud.colors = Some(match array {
            Array::U8 { dims, data } if dims.len() == 2 && dims[1] == 3 && dims[0] as usize == n => {
                data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
            }
            _ => return Err(CliError::format("`colors` must be a u8 (n, 3) matrix")),
        });
    }
    if let Some(array) = bundle.get("labels") {
        cloud.labels = Some(match array {
            Array::U8 { dims, data } if dims.len() == 1 && dims[0] as usize == n => data.clone(),
            _ => return Err(CliError::format("`labels` must be a u8 (n,) vector")),
        });
    }
    Ok(cloud)
}

/// Encode a training batch as a PCB1 bundle.
pub fn batch_to_bundle(batch: &Batch) -> Result<ArrayBundle> {
    let n = batch.n_points() as u64;
    let mut bundle = ArrayBundle::new();
    bundle.push(
        "positions",
        Array::F64 {
            dims: vec![n, 3],
            data: batch
                .cloud
                .positions
                .iter()
                .flat_map(|p| p.iter().copied())
                .collect(),
        },
    )?;
    if let Some(colors) = &batch.cloud.colors {
        bundle.push(
            "colors",
            Array::U8 {
                dims: vec![n, 3],
                data: colors.iter().flat_map(|c| c.iter().copied()).collect(),
            },
        )?;
    }
    if let Some(labels) = &batch.cloud.labels {
        bundle.push(
            "labels",
            Array::U8 {
                dims: vec![n],
                data: labels.clone(),
            },
        )?;
    }
    bundle.push(
        "source_indices",
        Array::U32 {
            dims: vec![n],
            data: batch.source_indices.clone(),
        },
    )?;
    bundle.push(
        "translation",
        Array::F64 {
            dims: vec![3],
            data: batch.transform.translation.to_vec(),
        },
    )?;
    bundle.push(
        "tile",
        Array::I64 {
            dims: vec![2],
            data: vec![batch.tile.0, batch.tile.1],
        },
    )?;
    bundle.push(
        "seed",
        Array::U64 {
            dims: vec![1],
            data: vec![batch.seed],
        },
    )?;
    for (l, graph) in batch.graphs.iter().enumerate() {
        bundle.push(
            &format!("graph{l}.indices"),
            Array::U32 {
                dims: vec![graph.rows() as u64, graph.k as u64],
                data: graph.indices.clone(),
            },
        )?;
        bundle.push(
            &format!("graph{l}.distances"),
            Array::F64 {
                dims: vec![graph.rows() as u64, graph.k as u64],
                data: graph.distances.clone(),
            },
        )?;
        bundle.push(
            &format!("down{l}"),
            Array::U32 {
                dims: vec![batch.down_indices[l].len() as u64],
                data: batch.down_indices[l].clone(),
            },
        )?;
    }
    Ok(bundle)
}

/// Decode a batch bundle; `schema_name` is stamped on the cloud (bundles do
/// not carry it, the run manifest does).
pub fn batch_from_bundle(bundle: &ArrayBundle, schema_name: &str) -> Result<Batch> {
    let positions = match require(bundle, "positions")? {
        Array::F64 { dims, data } if dims.len() == 2 && dims[1] == 3 => data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect::<Vec<_>>(),
        _ => return Err(CliError::format("`positions` must be an f64 (n, 3) matrix")),
    };
    let n = positions.len();
    let mut cloud = PointCloud::new(positions, schema_name);
    if let Some(array) = bundle.get("colors") {
        cloud.colors = Some(match array {
            Array::U8 { dims, data } if dims.len() == 2 && dims[1] == 3 && dims[0] as usize == n => {
                data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
            }
            _ => return Err(CliError::format("`colors` must be a u8 (n, 3) matrix")),
        });
    }
    if let Some(array) = bundle.get("labels") {
        cloud.labels = Some(match array {
            Array::U8 { dims, data } if dims.len() == 1 && dims[0] as usize == n => data.clone(),
            _ => return Err(CliError::format("`labels` must be a u8 (n,) vector")),
        });
    }
    let source_indices = match require(bundle, "source_indices")? {
        Array::U32 { dims, data } if dims.len() == 1 && dims[0] as usize == n => data.clone(),
        _ => return Err(CliError::format("`source_indices` must be a u32 (n,) vector")),
    };
    let translation = match require(bundle, "translation")? {
        Array::F64 { dims, data } if dims == &[3] => [data[0], data[1], data[2]],
        _ => return Err(CliError::format("`translation` must be an f64 (3,) vector")),
    };
    let tile = match require(bundle, "tile")? {
        Array::I64 { dims, data } if dims == &[2] => (data[0], data[1]),
        _ => return Err(CliError::format("`tile` must be an i64 (2,) vector")),
    };
    let seed = match require(bundle, "seed")? {
        Array::U64 { dims, data } if dims == &[1] => data[0],
        _ => return Err(CliError::format("`seed` must be a u64 scalar")),
    };
    let mut graphs = Vec::new();
    let mut down_indices = Vec::new();
    for l in 0.. {
        let Some(idx) = bundle.get(&format!("graph{l}.indices")) else {
            break;
        };
        let (dims, indices) = match idx {
            Array::U32 { dims, data } if dims.len() == 2 => (dims.clone(), data.clone()),
            _ => return Err(CliError::format("graph indices must be a u32 matrix")),
        };
        let distances = match require(bundle, &format!("graph{l}.distances"))? {
            Array::F64 { dims: d, data } if d == &dims => data.clone(),
            _ => return Err(CliError::format("graph distances must match indices")),
        };
        graphs.push(NeighborGraph {
            k: dims[1] as usize,
            indices,
            distances,
        });
        let down = match require(bundle, &format!("down{l}"))? {
            Array::U32 { dims, data } if dims.len() == 1 => data.clone(),
            _ => return Err(CliError::format("down indices must be a u32 vector")),
        };
        down_indices.push(down);
    }
    Ok(Batch {
        cloud,
        transform: Transform { translation },
        source_indices,
        tile,
        seed,
        graphs,
        down_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use urbanseg_core::rng::Rng;

    fn random_bundle(seed: u64) -> ArrayBundle {
        let mut rng = Rng::new(seed);
        let mut bundle = ArrayBundle::new();
        let kinds = rng.below(5) + 1;
        for i in 0..kinds {
            let rows = rng.below(20) + 1;
            let cols = rng.below(8) + 1;
            let total = (rows * cols) as usize;
            let name = format!("array_{i}");
            let array = match rng.below(6) {
                0 => Array::U8 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.below(256) as u8).collect(),
                },
                1 => Array::U32 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.next_u32()).collect(),
                },
                2 => Array::F32 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.range_f64(-10.0, 10.0) as f32).collect(),
                },
                3 => Array::F64 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.range_f64(-1e6, 1e6)).collect(),
                },
                4 => Array::I64 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.next_u64() as i64).collect(),
                },
                _ => Array::U64 {
                    dims: vec![rows, cols],
                    data: (0..total).map(|_| rng.next_u64()).collect(),
                },
            };
            bundle.push(&name, array).unwrap();
        }
        bundle
    }

    #[test]
    fn roundtrip_random_bundles_bitwise() {
        for seed in 0..100 {
            let bundle = random_bundle(seed);
            let bytes = bundle.to_bytes();
            let back = ArrayBundle::from_bytes(&bytes).unwrap();
            assert_eq!(bundle, back, "seed {seed}");
            assert_eq!(bytes, back.to_bytes(), "seed {seed} bytes");
        }
    }

    #[test]
    fn large_bundle_payload_hash_is_stable() {
        // 1e4-point neighborhood bundle: the serialized payload hashes
        // identically before and after a round-trip.
        let mut rng = Rng::new(77);
        let n = 10_000usize;
        let k = 4usize;
        let graph = NeighborGraph {
            k,
            indices: (0..n * k).map(|_| rng.below(n as u64) as u32).collect(),
            distances: (0..n * k).map(|_| rng.range_f64(0.0, 5.0)).collect(),
        };
        let features = Tensor::from_vec(
            n,
            3,
            (0..n * 3).map(|_| rng.range_f64(-100.0, 100.0)).collect(),
        );
        let mut bundle = ArrayBundle::new();
        bundle
            .push(
                "neighbor_indices",
                Array::U32 {
                    dims: vec![n as u64, k as u64],
                    data: graph.indices.clone(),
                },
            )
            .unwrap();
        bundle
            .push(
                "neighbor_distances",
                Array::F64 {
                    dims: vec![n as u64, k as u64],
                    data: graph.distances.clone(),
                },
            )
            .unwrap();
        bundle
            .push(
                "features",
                Array::F64 {
                    dims: vec![n as u64, 3],
                    data: features.data().to_vec(),
                },
            )
            .unwrap();
        let bytes = bundle.to_bytes();
        let before = crate::manifest::fnv1a64_hex(&bytes);
        let back = ArrayBundle::from_bytes(&bytes).unwrap();
        let after = crate::manifest::fnv1a64_hex(&back.to_bytes());
        assert_eq!(before, after);
        assert_eq!(bundle, back);
    }

    #[test]
    fn bad_magic_and_truncation_error() {
        let bundle = random_bundle(5);
        let mut bytes = bundle.to_bytes();
        bytes[0] = b'X';
        assert!(ArrayBundle::from_bytes(&bytes).is_err());

        let bytes = bundle.to_bytes();
        assert!(ArrayBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let mut padded = bundle.to_bytes();
        padded.push(0);
        assert!(ArrayBundle::from_bytes(&padded).is_err());
    }

    #[test]
    fn graph_bundle_roundtrip() {
        let dir = std::env::temp_dir().join("urbanseg-bundle-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("graph.pcb");

        let graph = NeighborGraph {
            k: 2,
            indices: vec![1, 2, 0, 2, 0, 1, 2, 1],
            distances: vec![0.5, 1.0, 0.5, 0.7, 0.7, 1.0, 0.2, 0.9],
        };
        let features = Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.25).collect());
        write_array_bundle(&graph, &features, &path).unwrap();
        let (g, f) = read_array_bundle(&path).unwrap();
        assert_eq!(g, graph);
        assert_eq!(f, features);

        let short = Tensor::from_vec(3, 3, vec![0.0; 9]);
        assert!(write_array_bundle(&graph, &short, &path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
