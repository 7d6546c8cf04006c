//! On-disk dataset: `manifest.json`, `world.json` and `queries.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{Palette, PointInstance, Submap, TextQuery, Vec2, World};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORLD_FILE: &str = "world.json";
pub const QUERIES_FILE: &str = "queries.jsonl";

/// Generation parameters recorded next to the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub extent: Vec2,
    pub instance_count: usize,
    pub submap_side: f64,
    pub submap_stride: f64,
    pub num_hints: usize,
    pub query_seed: u64,
    /// The last `test_queries` lines of `queries.jsonl` are held out.
    pub train_queries: usize,
    pub test_queries: usize,
    pub palette: Palette,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    seed: u64,
    extent: Vec2,
    instances: Vec<PointInstance>,
    submaps: Vec<Submap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub world: World,
    pub queries: Vec<TextQuery>,
}

impl Dataset {
    pub fn train(&self) -> &[TextQuery] {
        &self.queries[..self.manifest.train_queries.min(self.queries.len())]
    }

    pub fn test(&self) -> &[TextQuery] {
        &self.queries[self.manifest.train_queries.min(self.queries.len())..]
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the dataset directory, creating it if needed.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = serde_json::to_vec_pretty(&dataset.manifest).expect("manifest serializes");
    manifest.push(b'\n');
    write_file(&manifest_path, &manifest)?;

    let world = WorldFile {
        seed: dataset.world.seed,
        extent: dataset.world.extent,
        instances: dataset.world.instances.clone(),
        submaps: dataset.world.submaps.clone(),
    };
    let mut bytes = serde_json::to_vec(&world).expect("world serializes");
    bytes.push(b'\n');
    write_file(&dir.join(WORLD_FILE), &bytes)?;

    let qpath = dir.join(QUERIES_FILE);
    let file = fs::File::create(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let mut w = BufWriter::new(file);
    for q in &dataset.queries {
        serde_json::to_writer(&mut w, q).expect("query serializes");
        w.write_all(b"\n").map_err(|e| Error::io(&qpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&qpath, e))?;
    Ok(manifest_path)
}

fn parse_error(path: &Path, line_offset: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line_offset + e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| parse_error(&path, 0, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            message: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;

    let wpath = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let wf: WorldFile = serde_json::from_str(&text).map_err(|e| parse_error(&wpath, 0, e))?;
    let mut submaps = wf.submaps;
    for (record, s) in submaps.iter_mut().enumerate() {
        s.instances = Vec::with_capacity(s.instance_indices.len());
        for &i in &s.instance_indices {
            let inst = wf.instances.get(i).ok_or_else(|| Error::Format {
                path: wpath.clone(),
                message: format!("submap record {record} references missing instance {i}"),
            })?;
            s.instances.push(inst.clone());
        }
    }
    let world = World {
        seed: wf.seed,
        extent: wf.extent,
        instances: wf.instances,
        submaps,
    };

    let qpath = dir.join(QUERIES_FILE);
    let file = fs::File::open(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let mut queries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&qpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: TextQuery = serde_json::from_str(&line).map_err(|e| parse_error(&qpath, i, e))?;
        queries.push(q);
    }
    if queries.len() != manifest.train_queries + manifest.test_queries {
        return Err(Error::Format {
            path: qpath,
            message: format!(
                "expected {} queries, found {}",
                manifest.train_queries + manifest.test_queries,
                queries.len()
            ),
        });
    }
    Ok(Dataset {
        manifest,
        world,
        queries,
    })
}

/// Generates a world and queries and packages them with their manifest.
pub fn build_dataset(
    seed: u64,
    extent: Vec2,
    instance_count: usize,
    train_queries: usize,
    test_queries: usize,
    num_hints: usize,
    palette: &Palette,
) -> Result<Dataset> {
    let world = crate::scenegen::generate_world(seed, extent, instance_count, palette)?;
    let query_seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let queries = crate::scenegen::generate_queries(
        &world,
        train_queries + test_queries,
        num_hints,
        query_seed,
    )?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        extent,
        instance_count,
        submap_side: crate::scenegen::SUBMAP_SIDE,
        submap_stride: crate::scenegen::SUBMAP_STRIDE,
        num_hints,
        query_seed,
        train_queries,
        test_queries,
        palette: palette.clone(),
    };
    Ok(Dataset {
        manifest,
        world,
        queries,
    })
}
