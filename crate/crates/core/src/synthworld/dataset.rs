//! Line-delimited world serialization: a header record with spec and seed,
//! then one record per tile and per district. Floats are written in shortest
//! round-trip form, so export and re-import reproduce a world bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{District, Tile, World, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("dataset is inconsistent: {0}")]
    World(#[from] WorldError),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum DatasetRecord {
    Header {
        spec: WorldSpec,
        seed: u64,
        /// Latent district factors, indexed by district id. Part of the header
        /// because they are world-level latents, not per-tile observations.
        factors: Vec<f64>,
    },
    Tile(Tile),
    District(District),
}

pub fn export_dataset<W: Write>(world: &World, writer: W) -> Result<(), DatasetError> {
    let mut writer = BufWriter::new(writer);
    let mut emit = |record: &DatasetRecord| -> Result<(), DatasetError> {
        // worlds contain only finite floats, so serialization cannot fail
        serde_json::to_writer(&mut writer, record).expect("world records are serializable");
        writer.write_all(b"\n")?;
        Ok(())
    };
    emit(&DatasetRecord::Header {
        spec: world.spec().clone(),
        seed: world.seed(),
        factors: world.factors().to_vec(),
    })?;
    for tile in world.tiles() {
        emit(&DatasetRecord::Tile(tile.clone()))?;
    }
    for district in world.districts() {
        emit(&DatasetRecord::District(district.clone()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn import_dataset<R: BufRead>(reader: R) -> Result<World, DatasetError> {
    let mut header: Option<(WorldSpec, u64, Vec<f64>)> = None;
    let mut tiles: Vec<Tile> = Vec::new();
    let mut districts: Vec<District> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: line_no, source })?;
        match record {
            DatasetRecord::Header { spec, seed, factors } => {
                if header.is_some() {
                    return Err(DatasetError::Structure {
                        line: line_no,
                        message: "second header record".into(),
                    });
                }
                header = Some((spec, seed, factors));
            }
            DatasetRecord::Tile(tile) => tiles.push(tile),
            DatasetRecord::District(district) => districts.push(district),
        }
        if header.is_none() {
            return Err(DatasetError::Structure {
                line: line_no,
                message: "first record must be the header".into(),
            });
        }
    }
    let Some((spec, seed, factors)) = header else {
        return Err(DatasetError::Structure { line: 0, message: "empty dataset".into() });
    };
    tiles.sort_by_key(|t| t.id);
    districts.sort_by_key(|d| d.id);
    Ok(World::from_parts(spec, seed, tiles, districts, factors)?)
}

pub fn save_dataset(world: &World, path: &Path) -> Result<(), DatasetError> {
    export_dataset(world, File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<World, DatasetError> {
    import_dataset(BufReader::new(File::open(path)?))
}
