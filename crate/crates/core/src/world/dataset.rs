//! Line-oriented dataset files. One JSON object per line holds the sample
//! seed, the generator's scenario fields and the rendered target sequence;
//! a sibling `<file>.manifest.json` records the generator version, seed
//! range, count and a SHA-256 of the data file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{generate_parking, generate_scene, Kinematics, ParkingCommand, Scenario, SPOT_COUNT};
use crate::codec::{Codec, CodecError, TemplateSpec, Vocabulary};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("dataset count must be at least 1")]
    EmptyDataset,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Driving,
    Parking,
}

impl DatasetKind {
    pub fn template(self) -> TemplateSpec {
        match self {
            DatasetKind::Driving => TemplateSpec::driving(),
            DatasetKind::Parking => TemplateSpec::parking(),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "driving" => Ok(DatasetKind::Driving),
            "parking" => Ok(DatasetKind::Parking),
            other => Err(format!("unknown dataset kind {other:?} (expected driving or parking)")),
        }
    }
}

/// Train and validation samples are told apart by seed parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Even seeds.
    Train,
    /// Odd seeds.
    Val,
}

impl Split {
    pub fn contains(self, seed: u64) -> bool {
        (seed % 2 == 0) == (self == Split::Train)
    }
}

/// The first `count` seeds at or after `start` that belong to `split`.
pub fn split_seeds(start: u64, count: usize, split: Split) -> Vec<u64> {
    (start..).filter(|&s| split.contains(s)).take(count).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetRecord {
    Driving {
        seed: u64,
        scenario: Scenario,
        kinematics: Kinematics,
        instruction: String,
        truth: String,
    },
    Parking {
        seed: u64,
        command: ParkingCommand,
        occupied: Vec<usize>,
        entrance_y: f64,
        best_spot: usize,
        truth: String,
    },
}

impl DatasetRecord {
    pub fn generate(kind: DatasetKind, seed: u64, vocab: &Vocabulary, codec: &Codec) -> Result<Self, CodecError> {
        Ok(match kind {
            DatasetKind::Driving => {
                let s = generate_scene(seed, vocab);
                DatasetRecord::Driving {
                    seed,
                    scenario: s.scenario,
                    kinematics: s.kinematics,
                    instruction: s.scenario.instruction().to_string(),
                    truth: codec.encode(&s.truth)?.render(vocab),
                }
            }
            DatasetKind::Parking => {
                let s = generate_parking(seed, vocab);
                DatasetRecord::Parking {
                    seed,
                    command: s.command,
                    occupied: (0..SPOT_COUNT).filter(|&i| s.occupied[i]).collect(),
                    entrance_y: s.entrance.y,
                    best_spot: s.best_spot,
                    truth: codec.encode(&s.truth())?.render(vocab),
                }
            }
        })
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetRecord::Driving { seed, .. } | DatasetRecord::Parking { seed, .. } => *seed,
        }
    }

    pub fn truth(&self) -> &str {
        match self {
            DatasetRecord::Driving { truth, .. } | DatasetRecord::Parking { truth, .. } => truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub kind: DatasetKind,
    pub seed_start: u64,
    pub count: usize,
    pub template: TemplateSpec,
    pub sha256: String,
    /// Resolved run configuration of the command that wrote the file.
    pub provenance: String,
}

impl DatasetManifest {
    pub fn path_for(data: &Path) -> PathBuf {
        let mut name = data.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        data.with_file_name(name)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> WorldError + '_ {
    move |source| WorldError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes samples for seeds `seed_start .. seed_start + count` to `path` and
/// the manifest next to it.
pub fn emit_dataset(
    path: &Path,
    count: usize,
    seed_start: u64,
    kind: DatasetKind,
    provenance: &str,
) -> Result<DatasetManifest, WorldError> {
    if count == 0 {
        return Err(WorldError::EmptyDataset);
    }
    let vocab = Vocabulary::standard();
    let codec = Codec::new(kind.template());
    let mut body = Vec::new();
    for seed in seed_start..seed_start + count as u64 {
        let rec = DatasetRecord::generate(kind, seed, &vocab, &codec)?;
        serde_json::to_writer(&mut body, &rec).expect("records serialize");
        body.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&body).map_err(io_err(path))?;
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION,
        kind,
        seed_start,
        count,
        template: kind.template(),
        sha256: Sha256::digest(&body).iter().map(|b| format!("{b:02x}")).collect(),
        provenance: provenance.to_string(),
    };
    let mpath = DatasetManifest::path_for(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, WorldError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
