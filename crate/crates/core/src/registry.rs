//! Built-in dataset registry: checksummed download of raw files and
//! conversion into containers.
//!
//! The registry ships two offline synthetic datasets whose raw files are
//! fabricated deterministically from fixed seeds; the downloader verifies
//! digests and is idempotent (valid cached files are skipped, tampered ones
//! regenerated).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::blob::sha256_hex;
use crate::container::{self, Interval, Provenance, SourcePayload, SplitDescriptor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SYNTH_BLOBS: &str = "synth-blobs";
pub const SYNTH_SEQ: &str = "synth-seq";

pub const SYNTH_BLOBS_EXAMPLES: usize = 200;
const SYNTH_BLOBS_SEED: u64 = 42;
pub const SYNTH_SEQ_EXAMPLES: usize = 60;
pub const SYNTH_SEQ_MAX_LEN: usize = 12;
pub const SYNTH_SEQ_VOCAB: usize = 10;
const SYNTH_SEQ_SEED: u64 = 4242;

pub struct RawFileSpec {
    pub filename: &'static str,
    pub sha256: &'static str,
    generate: fn() -> Vec<u8>,
}

pub struct DatasetEntry {
    pub name: &'static str,
    pub raw_files: &'static [RawFileSpec],
}

/// Two Gaussian clusters at (-2,-2) and (+2,+2), std 0.5. Per example the
/// class is drawn first, then the two coordinates.
fn synth_blobs_bytes() -> (Vec<u8>, Vec<u8>) {
    let mut rng = Rng::seed(SYNTH_BLOBS_SEED);
    let mut features = Vec::with_capacity(SYNTH_BLOBS_EXAMPLES * 16);
    let mut targets = Vec::with_capacity(SYNTH_BLOBS_EXAMPLES);
    for _ in 0..SYNTH_BLOBS_EXAMPLES {
        let class = rng.bounded(2).expect("nonzero bound") as u8;
        let center = if class == 0 { -2.0 } else { 2.0 };
        for _ in 0..2 {
            let coord = center + 0.5 * rng.normal();
            features.extend_from_slice(&coord.to_le_bytes());
        }
        targets.push(class);
    }
    (features, targets)
}

/// Integer token sequences: length 4 + bounded(9), tokens bounded(10),
/// zero-padded to the maximum length, plus a lengths column.
fn synth_seq_bytes() -> (Vec<u8>, Vec<u8>) {
    let mut rng = Rng::seed(SYNTH_SEQ_SEED);
    let mut tokens = Vec::with_capacity(SYNTH_SEQ_EXAMPLES * SYNTH_SEQ_MAX_LEN * 8);
    let mut lengths = Vec::with_capacity(SYNTH_SEQ_EXAMPLES * 8);
    for _ in 0..SYNTH_SEQ_EXAMPLES {
        let len = 4 + rng.bounded(9).expect("nonzero bound") as usize;
        for t in 0..SYNTH_SEQ_MAX_LEN {
            let token: i64 = if t < len {
                i64::from(rng.bounded(SYNTH_SEQ_VOCAB as u32).expect("nonzero bound"))
            } else {
                0
            };
            tokens.extend_from_slice(&token.to_le_bytes());
        }
        lengths.extend_from_slice(&(len as i64).to_le_bytes());
    }
    (tokens, lengths)
}

fn blobs_features() -> Vec<u8> {
    synth_blobs_bytes().0
}

fn blobs_targets() -> Vec<u8> {
    synth_blobs_bytes().1
}

fn seq_tokens() -> Vec<u8> {
    synth_seq_bytes().0
}

fn seq_lengths() -> Vec<u8> {
    synth_seq_bytes().1
}

// Digests frozen from the deterministic generators above.
const ENTRIES: &[DatasetEntry] = &[
    DatasetEntry {
        name: SYNTH_BLOBS,
        raw_files: &[
            RawFileSpec {
                filename: "synth-blobs-features.f64",
                sha256: "882f017406d26539e3d198a3af4ab6a50527fa911b71b18d7eac04cc00e5b9eb",
                generate: blobs_features,
            },
            RawFileSpec {
                filename: "synth-blobs-targets.u8",
                sha256: "7a742572e0a2d09787038b61a29792fcfa45d91761ac9003e4ca91205d8cdd9f",
                generate: blobs_targets,
            },
        ],
    },
    DatasetEntry {
        name: SYNTH_SEQ,
        raw_files: &[
            RawFileSpec {
                filename: "synth-seq-tokens.i64",
                sha256: "6105199e6c228e9684486c1fb083652ffc9bb2e0c7f8c8dc6e5b259793ab9092",
                generate: seq_tokens,
            },
            RawFileSpec {
                filename: "synth-seq-lengths.i64",
                sha256: "d0906487ab58eb9b55b0669e2bad2fbb99b079ba594db8e75da4726d85661120",
                generate: seq_lengths,
            },
        ],
    },
];

pub fn lookup(name: &str) -> Result<&'static DatasetEntry> {
    ENTRIES
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownDataset(name.into()))
}

pub fn dataset_names() -> Vec<&'static str> {
    ENTRIES.iter().map(|e| e.name).collect()
}

/// Outcome of fetching one raw file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FetchOutcome {
    /// Valid file already present; nothing was written.
    Cached,
    /// File written (fresh, or replacing an invalid cached copy).
    Written,
}

/// Fetches the raw files of a dataset into `dest_dir`, verifying digests.
/// Valid existing files are skipped; invalid ones are regenerated.
pub fn download(name: &str, dest_dir: &Path) -> Result<Vec<(PathBuf, FetchOutcome)>> {
    let entry = lookup(name)?;
    std::fs::create_dir_all(dest_dir)?;
    let mut outcomes = Vec::new();
    for spec in entry.raw_files {
        let path = dest_dir.join(spec.filename);
        if path.exists() {
            let existing = std::fs::read(&path)?;
            if sha256_hex(&existing) == spec.sha256 {
                outcomes.push((path, FetchOutcome::Cached));
                continue;
            }
        }
        let bytes = (spec.generate)();
        let digest = sha256_hex(&bytes);
        if digest != spec.sha256 {
            return Err(Error::DigestMismatch {
                path: path.display().to_string(),
                expected: spec.sha256.into(),
                actual: digest,
            });
        }
        std::fs::write(&path, &bytes)?;
        outcomes.push((path, FetchOutcome::Written));
    }
    Ok(outcomes)
}

/// Reads and digest-checks one raw file.
fn read_raw(raw_dir: &Path, spec: &RawFileSpec) -> Result<Vec<u8>> {
    let path = raw_dir.join(spec.filename);
    if !path.exists() {
        return Err(Error::MissingRawFile(path.display().to_string()));
    }
    let bytes = std::fs::read(&path)?;
    let digest = sha256_hex(&bytes);
    if digest != spec.sha256 {
        return Err(Error::DigestMismatch {
            path: path.display().to_string(),
            expected: spec.sha256.into(),
            actual: digest,
        });
    }
    Ok(bytes)
}

fn sequential_splits(sources: &[&str], train_stop: u64, total: u64) -> Vec<SplitDescriptor> {
    let map = |start: u64, stop: u64| -> BTreeMap<String, Option<Interval>> {
        sources
            .iter()
            .map(|s| (s.to_string(), Some(Interval { start, stop })))
            .collect()
    };
    vec![
        SplitDescriptor {
            name: "train".into(),
            per_source: map(0, train_stop),
        },
        SplitDescriptor {
            name: "test".into(),
            per_source: map(train_stop, total),
        },
    ]
}

/// Converts digest-checked raw files into a container, embedding the exact
/// invocation in the provenance fields.
pub fn convert(
    name: &str,
    raw_dir: &Path,
    out_path: &Path,
    provenance: &Provenance,
) -> Result<container::ContainerHeader> {
    let entry = lookup(name)?;
    match entry.name {
        SYNTH_BLOBS => {
            let features = read_raw(raw_dir, &entry.raw_files[0])?;
            let targets = read_raw(raw_dir, &entry.raw_files[1])?;
            let n = SYNTH_BLOBS_EXAMPLES;
            let payloads = vec![
                SourcePayload {
                    name: "features".into(),
                    axis_labels: vec!["batch".into(), "feature".into()],
                    data: Tensor::<f64>::from_le_bytes(vec![n, 2], &features)?.into(),
                },
                SourcePayload {
                    name: "targets".into(),
                    axis_labels: vec!["batch".into(), "label".into()],
                    data: Tensor::<u8>::from_le_bytes(vec![n, 1], &targets)?.into(),
                },
            ];
            let splits = sequential_splits(&["features", "targets"], (n * 4 / 5) as u64, n as u64);
            container::write_container(out_path, &payloads, &splits, provenance)
        }
        SYNTH_SEQ => {
            let tokens = read_raw(raw_dir, &entry.raw_files[0])?;
            let lengths = read_raw(raw_dir, &entry.raw_files[1])?;
            let n = SYNTH_SEQ_EXAMPLES;
            let payloads = vec![
                SourcePayload {
                    name: "tokens".into(),
                    axis_labels: vec!["batch".into(), "time".into()],
                    data: Tensor::<i64>::from_le_bytes(vec![n, SYNTH_SEQ_MAX_LEN], &tokens)?.into(),
                },
                SourcePayload {
                    name: "lengths".into(),
                    axis_labels: vec!["batch".into(), "length".into()],
                    data: Tensor::<i64>::from_le_bytes(vec![n, 1], &lengths)?.into(),
                },
            ];
            let splits = sequential_splits(&["tokens", "lengths"], (n * 4 / 5) as u64, n as u64);
            container::write_container(out_path, &payloads, &splits, provenance)
        }
        _ => unreachable!("lookup covers all entries"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_dataset_errors() {
        assert!(matches!(
            download("no-such-set", Path::new("/tmp")),
            Err(Error::UnknownDataset(_))
        ));
    }

    #[test]
    fn download_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let first = download(SYNTH_BLOBS, dir.path()).unwrap();
        assert!(first.iter().all(|(_, o)| *o == FetchOutcome::Written));
        let second = download(SYNTH_BLOBS, dir.path()).unwrap();
        assert!(second.iter().all(|(_, o)| *o == FetchOutcome::Cached));
    }

    #[test]
    fn tampered_cache_is_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let outcomes = download(SYNTH_BLOBS, dir.path()).unwrap();
        let path = outcomes[0].0.clone();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let again = download(SYNTH_BLOBS, dir.path()).unwrap();
        assert_eq!(again[0].1, FetchOutcome::Written);
        assert_eq!(again[1].1, FetchOutcome::Cached);
    }

    #[test]
    fn convert_blobs_layout() {
        let dir = tempfile::tempdir().unwrap();
        download(SYNTH_BLOBS, dir.path()).unwrap();
        let out = dir.path().join("synth-blobs.bfdc");
        let prov = Provenance {
            created_by: "batchflow-test".into(),
            command_line: "convert-test".into(),
        };
        let header = convert(SYNTH_BLOBS, dir.path(), &out, &prov).unwrap();
        assert_eq!(header.sources[0].shape, vec![200, 2]);
        assert_eq!(header.sources[1].shape, vec![200, 1]);
        assert_eq!(
            header.splits[0].per_source["features"],
            Some(Interval { start: 0, stop: 160 })
        );
        assert_eq!(header.command_line, "convert-test");
        assert!(container::validate(&out).unwrap().passed());
    }

    #[test]
    fn convert_missing_raw_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.bfdc");
        let prov = Provenance {
            created_by: "t".into(),
            command_line: "t".into(),
        };
        assert!(matches!(
            convert(SYNTH_BLOBS, dir.path(), &out, &prov),
            Err(Error::MissingRawFile(_))
        ));
    }

    #[test]
    fn convert_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        download(SYNTH_SEQ, dir.path()).unwrap();
        let prov = Provenance {
            created_by: "t".into(),
            command_line: "same".into(),
        };
        let out1 = dir.path().join("a.bfdc");
        let out2 = dir.path().join("b.bfdc");
        convert(SYNTH_SEQ, dir.path(), &out1, &prov).unwrap();
        convert(SYNTH_SEQ, dir.path(), &out2, &prov).unwrap();
        assert_eq!(std::fs::read(out1).unwrap(), std::fs::read(out2).unwrap());
    }

    #[test]
    fn seq_lengths_in_range() {
        let (tokens, lengths) = synth_seq_bytes();
        assert_eq!(tokens.len(), SYNTH_SEQ_EXAMPLES * SYNTH_SEQ_MAX_LEN * 8);
        for chunk in lengths.chunks_exact(8) {
            let len = i64::from_le_bytes(chunk.try_into().unwrap());
            assert!((4..=12).contains(&len));
        }
    }
}

