//! Split-scoped access to a container: resolves a split, drops UNAVAILABLE
//! sources, and serves examples by split-relative index from an in-memory
//! or out-of-core backend.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::container::{self, SourceDescriptor};
use crate::error::{Error, Result};
use crate::tensor::TensorData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    InMemory,
    OutOfCore,
}

struct SourceWindow {
    descriptor: SourceDescriptor,
    /// Absolute row offset of the split within the source.
    split_start: usize,
    /// Preloaded split rows (in-memory backend only).
    preloaded: Option<TensorData>,
}

/// Read-only view of one split of a container.
pub struct Dataset {
    path: PathBuf,
    split: String,
    windows: Vec<SourceWindow>,
    num_examples: usize,
    backend: Backend,
    io_reads: AtomicU64,
}

impl Dataset {
    /// Opens a split. All sources the split offers must have intervals of
    /// one common length; IN_MEMORY preloads those rows once.
    pub fn open(container_path: &Path, split_name: &str, backend: Backend) -> Result<Dataset> {
        let header = container::read_header(container_path)?;
        let split = header.split(split_name)?;

        let mut windows = Vec::new();
        let mut num_examples: Option<usize> = None;
        // header source order keeps items deterministic
        for descriptor in &header.sources {
            let Some(Some(interval)) = split.per_source.get(&descriptor.name) else {
                continue; // UNAVAILABLE or unmentioned
            };
            let len = interval.len() as usize;
            match num_examples {
                None => num_examples = Some(len),
                Some(n) if n != len => {
                    return Err(Error::SizeMismatch(format!(
                        "split {split_name:?}: source {:?} offers {len} examples, others {n}",
                        descriptor.name
                    )))
                }
                _ => {}
            }
            windows.push(SourceWindow {
                descriptor: descriptor.clone(),
                split_start: interval.start as usize,
                preloaded: None,
            });
        }
        let num_examples = num_examples.unwrap_or(0);

        if backend == Backend::InMemory {
            for window in &mut windows {
                let data = container::read_slice_with(
                    container_path,
                    &window.descriptor,
                    window.split_start,
                    window.split_start + num_examples,
                )?;
                window.preloaded = Some(data);
            }
        }

        Ok(Dataset {
            path: container_path.to_path_buf(),
            split: split_name.to_string(),
            windows,
            num_examples,
            backend,
            io_reads: AtomicU64::new(0),
        })
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Source names the split offers, in header order.
    pub fn sources(&self) -> Vec<String> {
        self.windows
            .iter()
            .map(|w| w.descriptor.name.clone())
            .collect()
    }

    /// Disk reads performed so far (out-of-core coalescing is observable
    /// only through this counter).
    pub fn io_reads(&self) -> u64 {
        self.io_reads.load(Ordering::Relaxed)
    }

    /// Rows stacked in the order given; duplicates allowed (bootstrap needs
    /// them). Indices are split-relative.
    pub fn get_examples(&self, indices: &[usize]) -> Result<IndexMap<String, TensorData>> {
        for &i in indices {
            if i >= self.num_examples {
                return Err(Error::IndexOutOfBounds(format!(
                    "example {i} of {}",
                    self.num_examples
                )));
            }
        }
        let mut out = IndexMap::new();
        for window in &self.windows {
            let tensor = match &window.preloaded {
                Some(data) => data.gather_rows(indices)?,
                None => self.gather_out_of_core(window, indices)?,
            };
            out.insert(window.descriptor.name.clone(), tensor);
        }
        Ok(out)
    }

    /// One contiguous read per run of consecutive indices.
    fn gather_out_of_core(&self, window: &SourceWindow, indices: &[usize]) -> Result<TensorData> {
        let mut row_shape = window.descriptor.shape.clone();
        row_shape[0] = 0;
        if indices.is_empty() {
            return TensorData::from_le_bytes(window.descriptor.dtype, row_shape, &[]);
        }
        let mut parts = Vec::new();
        let mut run_start = 0;
        while run_start < indices.len() {
            let mut run_stop = run_start + 1;
            while run_stop < indices.len() && indices[run_stop] == indices[run_stop - 1] + 1 {
                run_stop += 1;
            }
            let first = window.split_start + indices[run_start];
            let part = container::read_slice_with(
                &self.path,
                &window.descriptor,
                first,
                first + (run_stop - run_start),
            )?;
            self.io_reads.fetch_add(1, Ordering::Relaxed);
            parts.push(part);
            run_start = run_stop;
        }
        TensorData::concat_rows(&parts)
    }
}
