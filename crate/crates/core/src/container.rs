//! Bit-exact on-disk dataset container.
//!
//! Layout: magic `"BFDC0001"` ∥ u32 LE header length ∥ UTF-8 JSON header ∥
//! binary blobs, each aligned to the next 64-byte boundary. Tensor payloads
//! are little-endian row-major; the header answers the four metadata
//! questions: which sources exist, how they are split, which sources a
//! split does not offer, and what each axis means.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::{DType, TensorData};

pub const MAGIC: &[u8; 8] = b"BFDC0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub name: String,
    pub dtype: DType,
    /// First dimension is the total example count.
    pub shape: Vec<usize>,
    /// One label per dimension; the first is always "batch".
    pub axis_labels: Vec<String>,
    /// Absolute byte offset of the blob, filled in by the writer.
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

impl SourceDescriptor {
    pub fn num_examples(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn row_nbytes(&self) -> u64 {
        let row: usize = self.shape[1..].iter().product();
        (row * self.dtype.size_of()) as u64
    }
}

/// Half-open row interval within a source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub stop: u64,
}

impl Interval {
    pub fn len(&self) -> u64 {
        self.stop - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.stop == self.start
    }
}

/// A named split; `None` marks a source the split does not offer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub name: String,
    pub per_source: BTreeMap<String, Option<Interval>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    /// Tool name and version that produced the file.
    pub created_by: String,
    /// Exact invocation that produced the file.
    pub command_line: String,
    pub sources: Vec<SourceDescriptor>,
    pub splits: Vec<SplitDescriptor>,
}

impl ContainerHeader {
    pub fn source(&self, name: &str) -> Result<&SourceDescriptor> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSource(name.into()))
    }

    pub fn split(&self, name: &str) -> Result<&SplitDescriptor> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSplit(name.into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub created_by: String,
    pub command_line: String,
}

/// Payload handed to the writer: descriptor-sans-offsets plus the tensor.
#[derive(Clone, Debug)]
pub struct SourcePayload {
    pub name: String,
    pub axis_labels: Vec<String>,
    pub data: TensorData,
}

fn header_invariant_errors(header: &ContainerHeader) -> Vec<String> {
    let mut errors = Vec::new();
    for src in &header.sources {
        if src.axis_labels.len() != src.shape.len() {
            errors.push(format!(
                "source {:?}: {} axis labels for {} dimensions",
                src.name,
                src.axis_labels.len(),
                src.shape.len()
            ));
        }
        if src.axis_labels.first().map(String::as_str) != Some("batch") {
            errors.push(format!(
                "source {:?}: first axis label must be \"batch\"",
                src.name
            ));
        }
        let expected = (src.shape.iter().product::<usize>() * src.dtype.size_of()) as u64;
        if src.nbytes != expected {
            errors.push(format!(
                "source {:?}: nbytes {} does not match shape {:?} of {}",
                src.name, src.nbytes, src.shape, src.dtype
            ));
        }
    }
    for split in &header.splits {
        for (source, interval) in &split.per_source {
            let Some(interval) = interval else { continue };
            match header.sources.iter().find(|s| &s.name == source) {
                None => errors.push(format!(
                    "split {:?} references unknown source {source:?}",
                    split.name
                )),
                Some(src) => {
                    let n = src.num_examples() as u64;
                    if interval.start > interval.stop || interval.stop > n {
                        errors.push(format!(
                            "split {:?}: interval [{}, {}) of source {source:?} outside [0, {n}]",
                            split.name, interval.start, interval.stop
                        ));
                    }
                }
            }
        }
    }
    errors
}

/// Writes a container. Offsets and digests are computed here; the input
/// splits are validated against the payload shapes.
pub fn write_container(
    path: &Path,
    sources: &[SourcePayload],
    splits: &[SplitDescriptor],
    provenance: &Provenance,
) -> Result<ContainerHeader> {
    for payload in sources {
        if payload.axis_labels.len() != payload.data.rank() {
            return Err(Error::ShapeMismatch(format!(
                "source {:?}: {} axis labels for rank-{} tensor",
                payload.name,
                payload.axis_labels.len(),
                payload.data.rank()
            )));
        }
    }
    let blobs: Vec<Vec<u8>> = sources.iter().map(|s| s.data.to_le_bytes()).collect();
    let digests: Vec<String> = blobs.iter().map(|b| blob::sha256_hex(b)).collect();

    let make_header = |offsets: &[u64]| -> ContainerHeader {
        ContainerHeader {
            format_version: FORMAT_VERSION,
            created_by: provenance.created_by.clone(),
            command_line: provenance.command_line.clone(),
            sources: sources
                .iter()
                .zip(offsets)
                .zip(&digests)
                .zip(&blobs)
                .map(|(((payload, &offset), digest), bytes)| SourceDescriptor {
                    name: payload.name.clone(),
                    dtype: payload.data.dtype(),
                    shape: payload.data.shape().to_vec(),
                    axis_labels: payload.axis_labels.clone(),
                    offset,
                    nbytes: bytes.len() as u64,
                    sha256: digest.clone(),
                })
                .collect(),
            splits: splits.to_vec(),
        }
    };

    // validate invariants before any bytes hit the disk
    let probe = make_header(&vec![0; sources.len()]);
    let errors = header_invariant_errors(&probe);
    if !errors.is_empty() {
        return Err(Error::MalformedHeader(errors.join("; ")));
    }

    let mut result = None;
    blob::write_file(path, MAGIC, &blobs, |offsets| {
        let header = make_header(offsets);
        let bytes = serde_json::to_vec(&header)?;
        result = Some(header);
        Ok(bytes)
    })?;
    Ok(result.expect("write_file invokes make_header"))
}

fn parse_header(path: &Path) -> Result<ContainerHeader> {
    let mut file = std::fs::File::open(path)?;
    let bytes = blob::read_header_bytes(&mut file, path, MAGIC)?;
    let header: ContainerHeader = serde_json::from_slice(&bytes)
        .map_err(|e| Error::MalformedHeader(format!("invalid header json: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(header.format_version));
    }
    Ok(header)
}

/// Parses magic, version, and the JSON header; blobs are not touched.
pub fn read_header(path: &Path) -> Result<ContainerHeader> {
    let header = parse_header(path)?;
    let errors = header_invariant_errors(&header);
    if !errors.is_empty() {
        return Err(Error::MalformedHeader(errors.join("; ")));
    }
    Ok(header)
}

/// Reads rows `[start, stop)` of one source with a seek and a bounded read;
/// no other rows' bytes are read.
pub fn read_slice(path: &Path, source_name: &str, start: usize, stop: usize) -> Result<TensorData> {
    let header = read_header(path)?;
    let src = header.source(source_name)?;
    read_slice_with(path, src, start, stop)
}

/// Like [`read_slice`] but reuses an already parsed descriptor.
pub fn read_slice_with(
    path: &Path,
    src: &SourceDescriptor,
    start: usize,
    stop: usize,
) -> Result<TensorData> {
    let n = src.num_examples();
    if start > stop || stop > n {
        return Err(Error::RangeOutOfBounds(format!(
            "rows [{start}, {stop}) of source {:?} with {n} examples",
            src.name
        )));
    }
    let row = src.row_nbytes();
    let mut file = std::fs::File::open(path)?;
    let bytes = blob::read_range(
        &mut file,
        src.offset + start as u64 * row,
        ((stop - start) as u64 * row) as usize,
    )?;
    let mut shape = src.shape.clone();
    shape[0] = stop - start;
    TensorData::from_le_bytes(src.dtype, shape, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationCheck {
    pub subject: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    fn push(&mut self, subject: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(ValidationCheck {
            subject: subject.into(),
            ok,
            detail: detail.into(),
        });
    }
}

/// Recomputes every blob digest and re-checks all header invariants.
/// Corruption is reported, not thrown; only I/O failures error.
pub fn validate(path: &Path) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let header = match parse_header(path) {
        Ok(header) => header,
        Err(Error::Io(e)) => return Err(Error::Io(e)),
        Err(e) => {
            report.push("header", false, e.to_string());
            return Ok(report);
        }
    };
    let invariant_errors = header_invariant_errors(&header);
    if invariant_errors.is_empty() {
        report.push("header", true, "all invariants hold");
    } else {
        for e in invariant_errors {
            report.push("header", false, e);
        }
    }
    let mut file = std::fs::File::open(path)?;
    for src in &header.sources {
        match blob::read_range(&mut file, src.offset, src.nbytes as usize) {
            Ok(bytes) => {
                let digest = blob::sha256_hex(&bytes);
                if digest == src.sha256 {
                    report.push(&src.name, true, "sha256 ok");
                } else {
                    report.push(
                        &src.name,
                        false,
                        format!("sha256 mismatch: header {}, blob {digest}", src.sha256),
                    );
                }
            }
            Err(e) => report.push(&src.name, false, format!("blob unreadable: {e}")),
        }
    }
    Ok(report)
}

/// Human-readable description of a container; format is stable.
pub fn info(path: &Path) -> Result<String> {
    let header = read_header(path)?;
    let mut out = String::new();
    out.push_str(&format!("format version: {}\n", header.format_version));
    out.push_str(&format!("created by: {}\n", header.created_by));
    out.push_str(&format!("command line: {}\n", header.command_line));
    out.push_str("sources:\n");
    if header.sources.is_empty() {
        out.push_str("  no sources\n");
    }
    for src in &header.sources {
        let dims: Vec<String> = src.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "  {}  {}  shape [{}]  axes [{}]  {} bytes\n",
            src.name,
            src.dtype,
            dims.join(", "),
            src.axis_labels.join(", "),
            src.nbytes
        ));
    }
    out.push_str("splits:\n");
    if header.splits.is_empty() {
        out.push_str("  no splits\n");
    }
    for split in &header.splits {
        let mut parts = Vec::new();
        for (source, interval) in &split.per_source {
            match interval {
                Some(iv) => parts.push(format!("{} [{}, {})", source, iv.start, iv.stop)),
                None => parts.push(format!("{source} UNAVAILABLE")),
            }
        }
        out.push_str(&format!("  {}  {}\n", split.name, parts.join("  ")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn provenance() -> Provenance {
        Provenance {
            created_by: "batchflow-test".into(),
            command_line: "unit-test".into(),
        }
    }

    fn two_source_payloads() -> Vec<SourcePayload> {
        // 4x2 integer source filled with 10*row + col
        let x = Tensor::new(
            vec![4, 2],
            (0..4)
                .flat_map(|r| (0..2).map(move |c| (10 * r + c) as i64))
                .collect(),
        )
        .unwrap();
        let y = Tensor::new(vec![4, 1], vec![0u8, 1, 0, 1]).unwrap();
        vec![
            SourcePayload {
                name: "x".into(),
                axis_labels: vec!["batch".into(), "feature".into()],
                data: x.into(),
            },
            SourcePayload {
                name: "targets".into(),
                axis_labels: vec!["batch".into(), "label".into()],
                data: y.into(),
            },
        ]
    }

    fn split_map(entries: &[(&str, Option<Interval>)]) -> BTreeMap<String, Option<Interval>> {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn two_splits() -> Vec<SplitDescriptor> {
        vec![
            SplitDescriptor {
                name: "train".into(),
                per_source: split_map(&[
                    ("x", Some(Interval { start: 0, stop: 3 })),
                    ("targets", Some(Interval { start: 0, stop: 3 })),
                ]),
            },
            SplitDescriptor {
                name: "test".into(),
                per_source: split_map(&[
                    ("x", Some(Interval { start: 3, stop: 4 })),
                    ("targets", None),
                ]),
            },
        ]
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let written =
            write_container(&path, &two_source_payloads(), &two_splits(), &provenance()).unwrap();
        let read = read_header(&path).unwrap();
        assert_eq!(written, read);
        assert_eq!(read.sources[0].nbytes, 64); // 4*2 i64
        assert_eq!(read.splits[1].per_source["targets"], None);
        for src in &read.sources {
            assert_eq!(src.offset % blob::ALIGNMENT, 0);
        }
    }

    #[test]
    fn shape_4x2_f64_is_64_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let t = Tensor::<f64>::zeros(vec![4, 2]);
        let payload = vec![SourcePayload {
            name: "x".into(),
            axis_labels: vec!["batch".into(), "feature".into()],
            data: t.into(),
        }];
        let header = write_container(&path, &payload, &[], &provenance()).unwrap();
        assert_eq!(header.sources[0].nbytes, 64);
    }

    #[test]
    fn read_slice_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        write_container(&path, &two_source_payloads(), &two_splits(), &provenance()).unwrap();

        let full = read_slice(&path, "x", 0, 4).unwrap();
        assert_eq!(
            full,
            TensorData::I64(Tensor::new(vec![4, 2], vec![0, 1, 10, 11, 20, 21, 30, 31]).unwrap())
        );

        // expected values computed from the generator formula 10*row + col
        let mid = read_slice(&path, "x", 1, 3).unwrap();
        assert_eq!(
            mid,
            TensorData::I64(Tensor::new(vec![2, 2], vec![10, 11, 20, 21]).unwrap())
        );

        let empty = read_slice(&path, "x", 2, 2).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);

        assert!(read_slice(&path, "x", 3, 5).is_err());
        assert!(read_slice(&path, "nope", 0, 1).is_err());
    }

    #[test]
    fn slices_concatenate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        write_container(&path, &two_source_payloads(), &[], &provenance()).unwrap();
        let a = read_slice(&path, "x", 0, 2).unwrap();
        let b = read_slice(&path, "x", 2, 4).unwrap();
        let joined = TensorData::concat_rows(&[a, b]).unwrap();
        assert!(joined.bits_eq(&read_slice(&path, "x", 0, 4).unwrap()));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        std::fs::write(&path, b"XXXX0000rest").unwrap();
        assert!(matches!(read_header(&path), Err(Error::BadMagic { .. })));

        let path2 = dir.path().join("t.bfdc");
        write_container(&path2, &two_source_payloads(), &[], &provenance()).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..20]).unwrap();
        assert!(matches!(
            read_header(&path2),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn validate_detects_payload_flip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let header =
            write_container(&path, &two_source_payloads(), &two_splits(), &provenance()).unwrap();
        assert!(validate(&path).unwrap().passed());

        let mut bytes = std::fs::read(&path).unwrap();
        let offset = header.sources[0].offset as usize;
        bytes[offset + 3] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let report = validate(&path).unwrap();
        assert!(!report.passed());
        let by_subject: Vec<(&str, bool)> = report
            .checks
            .iter()
            .map(|c| (c.subject.as_str(), c.ok))
            .collect();
        assert!(by_subject.contains(&("x", false)));
        assert!(by_subject.contains(&("targets", true)));
    }

    #[test]
    fn validate_reports_header_invariant_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        write_container(&path, &two_source_payloads(), &[], &provenance()).unwrap();

        // edit nbytes in the JSON header so it mismatches the shape
        let bytes = std::fs::read(&path).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_str = String::from_utf8(bytes[12..12 + len].to_vec()).unwrap();
        let edited = header_str.replace("\"nbytes\":64", "\"nbytes\":65");
        assert_ne!(header_str, edited);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        std::fs::write(&path, &out).unwrap();

        let report = validate(&path).unwrap();
        assert!(!report.passed());
        assert!(report.checks.iter().any(|c| c.subject == "header" && !c.ok));
    }

    #[test]
    fn zero_example_source_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let payload = vec![SourcePayload {
            name: "empty".into(),
            axis_labels: vec!["batch".into(), "feature".into()],
            data: Tensor::<f32>::zeros(vec![0, 3]).into(),
        }];
        write_container(&path, &payload, &[], &provenance()).unwrap();
        assert!(validate(&path).unwrap().passed());
        let back = read_slice(&path, "empty", 0, 0).unwrap();
        assert_eq!(back.shape(), &[0, 3]);
        assert_eq!(back.dtype(), DType::F32);
    }

    #[test]
    fn split_out_of_range_rejected_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        let splits = vec![SplitDescriptor {
            name: "train".into(),
            per_source: split_map(&[("x", Some(Interval { start: 0, stop: 9 }))]),
        }];
        assert!(write_container(&path, &two_source_payloads(), &splits, &provenance()).is_err());
    }

    #[test]
    fn info_text_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bfdc");
        write_container(&path, &two_source_payloads(), &two_splits(), &provenance()).unwrap();
        let text = info(&path).unwrap();
        assert!(text.contains("command line: unit-test"));
        assert!(text.contains("x  i64  shape [4, 2]  axes [batch, feature]  64 bytes"));
        assert!(text.contains("targets UNAVAILABLE"));

        let path2 = dir.path().join("nosplits.bfdc");
        write_container(&path2, &two_source_payloads(), &[], &provenance()).unwrap();
        assert!(info(&path2).unwrap().contains("no splits"));
    }
}
