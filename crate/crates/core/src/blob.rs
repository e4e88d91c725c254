//! Shared binary-blob conventions: 64-byte alignment, sha256 digests, and
//! the magic ∥ u32-LE-length ∥ JSON-header ∥ blobs file layout used by both
//! the dataset container and training snapshots.

use std::io::{Read, Seek, SeekFrom, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ALIGNMENT: u64 = 64;

pub fn align_up(offset: u64) -> u64 {
    offset.div_ceil(ALIGNMENT) * ALIGNMENT
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Byte offset of each blob when the header occupies `header_len` bytes.
/// Blobs start at the next 64-byte boundary after the header and each blob
/// is aligned to 64 bytes.
pub fn blob_offsets(magic_len: u64, header_len: u64, blob_lens: &[u64]) -> Vec<u64> {
    let mut cursor = magic_len + 4 + header_len;
    let mut offsets = Vec::with_capacity(blob_lens.len());
    for &len in blob_lens {
        cursor = align_up(cursor);
        offsets.push(cursor);
        cursor += len;
    }
    offsets
}

/// Writes `magic ∥ u32 LE header length ∥ header ∥ aligned blobs`.
/// `make_header` receives the blob offsets; because the offsets depend on
/// the header length, the layout is iterated to a fixed point.
pub fn write_file(
    path: &std::path::Path,
    magic: &[u8; 8],
    blobs: &[Vec<u8>],
    mut make_header: impl FnMut(&[u64]) -> Result<Vec<u8>>,
) -> Result<()> {
    let blob_lens: Vec<u64> = blobs.iter().map(|b| b.len() as u64).collect();
    let mut header = make_header(&blob_offsets(8, 0, &blob_lens))?;
    for _ in 0..32 {
        let next = make_header(&blob_offsets(8, header.len() as u64, &blob_lens))?;
        if next.len() == header.len() {
            header = next;
            break;
        }
        header = next;
    }
    let offsets = blob_offsets(8, header.len() as u64, &blob_lens);

    let mut file = std::fs::File::create(path)?;
    file.write_all(magic)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    let mut cursor = 8 + 4 + header.len() as u64;
    for (blob, &offset) in blobs.iter().zip(&offsets) {
        let pad = offset - cursor;
        file.write_all(&vec![0u8; pad as usize])?;
        file.write_all(blob)?;
        cursor = offset + blob.len() as u64;
    }
    file.sync_all()?;
    Ok(())
}

/// Reads and checks the magic, then returns the JSON header bytes. The file
/// cursor is left right after the header.
pub fn read_header_bytes(file: &mut std::fs::File, path: &std::path::Path, magic: &[u8; 8]) -> Result<Vec<u8>> {
    let mut got = [0u8; 8];
    file.read_exact(&mut got).map_err(|_| Error::BadMagic {
        path: path.display().to_string(),
        detail: "file shorter than magic".into(),
    })?;
    if &got != magic {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            detail: format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            ),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::MalformedHeader("truncated header length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; len];
    file.read_exact(&mut header)
        .map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    Ok(header)
}

/// Reads `len` bytes at `offset` without touching any other byte range.
pub fn read_range(file: &mut std::fs::File, offset: u64, len: usize) -> Result<Vec<u8>> {
    file.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; len];
    file.read_exact(&mut buf)?;
    Ok(buf)
}
