//! TCP batch server and client.
//!
//! The server runs a pipeline (typically in its own OS process, see the
//! `serve` CLI subcommand) and answers one frame per `NEXT` request over a
//! length-prefixed binary protocol. The client wraps the connection in the
//! ordinary stream interface; for every pipeline spec the remote item
//! sequence is bitwise identical to local execution.
//!
//! Handshake: server sends 8-byte magic `"BFSRV001"` and a u16 LE protocol
//! version. Frames are `u32 LE total_length (excluding itself) ∥ u8 type ∥
//! payload`; an ITEM payload is `u8 source_count`, then per source
//! `u8 name_len ∥ name ∥ u8 dtype ∥ u8 ndim ∥ ndim × u32 LE dims ∥ raw
//! little-endian row-major data`.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use crate::error::{Error, Result};
use crate::spec::PipelineSpec;
use crate::stream::StreamItem;
use crate::tensor::{DType, Item, TensorData, Value};

pub const MAGIC: &[u8; 8] = b"BFSRV001";
pub const PROTOCOL_VERSION: u16 = 1;

const FRAME_ITEM: u8 = 0x01;
const FRAME_EPOCH_END: u8 = 0x02;
const FRAME_CLOSE: u8 = 0x03;
const FRAME_NEXT: u8 = 0x10;
const FRAME_STOP: u8 = 0x11;

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Item(Item),
    EpochEnd,
    Close,
    Next,
    Stop,
}

fn encode_item_payload(item: &Item, out: &mut Vec<u8>) -> Result<()> {
    if item.len() > u8::MAX as usize {
        return Err(Error::Protocol(format!(
            "{} sources exceed the u8 source count",
            item.len()
        )));
    }
    out.push(item.len() as u8);
    for (name, value) in item {
        let tensor = match value {
            Value::Tensor(t) => t,
            Value::List(_) => {
                return Err(Error::Protocol(format!(
                    "ragged source {name:?} cannot cross the wire; pad it first"
                )))
            }
        };
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u8::MAX as usize {
            return Err(Error::Protocol(format!("source name {name:?} too long")));
        }
        out.push(name_bytes.len() as u8);
        out.extend_from_slice(name_bytes);
        out.push(tensor.dtype().wire_code());
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Protocol("tensor rank exceeds u8".into()));
        }
        out.push(shape.len() as u8);
        for &dim in shape {
            let dim: u32 = dim
                .try_into()
                .map_err(|_| Error::Protocol(format!("dimension {dim} exceeds u32")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.extend_from_slice(&tensor.to_le_bytes());
    }
    Ok(())
}

/// Encodes a complete frame, length prefix included.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let frame_type = match frame {
        Frame::Item(item) => {
            encode_item_payload(item, &mut payload)?;
            FRAME_ITEM
        }
        Frame::EpochEnd => FRAME_EPOCH_END,
        Frame::Close => FRAME_CLOSE,
        Frame::Next => FRAME_NEXT,
        Frame::Stop => FRAME_STOP,
    };
    let total_length = 1 + payload.len();
    let total_length: u32 = total_length
        .try_into()
        .map_err(|_| Error::Protocol("frame exceeds the u32 length prefix".into()))?;
    let mut out = Vec::with_capacity(4 + total_length as usize);
    out.extend_from_slice(&total_length.to_le_bytes());
    out.push(frame_type);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Protocol("truncated frame".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_item_payload(payload: &[u8]) -> Result<Item> {
    let mut cursor = Cursor {
        bytes: payload,
        pos: 0,
    };
    let source_count = cursor.u8()?;
    let mut item = Item::new();
    for _ in 0..source_count {
        let name_len = cursor.u8()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| Error::Protocol("source name is not utf-8".into()))?
            .to_string();
        let dtype = DType::from_wire_code(cursor.u8()?)?;
        let ndim = cursor.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cursor.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cursor.take(numel * dtype.size_of())?;
        item.insert(
            name,
            Value::Tensor(TensorData::from_le_bytes(dtype, shape, data)?),
        );
    }
    if cursor.pos != payload.len() {
        return Err(Error::Protocol("trailing bytes after item payload".into()));
    }
    Ok(item)
}

/// Decodes one complete frame (length prefix included).
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 5 {
        return Err(Error::Protocol("frame shorter than its header".into()));
    }
    let total_length = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + total_length {
        return Err(Error::Protocol(format!(
            "length prefix {total_length} disagrees with buffer of {}",
            bytes.len() - 4
        )));
    }
    let frame_type = bytes[4];
    let payload = &bytes[5..];
    let expect_empty = |frame: Frame| {
        if payload.is_empty() {
            Ok(frame)
        } else {
            Err(Error::Protocol("signal frame with payload".into()))
        }
    };
    match frame_type {
        FRAME_ITEM => Ok(Frame::Item(decode_item_payload(payload)?)),
        FRAME_EPOCH_END => expect_empty(Frame::EpochEnd),
        FRAME_CLOSE => expect_empty(Frame::Close),
        FRAME_NEXT => expect_empty(Frame::Next),
        FRAME_STOP => expect_empty(Frame::Stop),
        other => Err(Error::Protocol(format!("unknown frame type {other:#04x}"))),
    }
}

fn write_frame(socket: &mut TcpStream, frame: &Frame) -> Result<()> {
    socket.write_all(&encode_frame(frame)?)?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean EOF at a frame boundary.
fn read_frame(socket: &mut TcpStream) -> Result<Option<Frame>> {
    let mut prefix = [0u8; 4];
    match socket.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let total_length = u32::from_le_bytes(prefix) as usize;
    if total_length == 0 {
        return Err(Error::Protocol("zero-length frame".into()));
    }
    let mut rest = vec![0u8; total_length];
    socket
        .read_exact(&mut rest)
        .map_err(|_| Error::Protocol("connection reset mid-frame".into()))?;
    let mut whole = prefix.to_vec();
    whole.extend_from_slice(&rest);
    decode_frame(&whole).map(Some)
}

/// Serves one client on an already bound listener: handshake, then one
/// ITEM/EPOCH_END/CLOSE response per NEXT. The server precomputes at most
/// one item ahead; it never sends unsolicited frames.
pub fn serve(spec: &PipelineSpec, listener: TcpListener) -> Result<()> {
    let (mut socket, _addr) = listener.accept()?;
    socket.write_all(MAGIC)?;
    socket.write_all(&PROTOCOL_VERSION.to_le_bytes())?;

    let mut pipeline = match spec.build() {
        Ok(pipeline) => pipeline,
        Err(e) => {
            // construction failure is reported to the client as CLOSE
            write_frame(&mut socket, &Frame::Close)?;
            return Err(e);
        }
    };

    let mut ahead: Option<Option<StreamItem>> = None;
    loop {
        match read_frame(&mut socket)? {
            Some(Frame::Next) => {
                let step = match ahead.take() {
                    Some(step) => step,
                    None => pipeline.next()?,
                };
                match step {
                    Some(StreamItem::Item(item)) => {
                        write_frame(&mut socket, &Frame::Item(item))?
                    }
                    Some(StreamItem::EpochEnd) => write_frame(&mut socket, &Frame::EpochEnd)?,
                    None => {
                        write_frame(&mut socket, &Frame::Close)?;
                        return Ok(());
                    }
                }
                // overlap the next computation with the client's work
                ahead = Some(pipeline.next()?);
            }
            Some(Frame::Stop) => {
                // reply CLOSE and exit cleanly
                write_frame(&mut socket, &Frame::Close)?;
                return Ok(());
            }
            None => return Ok(()), // client went away
            Some(other) => {
                return Err(Error::Protocol(format!(
                    "unexpected frame from client: {other:?}"
                )))
            }
        }
    }
}

/// Client side: presents a remote pipeline as an ordinary item source.
pub struct ClientStream {
    socket: TcpStream,
    closed: bool,
}

impl ClientStream {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<ClientStream> {
        let mut socket = TcpStream::connect(addr)?;
        let mut magic = [0u8; 8];
        socket
            .read_exact(&mut magic)
            .map_err(|_| Error::Handshake("server closed before the magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Handshake(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut version = [0u8; 2];
        socket
            .read_exact(&mut version)
            .map_err(|_| Error::Handshake("server closed before the version".into()))?;
        let version = u16::from_le_bytes(version);
        if version != PROTOCOL_VERSION {
            return Err(Error::Handshake(format!(
                "protocol version {version}, expected {PROTOCOL_VERSION}"
            )));
        }
        Ok(ClientStream {
            socket,
            closed: false,
        })
    }

    /// Mirrors `Stream::next`: items, epoch ends, then exhaustion.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<Option<StreamItem>> {
        if self.closed {
            return Ok(None);
        }
        write_frame(&mut self.socket, &Frame::Next)?;
        match read_frame(&mut self.socket)? {
            Some(Frame::Item(item)) => Ok(Some(StreamItem::Item(item))),
            Some(Frame::EpochEnd) => Ok(Some(StreamItem::EpochEnd)),
            Some(Frame::Close) | None => {
                self.closed = true;
                Ok(None)
            }
            Some(other) => Err(Error::Protocol(format!(
                "unexpected frame from server: {other:?}"
            ))),
        }
    }

    /// Tells the server to tear the pipeline down.
    pub fn stop(&mut self) -> Result<()> {
        if !self.closed {
            self.closed = true;
            write_frame(&mut self.socket, &Frame::Stop)?;
            let _ = read_frame(&mut self.socket); // await CLOSE
        }
        Ok(())
    }
}

impl Drop for ClientStream {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{write_container, Interval, Provenance, SourcePayload, SplitDescriptor};
    use crate::dataset::Backend;
    use crate::spec::SchemeSpec;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;
    use std::path::Path;

    fn item_with(name: &str, tensor: TensorData) -> Item {
        let mut item = Item::new();
        item.insert(name.into(), Value::Tensor(tensor));
        item
    }

    #[test]
    fn epoch_end_frame_is_five_bytes() {
        let bytes = encode_frame(&Frame::EpochEnd).unwrap();
        assert_eq!(bytes, vec![1, 0, 0, 0, 0x02]);
    }

    #[test]
    fn item_frame_golden_vector() {
        // one f64 source "x" of shape [1, 2] holding [[1.0, 2.0]],
        // hand-assembled from the frame layout
        let item = item_with(
            "x",
            TensorData::F64(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
        );
        let mut expected = Vec::new();
        let payload_len = 1 + (1 + 1 + 1 + 1 + 8 + 16); // count + source entry
        expected.extend_from_slice(&((1 + payload_len) as u32).to_le_bytes());
        expected.push(0x01); // ITEM
        expected.push(1); // source count
        expected.push(1); // name length
        expected.push(b'x');
        expected.push(0x02); // f64
        expected.push(2); // ndim
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&2.0f64.to_le_bytes());

        let encoded = encode_frame(&Frame::Item(item.clone())).unwrap();
        assert_eq!(encoded, expected);
        assert_eq!(decode_frame(&encoded).unwrap(), Frame::Item(item));
    }

    #[test]
    fn two_source_round_trip() {
        let mut item = Item::new();
        item.insert(
            "features".into(),
            Value::Tensor(TensorData::F64(
                Tensor::new(vec![2, 2], vec![0.5, -1.5, 2.25, 1e-300]).unwrap(),
            )),
        );
        item.insert(
            "targets".into(),
            Value::Tensor(TensorData::U8(Tensor::new(vec![2, 1], vec![1, 0]).unwrap())),
        );
        let encoded = encode_frame(&Frame::Item(item.clone())).unwrap();
        match decode_frame(&encoded).unwrap() {
            Frame::Item(decoded) => assert!(crate::tensor::items_bits_eq(&item, &decoded)),
            other => panic!("unexpected frame {other:?}"),
        }
    }

    #[test]
    fn truncated_and_malformed_frames_error() {
        let item = item_with(
            "x",
            TensorData::F64(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
        );
        let encoded = encode_frame(&Frame::Item(item)).unwrap();
        assert!(decode_frame(&encoded[..encoded.len() - 1]).is_err());
        assert!(decode_frame(&encoded[..7]).is_err());

        let mut unknown_type = encode_frame(&Frame::Next).unwrap();
        unknown_type[4] = 0x7F;
        assert!(decode_frame(&unknown_type).is_err());

        let mut bad_dtype = encoded.clone();
        // dtype byte sits after prefix(4) + type(1) + count(1) + name_len(1) + name(1)
        bad_dtype[8] = 0x99;
        assert!(decode_frame(&bad_dtype).is_err());

        // ragged values cannot be encoded
        let mut ragged = Item::new();
        ragged.insert(
            "s".into(),
            Value::List(vec![TensorData::I64(Tensor::new(vec![1], vec![1]).unwrap())]),
        );
        assert!(encode_frame(&Frame::Item(ragged)).is_err());
    }

    fn tiny_container(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("tiny.bfdc");
        let x = Tensor::new(vec![3, 2], (0..6).map(|v| v as f64).collect()).unwrap();
        let per_source: BTreeMap<String, Option<Interval>> =
            [("x".to_string(), Some(Interval { start: 0, stop: 3 }))]
                .into_iter()
                .collect();
        write_container(
            &path,
            &[SourcePayload {
                name: "x".into(),
                axis_labels: vec!["batch".into(), "feature".into()],
                data: x.into(),
            }],
            &[SplitDescriptor {
                name: "all".into(),
                per_source,
            }],
            &Provenance {
                created_by: "t".into(),
                command_line: "t".into(),
            },
        )
        .unwrap();
        path
    }

    fn spec_for(path: &Path, epochs: Option<u64>) -> PipelineSpec {
        PipelineSpec {
            container: path.to_path_buf(),
            split: "all".into(),
            backend: Backend::InMemory,
            scheme: SchemeSpec::Sequential {
                batch_size: 1,
                policy: crate::iteration::LastBatchPolicy::Keep,
            },
            epochs,
            transformers: vec![],
        }
    }

    #[test]
    fn serve_items_then_epoch_end_then_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_container(dir.path());
        let spec = spec_for(&path, Some(1));
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn({
            let spec = spec.clone();
            move || serve(&spec, listener)
        });

        let mut client = ClientStream::connect(addr).unwrap();
        let mut kinds = Vec::new();
        while let Some(step) = client.next().unwrap() {
            kinds.push(match step {
                StreamItem::Item(_) => "item",
                StreamItem::EpochEnd => "end",
            });
        }
        assert_eq!(kinds, ["item", "item", "item", "end"]);
        // NEXT after CLOSE: the client is closed locally, no frame goes out
        assert!(client.next().unwrap().is_none());
        drop(client);
        server.join().unwrap().unwrap();
    }

    #[test]
    fn stop_immediately_gets_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_container(dir.path());
        let spec = spec_for(&path, None);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn({
            let spec = spec.clone();
            move || serve(&spec, listener)
        });
        let mut client = ClientStream::connect(addr).unwrap();
        client.stop().unwrap();
        server.join().unwrap().unwrap();
    }

    #[test]
    fn construction_failure_reports_close() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_for(&dir.path().join("missing.bfdc"), None);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn({
            let spec = spec.clone();
            move || serve(&spec, listener)
        });
        let mut client = ClientStream::connect(addr).unwrap();
        assert!(client.next().unwrap().is_none());
        assert!(server.join().unwrap().is_err());
    }

    #[test]
    fn corrupted_magic_fails_handshake() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let fake = std::thread::spawn(move || {
            let (mut socket, _) = listener.accept().unwrap();
            socket.write_all(b"NOTMAGIC").unwrap();
            socket.write_all(&1u16.to_le_bytes()).unwrap();
        });
        assert!(matches!(
            ClientStream::connect(addr),
            Err(Error::Handshake(_))
        ));
        fake.join().unwrap();
    }

    #[test]
    fn remote_equals_local() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_container(dir.path());
        let spec = spec_for(&path, Some(2));

        let mut local = spec.build().unwrap();
        let mut local_items = Vec::new();
        while let Some(step) = local.next().unwrap() {
            local_items.push(step);
        }

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn({
            let spec = spec.clone();
            move || serve(&spec, listener)
        });
        let mut client = ClientStream::connect(addr).unwrap();
        let mut remote_items = Vec::new();
        while let Some(step) = client.next().unwrap() {
            remote_items.push(step);
        }
        drop(client);
        server.join().unwrap().unwrap();

        assert_eq!(local_items.len(), remote_items.len());
        for (a, b) in local_items.iter().zip(&remote_items) {
            match (a, b) {
                (StreamItem::Item(x), StreamItem::Item(y)) => {
                    assert!(crate::tensor::items_bits_eq(x, y))
                }
                (StreamItem::EpochEnd, StreamItem::EpochEnd) => {}
                _ => panic!("sequences diverge"),
            }
        }
    }
}
