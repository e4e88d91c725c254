//! Chainable data-stream pipeline.
//!
//! A base stream pulls index batches from a scheme and fetches them from a
//! dataset; transformers wrap streams and preprocess on the fly. Epoch ends
//! are in-band signals distinct from exhaustion. The whole chain serializes
//! recursively: restoring a [`StreamState`] into a freshly built pipeline
//! of the same shape replays exactly the remaining items.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::iteration::{LastBatchPolicy, Scheme, SchemeState, SchemeStep};
use crate::rng::{Rng, RngState};
use crate::tensor::{DType, Item, Tensor, TensorData, Value};

#[derive(Clone, Debug, PartialEq)]
pub enum StreamItem {
    Item(Item),
    /// End of one pass over the data; more epochs may follow.
    EpochEnd,
}

/// Pulls index requests from a scheme and fetches rows from a dataset.
pub struct BaseStream {
    dataset: Dataset,
    scheme: Scheme,
    /// `None` = endless epochs.
    epoch_limit: Option<u64>,
    epochs_emitted: u64,
    exhausted: bool,
}

impl BaseStream {
    pub fn new(dataset: Dataset, scheme: Scheme, epoch_limit: Option<u64>) -> Result<BaseStream> {
        scheme.validate_for(dataset.num_examples())?;
        Ok(BaseStream {
            dataset,
            scheme,
            epoch_limit,
            epochs_emitted: 0,
            exhausted: false,
        })
    }

    pub fn sources(&self) -> Vec<String> {
        self.dataset.sources()
    }

    fn next(&mut self) -> Result<Option<StreamItem>> {
        if self.exhausted {
            return Ok(None);
        }
        match self.scheme.next() {
            SchemeStep::Batch(indices) => {
                let fetched = self.dataset.get_examples(&indices)?;
                let mut item = Item::new();
                for (name, tensor) in fetched {
                    item.insert(name, Value::Tensor(tensor));
                }
                Ok(Some(StreamItem::Item(item)))
            }
            SchemeStep::EpochEnd => {
                self.epochs_emitted += 1;
                if let Some(limit) = self.epoch_limit {
                    if self.epochs_emitted >= limit {
                        self.exhausted = true;
                    }
                }
                Ok(Some(StreamItem::EpochEnd))
            }
        }
    }
}

/// Registry of named pure mapping functions. Closures are forbidden: a
/// pipeline must serialize, travel to the server process, and rebuild.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", content = "params", rename_all = "snake_case")]
pub enum MappingKind {
    /// Multiplies float sources elementwise.
    ScaleBy {
        factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sources: Option<Vec<String>>,
    },
    /// Casts sources to another dtype.
    CastTo {
        dtype: DType,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sources: Option<Vec<String>>,
    },
    /// Keeps only the named sources, in the given order.
    SelectSources { sources: Vec<String> },
    /// Drops a leading axis of extent 1 from every source.
    SqueezeLead {},
    /// Cuts a single-example token row down to its true length and drops
    /// the lengths source.
    TrimToLength { tokens: String, lengths: String },
    /// Integer class tensor -> f64 one-hot; a trailing axis of extent 1 is
    /// replaced by the class axis, otherwise the class axis is appended.
    OneHot { source: String, classes: usize },
    /// Collapses everything after the leading axis into one dimension.
    Flatten { source: String },
}

/// Looks a mapping function up by registry name. Unknown names fail here,
/// at construction, not at the first pull.
pub fn resolve_mapping(function_id: &str, params: serde_json::Value) -> Result<MappingKind> {
    let params = if params.is_null() {
        serde_json::json!({})
    } else {
        params
    };
    let value = serde_json::json!({ "function": function_id, "params": params });
    serde_json::from_value(value)
        .map_err(|e| Error::UnknownFunction(format!("{function_id}: {e}")))
}

impl MappingKind {
    fn wants(&self, sources: &Option<Vec<String>>, name: &str) -> bool {
        match sources {
            Some(list) => list.iter().any(|s| s == name),
            None => true,
        }
    }

    fn apply(&self, item: Item) -> Result<Item> {
        match self {
            MappingKind::ScaleBy { factor, sources } => {
                let mut out = Item::new();
                for (name, value) in item {
                    let value = if self.wants(sources, &name) {
                        scale_value(&name, value, *factor, sources.is_some())?
                    } else {
                        value
                    };
                    out.insert(name, value);
                }
                Ok(out)
            }
            MappingKind::CastTo { dtype, sources } => {
                let mut out = Item::new();
                for (name, value) in item {
                    let value = if self.wants(sources, &name) {
                        match value {
                            Value::Tensor(t) => Value::Tensor(t.cast_to(*dtype)),
                            Value::List(list) => {
                                Value::List(list.iter().map(|t| t.cast_to(*dtype)).collect())
                            }
                        }
                    } else {
                        value
                    };
                    out.insert(name, value);
                }
                Ok(out)
            }
            MappingKind::SelectSources { sources } => {
                let mut out = Item::new();
                for name in sources {
                    let value = item
                        .get(name)
                        .cloned()
                        .ok_or_else(|| Error::UnknownSource(name.clone()))?;
                    out.insert(name.clone(), value);
                }
                Ok(out)
            }
            MappingKind::SqueezeLead {} => {
                let mut out = Item::new();
                for (name, value) in item {
                    let tensor = value.as_tensor()?;
                    if tensor.first_dim()? != 1 {
                        return Err(Error::ShapeMismatch(format!(
                            "squeeze_lead: source {name:?} has leading extent {}",
                            tensor.first_dim()?
                        )));
                    }
                    let shape = tensor.shape()[1..].to_vec();
                    out.insert(name, Value::Tensor(tensor.clone().reshape(shape)?));
                }
                Ok(out)
            }
            MappingKind::TrimToLength { tokens, lengths } => {
                let token_tensor = item
                    .get(tokens)
                    .ok_or_else(|| Error::UnknownSource(tokens.clone()))?
                    .as_tensor()?
                    .clone();
                let length_tensor = item
                    .get(lengths)
                    .ok_or_else(|| Error::UnknownSource(lengths.clone()))?
                    .as_tensor()?;
                if token_tensor.rank() != 1 {
                    return Err(Error::ShapeMismatch(
                        "trim_to_length expects single-example rank-1 tokens".into(),
                    ));
                }
                let len = first_integer(length_tensor)?;
                let max = token_tensor.first_dim()?;
                if len > max {
                    return Err(Error::RangeOutOfBounds(format!(
                        "length {len} exceeds padded extent {max}"
                    )));
                }
                let trimmed = token_tensor.rows(0, len)?;
                let mut out = Item::new();
                for (name, value) in item {
                    if name == *lengths {
                        continue;
                    }
                    if name == *tokens {
                        out.insert(name, Value::Tensor(trimmed.clone()));
                    } else {
                        out.insert(name, value);
                    }
                }
                Ok(out)
            }
            MappingKind::OneHot { source, classes } => {
                let mut out = Item::new();
                for (name, value) in item {
                    if name != *source {
                        out.insert(name, value);
                        continue;
                    }
                    out.insert(name, Value::Tensor(one_hot(value.as_tensor()?, *classes)?));
                }
                if !out.contains_key(source) {
                    return Err(Error::UnknownSource(source.clone()));
                }
                Ok(out)
            }
            MappingKind::Flatten { source } => {
                let mut out = Item::new();
                for (name, value) in item {
                    if name != *source {
                        out.insert(name, value);
                        continue;
                    }
                    let tensor = value.as_tensor()?;
                    if tensor.rank() < 2 {
                        return Err(Error::ShapeMismatch(format!(
                            "flatten: source {name:?} has rank {}",
                            tensor.rank()
                        )));
                    }
                    let lead = tensor.shape()[0];
                    let rest: usize = tensor.shape()[1..].iter().product();
                    out.insert(name, Value::Tensor(tensor.clone().reshape(vec![lead, rest])?));
                }
                if !out.contains_key(source) {
                    return Err(Error::UnknownSource(source.clone()));
                }
                Ok(out)
            }
        }
    }
}

fn scale_value(name: &str, value: Value, factor: f64, explicit: bool) -> Result<Value> {
    let scale_tensor = |t: &TensorData| -> Result<Option<TensorData>> {
        Ok(match t {
            TensorData::F32(t) => Some(TensorData::F32(t.map(|v| v * factor as f32))),
            TensorData::F64(t) => Some(TensorData::F64(t.map(|v| v * factor))),
            _ if explicit => {
                return Err(Error::InvalidArgument(format!(
                    "scale_by on integer source {name:?}"
                )))
            }
            _ => None,
        })
    };
    Ok(match value {
        Value::Tensor(t) => match scale_tensor(&t)? {
            Some(scaled) => Value::Tensor(scaled),
            None => Value::Tensor(t),
        },
        Value::List(list) => {
            let mut out = Vec::with_capacity(list.len());
            for t in &list {
                out.push(scale_tensor(t)?.unwrap_or_else(|| t.clone()));
            }
            Value::List(out)
        }
    })
}

fn first_integer(tensor: &TensorData) -> Result<usize> {
    let v = match tensor {
        TensorData::I64(t) => *t.data().first().ok_or_else(empty_lengths)? as f64,
        TensorData::I32(t) => f64::from(*t.data().first().ok_or_else(empty_lengths)?),
        TensorData::U8(t) => f64::from(*t.data().first().ok_or_else(empty_lengths)?),
        _ => {
            return Err(Error::DTypeMismatch {
                expected: "integer".into(),
                actual: tensor.dtype().name().into(),
            })
        }
    };
    if v < 0.0 {
        return Err(Error::RangeOutOfBounds(format!("negative length {v}")));
    }
    Ok(v as usize)
}

fn empty_lengths() -> Error {
    Error::ShapeMismatch("empty lengths tensor".into())
}

fn one_hot(tensor: &TensorData, classes: usize) -> Result<TensorData> {
    if classes == 0 {
        return Err(Error::InvalidArgument("one_hot with zero classes".into()));
    }
    let indices: Vec<i64> = match tensor {
        TensorData::I64(t) => t.data().to_vec(),
        TensorData::I32(t) => t.data().iter().map(|&v| i64::from(v)).collect(),
        TensorData::U8(t) => t.data().iter().map(|&v| i64::from(v)).collect(),
        _ => {
            return Err(Error::DTypeMismatch {
                expected: "integer".into(),
                actual: tensor.dtype().name().into(),
            })
        }
    };
    let mut shape: Vec<usize> = tensor.shape().to_vec();
    if shape.last() == Some(&1) {
        shape.pop();
    }
    shape.push(classes);
    let mut data = vec![0.0f64; indices.len() * classes];
    for (i, &class) in indices.iter().enumerate() {
        if class < 0 || class as usize >= classes {
            return Err(Error::RangeOutOfBounds(format!(
                "class {class} outside [0, {classes})"
            )));
        }
        data[i * classes + class as usize] = 1.0;
    }
    Ok(TensorData::F64(Tensor::new(shape, data)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropLayout {
    /// Trailing axes are (height, width).
    #[default]
    Hw,
    /// Trailing axes are (height, width, channel).
    Hwc,
}

/// A stream wrapper that preprocesses items on the fly.
pub enum Transformer {
    Mapping(MappingKind),
    Batch {
        size: usize,
        policy: LastBatchPolicy,
        buffer: Vec<Item>,
        pending_end: bool,
    },
    Padding {
        pad_value: f64,
        exempt: Vec<String>,
    },
    Ngrams {
        n: usize,
        source: String,
        /// The sequence currently being consumed and the next window start.
        current: Option<(TensorData, usize)>,
    },
    RandomCrop {
        source: String,
        height: usize,
        width: usize,
        layout: CropLayout,
        rng: Rng,
    },
}

impl Transformer {
    pub fn mapping(function_id: &str, params: serde_json::Value) -> Result<Transformer> {
        Ok(Transformer::Mapping(resolve_mapping(function_id, params)?))
    }

    pub fn batch(size: usize, policy: LastBatchPolicy) -> Result<Transformer> {
        if size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(Transformer::Batch {
            size,
            policy,
            buffer: Vec::new(),
            pending_end: false,
        })
    }

    pub fn padding(pad_value: f64, exempt: Vec<String>) -> Transformer {
        Transformer::Padding { pad_value, exempt }
    }

    pub fn ngrams(n: usize, source: impl Into<String>) -> Result<Transformer> {
        if n == 0 {
            return Err(Error::InvalidArgument("ngrams with n = 0".into()));
        }
        Ok(Transformer::Ngrams {
            n,
            source: source.into(),
            current: None,
        })
    }

    pub fn random_crop(
        source: impl Into<String>,
        height: usize,
        width: usize,
        seed: u64,
        layout: CropLayout,
    ) -> Result<Transformer> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty crop window".into()));
        }
        Ok(Transformer::RandomCrop {
            source: source.into(),
            height,
            width,
            layout,
            rng: Rng::seed(seed),
        })
    }

    fn next(&mut self, upstream: &mut Stream) -> Result<Option<StreamItem>> {
        match self {
            Transformer::Mapping(kind) => match upstream.next()? {
                Some(StreamItem::Item(item)) => Ok(Some(StreamItem::Item(kind.apply(item)?))),
                other => Ok(other),
            },
            Transformer::Batch {
                size,
                policy,
                buffer,
                pending_end,
            } => {
                if *pending_end {
                    *pending_end = false;
                    return Ok(Some(StreamItem::EpochEnd));
                }
                loop {
                    match upstream.next()? {
                        Some(StreamItem::Item(item)) => {
                            buffer.push(item);
                            if buffer.len() == *size {
                                let batch = stack_examples(std::mem::take(buffer))?;
                                return Ok(Some(StreamItem::Item(batch)));
                            }
                        }
                        Some(StreamItem::EpochEnd) => {
                            // a batch never crosses an epoch boundary
                            if buffer.is_empty() || *policy == LastBatchPolicy::Drop {
                                buffer.clear();
                                return Ok(Some(StreamItem::EpochEnd));
                            }
                            let batch = stack_examples(std::mem::take(buffer))?;
                            *pending_end = true;
                            return Ok(Some(StreamItem::Item(batch)));
                        }
                        None => {
                            if buffer.is_empty() || *policy == LastBatchPolicy::Drop {
                                buffer.clear();
                                return Ok(None);
                            }
                            let batch = stack_examples(std::mem::take(buffer))?;
                            return Ok(Some(StreamItem::Item(batch)));
                        }
                    }
                }
            }
            Transformer::Padding { pad_value, exempt } => match upstream.next()? {
                Some(StreamItem::Item(item)) => {
                    Ok(Some(StreamItem::Item(pad_item(item, *pad_value, exempt)?)))
                }
                other => Ok(other),
            },
            Transformer::Ngrams { n, source, current } => loop {
                if let Some((seq, pos)) = current {
                    let len = seq.first_dim()?;
                    let context = seq.rows(*pos, *pos + *n)?;
                    let target = seq.rows(*pos + *n, *pos + *n + 1)?;
                    *pos += 1;
                    if *pos + *n >= len {
                        *current = None;
                    }
                    let mut item = Item::new();
                    item.insert(source.clone(), Value::Tensor(context));
                    item.insert(format!("{source}_target"), Value::Tensor(target));
                    return Ok(Some(StreamItem::Item(item)));
                }
                match upstream.next()? {
                    Some(StreamItem::Item(item)) => {
                        let seq = item
                            .get(source.as_str())
                            .ok_or_else(|| Error::UnknownSource(source.clone()))?
                            .as_tensor()?;
                        if seq.rank() != 1 {
                            return Err(Error::ShapeMismatch(format!(
                                "ngrams expects rank-1 sequences, got {:?}",
                                seq.shape()
                            )));
                        }
                        if !matches!(seq.dtype(), DType::I32 | DType::I64 | DType::U8) {
                            return Err(Error::DTypeMismatch {
                                expected: "integer".into(),
                                actual: seq.dtype().name().into(),
                            });
                        }
                        // sequences shorter than n+1 yield nothing
                        if seq.first_dim()? > *n {
                            *current = Some((seq.clone(), 0));
                        }
                    }
                    other => return Ok(other),
                }
            },
            Transformer::RandomCrop {
                source,
                height,
                width,
                layout,
                rng,
            } => match upstream.next()? {
                Some(StreamItem::Item(mut item)) => {
                    let tensor = item
                        .get(source.as_str())
                        .ok_or_else(|| Error::UnknownSource(source.clone()))?
                        .as_tensor()?
                        .clone();
                    let cropped = crop_tensor(&tensor, *height, *width, *layout, rng)?;
                    item.insert(source.clone(), Value::Tensor(cropped));
                    Ok(Some(StreamItem::Item(item)))
                }
                other => Ok(other),
            },
        }
    }
}

/// Stacks collected single-example items into one batch item. Sources whose
/// example shapes agree become a rectangular tensor; rank-1 sources with
/// differing lengths become a ragged list for a downstream padder.
fn stack_examples(items: Vec<Item>) -> Result<Item> {
    let first = items.first().expect("batch buffer is never empty here");
    let names: Vec<String> = first.keys().cloned().collect();
    for item in &items {
        let got: Vec<&String> = item.keys().collect();
        if got.len() != names.len() || !names.iter().zip(&got).all(|(a, b)| &a == b) {
            return Err(Error::ShapeMismatch(
                "items within a batch disagree on sources".into(),
            ));
        }
    }
    let mut out = Item::new();
    for name in &names {
        let mut tensors = Vec::with_capacity(items.len());
        for item in &items {
            match &item[name.as_str()] {
                Value::Tensor(t) => tensors.push(t),
                Value::List(_) => {
                    return Err(Error::ShapeMismatch(format!(
                        "source {name:?} is already ragged; cannot batch it again"
                    )))
                }
            }
        }
        let shapes_equal = tensors.windows(2).all(|w| w[0].shape() == w[1].shape());
        let dtypes_equal = tensors.windows(2).all(|w| w[0].dtype() == w[1].dtype());
        if !dtypes_equal {
            return Err(Error::DTypeMismatch {
                expected: tensors[0].dtype().name().into(),
                actual: "mixed".into(),
            });
        }
        if shapes_equal {
            out.insert(name.clone(), Value::Tensor(TensorData::stack(&tensors)?));
        } else if tensors.iter().all(|t| t.rank() == 1) {
            out.insert(
                name.clone(),
                Value::List(tensors.into_iter().cloned().collect()),
            );
        } else {
            return Err(Error::ShapeMismatch(format!(
                "source {name:?} has inconsistent example shapes within a batch"
            )));
        }
    }
    Ok(out)
}

fn pad_sequences(
    seqs: &[TensorData],
    pad_value: f64,
    name: &str,
) -> Result<(TensorData, TensorData)> {
    if seqs.is_empty() {
        let padded = TensorData::F64(Tensor::zeros(vec![0, 0]));
        let mask = TensorData::F64(Tensor::zeros(vec![0, 0]));
        return Ok((padded, mask));
    }
    let dtype = seqs[0].dtype();
    let mut max_len = 0usize;
    for seq in seqs {
        if seq.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "padding: source {name:?} holds a rank-{} entry",
                seq.rank()
            )));
        }
        if seq.dtype() != dtype {
            return Err(Error::DTypeMismatch {
                expected: dtype.name().into(),
                actual: seq.dtype().name().into(),
            });
        }
        max_len = max_len.max(seq.first_dim()?);
    }
    let mut mask = vec![0.0f64; seqs.len() * max_len];
    let mut rows = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let len = seq.first_dim()?;
        let mut padded = seq.cast_scalar::<f64>().into_data();
        padded.resize(max_len, pad_value);
        let row = TensorData::F64(Tensor::new(vec![max_len], padded)?).cast_to(dtype);
        rows.push(row);
        for m in mask.iter_mut().skip(i * max_len).take(len) {
            *m = 1.0;
        }
    }
    let row_refs: Vec<&TensorData> = rows.iter().collect();
    let padded = TensorData::stack(&row_refs)?;
    let mask = TensorData::F64(Tensor::new(vec![seqs.len(), max_len], mask)?);
    Ok((padded, mask))
}

fn pad_item(item: Item, pad_value: f64, exempt: &[String]) -> Result<Item> {
    let mut out = Item::new();
    for (name, value) in item {
        if exempt.iter().any(|e| e == &name) {
            out.insert(name, value);
            continue;
        }
        match value {
            Value::List(seqs) => {
                let (padded, mask) = pad_sequences(&seqs, pad_value, &name)?;
                let mask_name = format!("{name}_mask");
                out.insert(name, Value::Tensor(padded));
                out.insert(mask_name, Value::Tensor(mask));
            }
            // a rectangular [batch, len] tensor is a batch of equal-length
            // sequences; the mask is all ones
            Value::Tensor(t) if t.rank() == 2 => {
                let mask = TensorData::F64(Tensor::filled(t.shape().to_vec(), 1.0));
                let mask_name = format!("{name}_mask");
                out.insert(name, Value::Tensor(t));
                out.insert(mask_name, Value::Tensor(mask));
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "padding: non-sequence source {name:?} needs an exemption"
                )))
            }
        }
    }
    Ok(out)
}

/// Crops every example's trailing (height, width[, channel]) window. The
/// top offset is drawn before the left offset, one pair per example.
fn crop_tensor(
    tensor: &TensorData,
    crop_h: usize,
    crop_w: usize,
    layout: CropLayout,
    rng: &mut Rng,
) -> Result<TensorData> {
    let shape = tensor.shape().to_vec();
    let image_rank = match layout {
        CropLayout::Hw => 2,
        CropLayout::Hwc => 3,
    };
    if shape.len() < image_rank {
        return Err(Error::ShapeMismatch(format!(
            "crop source of shape {shape:?} has no image axes"
        )));
    }
    let (h, w, c) = match layout {
        CropLayout::Hw => (shape[shape.len() - 2], shape[shape.len() - 1], 1),
        CropLayout::Hwc => (
            shape[shape.len() - 3],
            shape[shape.len() - 2],
            shape[shape.len() - 1],
        ),
    };
    if crop_h > h || crop_w > w {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_h}x{crop_w} larger than image {h}x{w}"
        )));
    }
    let examples: usize = shape[..shape.len() - image_rank].iter().product();
    let width = tensor.dtype().size_of();
    let bytes = tensor.to_le_bytes();
    let image_bytes = h * w * c * width;
    let mut out = Vec::with_capacity(examples * crop_h * crop_w * c * width);
    for e in 0..examples {
        let top = rng.bounded((h - crop_h + 1) as u32)? as usize;
        let left = rng.bounded((w - crop_w + 1) as u32)? as usize;
        let base = e * image_bytes;
        for r in 0..crop_h {
            let start = base + (((top + r) * w + left) * c) * width;
            out.extend_from_slice(&bytes[start..start + crop_w * c * width]);
        }
    }
    let mut out_shape = shape[..shape.len() - image_rank].to_vec();
    out_shape.push(crop_h);
    out_shape.push(crop_w);
    if layout == CropLayout::Hwc {
        out_shape.push(c);
    }
    TensorData::from_le_bytes(tensor.dtype(), out_shape, &out)
}

/// A pipeline: a base stream wrapped by zero or more transformers.
pub enum Stream {
    Base(BaseStream),
    Stage {
        inner: Box<Stream>,
        transformer: Transformer,
    },
}

impl Stream {
    pub fn base(dataset: Dataset, scheme: Scheme, epoch_limit: Option<u64>) -> Result<Stream> {
        Ok(Stream::Base(BaseStream::new(dataset, scheme, epoch_limit)?))
    }

    /// Wraps this stream in one more transformer.
    pub fn with(self, transformer: Transformer) -> Stream {
        Stream::Stage {
            inner: Box::new(self),
            transformer,
        }
    }

    /// `Ok(Some(item))`, `Ok(Some(epoch end))`, or `Ok(None)` once exhausted.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<Option<StreamItem>> {
        match self {
            Stream::Base(base) => base.next(),
            Stream::Stage { inner, transformer } => transformer.next(inner),
        }
    }

    /// Captures every layer: scheme cursor, transformer buffers, RNG states.
    pub fn save_state(&self) -> StreamState {
        let mut layers = Vec::new();
        self.collect_states(&mut layers);
        StreamState { layers }
    }

    fn collect_states(&self, out: &mut Vec<LayerState>) {
        match self {
            Stream::Base(base) => out.push(LayerState::Base {
                scheme: base.scheme.save_state(),
                epochs_emitted: base.epochs_emitted,
                exhausted: base.exhausted,
            }),
            Stream::Stage { inner, transformer } => {
                inner.collect_states(out);
                out.push(match transformer {
                    Transformer::Mapping(_) => LayerState::Mapping {},
                    Transformer::Batch {
                        buffer, pending_end, ..
                    } => LayerState::Batch {
                        buffer: buffer.clone(),
                        pending_end: *pending_end,
                    },
                    Transformer::Padding { .. } => LayerState::Padding {},
                    Transformer::Ngrams { current, .. } => LayerState::Ngrams {
                        current: current
                            .as_ref()
                            .map(|(seq, pos)| (seq.clone(), *pos as u64)),
                    },
                    Transformer::RandomCrop { rng, .. } => LayerState::RandomCrop {
                        rng: RngState::capture(rng),
                    },
                });
            }
        }
    }

    /// Restores a state tree captured from an identically shaped pipeline.
    pub fn restore_state(&mut self, state: &StreamState) -> Result<()> {
        let mut depth = 0usize;
        self.count_layers(&mut depth);
        if depth != state.layers.len() {
            return Err(Error::StateMismatch(format!(
                "pipeline has {depth} layers, state has {}",
                state.layers.len()
            )));
        }
        self.apply_states(&state.layers, depth - 1)
    }

    fn count_layers(&self, out: &mut usize) {
        *out += 1;
        if let Stream::Stage { inner, .. } = self {
            inner.count_layers(out);
        }
    }

    fn apply_states(&mut self, layers: &[LayerState], index: usize) -> Result<()> {
        match self {
            Stream::Base(base) => match &layers[index] {
                LayerState::Base {
                    scheme,
                    epochs_emitted,
                    exhausted,
                } => {
                    let restored = Scheme::restore(scheme)?;
                    restored.validate_for(base.dataset.num_examples())?;
                    base.scheme = restored;
                    base.epochs_emitted = *epochs_emitted;
                    base.exhausted = *exhausted;
                    Ok(())
                }
                other => Err(layer_kind_mismatch("base", other)),
            },
            Stream::Stage { inner, transformer } => {
                match (&mut *transformer, &layers[index]) {
                    (Transformer::Mapping(_), LayerState::Mapping {}) => {}
                    (
                        Transformer::Batch {
                            buffer, pending_end, ..
                        },
                        LayerState::Batch {
                            buffer: saved,
                            pending_end: saved_end,
                        },
                    ) => {
                        *buffer = saved.clone();
                        *pending_end = *saved_end;
                    }
                    (Transformer::Padding { .. }, LayerState::Padding {}) => {}
                    (Transformer::Ngrams { current, .. }, LayerState::Ngrams { current: saved }) => {
                        *current = saved
                            .as_ref()
                            .map(|(seq, pos)| (seq.clone(), *pos as usize));
                    }
                    (Transformer::RandomCrop { rng, .. }, LayerState::RandomCrop { rng: saved }) => {
                        *rng = saved.restore()?;
                    }
                    (t, s) => return Err(layer_kind_mismatch(transformer_name(t), s)),
                }
                inner.apply_states(layers, index - 1)
            }
        }
    }
}

fn transformer_name(t: &Transformer) -> &'static str {
    match t {
        Transformer::Mapping(_) => "mapping",
        Transformer::Batch { .. } => "batch",
        Transformer::Padding { .. } => "padding",
        Transformer::Ngrams { .. } => "ngrams",
        Transformer::RandomCrop { .. } => "random_crop",
    }
}

fn layer_kind_mismatch(expected: &str, got: &LayerState) -> Error {
    let name = match got {
        LayerState::Base { .. } => "base",
        LayerState::Mapping {} => "mapping",
        LayerState::Batch { .. } => "batch",
        LayerState::Padding {} => "padding",
        LayerState::Ngrams { .. } => "ngrams",
        LayerState::RandomCrop { .. } => "random_crop",
    };
    Error::StateMismatch(format!("pipeline layer is {expected}, state layer is {name}"))
}

/// Serialized pipeline state: one entry per layer, base first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub layers: Vec<LayerState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerState {
    Base {
        scheme: SchemeState,
        epochs_emitted: u64,
        exhausted: bool,
    },
    Mapping {},
    Batch {
        buffer: Vec<Item>,
        pending_end: bool,
    },
    Padding {},
    Ngrams {
        current: Option<(TensorData, u64)>,
    },
    RandomCrop {
        rng: RngState,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{write_container, Interval, Provenance, SourcePayload, SplitDescriptor};
    use crate::dataset::Backend;
    use std::collections::BTreeMap;
    use std::path::{Path, PathBuf};

    fn provenance() -> Provenance {
        Provenance {
            created_by: "t".into(),
            command_line: "t".into(),
        }
    }

    fn whole_split(sources: &[&str], n: u64) -> Vec<SplitDescriptor> {
        let per_source: BTreeMap<String, Option<Interval>> = sources
            .iter()
            .map(|s| (s.to_string(), Some(Interval { start: 0, stop: n })))
            .collect();
        vec![SplitDescriptor {
            name: "all".into(),
            per_source,
        }]
    }

    fn features_container(dir: &Path) -> PathBuf {
        let path = dir.join("features.bfdc");
        let x = Tensor::new(vec![5, 2], (0..10).map(|v| v as f64).collect()).unwrap();
        let y = Tensor::new(vec![5, 1], (0..5).map(|v| v as u8).collect()).unwrap();
        write_container(
            &path,
            &[
                SourcePayload {
                    name: "features".into(),
                    axis_labels: vec!["batch".into(), "feature".into()],
                    data: x.into(),
                },
                SourcePayload {
                    name: "targets".into(),
                    axis_labels: vec!["batch".into(), "label".into()],
                    data: y.into(),
                },
            ],
            &whole_split(&["features", "targets"], 5),
            &provenance(),
        )
        .unwrap();
        path
    }

    fn sequences_container(dir: &Path) -> PathBuf {
        let path = dir.join("seq.bfdc");
        // lengths 4, 2, 3 padded to 4
        let tokens = Tensor::new(
            vec![3, 4],
            vec![1i64, 2, 3, 4, 5, 6, 0, 0, 7, 8, 9, 0],
        )
        .unwrap();
        let lengths = Tensor::new(vec![3, 1], vec![4i64, 2, 3]).unwrap();
        write_container(
            &path,
            &[
                SourcePayload {
                    name: "tokens".into(),
                    axis_labels: vec!["batch".into(), "time".into()],
                    data: tokens.into(),
                },
                SourcePayload {
                    name: "lengths".into(),
                    axis_labels: vec!["batch".into(), "length".into()],
                    data: lengths.into(),
                },
            ],
            &whole_split(&["tokens", "lengths"], 3),
            &provenance(),
        )
        .unwrap();
        path
    }

    fn open(path: &Path) -> Dataset {
        Dataset::open(path, "all", Backend::InMemory).unwrap()
    }

    fn drain(stream: &mut Stream) -> Vec<StreamItem> {
        let mut out = Vec::new();
        while let Some(item) = stream.next().unwrap() {
            out.push(item);
        }
        out
    }

    fn tensor_of(item: &StreamItem, source: &str) -> TensorData {
        match item {
            StreamItem::Item(map) => match &map[source] {
                Value::Tensor(t) => t.clone(),
                Value::List(_) => panic!("ragged"),
            },
            StreamItem::EpochEnd => panic!("epoch end"),
        }
    }

    #[test]
    fn base_stream_epochs_and_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1)).unwrap();
        let items = drain(&mut stream);
        assert_eq!(items.len(), 4); // 3 batches + epoch end
        assert!(matches!(items[3], StreamItem::EpochEnd));
        assert!(stream.next().unwrap().is_none());

        // item sources match the dataset sources
        if let StreamItem::Item(map) = &items[0] {
            let names: Vec<&String> = map.keys().collect();
            assert_eq!(names, ["features", "targets"]);
        }
    }

    #[test]
    fn scheme_dataset_size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        let scheme = Scheme::sequential(9, 2, LastBatchPolicy::Keep).unwrap();
        assert!(matches!(
            Stream::base(open(&path), scheme, None),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn mapping_scale_select_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        let scheme = Scheme::sequential(5, 5, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1))
            .unwrap()
            .with(Transformer::mapping("scale_by", serde_json::json!({"factor": 0.5})).unwrap())
            .with(
                Transformer::mapping(
                    "select_sources",
                    serde_json::json!({"sources": ["features"]}),
                )
                .unwrap(),
            );
        let items = drain(&mut stream);
        let t = tensor_of(&items[0], "features");
        assert_eq!(
            t,
            TensorData::F64(
                Tensor::new(vec![5, 2], (0..10).map(|v| v as f64 * 0.5).collect()).unwrap()
            )
        );
        if let StreamItem::Item(map) = &items[0] {
            assert_eq!(map.len(), 1);
        }

        // unknown function fails at construction
        assert!(matches!(
            Transformer::mapping("frobnicate", serde_json::json!({})),
            Err(Error::UnknownFunction(_))
        ));

        // omitted params deserialize as null and still resolve
        assert!(resolve_mapping("squeeze_lead", serde_json::Value::Null).is_ok());
    }

    #[test]
    fn batch_collects_and_respects_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        // examplewise: batch size 1 then squeeze, then rebatch by 2
        let scheme = Scheme::sequential(5, 1, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1))
            .unwrap()
            .with(Transformer::mapping("squeeze_lead", serde_json::json!({})).unwrap())
            .with(Transformer::batch(2, LastBatchPolicy::Keep).unwrap());
        let items = drain(&mut stream);
        // batches of 2, 2, 1, then epoch end.
        assert_eq!(items.len(), 4);
        assert_eq!(tensor_of(&items[0], "features").shape(), &[2, 2]);
        assert_eq!(tensor_of(&items[2], "features").shape(), &[1, 2]);
        assert!(matches!(items[3], StreamItem::EpochEnd));

        // DROP drops the short remainder
        let scheme = Scheme::sequential(5, 1, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1))
            .unwrap()
            .with(Transformer::mapping("squeeze_lead", serde_json::json!({})).unwrap())
            .with(Transformer::batch(2, LastBatchPolicy::Drop).unwrap());
        assert_eq!(drain(&mut stream).len(), 3);
    }

    #[test]
    fn ngrams_windows() {
        let dir = tempfile::tempdir().unwrap();
        let path = sequences_container(dir.path());
        let scheme = Scheme::sequential(3, 1, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1))
            .unwrap()
            .with(Transformer::mapping("squeeze_lead", serde_json::json!({})).unwrap())
            .with(
                Transformer::mapping(
                    "trim_to_length",
                    serde_json::json!({"tokens": "tokens", "lengths": "lengths"}),
                )
                .unwrap(),
            )
            .with(Transformer::ngrams(2, "tokens").unwrap());
        let items = drain(&mut stream);
        // seq [1,2,3,4] -> (12->3), (23->4); seq [5,6] -> nothing; seq [7,8,9] -> (78->9)
        assert_eq!(items.len(), 4); // 3 ngram items + epoch end
        assert_eq!(
            tensor_of(&items[0], "tokens"),
            TensorData::I64(Tensor::new(vec![2], vec![1, 2]).unwrap())
        );
        assert_eq!(
            tensor_of(&items[0], "tokens_target"),
            TensorData::I64(Tensor::new(vec![1], vec![3]).unwrap())
        );
        assert_eq!(
            tensor_of(&items[2], "tokens"),
            TensorData::I64(Tensor::new(vec![2], vec![7, 8]).unwrap())
        );
        assert!(Transformer::ngrams(0, "tokens").is_err());
    }

    #[test]
    fn padding_with_masks() {
        // ragged batch assembled by hand: [[1,2],[3]]
        let seqs = vec![
            TensorData::I64(Tensor::new(vec![2], vec![1, 2]).unwrap()),
            TensorData::I64(Tensor::new(vec![1], vec![3]).unwrap()),
        ];
        let (padded, mask) = pad_sequences(&seqs, 0.0, "s").unwrap();
        assert_eq!(
            padded,
            TensorData::I64(Tensor::new(vec![2, 2], vec![1, 2, 3, 0]).unwrap())
        );
        assert_eq!(
            mask,
            TensorData::F64(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap())
        );

        // equal lengths -> mask all ones
        let seqs = vec![
            TensorData::I64(Tensor::new(vec![2], vec![1, 2]).unwrap()),
            TensorData::I64(Tensor::new(vec![2], vec![3, 4]).unwrap()),
        ];
        let (_, mask) = pad_sequences(&seqs, 0.0, "s").unwrap();
        assert_eq!(
            mask,
            TensorData::F64(Tensor::filled(vec![2, 2], 1.0))
        );

        // empty batch -> empty padded + mask
        let (padded, mask) = pad_sequences(&[], 0.0, "s").unwrap();
        assert_eq!(padded.shape(), &[0, 0]);
        assert_eq!(mask.shape(), &[0, 0]);
    }

    #[test]
    fn padding_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let path = sequences_container(dir.path());
        let scheme = Scheme::sequential(3, 1, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(1))
            .unwrap()
            .with(Transformer::mapping("squeeze_lead", serde_json::json!({})).unwrap())
            .with(
                Transformer::mapping(
                    "trim_to_length",
                    serde_json::json!({"tokens": "tokens", "lengths": "lengths"}),
                )
                .unwrap(),
            )
            .with(Transformer::batch(3, LastBatchPolicy::Keep).unwrap())
            .with(Transformer::padding(0.0, vec![]));
        let items = drain(&mut stream);
        let padded = tensor_of(&items[0], "tokens");
        let mask = tensor_of(&items[0], "tokens_mask");
        assert_eq!(
            padded,
            TensorData::I64(Tensor::new(vec![3, 4], vec![1, 2, 3, 4, 5, 6, 0, 0, 7, 8, 9, 0]).unwrap())
        );
        assert_eq!(
            mask,
            TensorData::F64(
                Tensor::new(
                    vec![3, 4],
                    vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]
                )
                .unwrap()
            )
        );

        // non-sequence source without exemption errors
        let mut item = Item::new();
        item.insert(
            "scalar".into(),
            Value::Tensor(TensorData::F64(Tensor::scalar(1.0))),
        );
        assert!(pad_item(item.clone(), 0.0, &[]).is_err());
        assert!(pad_item(item, 0.0, &["scalar".into()]).is_ok());
    }

    #[test]
    fn random_crop_golden() {
        // 3x3 ramp image, crop 2x2, seed 7 -> (top, left) = (0, 1) per the
        // standalone rng oracle
        let image = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let mut rng = Rng::seed(7);
        let cropped = crop_tensor(
            &TensorData::F64(image.clone()),
            2,
            2,
            CropLayout::Hw,
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            cropped,
            TensorData::F64(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 4.0, 5.0]).unwrap())
        );

        // crop equal to image size is the identity and consumes two draws
        let mut rng = Rng::seed(3);
        let identity =
            crop_tensor(&TensorData::F64(image.clone()), 3, 3, CropLayout::Hw, &mut rng).unwrap();
        assert!(identity.bits_eq(&TensorData::F64(image.clone())));
        let mut fresh = Rng::seed(3);
        fresh.bounded(1).unwrap();
        fresh.bounded(1).unwrap();
        assert_eq!(rng, fresh);

        // 1x1 crop of a constant image is that constant
        let constant = Tensor::filled(vec![2, 2], 5.0f64);
        let mut rng = Rng::seed(0);
        let c = crop_tensor(&TensorData::F64(constant), 1, 1, CropLayout::Hw, &mut rng).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c, TensorData::F64(Tensor::new(vec![1, 1], vec![5.0]).unwrap()));

        // oversized crop errors
        let image = Tensor::<f64>::zeros(vec![3, 3]);
        let mut rng = Rng::seed(0);
        assert!(crop_tensor(&TensorData::F64(image), 4, 2, CropLayout::Hw, &mut rng).is_err());
    }

    #[test]
    fn one_hot_shapes() {
        let t = TensorData::U8(Tensor::new(vec![3, 1], vec![0, 2, 1]).unwrap());
        let oh = one_hot(&t, 3).unwrap();
        assert_eq!(
            oh,
            TensorData::F64(
                Tensor::new(
                    vec![3, 3],
                    vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
                )
                .unwrap()
            )
        );
        let t = TensorData::I64(Tensor::new(vec![2, 2], vec![0, 1, 1, 0]).unwrap());
        assert_eq!(one_hot(&t, 2).unwrap().shape(), &[2, 2, 2]);
        let t = TensorData::I64(Tensor::new(vec![1], vec![7]).unwrap());
        assert!(one_hot(&t, 3).is_err());
    }

    #[test]
    fn batch_rejects_inconsistent_multidim_shapes() {
        let mut a = Item::new();
        a.insert(
            "x".into(),
            Value::Tensor(TensorData::F64(Tensor::zeros(vec![2, 2]))),
        );
        let mut b = Item::new();
        b.insert(
            "x".into(),
            Value::Tensor(TensorData::F64(Tensor::zeros(vec![3, 2]))),
        );
        assert!(matches!(
            stack_examples(vec![a.clone(), b]),
            Err(Error::ShapeMismatch(_))
        ));

        // disagreeing source sets are rejected too
        let mut c = Item::new();
        c.insert(
            "y".into(),
            Value::Tensor(TensorData::F64(Tensor::zeros(vec![2, 2]))),
        );
        assert!(matches!(
            stack_examples(vec![a, c]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn two_epochs_are_identical_for_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let mut stream = Stream::base(open(&path), scheme, Some(2)).unwrap();
        let all = drain(&mut stream);
        let (first, second) = all.split_at(4);
        assert_eq!(first, second);
    }

    #[test]
    fn save_restore_mid_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let path = sequences_container(dir.path());
        let build = || {
            let scheme = Scheme::shuffled(3, 1, 13, LastBatchPolicy::Keep).unwrap();
            Stream::base(open(&path), scheme, Some(3))
                .unwrap()
                .with(Transformer::mapping("squeeze_lead", serde_json::json!({})).unwrap())
                .with(
                    Transformer::mapping(
                        "trim_to_length",
                        serde_json::json!({"tokens": "tokens", "lengths": "lengths"}),
                    )
                    .unwrap(),
                )
                .with(Transformer::ngrams(2, "tokens").unwrap())
                .with(Transformer::batch(2, LastBatchPolicy::Keep).unwrap())
        };
        for interrupt in 0..8 {
            let mut reference = build();
            let mut interrupted = build();
            for _ in 0..interrupt {
                let a = reference.next().unwrap();
                let b = interrupted.next().unwrap();
                assert_eq!(a, b);
                if a.is_none() {
                    break;
                }
            }
            let state = interrupted.save_state();
            let json = serde_json::to_string(&state).unwrap();
            let mut resumed = build();
            resumed
                .restore_state(&serde_json::from_str(&json).unwrap())
                .unwrap();
            loop {
                let a = reference.next().unwrap();
                let b = resumed.next().unwrap();
                assert_eq!(a, b);
                if a.is_none() {
                    break;
                }
            }
        }
    }

    #[test]
    fn restore_into_wrong_shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = features_container(dir.path());
        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let stream = Stream::base(open(&path), scheme, None).unwrap();
        let state = stream.save_state();

        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let mut wrong = Stream::base(open(&path), scheme, None)
            .unwrap()
            .with(Transformer::batch(2, LastBatchPolicy::Keep).unwrap());
        assert!(matches!(
            wrong.restore_state(&state),
            Err(Error::StateMismatch(_))
        ));

        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let padded = Stream::base(open(&path), scheme, None)
            .unwrap()
            .with(Transformer::padding(0.0, vec![]));
        let padded_state = padded.save_state();
        let scheme = Scheme::sequential(5, 2, LastBatchPolicy::Keep).unwrap();
        let mut cropped = Stream::base(open(&path), scheme, None)
            .unwrap()
            .with(Transformer::random_crop("features", 1, 1, 0, CropLayout::Hw).unwrap());
        assert!(matches!(
            cropped.restore_state(&padded_state),
            Err(Error::StateMismatch(_))
        ));
    }
}
