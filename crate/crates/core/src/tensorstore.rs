//! Tensor container format and the projector checkpoint model.
//!
//! A container file is laid out as
//!
//! ```text
//! [u64 little-endian header length][UTF-8 JSON header][packed little-endian payload]
//! ```
//!
//! The header maps every tensor name to `{"data_offsets": [start, end], "dtype", "shape"}`,
//! with offsets relative to the start of the payload. Names are written in sorted
//! order, payload ranges follow the same order and are densely packed, so identical
//! inputs always produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" => Ok(DType::F32),
            "float64" => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Casts float64 values into the requested storage dtype.
    pub fn from_f64(values: &[f64], dtype: DType) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(values.to_vec()),
        }
    }

    fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// Named, shaped, row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {shape:?} ({expected} values) but {} values",
                data.len()
            )));
        }
        Ok(Tensor { name, shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix, dtype: DType) -> Self {
        let row_major: Vec<f64> = m.transpose().as_slice().to_vec();
        Tensor {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: TensorData::from_f64(&row_major, dtype),
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &[f64], dtype: DType) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![v.len()],
            data: TensorData::from_f64(v, dtype),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "tensor `{}` is {}-D, expected a matrix",
                self.name,
                self.shape.len()
            )));
        }
        Ok(Matrix::from_row_slice(
            self.shape[0],
            self.shape[1],
            &self.data.to_f64(),
        ))
    }

    /// Bitwise equality, including NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    data_offsets: [u64; 2],
    dtype: String,
    shape: Vec<usize>,
}

/// Serializes tensors into the container byte layout.
pub fn encode_container(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        if sorted.insert(t.name.as_str(), t).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate tensor name `{}`",
                t.name
            )));
        }
    }

    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in &sorted {
        let start = payload.len() as u64;
        t.data.write_le(&mut payload);
        header.insert(
            *name,
            HeaderEntry {
                data_offsets: [start, payload.len() as u64],
                dtype: t.dtype().as_str().to_string(),
                shape: t.shape.clone(),
            },
        );
    }
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the container byte layout. Tensors are returned in header (sorted name) order.
pub fn decode_container(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated: missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::Format(format!(
            "truncated: header length {header_len} exceeds {available} available bytes"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_str(header_text)
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[header_end..];

    let mut ranges: Vec<(u64, u64, &str)> = header
        .iter()
        .map(|(name, e)| (e.data_offsets[0], e.data_offsets[1], name.as_str()))
        .collect();
    ranges.sort();
    let mut cursor = 0u64;
    for &(start, end, name) in &ranges {
        if end < start {
            return Err(Error::Format(format!(
                "tensor `{name}` has inverted byte range"
            )));
        }
        if start < cursor {
            return Err(Error::Format(format!(
                "tensor `{name}` overlaps a previous byte range"
            )));
        }
        if start > cursor {
            return Err(Error::Format(format!(
                "gap in payload before tensor `{name}`"
            )));
        }
        cursor = end;
    }
    if cursor > payload.len() as u64 {
        return Err(Error::Format(format!(
            "truncated: payload needs {cursor} bytes, found {}",
            payload.len()
        )));
    }
    if cursor < payload.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing payload bytes not referenced by the header",
            payload.len() as u64 - cursor
        )));
    }

    header
        .into_iter()
        .map(|(name, entry)| {
            let dtype = DType::parse(&entry.dtype)?;
            let [start, end] = entry.data_offsets;
            let count: usize = entry.shape.iter().product();
            if (end - start) as usize != count * dtype.size() {
                return Err(Error::Format(format!(
                    "tensor `{name}` byte range {} does not match shape {:?} of {}",
                    end - start,
                    entry.shape,
                    dtype.as_str()
                )));
            }
            let data = TensorData::read_le(dtype, &payload[start as usize..end as usize]);
            Ok(Tensor {
                name,
                shape: entry.shape,
                data,
            })
        })
        .collect()
}

pub fn write_container(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// One projector layer: `weight` is `d_out × d_in`, `bias` has length `d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Option<DVector<f64>>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Option<DVector<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::Shape(format!(
                    "bias length {} does not match d_out {}",
                    b.len(),
                    weight.nrows()
                )));
            }
        }
        Ok(Layer { weight, bias })
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().all(|x| x.is_finite())
            && self
                .bias
                .iter()
                .flat_map(|b| b.iter())
                .all(|x| x.is_finite())
    }
}

/// Weight matrix with the bias appended as the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLayer {
    pub matrix: Matrix,
    pub had_bias: bool,
}

pub fn augment(layer: &Layer) -> Result<AugmentedLayer> {
    match &layer.bias {
        None => Ok(AugmentedLayer {
            matrix: layer.weight.clone(),
            had_bias: false,
        }),
        Some(b) => {
            if b.len() != layer.d_out() {
                return Err(Error::Shape(format!(
                    "bias length {} does not match d_out {}",
                    b.len(),
                    layer.d_out()
                )));
            }
            let d_in = layer.d_in();
            let mut m = layer.weight.clone().resize_horizontally(d_in + 1, 0.0);
            m.set_column(d_in, b);
            Ok(AugmentedLayer {
                matrix: m,
                had_bias: true,
            })
        }
    }
}

pub fn split(aug: &AugmentedLayer) -> Layer {
    if !aug.had_bias {
        return Layer {
            weight: aug.matrix.clone(),
            bias: None,
        };
    }
    let w = aug.matrix.ncols() - 1;
    Layer {
        weight: aug.matrix.columns(0, w).into_owned(),
        bias: Some(aug.matrix.column(w).into_owned()),
    }
}

/// An ordered stack of projector layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorCheckpoint {
    pub id: String,
    pub layers: Vec<Layer>,
    /// Storage dtype the checkpoint was loaded from, used when writing it back.
    pub dtype: DType,
}

impl ProjectorCheckpoint {
    pub fn new(id: impl Into<String>, layers: Vec<Layer>, dtype: DType) -> Result<Self> {
        let id = id.into();
        if layers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint `{id}` has no layers"
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].d_in() != pair[0].d_out() {
                return Err(Error::Shape(format!(
                    "checkpoint `{id}`: layer {} has d_in {} but layer {} has d_out {}",
                    i + 2,
                    pair[1].d_in(),
                    i + 1,
                    pair[0].d_out()
                )));
            }
        }
        let with_bias = layers[0].bias.is_some();
        if layers.iter().any(|l| l.bias.is_some() != with_bias) {
            return Err(Error::Format(format!(
                "checkpoint `{id}`: bias present on some layers but not others"
            )));
        }
        if let Some(i) = layers.iter().position(|l| !l.is_finite()) {
            return Err(Error::Numerical(format!(
                "checkpoint `{id}`: layer {} contains non-finite values",
                i + 1
            )));
        }
        Ok(ProjectorCheckpoint { id, layers, dtype })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_bias(&self) -> bool {
        self.layers[0].bias.is_some()
    }

    /// Builds a checkpoint from `layer.{l}.weight` / `layer.{l}.bias` tensors, `l` 1-based.
    pub fn from_tensors(id: impl Into<String>, tensors: &[Tensor]) -> Result<Self> {
        let id = id.into();
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        let mut dtypes = BTreeSet::new();
        for t in tensors {
            let (index, kind) = parse_layer_name(&t.name).ok_or_else(|| {
                Error::Format(format!(
                    "unexpected tensor `{}` in checkpoint `{id}`",
                    t.name
                ))
            })?;
            dtypes.insert(t.dtype().as_str());
            match kind {
                LayerPart::Weight => {
                    if t.shape.len() != 2 {
                        return Err(Error::Shape(format!(
                            "`{}` must be 2-D, found shape {:?}",
                            t.name, t.shape
                        )));
                    }
                    weights.insert(index, t);
                }
                LayerPart::Bias => {
                    if t.shape.len() != 1 {
                        return Err(Error::Shape(format!(
                            "`{}` must be 1-D, found shape {:?}",
                            t.name, t.shape
                        )));
                    }
                    biases.insert(index, t);
                }
            }
        }
        let count = weights.len();
        for l in 1..=count {
            if !weights.contains_key(&l) {
                return Err(Error::Format(format!(
                    "checkpoint `{id}` is missing layer.{l}.weight"
                )));
            }
        }
        if let Some(&l) = biases.keys().find(|l| !weights.contains_key(l)) {
            return Err(Error::Format(format!(
                "checkpoint `{id}` has layer.{l}.bias without a weight"
            )));
        }
        let dtype = if dtypes.contains("float64") {
            DType::F64
        } else {
            DType::F32
        };

        let layers = (1..=count)
            .map(|l| {
                let weight = weights[&l].to_matrix()?;
                let bias = biases.get(&l).map(|b| DVector::from_vec(b.data.to_f64()));
                Layer::new(weight, bias).map_err(|e| match e {
                    Error::Shape(msg) => Error::Shape(format!("layer {l}: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ProjectorCheckpoint::new(id, layers, dtype)
    }

    pub fn to_tensors(&self, dtype: DType) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push(Tensor::from_matrix(
                format!("layer.{l}.weight"),
                &layer.weight,
                dtype,
            ));
            if let Some(b) = &layer.bias {
                out.push(Tensor::from_vector(
                    format!("layer.{l}.bias"),
                    b.as_slice(),
                    dtype,
                ));
            }
        }
        out
    }

    /// Checks that `other` has the same per-layer shapes and bias layout.
    pub fn check_compatible(&self, other: &ProjectorCheckpoint) -> Result<()> {
        if self.num_layers() != other.num_layers() {
            return Err(Error::Shape(format!(
                "`{}` has {} layers but `{}` has {}",
                self.id,
                self.num_layers(),
                other.id,
                other.num_layers()
            )));
        }
        if self.has_bias() != other.has_bias() {
            return Err(Error::Shape(format!(
                "`{}` and `{}` disagree on bias presence",
                self.id, other.id
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::Shape(format!(
                    "layer {}: `{}` is {:?} but `{}` is {:?}",
                    i + 1,
                    self.id,
                    a.weight.shape(),
                    other.id,
                    b.weight.shape()
                )));
            }
        }
        Ok(())
    }
}

enum LayerPart {
    Weight,
    Bias,
}

fn parse_layer_name(name: &str) -> Option<(usize, LayerPart)> {
    let rest = name.strip_prefix("layer.")?;
    let (index, part) = rest.split_once('.')?;
    if index.starts_with('0') || index.starts_with('+') {
        return None;
    }
    let index: usize = index.parse().ok()?;
    let part = match part {
        "weight" => LayerPart::Weight,
        "bias" => LayerPart::Bias,
        _ => return None,
    };
    Some((index, part))
}

/// Loads a checkpoint; its id is the file stem.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProjectorCheckpoint> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ProjectorCheckpoint::from_tensors(id, &read_container(path)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &ProjectorCheckpoint) -> Result<()> {
    write_container(path, &ckpt.to_tensors(ckpt.dtype))
}
