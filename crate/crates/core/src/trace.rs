//! On-disk container for hidden-state traces, model weights and fitted
//! approximators.
//!
//! Layout:
//!
//! ```text
//! offset 0   b"FCTRACE1"
//! offset 8   u32 LE  header length H (bytes, including trailing '\n')
//! offset 12  H bytes UTF-8 JSON header, one line
//! offset 12+H  little-endian binary32 payload, in the order the header implies
//! ```
//!
//! The header's `format` field tells traces, weights and approximator sets
//! apart. Readers compute the exact payload size from the header and reject
//! streams that are shorter or longer.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproximatorSet, LinearApproximator};
use crate::model::{LayerNorm, Linear, ToyModel, TransformerBlock, MLP_RATIO};
use crate::schedule::Schedule;
use crate::tensor::{Matrix, TensorError};

pub const MAGIC: &[u8; 8] = b"FCTRACE1";
const PREFIX_LEN: usize = 12;
const FORMAT_TRACE: &str = "trace";
const FORMAT_MODEL: &str = "model";
const FORMAT_APPROX: &str = "approximators";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt container at byte {offset}: {what}")]
    Corruption { offset: usize, what: String },
    #[error("invalid contents: {0}")]
    Invalid(String),
}

impl From<TensorError> for TraceError {
    fn from(e: TensorError) -> Self {
        TraceError::Invalid(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub steps: usize,
    pub heads: usize,
    pub precision: String,
    /// Generating schedule, absent for hand-built sequences.
    pub schedule: Option<Schedule>,
    pub seed: u64,
    /// Whether each frame carries per-layer (input, output) pairs.
    pub layer_pairs: bool,
}

impl TraceHeader {
    pub fn new(tokens: usize, dim: usize, layers: usize, heads: usize, seed: u64) -> Self {
        Self {
            format: FORMAT_TRACE.into(),
            tokens,
            dim,
            layers,
            steps: 0,
            heads,
            precision: "f32".into(),
            schedule: None,
            seed,
            layer_pairs: false,
        }
    }

    fn payload_floats(&self) -> Option<usize> {
        let per_matrix = self.tokens.checked_mul(self.dim)?;
        let per_frame = if self.layer_pairs { per_matrix.checked_mul(self.layers.checked_mul(2)?.checked_add(1)?)? } else { per_matrix };
        per_frame.checked_mul(self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Model input x_t.
    pub input: Matrix<f32>,
    /// Per-layer (block input, block output), empty unless `layer_pairs`.
    pub pairs: Vec<(Matrix<f32>, Matrix<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub frames: Vec<Frame>,
}

impl Trace {
    /// Runs `model` at full compute over `inputs` and records every frame,
    /// with per-layer pairs if `layer_pairs`.
    pub fn record(model: &ToyModel<f32>, inputs: &[Matrix<f32>], schedule: Option<Schedule>, seed: u64, layer_pairs: bool) -> Result<Self> {
        let tokens = inputs.first().map_or(schedule.as_ref().map_or(0, |s| s.tokens), |x| x.rows());
        let mut header = TraceHeader::new(tokens, model.dim, model.depth(), model.heads, seed);
        header.steps = inputs.len();
        header.schedule = schedule;
        header.layer_pairs = layer_pairs;
        let mut frames = Vec::with_capacity(inputs.len());
        for x in inputs {
            let pairs = if layer_pairs {
                let states = model.forward_states(x)?;
                states.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
            } else {
                Vec::new()
            };
            frames.push(Frame { input: x.clone(), pairs });
        }
        let trace = Self { header, frames };
        trace.validate()?;
        Ok(trace)
    }

    pub fn inputs(&self) -> Vec<Matrix<f32>> {
        self.frames.iter().map(|f| f.input.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != FORMAT_TRACE {
            return Err(TraceError::Format(format!("expected format `{FORMAT_TRACE}`, found `{}`", h.format)));
        }
        if h.precision != "f32" {
            return Err(TraceError::Format(format!("unsupported precision `{}`", h.precision)));
        }
        if self.frames.len() != h.steps {
            return Err(TraceError::Invalid(format!("header declares {} steps, trace has {} frames", h.steps, self.frames.len())));
        }
        let shape = (h.tokens, h.dim);
        for (t, f) in self.frames.iter().enumerate() {
            if f.input.shape() != shape {
                return Err(TraceError::Invalid(format!("frame {t} input has shape {:?}, expected {shape:?}", f.input.shape())));
            }
            let want = if h.layer_pairs { h.layers } else { 0 };
            if f.pairs.len() != want {
                return Err(TraceError::Invalid(format!("frame {t} has {} layer pairs, expected {want}", f.pairs.len())));
            }
            for (l, (a, b)) in f.pairs.iter().enumerate() {
                if a.shape() != shape || b.shape() != shape {
                    return Err(TraceError::Invalid(format!("frame {t} layer {l} pair has wrong shape")));
                }
            }
        }
        Ok(())
    }
}

fn write_header<W: Write, H: Serialize>(w: &mut W, header: &H) -> Result<usize> {
    let mut json = serde_json::to_string(header).map_err(|e| TraceError::Format(e.to_string()))?;
    json.push('\n');
    let len = u32::try_from(json.len()).map_err(|_| TraceError::Format("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    Ok(PREFIX_LEN + json.len())
}

fn write_floats<W: Write>(w: &mut W, data: &[f32]) -> Result<usize> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(buf.len())
}

/// Splits a container into its JSON header and payload bytes, checking magic
/// and header bounds.
fn split_container(bytes: &[u8]) -> Result<(serde_json::Value, &[u8], usize)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TraceError::Format("bad magic".into()));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(TraceError::Corruption { offset: bytes.len(), what: "missing header length".into() });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREFIX_LEN.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| TraceError::Corruption {
        offset: bytes.len(),
        what: format!("header declares {hlen} bytes beyond end of stream"),
    })?;
    let text = std::str::from_utf8(&bytes[PREFIX_LEN..end]).map_err(|e| TraceError::Format(format!("header is not UTF-8: {e}")))?;
    let line = text.strip_suffix('\n').ok_or_else(|| TraceError::Format("header line is not newline-terminated".into()))?;
    let value = serde_json::from_str(line).map_err(|e| TraceError::Format(format!("header is not valid JSON: {e}")))?;
    Ok((value, &bytes[end..], end))
}

/// A cursor over the float payload that knows its absolute byte offset.
struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Payload<'a> {
    fn new(bytes: &'a [u8], base: usize, expected_floats: usize) -> Result<Self> {
        let expected = expected_floats
            .checked_mul(4)
            .ok_or_else(|| TraceError::Corruption { offset: base, what: "declared payload size overflows".into() })?;
        if bytes.len() < expected {
            return Err(TraceError::Corruption {
                offset: base + bytes.len(),
                what: format!("payload truncated: expected {expected} bytes, found {}", bytes.len()),
            });
        }
        if bytes.len() > expected {
            return Err(TraceError::Corruption {
                offset: base + expected,
                what: format!("{} trailing bytes after payload", bytes.len() - expected),
            });
        }
        Ok(Self { bytes, pos: 0, base })
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let end = self.pos + n * 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| TraceError::Corruption { offset: self.base + self.pos, what: "read past payload".into() })?;
        let out = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        self.pos = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let offset = self.base + self.pos;
        let data = self.floats(rows * cols)?;
        Matrix::new(rows, cols, data).map_err(|e| TraceError::Corruption { offset, what: e.to_string() })
    }
}

fn parse_header<H: for<'de> Deserialize<'de>>(value: serde_json::Value, format: &str) -> Result<H> {
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        Some(f) => return Err(TraceError::Format(format!("expected format `{format}`, found `{f}`"))),
        None => return Err(TraceError::Format("header has no format field".into())),
    }
    serde_json::from_value(value).map_err(|e| TraceError::Format(format!("malformed header: {e}")))
}

/// Writes `trace` and returns the number of bytes written.
pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> Result<usize> {
    trace.validate()?;
    let mut n = write_header(&mut w, &trace.header)?;
    for f in &trace.frames {
        n += write_floats(&mut w, f.input.data())?;
        for (a, b) in &f.pairs {
            n += write_floats(&mut w, a.data())?;
            n += write_floats(&mut w, b.data())?;
        }
    }
    w.flush()?;
    Ok(n)
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Trace> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub fn decode_trace(bytes: &[u8]) -> Result<Trace> {
    let (value, payload, base) = split_container(bytes)?;
    let header: TraceHeader = parse_header(value, FORMAT_TRACE)?;
    if header.precision != "f32" {
        return Err(TraceError::Format(format!("unsupported precision `{}`", header.precision)));
    }
    let floats = header.payload_floats().ok_or_else(|| TraceError::Corruption { offset: base, what: "declared sizes overflow".into() })?;
    let mut p = Payload::new(payload, base, floats)?;
    let (n, d) = (header.tokens, header.dim);
    let mut frames = Vec::with_capacity(header.steps);
    for _ in 0..header.steps {
        let input = p.matrix(n, d)?;
        let mut pairs = Vec::new();
        if header.layer_pairs {
            for _ in 0..header.layers {
                let a = p.matrix(n, d)?;
                let b = p.matrix(n, d)?;
                pairs.push((a, b));
            }
        }
        frames.push(Frame { input, pairs });
    }
    Ok(Trace { header, frames })
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<usize> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    read_trace(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    layers: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    precision: String,
}

fn linear_floats(dim_in: usize, dim_out: usize) -> usize {
    dim_in * dim_out + dim_out
}

fn block_floats(d: usize) -> usize {
    let h = MLP_RATIO * d;
    4 * d + 4 * linear_floats(d, d) + linear_floats(d, h) + linear_floats(h, d)
}

/// Serializes every weight of `model` (f32) into the container.
pub fn write_model<W: Write>(model: &ToyModel<f32>, mut w: W) -> Result<usize> {
    let header = ModelHeader {
        format: FORMAT_MODEL.into(),
        layers: model.depth(),
        dim: model.dim,
        heads: model.heads,
        seed: model.seed,
        precision: "f32".into(),
    };
    let mut n = write_header(&mut w, &header)?;
    for b in &model.layers {
        for ln in [&b.ln1, &b.ln2] {
            n += write_floats(&mut w, &ln.scale)?;
            n += write_floats(&mut w, &ln.shift)?;
        }
        for lin in [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2] {
            n += write_floats(&mut w, lin.weight.data())?;
            n += write_floats(&mut w, &lin.bias)?;
        }
    }
    w.flush()?;
    Ok(n)
}

pub fn read_model<R: Read>(mut r: R) -> Result<ToyModel<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (value, payload, base) = split_container(&bytes)?;
    let h: ModelHeader = parse_header(value, FORMAT_MODEL)?;
    if h.heads == 0 || !h.dim.is_multiple_of(h.heads) {
        return Err(TraceError::Invalid(format!("heads {} do not divide dim {}", h.heads, h.dim)));
    }
    let floats = h.layers.checked_mul(block_floats(h.dim)).ok_or_else(|| TraceError::Corruption { offset: base, what: "declared sizes overflow".into() })?;
    let mut p = Payload::new(payload, base, floats)?;
    let d = h.dim;
    let hid = MLP_RATIO * d;
    let mut layers = Vec::with_capacity(h.layers);
    for _ in 0..h.layers {
        let ln = |p: &mut Payload| -> Result<LayerNorm<f32>> { Ok(LayerNorm { scale: p.floats(d)?, shift: p.floats(d)? }) };
        let ln1 = ln(&mut p)?;
        let ln2 = ln(&mut p)?;
        let lin = |p: &mut Payload, i: usize, o: usize| -> Result<Linear<f32>> { Ok(Linear { weight: p.matrix(i, o)?, bias: p.floats(o)? }) };
        layers.push(TransformerBlock {
            dim: d,
            heads: h.heads,
            ln1,
            q: lin(&mut p, d, d)?,
            k: lin(&mut p, d, d)?,
            v: lin(&mut p, d, d)?,
            o: lin(&mut p, d, d)?,
            ln2,
            fc1: lin(&mut p, d, hid)?,
            fc2: lin(&mut p, hid, d)?,
        });
    }
    Ok(ToyModel { layers, dim: d, heads: h.heads, seed: h.seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ApproxHeader {
    format: String,
    layers: usize,
    dim: usize,
    precision: String,
    /// Free-form fit metadata (held-out errors etc.), carried through untouched.
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_approximators<W: Write>(set: &ApproximatorSet<f32>, meta: serde_json::Value, mut w: W) -> Result<usize> {
    let dim = set.bypass.in_dim();
    if set.layers.iter().chain(std::iter::once(&set.bypass)).any(|a| a.in_dim() != dim || a.out_dim() != dim) {
        return Err(TraceError::Invalid("approximators must all be square with a common dimension".into()));
    }
    let header = ApproxHeader { format: FORMAT_APPROX.into(), layers: set.layers.len(), dim, precision: "f32".into(), meta };
    let mut n = write_header(&mut w, &header)?;
    for a in set.layers.iter().chain(std::iter::once(&set.bypass)) {
        n += write_floats(&mut w, a.weight().data())?;
        n += write_floats(&mut w, a.bias())?;
    }
    w.flush()?;
    Ok(n)
}

pub fn read_approximators<R: Read>(mut r: R) -> Result<(ApproximatorSet<f32>, serde_json::Value)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (value, payload, base) = split_container(&bytes)?;
    let h: ApproxHeader = parse_header(value, FORMAT_APPROX)?;
    let floats = (h.layers + 1)
        .checked_mul(linear_floats(h.dim, h.dim))
        .ok_or_else(|| TraceError::Corruption { offset: base, what: "declared sizes overflow".into() })?;
    let mut p = Payload::new(payload, base, floats)?;
    let mut all = Vec::with_capacity(h.layers + 1);
    for _ in 0..=h.layers {
        let w = p.matrix(h.dim, h.dim)?;
        let b = p.floats(h.dim)?;
        all.push(LinearApproximator::new(w, b)?);
    }
    let bypass = all.pop().expect("at least the bypass");
    Ok((ApproximatorSet { layers: all, bypass }, h.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Trace {
        let mut header = TraceHeader::new(1, 1, 1, 1, 0);
        header.steps = 1;
        Trace { header, frames: vec![Frame { input: Matrix::new(1, 1, vec![1.5f32]).unwrap(), pairs: vec![] }] }
    }

    #[test]
    fn empty_trace_is_prefix_and_header() {
        let mut t = tiny();
        t.header.steps = 0;
        t.frames.clear();
        let mut buf = Vec::new();
        let n = write_trace(&t, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        assert_eq!(n, 8 + 4 + hlen);
        assert_eq!(decode_trace(&buf).unwrap(), t);
    }

    #[test]
    fn one_element_byte_count() {
        let mut buf = Vec::new();
        let n = write_trace(&tiny(), &mut buf).unwrap();
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        assert_eq!(n, 8 + 4 + hlen + 4);
        assert_eq!(&buf[n - 4..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_trace(&tiny(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_trace(&bad), Err(TraceError::Format(_))));
        let cut = &buf[..buf.len() - 1];
        match decode_trace(cut) {
            Err(TraceError::Corruption { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected corruption, got {other:?}"),
        }
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(decode_trace(&long), Err(TraceError::Corruption { .. })));
        assert!(matches!(decode_trace(&buf[..10]), Err(TraceError::Corruption { .. })));
    }

    #[test]
    fn model_round_trip() {
        let m = ToyModel::<f32>::seeded(2, 8, 2, 11);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap(), m);
        assert!(matches!(decode_trace(&buf), Err(TraceError::Format(_))));
    }

    #[test]
    fn approximator_round_trip() {
        let set = ApproximatorSet {
            layers: vec![LinearApproximator::new(Matrix::seeded_gaussian(3, 3, 1, 1.0), vec![1.0, 2.0, 3.0]).unwrap()],
            bypass: LinearApproximator::identity(3),
        };
        let mut buf = Vec::new();
        write_approximators(&set, serde_json::json!({"ridge": 1e-6}), &mut buf).unwrap();
        let (back, meta) = read_approximators(&buf[..]).unwrap();
        assert_eq!(back, set);
        assert_eq!(meta["ridge"], 1e-6);
    }
}
