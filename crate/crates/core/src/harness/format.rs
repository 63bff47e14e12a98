//! Little-endian binary files shared with the feature exporter.
//!
//! Every file starts with the 4-byte magic `BOFA`, a `u32` version (1) and a
//! `u8` kind tag:
//!
//! | kind | payload |
//! |------|---------|
//! | 0 visual features | `n: u64`, `d_o: u32`, `n × u32` labels, `n × d_o` f32 row-major |
//! | 1 text prototypes | `C: u32`, `d: u32`, `C × u32` class ids, `C × d` f32 |
//! | 2 bridge weights  | `d_o: u32`, `d: u32`, `d_o × d` f32 |
//! | 3 state matrix    | `rows: u64`, `cols: u64`, `rows × u32` tags, `rows × cols` f64 |
//!
//! Kind 3 only appears inside checkpoint directories, where state must
//! round-trip at full precision.

use std::fs;
use std::path::Path;

use crate::data::LabeledFeatures;
use crate::error::{Error, FormatError, Result};
use crate::matrixkit::Matrix;

pub const MAGIC: [u8; 4] = *b"BOFA";
pub const VERSION: u32 = 1;
/// magic + version + kind
pub const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FileKind {
    VisualFeatures = 0,
    TextPrototypes = 1,
    BridgeWeights = 2,
    StateMatrix = 3,
}

impl FileKind {
    pub fn from_tag(tag: u8) -> std::result::Result<Self, FormatError> {
        match tag {
            0 => Ok(FileKind::VisualFeatures),
            1 => Ok(FileKind::TextPrototypes),
            2 => Ok(FileKind::BridgeWeights),
            3 => Ok(FileKind::StateMatrix),
            other => Err(FormatError::UnknownKind(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FileKind::VisualFeatures => "visual features",
            FileKind::TextPrototypes => "text prototypes",
            FileKind::BridgeWeights => "bridge weights",
            FileKind::StateMatrix => "state matrix",
        }
    }
}

/// Class ids with one textual prototype row each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypes {
    pub class_ids: Vec<u32>,
    pub protos: Matrix,
}

impl TextPrototypes {
    pub fn new(class_ids: Vec<u32>, protos: Matrix) -> Result<Self> {
        if class_ids.len() != protos.rows() {
            return Err(Error::shape(
                "TextPrototypes::new",
                format!("{} ids for {} rows", class_ids.len(), protos.rows()),
            ));
        }
        Ok(Self { class_ids, protos })
    }

    pub fn get(&self, c: u32) -> Option<&[f64]> {
        self.class_ids.iter().position(|&x| x == c).map(|i| self.protos.row(i))
    }
}

/// A full-precision matrix with one `u32` tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedMatrix {
    pub tags: Vec<u32>,
    pub matrix: Matrix,
}

/// Any decoded file.
#[derive(Debug, Clone, PartialEq)]
pub enum BofaFile {
    Features(LabeledFeatures),
    Text(TextPrototypes),
    Weights(Matrix),
    State(TaggedMatrix),
}

impl BofaFile {
    pub fn kind(&self) -> FileKind {
        match self {
            BofaFile::Features(_) => FileKind::VisualFeatures,
            BofaFile::Text(_) => FileKind::TextPrototypes,
            BofaFile::Weights(_) => FileKind::BridgeWeights,
            BofaFile::State(_) => FileKind::StateMatrix,
        }
    }
}

fn header(kind: FileKind, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for v in values {
        let f = *v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite("f32 narrowing"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

fn dim_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

pub fn encode_features(data: &LabeledFeatures) -> Result<Vec<u8>> {
    let (n, d_o) = data.features.shape();
    let mut out = header(FileKind::VisualFeatures, 12 + n * 4 + n * d_o * 4);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&dim_u32(d_o, "d_o")?.to_le_bytes());
    for l in &data.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    push_f32s(&mut out, data.features.as_slice())?;
    Ok(out)
}

pub fn encode_text(text: &TextPrototypes) -> Result<Vec<u8>> {
    let (c, d) = text.protos.shape();
    let mut out = header(FileKind::TextPrototypes, 8 + c * 4 + c * d * 4);
    out.extend_from_slice(&dim_u32(c, "class count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(d, "d")?.to_le_bytes());
    for id in &text.class_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    push_f32s(&mut out, text.protos.as_slice())?;
    Ok(out)
}

pub fn encode_weights(w: &Matrix) -> Result<Vec<u8>> {
    let (d_o, d) = w.shape();
    let mut out = header(FileKind::BridgeWeights, 8 + d_o * d * 4);
    out.extend_from_slice(&dim_u32(d_o, "d_o")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(d, "d")?.to_le_bytes());
    push_f32s(&mut out, w.as_slice())?;
    Ok(out)
}

pub fn encode_state(m: &TaggedMatrix) -> Result<Vec<u8>> {
    let (rows, cols) = m.matrix.shape();
    if m.tags.len() != rows {
        return Err(Error::shape(
            "encode_state",
            format!("{} tags for {rows} rows", m.tags.len()),
        ));
    }
    let mut out = header(FileKind::StateMatrix, 16 + rows * 4 + rows * cols * 8);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for t in &m.tags {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for v in m.matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(file: &BofaFile) -> Result<Vec<u8>> {
    match file {
        BofaFile::Features(f) => encode_features(f),
        BofaFile::Text(t) => encode_text(t),
        BofaFile::Weights(w) => encode_weights(w),
        BofaFile::State(s) => encode_state(s),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type FResult<T> = std::result::Result<T, FormatError>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> FResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> FResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Checked element count so hostile headers cannot trigger huge allocations.
    fn count(&self, a: u64, b: u64, elem: usize) -> FResult<usize> {
        let available = self.buf.len() - self.pos;
        let needed = a
            .checked_mul(b)
            .and_then(|n| n.checked_mul(elem as u64))
            .and_then(|n| usize::try_from(n).ok())
            .unwrap_or(usize::MAX);
        if needed > available {
            return Err(FormatError::Truncated { needed, available });
        }
        Ok(needed / elem.max(1))
    }

    fn u32s(&mut self, n: usize) -> FResult<Vec<u32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> FResult<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(FormatError::NonFinite(i))
                }
            })
            .collect()
    }

    fn f64s(&mut self, n: usize) -> FResult<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        bytes
            .chunks_exact(8)
            .enumerate()
            .map(|(i, c)| {
                let v = f64::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite(i))
                }
            })
            .collect()
    }

    fn finish(&self) -> FResult<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::Trailing(extra)),
        }
    }
}

/// Validate the header and return the file kind plus a reader at the payload.
fn open(bytes: &[u8]) -> FResult<(FileKind, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let kind = FileKind::from_tag(r.u8()?)?;
    Ok((kind, r))
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
    // values already checked finite by the reader
    Matrix::from_vec(rows, cols, data).expect("validated payload")
}

pub fn decode(bytes: &[u8]) -> FResult<BofaFile> {
    let (kind, mut r) = open(bytes)?;
    let file = match kind {
        FileKind::VisualFeatures => {
            let n = r.u64()?;
            let d_o = r.u32()? as usize;
            let n = r.count(n, 4 + 4 * d_o as u64, 1).map(|_| n as usize)?;
            let labels = r.u32s(n)?;
            let data = r.f32s(n * d_o)?;
            BofaFile::Features(LabeledFeatures {
                labels,
                features: matrix(n, d_o, data),
            })
        }
        FileKind::TextPrototypes => {
            let c = r.u32()? as usize;
            let d = r.u32()? as usize;
            r.count(c as u64, 4 + 4 * d as u64, 1)?;
            let ids = r.u32s(c)?;
            let data = r.f32s(c * d)?;
            BofaFile::Text(TextPrototypes {
                class_ids: ids,
                protos: matrix(c, d, data),
            })
        }
        FileKind::BridgeWeights => {
            let d_o = r.u32()? as usize;
            let d = r.u32()? as usize;
            r.count(d_o as u64, d as u64, 4)?;
            let data = r.f32s(d_o * d)?;
            BofaFile::Weights(matrix(d_o, d, data))
        }
        FileKind::StateMatrix => {
            let rows = r.u64()?;
            let cols = r.u64()?;
            r.count(rows, 4 + 8 * cols, 1)?;
            let (rows, cols) = (rows as usize, cols as usize);
            let tags = r.u32s(rows)?;
            let data = r.f64s(rows * cols)?;
            BofaFile::State(TaggedMatrix {
                tags,
                matrix: matrix(rows, cols, data),
            })
        }
    };
    r.finish()?;
    Ok(file)
}

fn decode_expect(bytes: &[u8], expected: FileKind) -> FResult<BofaFile> {
    let (kind, _) = open(bytes)?;
    if kind != expected {
        return Err(FormatError::Kind {
            expected: expected as u8,
            found: kind as u8,
        });
    }
    decode(bytes)
}

pub fn decode_features(bytes: &[u8]) -> FResult<LabeledFeatures> {
    match decode_expect(bytes, FileKind::VisualFeatures)? {
        BofaFile::Features(f) => Ok(f),
        _ => unreachable!(),
    }
}

pub fn decode_text(bytes: &[u8]) -> FResult<TextPrototypes> {
    match decode_expect(bytes, FileKind::TextPrototypes)? {
        BofaFile::Text(t) => Ok(t),
        _ => unreachable!(),
    }
}

pub fn decode_weights(bytes: &[u8]) -> FResult<Matrix> {
    match decode_expect(bytes, FileKind::BridgeWeights)? {
        BofaFile::Weights(w) => Ok(w),
        _ => unreachable!(),
    }
}

pub fn decode_state(bytes: &[u8]) -> FResult<TaggedMatrix> {
    match decode_expect(bytes, FileKind::StateMatrix)? {
        BofaFile::State(s) => Ok(s),
        _ => unreachable!(),
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: FResult<T>) -> Result<T> {
    r.map_err(|e| Error::format(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<BofaFile> {
    let path = path.as_ref();
    with_path(path, decode(&read_bytes(path)?))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<LabeledFeatures> {
    let path = path.as_ref();
    with_path(path, decode_features(&read_bytes(path)?))
}

pub fn write_features(path: impl AsRef<Path>, data: &LabeledFeatures) -> Result<()> {
    write_bytes(path.as_ref(), &encode_features(data)?)
}

pub fn read_text_protos(path: impl AsRef<Path>) -> Result<TextPrototypes> {
    let path = path.as_ref();
    with_path(path, decode_text(&read_bytes(path)?))
}

pub fn write_text_protos(path: impl AsRef<Path>, text: &TextPrototypes) -> Result<()> {
    write_bytes(path.as_ref(), &encode_text(text)?)
}

pub fn read_bridge_w0(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    with_path(path, decode_weights(&read_bytes(path)?))
}

pub fn write_bridge_w0(path: impl AsRef<Path>, w: &Matrix) -> Result<()> {
    write_bytes(path.as_ref(), &encode_weights(w)?)
}

pub fn read_state(path: impl AsRef<Path>) -> Result<TaggedMatrix> {
    let path = path.as_ref();
    with_path(path, decode_state(&read_bytes(path)?))
}
