//! TDTR binary trace container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "TDTR" | u32 version = 1 | u32 record count
//! per record:
//!   u16 name length | name (UTF-8)
//!   u8 kind (0=A 1=W 2=G 3=O 4=scheduled group) | u8 dtype (0=F32 1=BF16)
//!   u32 layer id | u32 epoch id | u8 stride | u16 Kx | u16 Ky
//!   u32 n | u32 c | u32 h | u32 w
//!   payload: n·c·h·w values, 4 bytes (F32) or 2 bytes (BF16) each
//! ```
//!
//! Kind 4 carries a [`ScheduledGroup`]: `stride` holds the allocation mode,
//! `Kx` the lane count, `Ky` the staging depth; `n` is the step count and
//! `h` the dense row count. Its payload is, per step, a u32 anchor row
//! followed by `lanes` × (value, u8 option index).

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::compress::{AllocMode, ScheduledGroup, Slot};
use crate::tensor::{DType, Dims4, Tensor4, TensorKind};

pub const MAGIC: &[u8; 4] = b"TDTR";
pub const VERSION: u32 = 1;
const KIND_SCHEDULED: u8 = 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: not a TDTR trace")]
    BadMagic,
    #[error("truncated trace: {0}")]
    Truncated(String),
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error("dimensions {0} overflow")]
    DimOverflow(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tensor(Tensor4),
    Scheduled(ScheduledGroup),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub name: String,
    pub layer_id: u32,
    pub epoch_id: u32,
    pub stride: u8,
    pub kernel: (u16, u16),
    pub payload: Payload,
}

impl TraceRecord {
    pub fn tensor(&self) -> Option<&Tensor4> {
        match &self.payload {
            Payload::Tensor(t) => Some(t),
            Payload::Scheduled(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceFile {
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            encode_record(r, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        rd.pos = 4;
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(TraceError::Version(version));
        }
        let count = rd.u32("record count")?;
        let mut records = Vec::new();
        for i in 0..count {
            records.push(decode_record(&mut rd, i)?);
        }
        Ok(TraceFile { records })
    }
}

pub fn write_trace(path: impl AsRef<Path>, trace: &TraceFile) -> Result<()> {
    let bytes = trace.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    TraceFile::from_bytes(&fs::read(path)?)
}

fn put_header(
    out: &mut Vec<u8>,
    r: &TraceRecord,
    kind: u8,
    dtype: DType,
    stride: u8,
    kernel: (u16, u16),
    dims: [u32; 4],
) -> Result<()> {
    let name = r.name.as_bytes();
    let len = u16::try_from(name.len())
        .map_err(|_| TraceError::Invalid(format!("name of {} bytes is too long", name.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    out.push(kind);
    out.push(dtype.code());
    out.extend_from_slice(&r.layer_id.to_le_bytes());
    out.extend_from_slice(&r.epoch_id.to_le_bytes());
    out.push(stride);
    out.extend_from_slice(&kernel.0.to_le_bytes());
    out.extend_from_slice(&kernel.1.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn dim32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| TraceError::DimOverflow(v.to_string()))
}

fn put_value(out: &mut Vec<u8>, v: f32, dtype: DType) {
    match dtype {
        DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
        DType::BF16 => out.extend_from_slice(&((v.to_bits() >> 16) as u16).to_le_bytes()),
    }
}

fn encode_record(r: &TraceRecord, out: &mut Vec<u8>) -> Result<()> {
    match &r.payload {
        Payload::Tensor(t) => {
            let d = t.dims();
            let dims = [dim32(d.n)?, dim32(d.c)?, dim32(d.h)?, dim32(d.w)?];
            put_header(out, r, t.kind().code(), t.dtype(), r.stride, r.kernel, dims)?;
            for &v in t.data() {
                put_value(out, v, t.dtype());
            }
        }
        Payload::Scheduled(g) => {
            let dims = [dim32(g.steps.len())?, dim32(g.lanes)?, dim32(g.dense_rows)?, 1];
            let kernel = (g.lanes as u16, g.depth as u16);
            put_header(out, r, KIND_SCHEDULED, g.dtype, g.mode.code(), kernel, dims)?;
            for (anchor, slots) in g.anchors.iter().zip(&g.steps) {
                out.extend_from_slice(&dim32(*anchor)?.to_le_bytes());
                for s in slots {
                    put_value(out, s.value, g.dtype);
                    out.push(s.idx);
                }
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TraceError::Truncated(format!(
                "{what} needs {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn value(&mut self, dtype: DType) -> Result<f32> {
        Ok(match dtype {
            DType::F32 => f32::from_le_bytes(self.take(4, "payload")?.try_into().unwrap()),
            DType::BF16 => f32::from_bits((self.u16("payload")? as u32) << 16),
        })
    }
}

fn decode_record(rd: &mut Reader, index: u32) -> Result<TraceRecord> {
    let what = format!("record {index}");
    let name_len = rd.u16(&what)? as usize;
    let name = String::from_utf8(rd.take(name_len, &what)?.to_vec())
        .map_err(|_| TraceError::Invalid(format!("{what}: name is not UTF-8")))?;
    let kind = rd.u8(&what)?;
    let dtype_code = rd.u8(&what)?;
    let dtype = DType::from_code(dtype_code)
        .ok_or_else(|| TraceError::Invalid(format!("{what}: dtype code {dtype_code}")))?;
    let layer_id = rd.u32(&what)?;
    let epoch_id = rd.u32(&what)?;
    let stride = rd.u8(&what)?;
    let kernel = (rd.u16(&what)?, rd.u16(&what)?);
    let dims = [rd.u32(&what)?, rd.u32(&what)?, rd.u32(&what)?, rd.u32(&what)?];
    let dims = Dims4::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    );
    let width = dtype.bits() as usize / 8;
    let payload = if kind == KIND_SCHEDULED {
        let (steps, lanes, dense_rows) = (dims.n, dims.c, dims.h);
        let bytes = lanes
            .checked_mul(width + 1)
            .and_then(|b| b.checked_add(4))
            .and_then(|b| b.checked_mul(steps))
            .ok_or_else(|| TraceError::DimOverflow(dims.to_string()))?;
        if rd.buf.len() - rd.pos < bytes {
            return Err(TraceError::Truncated(format!("{what}: payload needs {bytes} bytes")));
        }
        let mode = AllocMode::from_code(stride)
            .ok_or_else(|| TraceError::Invalid(format!("{what}: allocation mode {stride}")))?;
        let mut anchors = Vec::with_capacity(steps);
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            anchors.push(rd.u32(&what)? as usize);
            let mut slots = Vec::with_capacity(lanes);
            for _ in 0..lanes {
                let value = rd.value(dtype)?;
                let idx = rd.u8(&what)?;
                slots.push(Slot { value, idx });
            }
            rows.push(slots);
        }
        Payload::Scheduled(ScheduledGroup {
            lanes,
            depth: kernel.1 as usize,
            dense_rows,
            mode,
            dtype,
            anchors,
            steps: rows,
        })
    } else {
        let kind = TensorKind::from_code(kind)
            .ok_or_else(|| TraceError::Invalid(format!("{what}: kind code {kind}")))?;
        let count = dims
            .checked_len()
            .ok_or_else(|| TraceError::DimOverflow(dims.to_string()))?;
        let bytes = count
            .checked_mul(width)
            .ok_or_else(|| TraceError::DimOverflow(dims.to_string()))?;
        if rd.buf.len() - rd.pos < bytes {
            return Err(TraceError::Truncated(format!("{what}: payload needs {bytes} bytes")));
        }
        let data = (0..count)
            .map(|_| rd.value(dtype))
            .collect::<Result<Vec<f32>>>()?;
        let t = Tensor4::new(kind, dims, dtype, data)
            .map_err(|e| TraceError::Invalid(format!("{what}: {e}")))?;
        Payload::Tensor(t)
    };
    Ok(TraceRecord {
        name,
        layer_id,
        epoch_id,
        stride,
        kernel,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::to_bf16;

    fn sample() -> TraceFile {
        let a = Tensor4::from_fn(TensorKind::Activations, Dims4::new(1, 3, 2, 2), |_, c, y, x| {
            (c as f32 - y as f32) * 0.37 + x as f32
        });
        let w = to_bf16(&Tensor4::from_fn(TensorKind::Weights, Dims4::new(2, 3, 1, 1), |f, c, _, _| {
            f as f32 * 0.1 - c as f32
        }));
        TraceFile {
            records: vec![
                TraceRecord {
                    name: "conv1.A".into(),
                    layer_id: 1,
                    epoch_id: 7,
                    stride: 1,
                    kernel: (1, 1),
                    payload: Payload::Tensor(a),
                },
                TraceRecord {
                    name: "conv1.W".into(),
                    layer_id: 1,
                    epoch_id: 7,
                    stride: 1,
                    kernel: (1, 1),
                    payload: Payload::Tensor(w),
                },
            ],
        }
    }

    #[test]
    fn header_bytes() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"TDTR");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..14], &7u16.to_le_bytes());
        assert_eq!(&b[14..21], b"conv1.A");
        // kind A, dtype F32
        assert_eq!(&b[21..23], &[0, 0]);
        // 12 values * 4 bytes after the 30-byte fixed record header tail
        let first_len = 2 + 7 + 2 + 4 + 4 + 1 + 2 + 2 + 16 + 12 * 4;
        assert_eq!(b[12 + first_len + 2 + 7 + 1], 1, "second record is BF16");
    }

    #[test]
    fn round_trip() {
        let t = sample();
        assert_eq!(TraceFile::from_bytes(&t.to_bytes().unwrap()).unwrap(), t);
    }

    #[test]
    fn error_values() {
        assert!(matches!(TraceFile::from_bytes(&[]), Err(TraceError::BadMagic)));
        assert!(matches!(TraceFile::from_bytes(b"TDTX\x01\0\0\0\0\0\0\0"), Err(TraceError::BadMagic)));
        let mut b = sample().to_bytes().unwrap();
        b[4] = 2;
        assert!(matches!(TraceFile::from_bytes(&b), Err(TraceError::Version(2))));

        // declare two records but keep only one
        let mut one = sample();
        one.records.truncate(1);
        let mut b = one.to_bytes().unwrap();
        b[8] = 2;
        assert!(matches!(TraceFile::from_bytes(&b), Err(TraceError::Truncated(_))));

        let mut b = sample().to_bytes().unwrap();
        b.truncate(b.len() - 1);
        assert!(matches!(TraceFile::from_bytes(&b), Err(TraceError::Truncated(_))));

        // dims whose product overflows
        let mut b = one.to_bytes().unwrap();
        let dims_at = 12 + 2 + 7 + 2 + 4 + 4 + 1 + 2 + 2;
        for i in 0..16 {
            b[dims_at + i] = 0xFF;
        }
        assert!(matches!(TraceFile::from_bytes(&b), Err(TraceError::DimOverflow(_))));

        let mut b = one.to_bytes().unwrap();
        b[12 + 2 + 7] = 9;
        assert!(matches!(TraceFile::from_bytes(&b), Err(TraceError::Invalid(_))));
    }
}
