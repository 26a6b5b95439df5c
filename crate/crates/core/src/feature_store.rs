//! The `HISTOFTR` binary container.
//!
//! Layout, all integers and floats little-endian, no padding:
//!
//! ```text
//! header   magic "HISTOFTR" | version u32 (=1) | d u32 | record_count u32
//!          | encoder_name (u16 length + UTF-8)
//! record   slide_id (u16 length + UTF-8) | label u8 | n u32 | n·d f32, row-major
//! params   optional trailing section: tag "PARAMS\0\0" | tensor_count u32
//!          | per tensor: name (u16 length + UTF-8) | ndim u32 | dims u32…
//!          | values f64
//! ```
//!
//! Row `i` of a record lines up with entry `i` of the slide's manifest.
//! Values are widened to `f64` on read, so a round trip through the file is
//! exact for anything that is already `f32`-representable.

use std::fs;
use std::path::Path;

use crate::encoder::{ConvLayer, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"HISTOFTR";
pub const VERSION: u32 = 1;
pub const PARAMS_TAG: &[u8; 8] = b"PARAMS\0\0";

/// Patch embeddings of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub slide_id: String,
    pub label: u8,
    pub encoder_name: String,
    pub data: Matrix,
}

impl FeatureMatrix {
    pub fn n_patches(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// A named `f64` tensor from the parameters section.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything a container file holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoreFile {
    pub encoder_name: String,
    pub dim: usize,
    pub records: Vec<FeatureMatrix>,
    pub params: Option<Vec<Tensor>>,
}

fn put_str(buf: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::invalid(format!("{what} is longer than 65535 bytes")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a store; fails if records disagree on `d` or encoder name,
/// hold no rows, or contain values that are not finite as `f32`.
pub fn encode_store(file: &StoreFile) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, file.dim, "d")?;
    put_u32(&mut buf, file.records.len(), "record count")?;
    put_str(&mut buf, &file.encoder_name, "encoder name")?;
    for (i, r) in file.records.iter().enumerate() {
        if r.dim() != file.dim {
            return Err(Error::invalid(format!(
                "record {i} ({}) has d = {}, store has d = {}",
                r.slide_id,
                r.dim(),
                file.dim
            )));
        }
        if r.encoder_name != file.encoder_name {
            return Err(Error::invalid(format!(
                "record {i} ({}) comes from encoder {:?}, store holds {:?}",
                r.slide_id, r.encoder_name, file.encoder_name
            )));
        }
        if r.n_patches() == 0 {
            return Err(Error::invalid(format!("record {i} ({}) has no rows", r.slide_id)));
        }
        if r.label > 1 {
            return Err(Error::invalid(format!("record {i} has label {}", r.label)));
        }
        put_str(&mut buf, &r.slide_id, "slide id")?;
        buf.push(r.label);
        put_u32(&mut buf, r.n_patches(), "row count")?;
        for &v in r.data.as_slice() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::invalid(format!(
                    "record {i} ({}) holds a non-finite value",
                    r.slide_id
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    if let Some(tensors) = &file.params {
        buf.extend_from_slice(PARAMS_TAG);
        put_u32(&mut buf, tensors.len(), "tensor count")?;
        for t in tensors {
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(Error::invalid(format!("tensor {} shape/value mismatch", t.name)));
            }
            put_str(&mut buf, &t.name, "tensor name")?;
            put_u32(&mut buf, t.dims.len(), "ndim")?;
            for &d in &t.dims {
                put_u32(&mut buf, d, "dim")?;
            }
            for &v in &t.values {
                if !v.is_finite() {
                    return Err(Error::invalid(format!("tensor {} holds a non-finite value", t.name)));
                }
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!("file truncated in {}", ctx())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, ctx: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &dyn Fn() -> String) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, ctx: &dyn Fn() -> String) -> Result<String> {
        let len = self.u16(ctx)? as usize;
        let raw = self.take(len, ctx)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(format!("invalid UTF-8 in {}", ctx())))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a container, validating magic, version and finiteness.
pub fn decode_store(bytes: &[u8]) -> Result<StoreFile> {
    let mut r = Reader { bytes, pos: 0 };
    let header = || "header".to_string();
    let magic = r.take(8, &header)?;
    if magic != MAGIC {
        return Err(Error::format("bad magic, not a HISTOFTR store"));
    }
    let version = r.u32(&header)?;
    if version != VERSION as usize {
        return Err(Error::format(format!("unsupported store version {version}")));
    }
    let dim = r.u32(&header)?;
    let count = r.u32(&header)?;
    let encoder_name = r.string(&header)?;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let ctx = move || format!("record {i}");
        let slide_id = r.string(&ctx)?;
        let label = r.take(1, &ctx)?[0];
        if label > 1 {
            return Err(Error::data(format!("record {i} ({slide_id}) has label {label}")));
        }
        let n = r.u32(&ctx)?;
        let byte_len = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(format!("record {i} size overflows")))?;
        let payload = r.take(byte_len, &ctx)?;
        let mut data = Vec::with_capacity(n * dim);
        for chunk in payload.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::data(format!("record {i} ({slide_id}) holds a non-finite value")));
            }
            data.push(f64::from(v));
        }
        records.push(FeatureMatrix {
            slide_id,
            label,
            encoder_name: encoder_name.clone(),
            data: Matrix::from_vec(n, dim, data)?,
        });
    }

    let params = if r.at_end() {
        None
    } else {
        let ctx = || "parameters section".to_string();
        if r.take(8, &ctx)? != PARAMS_TAG {
            return Err(Error::format("unexpected bytes after the last record"));
        }
        let n = r.u32(&ctx)?;
        let mut tensors = Vec::with_capacity(n.min(1 << 12));
        for t in 0..n {
            let ctx = move || format!("parameter tensor {t}");
            let name = r.string(&ctx)?;
            let ndim = r.u32(&ctx)?;
            let dims = (0..ndim).map(|_| r.u32(&ctx)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 8, &ctx)?;
            let mut values = Vec::with_capacity(len);
            for chunk in raw.chunks_exact(8) {
                let v = f64::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::data(format!("tensor {name} holds a non-finite value")));
                }
                values.push(v);
            }
            tensors.push(Tensor { name, dims, values });
        }
        if !r.at_end() {
            return Err(Error::format("trailing bytes after parameters section"));
        }
        Some(tensors)
    };

    Ok(StoreFile {
        encoder_name,
        dim,
        records,
        params,
    })
}

/// Writes feature records. All records must share `d` and encoder name.
pub fn write_store(records: &[FeatureMatrix], path: &Path) -> Result<()> {
    let (encoder_name, dim) = records
        .first()
        .map_or((String::new(), 0), |r| (r.encoder_name.clone(), r.dim()));
    let file = StoreFile {
        encoder_name,
        dim,
        records: records.to_vec(),
        params: None,
    };
    write_store_file(&file, path)
}

pub fn write_store_file(file: &StoreFile, path: &Path) -> Result<()> {
    let bytes = encode_store(file)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_store_file(path: &Path) -> Result<StoreFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

/// Reads the feature records of a store.
pub fn read_store(path: &Path) -> Result<Vec<FeatureMatrix>> {
    Ok(read_store_file(path)?.records)
}

/// Encoder parameters as container tensors `block{i}.weight` (dims
/// `[3, 3, in, out]`) and `block{i}.bias`.
pub fn encoder_tensors(params: &EncoderParams) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(params.layers.len() * 2);
    for (i, l) in params.layers.iter().enumerate() {
        out.push(Tensor {
            name: format!("block{}.weight", i + 1),
            dims: vec![3, 3, l.in_channels, l.out_channels],
            values: l.weight.clone(),
        });
        out.push(Tensor {
            name: format!("block{}.bias", i + 1),
            dims: vec![l.out_channels],
            values: l.bias.clone(),
        });
    }
    out
}

pub fn encoder_from_tensors(tensors: &[Tensor]) -> Result<EncoderParams> {
    if tensors.len() % 2 != 0 || tensors.is_empty() {
        return Err(Error::format("encoder parameters must come in weight/bias pairs"));
    }
    let mut layers = Vec::new();
    for (i, pair) in tensors.chunks_exact(2).enumerate() {
        let (w, b) = (&pair[0], &pair[1]);
        let expect_w = format!("block{}.weight", i + 1);
        let expect_b = format!("block{}.bias", i + 1);
        if w.name != expect_w || b.name != expect_b {
            return Err(Error::format(format!(
                "expected tensors {expect_w}/{expect_b}, found {}/{}",
                w.name, b.name
            )));
        }
        if w.dims.len() != 4 || w.dims[0] != 3 || w.dims[1] != 3 || b.dims != [w.dims[3]] {
            return Err(Error::format(format!("block {} tensors have bad shapes", i + 1)));
        }
        layers.push(ConvLayer {
            in_channels: w.dims[2],
            out_channels: w.dims[3],
            weight: w.values.clone(),
            bias: b.values.clone(),
        });
    }
    Ok(EncoderParams { layers })
}

/// Writes encoder parameters as a record-free container whose header
/// names the encoder.
pub fn write_encoder_params(encoder_name: &str, params: &EncoderParams, path: &Path) -> Result<()> {
    let file = StoreFile {
        encoder_name: encoder_name.to_string(),
        dim: 0,
        records: Vec::new(),
        params: Some(encoder_tensors(params)),
    };
    write_store_file(&file, path)
}

pub fn read_encoder_params(path: &Path) -> Result<(String, EncoderParams)> {
    let file = read_store_file(path)?;
    let tensors = file
        .params
        .ok_or_else(|| Error::format(format!("{} has no parameters section", path.display())))?;
    Ok((file.encoder_name, encoder_from_tensors(&tensors)?))
}
