//! NumPy `.npy` version 1.0 reader and writer, byte-compatible with `np.save`
//! for C-ordered little-endian arrays.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
const ARRAY_ALIGN: usize = 64;
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

/// Element types that can be stored in an `.npy` file.
pub trait NpyElement: Copy + Send + Sync + 'static {
    const DESCR: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

macro_rules! npy_element {
    ($t:ty, $descr:literal) => {
        impl NpyElement for $t {
            const DESCR: &'static str = $descr;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn take(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

npy_element!(f32, "<f4");
npy_element!(f64, "<f8");
npy_element!(u8, "|u1");
npy_element!(i64, "<i8");

/// Python `repr` of a shape tuple.
fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [] => "()".into(),
        [n] => format!("({n},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Magic, version, length and padded header dictionary.
pub fn npy_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {}, }}",
        shape_repr(shape)
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    let hlen = dict.len() + 1;
    let padlen = ARRAY_ALIGN - ((MAGIC.len() + 2 + 2 + hlen) % ARRAY_ALIGN);
    let total = hlen + padlen;
    let mut out = Vec::with_capacity(10 + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(total as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padlen));
    out.push(b'\n');
    out
}

/// Size and SHA-256 of a written file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDigest {
    pub bytes: u64,
    pub sha256: String,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::TensorShape(format!(
            "shape {shape:?} holds {expected} elements but {len} were supplied"
        )));
    }
    Ok(())
}

/// Serialises to an in-memory buffer.
pub fn encode_npy<T: NpyElement>(shape: &[usize], data: &[T]) -> Result<Vec<u8>> {
    check_shape(shape, data.len())?;
    let mut out = npy_header(T::DESCR, shape);
    out.reserve(data.len() * T::SIZE);
    for &x in data {
        x.put(&mut out);
    }
    Ok(out)
}

/// Streams an array to `path`, hashing as it goes.
pub fn write_npy<T: NpyElement>(path: &Path, shape: &[usize], data: &[T]) -> Result<FileDigest> {
    check_shape(shape, data.len())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let header = npy_header(T::DESCR, shape);
    let mut bytes = header.len() as u64;
    hasher.update(&header);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in data.chunks((1 << 16) / T::SIZE) {
        buf.clear();
        for &x in chunk {
            x.put(&mut buf);
        }
        hasher.update(&buf);
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        bytes += buf.len() as u64;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        bytes,
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Narrowing cast that refuses values beyond the `f32` range.
pub fn to_f32(values: &[f64]) -> Result<Vec<f32>> {
    values
        .iter()
        .map(|&x| {
            if x.is_finite() && x.abs() > f64::from(f32::MAX) {
                Err(Error::SerializeOverflow(x))
            } else {
                Ok(x as f32)
            }
        })
        .collect()
}

/// Typed contents of a loaded `.npy` file.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn descr(&self) -> &'static str {
        match self.data {
            NpyData::F32(_) => f32::DESCR,
            NpyData::F64(_) => f64::DESCR,
            NpyData::U8(_) => u8::DESCR,
            NpyData::I64(_) => i64::DESCR,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::U8(v) => v.len(),
            NpyData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            NpyData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NpyData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = dict
        .find(&pat)
        .ok_or_else(|| Error::NpyFormat(format!("header lacks '{key}'")))?
        + pat.len();
    Ok(dict[start..].trim_start())
}

fn parse_header(dict: &str) -> Result<(String, Vec<usize>)> {
    let descr = dict_value(dict, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::NpyFormat("malformed descr".into()))?
        .to_string();
    if !dict_value(dict, "fortran_order")?.starts_with("False") {
        return Err(Error::NpyFormat("Fortran-ordered arrays are not supported".into()));
    }
    let shape = dict_value(dict, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::NpyFormat("malformed shape".into()))?;
    let dims = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::NpyFormat(format!("bad dimension '{s}'")))
        })
        .collect::<Result<_>>()?;
    Ok((descr, dims))
}

fn decode<T: NpyElement>(body: &[u8], n: usize) -> Vec<T> {
    body[..n * T::SIZE].chunks_exact(T::SIZE).map(T::take).collect()
}

pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::NpyFormat("missing magic string".into()));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        v => return Err(Error::NpyFormat(format!("unsupported version {v}"))),
    };
    let body_start = offset + header_len;
    if bytes.len() < body_start {
        return Err(Error::NpyFormat("truncated header".into()));
    }
    let dict = std::str::from_utf8(&bytes[offset..body_start])
        .map_err(|_| Error::NpyFormat("header is not text".into()))?;
    let (descr, shape) = parse_header(dict)?;
    let n: usize = shape.iter().product();
    let body = &bytes[body_start..];
    let width = match descr.as_str() {
        "<f4" => 4,
        "<f8" | "<i8" => 8,
        "|u1" | "<u1" => 1,
        other => return Err(Error::NpyFormat(format!("unsupported dtype '{other}'"))),
    };
    if body.len() != n * width {
        return Err(Error::NpyFormat(format!(
            "body holds {} bytes, shape {shape:?} needs {}",
            body.len(),
            n * width
        )));
    }
    let data = match descr.as_str() {
        "<f4" => NpyData::F32(decode(body, n)),
        "<f8" => NpyData::F64(decode(body, n)),
        "<i8" => NpyData::I64(decode(body, n)),
        _ => NpyData::U8(body.to_vec()),
    };
    Ok(NpyArray { shape, data })
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes).map_err(|e| match e {
        Error::NpyFormat(msg) => Error::NpyFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}
