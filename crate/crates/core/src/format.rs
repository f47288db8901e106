//! Binary containers shared by datasets, samples and checkpoints.
//!
//! `VJT1` holds one dense tensor:
//!
//! ```text
//! b"VJT1" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | u8 reserved=0
//!         | ndim x u64 LE dims | row-major LE payload
//! ```
//!
//! `VJC1` holds named tensors plus a JSON trailer:
//!
//! ```text
//! b"VJC1" | u32 LE entry count
//!         | per entry: u32 LE name length, UTF-8 name, embedded VJT1 tensor
//!         | UTF-8 JSON trailer running to end of file
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayView3, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::real::Real;

pub const TENSOR_MAGIC: &[u8; 4] = b"VJT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VJC1";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// A decoded tensor in whichever precision it was stored with.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn from_real<F: Real>(a: ArrayViewD<'_, F>) -> Self {
        match F::DTYPE {
            DType::F32 => Tensor::F32(a.mapv(|x| x.f64() as f32)),
            DType::F64 => Tensor::F64(a.mapv(|x| x.f64())),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    /// Converts to the requested precision. Widening is exact.
    pub fn to_real<F: Real>(&self) -> ArrayD<F> {
        match self {
            Tensor::F32(a) => a.mapv(|x| F::of(x as f64)),
            Tensor::F64(a) => a.mapv(F::of),
        }
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        self.to_real()
    }
}

fn format_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dimensions: {}", shape.len())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, t.dtype().code(), shape.len() as u8, 0])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    // `iter()` walks logical row-major order regardless of memory layout.
    match t {
        Tensor::F32(a) => {
            let mut buf = Vec::with_capacity(a.len() * 4);
            for x in a.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Tensor::F64(a) => {
            let mut buf = Vec::with_capacity(a.len() * 8);
            for x in a.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(format_err)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])?;
    let ndim = head[6] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(format_err)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let bytes = count
        .checked_mul(width)
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64).read_to_end(&mut payload).map_err(format_err)?;
    if payload.len() != bytes {
        return Err(Error::Format("truncated tensor payload".into()));
    }
    let shape = IxDyn(&dims);
    let tensor = match dtype {
        DType::F32 => {
            let v: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(shape, v).expect("length checked"))
        }
        DType::F64 => {
            let v: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(shape, v).expect("length checked"))
        }
    };
    Ok(tensor)
}

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", cursor.len())));
    }
    Ok(t)
}

/// Named tensors plus a free-form JSON trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Tensor)>,
    pub trailer: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn container_bytes(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let count = u32::try_from(c.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &c.entries {
        let len = u32::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t)?;
    }
    out.extend_from_slice(serde_json::to_string(&c.trailer)?.as_bytes());
    Ok(out)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(format_err)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(format_err)?;
        let len = u32::from_le_bytes(b4) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated entry name".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_owned();
        r = rest;
        let t = read_tensor(&mut r)?;
        entries.push((name, t));
    }
    let trailer = std::str::from_utf8(r).map_err(|_| Error::Format("trailer is not UTF-8".into()))?;
    let trailer = serde_json::from_str(trailer).map_err(|e| Error::Format(format!("bad JSON trailer: {e}")))?;
    Ok(Container { entries, trailer })
}

pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    fs::write(path, container_bytes(c)?)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    parse_container(&fs::read(path)?)
}

/// Writes one `H x W x 3` frame in `[-1, 1]` as binary PPM (P6).
pub fn write_ppm(path: impl AsRef<Path>, frame: ArrayView3<'_, f64>) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in frame.iter() {
        let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        out.push(byte);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ArrayD};
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::F32(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, -2.0]).unwrap());
        let bytes = tensor_bytes(&t);
        assert_eq!(&bytes[..4], b"VJT1");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::F64(ArrayD::zeros(IxDyn(&[3, 2])));
        let mut bytes = tensor_bytes(&t);
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_tensor(&mut &short[..]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(read_tensor(&mut &bytes[..]), Err(Error::Format(_))));

        let c = Container {
            entries: vec![("a".into(), t)],
            trailer: serde_json::json!({"k": 1}),
        };
        let mut cb = container_bytes(&c).unwrap();
        assert!(matches!(parse_container(&cb[..20]), Err(Error::Format(_))));
        cb[3] = b'0';
        assert!(matches!(parse_container(&cb), Err(Error::Format(_))));
    }

    #[test]
    fn non_standard_layout_is_written_row_major() {
        let a = ndarray::arr2(&[[1.0f64, 2.0], [3.0, 4.0]]);
        let transposed = a.t().to_owned().into_dyn();
        let standard = a.t().as_standard_layout().into_owned().into_dyn();
        let bytes = tensor_bytes(&Tensor::F64(transposed));
        assert_eq!(bytes, tensor_bytes(&Tensor::F64(standard)));
        let back = read_tensor(&mut &bytes[..]).unwrap();
        assert_eq!(back.to_f64()[[0, 1]], 3.0);
    }

    #[test]
    fn ppm_dump() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ppm");
        let mut frame = Array3::from_elem((2, 3, 3), -1.0);
        frame[[1, 2, 0]] = 1.0;
        write_ppm(&p, frame.view()).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 18);
        assert_eq!(bytes[header.len() + 15], 255);
        assert_eq!(bytes[header.len()], 0);
    }

    proptest! {
        #[test]
        fn container_round_trip_is_byte_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            name in "[a-z_.0-9]{1,12}",
            wide in any::<bool>(),
        ) {
            let n = vals.len();
            let t = if wide {
                Tensor::F64(ArrayD::from_shape_vec(IxDyn(&[n]), vals).unwrap())
            } else {
                Tensor::F32(ArrayD::from_shape_vec(IxDyn(&[1, n]), vals.iter().map(|&v| v as f32).collect()).unwrap())
            };
            let c = Container { entries: vec![(name, t)], trailer: serde_json::json!({"joint_mode": wide}) };
            let bytes = container_bytes(&c).unwrap();
            let back = parse_container(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(container_bytes(&back).unwrap(), bytes);
        }
    }
}
