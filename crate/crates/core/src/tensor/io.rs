//! The `DST1` tensor file format.
//!
//! ```text
//! offset 0   magic "DST1"
//! offset 4   dtype code (1 = float32, 2 = float64, 3 = uint16)
//! offset 5   rank r
//! offset 6   two zero bytes
//! offset 8   r little-endian u64 extents
//! then       row-major payload, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, Element, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DST1";

/// A tensor of any on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U16(Tensor<u16>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U16(_) => DType::U16,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
            AnyTensor::U16(t) => t.dims(),
        }
    }

    /// Floating tensors widen to `f64`; label tensors are rejected.
    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::U16(_) => Err(Error::Contract(
                "expected a float tensor, found uint16".into(),
            )),
        }
    }

    pub fn into_u16(self) -> Result<Tensor<u16>> {
        match self {
            AnyTensor::U16(t) => Ok(t),
            other => Err(Error::Contract(format!(
                "expected a uint16 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        Ok(self.into_f64()?.cast())
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

impl From<Tensor<u16>> for AnyTensor {
    fn from(t: Tensor<u16>) -> Self {
        AnyTensor::U16(t)
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.put_le(&mut out);
    }
    out
}

pub fn write_tensor_to<W: Write, T: Element>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let (t, _) = read_tensor_from(&mut r, 0)?;
    Ok(t)
}

/// Reads one tensor starting at logical position `base` (used only for error
/// offsets). Returns the tensor and the number of bytes consumed.
pub fn read_tensor_from<R: Read>(r: &mut R, base: u64) -> Result<(AnyTensor, u64)> {
    let mut cursor = Cursor {
        inner: r,
        pos: base,
    };
    let mut head = [0u8; 8];
    cursor.fill(&mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::format(base, format!("bad magic {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| Error::format(base + 4, format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    if rank == 0 {
        return Err(Error::format(base + 5, "rank must be at least 1"));
    }
    if head[6] != 0 || head[7] != 0 {
        return Err(Error::format(base + 6, "non-zero padding"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cursor.pos;
        let mut b = [0u8; 8];
        cursor.fill(&mut b, "extent")?;
        let d = u64::from_le_bytes(b);
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::format(at, format!("invalid extent {d}")));
        }
        dims.push(d as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(base + 8, "element count overflows"))?;
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(read_payload(&mut cursor, dims, count)?),
        DType::F64 => AnyTensor::F64(read_payload(&mut cursor, dims, count)?),
        DType::U16 => AnyTensor::U16(read_payload(&mut cursor, dims, count)?),
    };
    Ok((tensor, cursor.pos - base))
}

fn read_payload<R: Read, T: Element>(
    cursor: &mut Cursor<'_, R>,
    dims: Vec<usize>,
    count: usize,
) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let mut bytes = vec![0u8; count * size];
    cursor.fill(&mut bytes, "payload")?;
    let data = bytes.chunks_exact(size).map(T::get_le).collect();
    Tensor::new(dims, data)
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    pos: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.pos + done as u64,
                        format!("truncated {what}: needed {} more bytes", buf.len() - done),
                    ))
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.pos += buf.len() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decode(bytes: &[u8]) -> Result<AnyTensor> {
        read_tensor_from(&mut &bytes[..], 0).map(|(t, _)| t)
    }

    #[test]
    fn float64_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_fn(&[4, 5], |_| rng.random::<f64>() * 1e3 - 500.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dst");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap().into_f64().unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.dims(), t.dims());
    }

    #[test]
    fn uint16_mask_round_trip() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| (i * 7 % 5) as u16);
        let back = decode(&encode_tensor(&t)).unwrap().into_u16().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"DST1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = encode_tensor(&Tensor::scalar(1.0f64));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_dtype_reports_offset_four() {
        let mut b = encode_tensor(&Tensor::scalar(1.0f64));
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_payload_reports_where_data_ends() {
        let b = encode_tensor(&Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let cut = &b[..b.len() - 5];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&dims, |_| rng.random::<f32>());
            let bytes = encode_tensor(&t);
            let (back, used) = read_tensor_from(&mut &bytes[..], 0).unwrap();
            prop_assert_eq!(used as usize, bytes.len());
            prop_assert_eq!(back, AnyTensor::F32(t));
        }
    }
}
