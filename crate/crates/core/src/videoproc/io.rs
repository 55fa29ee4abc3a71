//! `VTEN` tensor files: magic, `u32` ndim, `ndim × u32` dims, `f32` payload, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::VideoTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTEN";

/// Refuse headers claiming more elements than this.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_tensor<W: Write>(mut w: W, dims: &[usize], payload: &[f32]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != payload.len() {
        return Err(Error::shape(format!(
            "dims {dims:?} need {n} values, payload has {}",
            payload.len()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Parses a tensor file image; errors carry the byte offset where parsing failed.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let take_u32 = |at: usize, what: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(at as u64, format!("truncated while reading {what}")))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"VTEN\""));
    }
    let ndim = take_u32(4, "ndim")? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(4, format!("unsupported ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let at = 8 + 4 * i;
        let d = take_u32(at, "dims")?;
        count = count
            .checked_mul(d as u64)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| Error::format(at as u64, "dimension overflow"))?;
        dims.push(d as usize);
    }
    let start = 8 + 4 * ndim;
    let need = count as usize * 4;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(Error::format(
            (start + need) as u64,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    let payload = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, payload))
}

pub fn store_video(video: &VideoTensor, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(f), &video.dims(), video.data())
}

pub fn load_video(path: &Path) -> Result<VideoTensor> {
    let f = std::fs::File::open(path)?;
    let (dims, payload) = read_tensor(std::io::BufReader::new(f))?;
    if dims.len() != 4 {
        return Err(Error::format(4, format!("video needs 4 dims, file has {}", dims.len())));
    }
    let header = 8 + 4 * dims.len();
    if let Some(i) = payload.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(
            (header + 4 * i) as u64,
            format!("value {} outside [0, 1]", payload[i]),
        ));
    }
    VideoTensor::new(dims[0], dims[1], dims[2], dims[3], payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video() -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..3 * 4 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
        VideoTensor::new(3, 4, 16, 16, data).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vten");
        let v = random_video();
        store_video(&v, &path).unwrap();
        let back = load_video(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[1, 2], &[0.5, 1.0]).unwrap();
        assert_eq!(&buf[..4], b"VTEN");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &0.5f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn wrong_magic() {
        let err = read_tensor(&b"VTEX\x01\0\0\0\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[3, 4, 16, 16], &vec![0.0; 3 * 4 * 16 * 16]).unwrap();
        buf.truncate(buf.len() - 10);
        let err = read_tensor(buf.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert_eq!(offset as usize, buf.len());
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn dimension_overflow() {
        let mut buf = b"VTEN".to_vec();
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..3 {
            buf.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = read_tensor(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 12, .. }), "{err}");
    }
}
