use std::fs;
use std::path::Path;

use super::LabeledVolume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSV1";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12 + 12 + 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes `lv` as little-endian `MSV1`: magic, version, `D H W` (u32),
/// spacing (3 × f32), a label flag, the f32 image and optional u8 labels.
pub fn encode_volume(lv: &LabeledVolume) -> Vec<u8> {
    let [d, h, w] = lv.dims();
    let n = d * h * w;
    let mut out = Vec::with_capacity(HEADER + 5 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in lv.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(u8::from(lv.labels.is_some()));
    lv.image.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    if let Some(l) = &lv.labels {
        out.extend_from_slice(l);
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<LabeledVolume> {
    if bytes.len() < HEADER {
        return Err(format_err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, not an MSV1 volume"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let dims = [u32_at(8), u32_at(12), u32_at(16)].map(|v| v as usize);
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    let has_labels = match bytes[32] {
        0 => false,
        1 => true,
        f => return Err(format_err(format!("label flag {f} is neither 0 nor 1"))),
    };
    let n = dims.iter().try_fold(1usize, |a, &v| a.checked_mul(v)).ok_or_else(|| format_err("header dims overflow"))?;
    let expected = n
        .checked_mul(if has_labels { 5 } else { 4 })
        .and_then(|p| p.checked_add(HEADER))
        .ok_or_else(|| format_err("header dims overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(format!("header dims {dims:?} need {expected} bytes, file has {}", bytes.len())));
    }
    let body = &bytes[HEADER..];
    let img = body[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let labels = has_labels.then(|| body[4 * n..].to_vec());
    let image = Tensor::new([1, dims[0], dims[1], dims[2]], img)?;
    LabeledVolume::new(image, labels, spacing).map_err(|e| format_err(format!("invalid volume: {e}")))
}

pub fn write_volume(path: &Path, lv: &LabeledVolume) -> Result<()> {
    fs::write(path, encode_volume(lv))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<LabeledVolume> {
    decode_volume(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    #[test]
    fn roundtrip_is_bitwise() {
        let v = generate_phantom(&PhantomSpec::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.msv");
        write_volume(&p, &v).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.image), bits(&v.image));

        let bare = LabeledVolume { labels: None, ..v };
        assert_eq!(decode_volume(&encode_volume(&bare)).unwrap(), bare);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let v = generate_phantom(&PhantomSpec::default(), 1).unwrap();
        let good = encode_volume(&v);
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_volume(&magic), Err(Error::Format(_))));
        assert!(matches!(decode_volume(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut dims = good.clone();
        dims[8] += 1;
        assert!(matches!(decode_volume(&dims), Err(Error::Format(_))));
        let mut label = good.clone();
        *label.last_mut().unwrap() = 7;
        assert!(matches!(decode_volume(&label), Err(Error::Format(_))));
        assert!(matches!(decode_volume(&good[..10]), Err(Error::Format(_))));
    }
}
