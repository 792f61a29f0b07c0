//! Binary checkpoint format.
//!
//! ```text
//! b"QSANCKPT"
//! {"format_version":1,"config":{…},"vocab":[…],"tensors":[…],"payload_len":N}\n
//! N bytes of little-endian f64
//! ```
//!
//! Each tensor entry records its name, shape, whether it is complex and the
//! byte offset of its data inside the payload. A real tensor stores its real
//! plane; a complex tensor stores the real plane followed by the imaginary
//! plane, both row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmat::CMat;
use crate::config::TrainConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::graph::ParamKind;
use crate::model::QsanModel;

pub const MAGIC: &[u8; 8] = b"QSANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    complex: bool,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
}

pub fn to_bytes(model: &QsanModel) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.store().iter() {
        let complex = p.kind == ParamKind::Complex;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            complex,
            offset: payload.len() as u64,
        });
        let planes: &[&[f64]] = if complex {
            &[p.value.re(), p.value.im()]
        } else {
            &[p.value.re()]
        };
        for plane in planes {
            for x in plane.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        vocab: model.vocab().to_vec(),
        tensors,
        payload_len: payload.len() as u64,
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

fn read_plane(payload: &[u8], start: usize, n: usize) -> Vec<f64> {
    payload[start..start + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<QsanModel> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fail("header is not terminated".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..newline]).map_err(|e| fail(format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &rest[newline + 1..];
    if payload.len() as u64 != header.payload_len {
        return Err(fail(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let planes = if t.complex { 2 } else { 1 };
        let start = usize::try_from(t.offset).map_err(|_| fail(format!("tensor `{}` offset overflows", t.name)))?;
        let end = start
            .checked_add(8 * n * planes)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| fail(format!("tensor `{}` extends past the payload", t.name)))?;
        let re = read_plane(payload, start, n);
        let im = if t.complex {
            read_plane(payload, start + 8 * n, n)
        } else {
            vec![0.0; n]
        };
        debug_assert_eq!(end, start + 8 * n * planes);
        tensors.push((t.name.clone(), CMat::from_parts(t.shape[0], t.shape[1], re, im)?));
    }
    QsanModel::from_tensors(header.config, header.vocab, tensors).map_err(|e| fail(e.to_string()))
}

pub fn save(model: &QsanModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load(path: impl AsRef<Path>) -> Result<QsanModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusExample;

    fn model() -> QsanModel {
        let corpus = vec![CorpusExample {
            id: "a".into(),
            label: 1,
            post: vec!["storm hits the coast".into()],
            comments: vec!["stay safe everyone".into(), "this is an old photo".into()],
        }];
        let cfg = TrainConfig {
            d: 3,
            k: 2,
            z: 2,
            ..TrainConfig::default()
        };
        QsanModel::new(cfg, &corpus, None).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes, Path::new("m.ckpt")).unwrap();
        for ((_, a), (_, b)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.re().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.value.re().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.value.im().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.value.im().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.trainable, b.trainable);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn layout_on_disk() {
        let bytes = to_bytes(&model());
        assert_eq!(&bytes[..8], b"QSANCKPT");
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..nl]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["payload_len"].as_u64().unwrap() as usize, bytes.len() - nl - 1);
        let first = &header["tensors"][0];
        assert_eq!(first["name"], "embed.amplitude");
        assert_eq!(first["offset"], 0);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model());
        let p = Path::new("m.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).unwrap_err().to_string().contains("bad magic"));
        assert!(from_bytes(&bytes[..bytes.len() - 8], p).unwrap_err().to_string().contains("payload"));
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).into_owned();
        let v2 = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        let mut bumped = v2.into_bytes();
        bumped.extend_from_slice(&bytes[bumped.len()..]);
        assert!(from_bytes(&bumped, p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(to_bytes(&load(&path).unwrap()), to_bytes(&m));
        assert!(matches!(load(dir.path().join("none")), Err(Error::Io { .. })));
    }
}
