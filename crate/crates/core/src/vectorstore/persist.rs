//! Versioned binary index file.
//!
//! ```text
//! magic     5 bytes  "ASKV1"
//! dimension u32 LE
//! count     u64 LE
//! record    count × { id_len u16 LE, id bytes zero-padded to 254, dimension × f32 LE }
//! trailer   u64 LE byte length, then JSON {"schema": .., "payloads": [..]} in record order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::index::{IndexData, VectorIndex};
use super::{IndexError, Payload, PayloadSchema};
use crate::embedding::UNIT_NORM_TOLERANCE;

pub const MAGIC: &[u8; 5] = b"ASKV1";
const ID_SLOT: usize = 254;

#[derive(Serialize, Deserialize)]
struct Trailer {
    schema: PayloadSchema,
    payloads: Vec<Payload>,
}

pub(super) fn save(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let snap = index.snapshot();
    let dim = index.dimension();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(snap.ids.len() as u64).to_le_bytes())?;
        let mut slot = [0u8; ID_SLOT];
        for (i, id) in snap.ids.iter().enumerate() {
            let bytes = id.as_bytes();
            if bytes.len() > ID_SLOT {
                return Err(IndexError::Format(format!("doc id `{id}` exceeds {ID_SLOT} bytes")));
            }
            slot.fill(0);
            slot[..bytes.len()].copy_from_slice(bytes);
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(&slot)?;
            for v in &snap.vectors[i * dim..(i + 1) * dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let trailer = serde_json::to_vec(&Trailer {
            schema: index.schema().clone(),
            payloads: snap.payloads.clone(),
        })
        .map_err(|e| IndexError::Format(e.to_string()))?;
        w.write_all(&(trailer.len() as u64).to_le_bytes())?;
        w.write_all(&trailer)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], IndexError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| IndexError::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub(super) fn load(path: &Path, read_only: bool) -> Result<VectorIndex, IndexError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 5] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(IndexError::Format("bad magic bytes".into()));
    }
    let dim = u32::from_le_bytes(read_exact(&mut r, "dimension")?) as usize;
    let count = u64::from_le_bytes(read_exact(&mut r, "record count")?) as usize;
    if dim == 0 {
        return Err(IndexError::Format("zero dimension".into()));
    }

    let mut data = IndexData::default();
    let mut vec_buf = vec![0u8; dim * 4];
    for i in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "record")?) as usize;
        let slot: [u8; ID_SLOT] = read_exact(&mut r, "record")?;
        if len == 0 || len > ID_SLOT {
            return Err(IndexError::Format(format!("record {i}: bad id length {len}")));
        }
        let id = std::str::from_utf8(&slot[..len])
            .map_err(|_| IndexError::Format(format!("record {i}: id is not UTF-8")))?
            .to_string();
        r.read_exact(&mut vec_buf)
            .map_err(|e| IndexError::Format(format!("truncated record {i}: {e}")))?;
        let start = data.vectors.len();
        data.vectors
            .extend(vec_buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        let norm = data.vectors[start..].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt() as f32;
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(IndexError::Format(format!("record {i}: vector is not unit-norm")));
        }
        if data.positions.insert(id.clone(), i).is_some() {
            return Err(IndexError::Format(format!("record {i}: duplicate id `{id}`")));
        }
        data.ids.push(id);
    }

    let trailer_len = u64::from_le_bytes(read_exact(&mut r, "trailer length")?) as usize;
    let mut trailer = Vec::with_capacity(trailer_len.min(1 << 30));
    r.by_ref().take(trailer_len as u64).read_to_end(&mut trailer)?;
    if trailer.len() != trailer_len {
        return Err(IndexError::Format("truncated trailer".into()));
    }
    let trailer: Trailer = serde_json::from_slice(&trailer).map_err(|e| IndexError::Format(e.to_string()))?;
    if trailer.payloads.len() != count {
        return Err(IndexError::Format("payload count does not match record count".into()));
    }
    for p in &trailer.payloads {
        trailer.schema.check(p)?;
    }
    data.payloads = trailer.payloads;
    Ok(VectorIndex::from_parts(dim, trailer.schema, data, read_only))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::vectorstore::{IndexedRecord, Page};

    fn sample() -> VectorIndex {
        let idx = VectorIndex::new(4);
        for (i, id) in ["x1", "x2", "x3"].iter().enumerate() {
            let mut payload = Payload::new();
            payload.insert("source".into(), format!("s{i}").into());
            payload.insert("year".into(), (2000 + i as i64).into());
            idx.upsert(IndexedRecord {
                doc_id: id.to_string(),
                vector: EmbeddingVector::normalized(vec![1.0, i as f32, 0.5, -(i as f32)]).unwrap(),
                payload,
            })
            .unwrap();
        }
        idx
    }

    #[test]
    fn round_trip_preserves_search() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.askv");
        let idx = sample();
        idx.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 3);

        let loaded = VectorIndex::load_read_only(&path).unwrap();
        assert!(loaded.is_read_only());
        let q = EmbeddingVector::normalized(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            loaded.search(&q, None, Page::default()).unwrap(),
            idx.search(&q, None, Page::default()).unwrap()
        );
        assert_eq!(loaded.get("x2"), idx.get("x2"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.askv");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = [b"ASKV2".as_slice(), &bytes[5..]].concat();
        std::fs::write(&path, bad_magic).unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::Format(_))));

        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::Format(_))));
    }
}
