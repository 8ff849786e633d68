//! Binary index format, little-endian throughout:
//!
//! ```text
//! magic  "LFAIVFPQ1"                      9 bytes
//! version u32, D u32, nlist u32, m u32, k_pq u32, N u64, seed u64
//! coarse centroids                        nlist × D f32
//! codebooks                               m × k_pq × (D/m) f32
//! per list: length u64, ids length × u64, codes length × m bytes
//! ```

use std::path::Path;

use super::ivf::{InvertedList, IvfPqIndex};
use super::kmeans::KMeansModel;
use super::pq::PqCodebook;
use super::IndexError;

pub const INDEX_MAGIC: &[u8; 9] = b"LFAIVFPQ1";
pub const INDEX_VERSION: u32 = 1;

pub fn serialize_index(index: &IvfPqIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    for v in [
        INDEX_VERSION,
        index.dim as u32,
        index.nlist() as u32,
        index.pq.m as u32,
        index.pq.k_pq as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&index.n.to_le_bytes());
    out.extend_from_slice(&index.seed.to_le_bytes());
    for v in index.coarse.centroids.iter().chain(&index.pq.codebooks) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for list in &index.lists {
        out.extend_from_slice(&(list.len() as u64).to_le_bytes());
        for id in &list.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&list.codes);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(len).ok_or(IndexError::Truncated(self.pos))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(IndexError::Truncated(self.bytes.len()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, IndexError> {
        let len = count.checked_mul(4).ok_or(IndexError::Truncated(self.pos))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn deserialize_index(bytes: &[u8]) -> Result<IvfPqIndex, IndexError> {
    if bytes.len() < INDEX_MAGIC.len() || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
        return Err(IndexError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: INDEX_MAGIC.len(),
    };
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(IndexError::UnsupportedVersion(version));
    }
    let dim = r.u32()? as usize;
    let nlist = r.u32()? as usize;
    let m = r.u32()? as usize;
    let k_pq = r.u32()? as usize;
    let n = r.u64()?;
    let seed = r.u64()?;
    if m == 0 || !dim.is_multiple_of(m) {
        return Err(IndexError::Corrupt(format!("dimension {dim} not divisible by m = {m}")));
    }
    if k_pq > super::pq::PQ_CODEWORDS {
        return Err(IndexError::Corrupt(format!("k_pq {k_pq} exceeds 256")));
    }
    let sub_dim = dim / m;
    let centroids = r.f32s(nlist.saturating_mul(dim))?;
    let codebooks = r.f32s(m.saturating_mul(k_pq).saturating_mul(sub_dim))?;
    if centroids.iter().chain(&codebooks).any(|v| !v.is_finite()) {
        return Err(IndexError::Corrupt("non-finite centroid or codeword".into()));
    }

    let mut lists = Vec::with_capacity(nlist.min(1 << 20));
    let mut total = 0u64;
    for _ in 0..nlist {
        let len = r.u64()?;
        total = total.saturating_add(len);
        if total > n {
            return Err(IndexError::Corrupt("lists hold more ids than N".into()));
        }
        let len = len as usize;
        let ids = r
            .take(len.checked_mul(8).ok_or(IndexError::Truncated(r.pos))?)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let codes = r
            .take(len.checked_mul(m).ok_or(IndexError::Truncated(r.pos))?)?
            .to_vec();
        if codes.iter().any(|&c| c as usize >= k_pq) {
            return Err(IndexError::Corrupt("code out of codebook range".into()));
        }
        lists.push(InvertedList { ids, codes });
    }
    if total != n {
        return Err(IndexError::Corrupt(format!("lists hold {total} ids, header says {n}")));
    }
    if r.pos != bytes.len() {
        return Err(IndexError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    Ok(IvfPqIndex {
        dim,
        coarse: KMeansModel {
            k: nlist,
            dim,
            centroids,
            seed,
            iterations_run: 0,
            inertia: 0.0,
            inertia_history: Vec::new(),
        },
        pq: PqCodebook {
            m,
            sub_dim,
            k_pq,
            codebooks,
        },
        lists,
        n,
        seed,
    })
}

pub fn save_index(index: &IvfPqIndex, path: &Path) -> Result<(), IndexError> {
    std::fs::write(path, serialize_index(index)).map_err(|e| IndexError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_index(path: &Path) -> Result<IvfPqIndex, IndexError> {
    let bytes = std::fs::read(path).map_err(|e| IndexError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    deserialize_index(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{search, IndexParams};
    use crate::manifest::EmbeddingStore;

    fn small_index() -> IvfPqIndex {
        let rows: Vec<Vec<f32>> = (0..64)
            .map(|i| (0..8).map(|j| ((i * 13 + j * 7) % 11) as f32 / 11.0).collect())
            .collect();
        let store = EmbeddingStore::from_rows(8, &rows).unwrap();
        IvfPqIndex::build(
            &store,
            &IndexParams {
                nlist: Some(4),
                m: 4,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_bytes_and_search() {
        let index = small_index();
        let bytes = serialize_index(&index);
        assert_eq!(&bytes[..9], INDEX_MAGIC);
        let back = deserialize_index(&bytes).unwrap();
        assert_eq!(serialize_index(&back), bytes);
        let q = [0.5f32; 8];
        assert_eq!(search(&q, &index, 5, 2).unwrap(), search(&q, &back, 5, 2).unwrap());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = serialize_index(&small_index());
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert_eq!(deserialize_index(&bad), Err(IndexError::BadMagic));
        let mut ver = bytes.clone();
        ver[9..13].copy_from_slice(&7u32.to_le_bytes());
        assert_eq!(deserialize_index(&ver), Err(IndexError::UnsupportedVersion(7)));
        for cut in [5, 20, 60, bytes.len() - 1] {
            assert!(deserialize_index(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(matches!(
            deserialize_index(&bytes[..bytes.len() - 1]),
            Err(IndexError::Truncated(_))
        ));
    }

    #[test]
    fn empty_index_round_trips() {
        let store = EmbeddingStore::empty(8).unwrap();
        let index = IvfPqIndex::build(&store, &IndexParams::default()).unwrap();
        let bytes = serialize_index(&index);
        let back = deserialize_index(&bytes).unwrap();
        assert_eq!(serialize_index(&back), bytes);
        assert!(search(&[0.0; 8], &back, 3, 1).unwrap().neighbors.is_empty());
    }
}
