use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// One retrieved passage: `rank` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub passage_id: String,
    pub retriever_score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub snapshot_version: u64,
    pub encoder_weight_hash: String,
}

#[derive(Serialize, Deserialize)]
struct IdRow {
    passage_id: String,
}

/// Immutable matrix of passage vectors searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    ids: Vec<String>,
    vectors: Vec<f32>,
    d: usize,
    pub snapshot_version: u64,
    pub encoder_weight_hash: String,
}

pub const VECTORS_FILE: &str = "vectors.f32";
pub const IDS_FILE: &str = "ids.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `Σ a_i b_i`, accumulated in f64.
pub fn dot_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl DenseIndex {
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<f32>,
        d: usize,
        snapshot_version: u64,
        encoder_weight_hash: String,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("index width must be positive"));
        }
        if vectors.len() != ids.len() * d {
            return Err(Error::LengthMismatch {
                left: vectors.len(),
                right: ids.len() * d,
            });
        }
        Ok(DenseIndex {
            ids,
            vectors,
            d,
            snapshot_version,
            encoder_weight_hash,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn position(&self, passage_id: &str) -> Option<usize> {
        self.ids.iter().position(|id| id == passage_id)
    }

    /// Exact top-`min(k, M)` by dot product; ties go to the smaller passage id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalResult>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if query.len() != self.d {
            return Err(Error::WidthMismatch {
                expected: self.d,
                actual: query.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len()).map(|i| (dot(query, self.row(i)), i)).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (s, i))| RetrievalResult {
                passage_id: self.ids[i].clone(),
                retriever_score: s,
                rank: r + 1,
            })
            .collect())
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            d: self.d,
            m: self.len(),
            snapshot_version: self.snapshot_version,
            encoder_weight_hash: self.encoder_weight_hash.clone(),
        }
    }

    /// Writes `vectors.f32` (row-major little-endian), `ids.jsonl`, and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|v| v.to_le_bytes()).collect();
        let vpath = dir.join(VECTORS_FILE);
        fs::write(&vpath, bytes).map_err(|e| Error::io(&vpath, e))?;
        let rows: Vec<IdRow> = self
            .ids
            .iter()
            .map(|id| IdRow {
                passage_id: id.clone(),
            })
            .collect();
        jsonl::write(&dir.join(IDS_FILE), &rows)?;
        jsonl::write_json(&dir.join(MANIFEST_FILE), &self.manifest())
    }

    /// Loads a persisted index; `expected_d` guards against pairing it with
    /// an encoder of a different width.
    pub fn load(dir: &Path, expected_d: Option<usize>) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no index at {}",
                dir.display()
            )));
        }
        let manifest: IndexManifest = jsonl::read_json(&mpath)?;
        if let Some(d) = expected_d {
            if d != manifest.d {
                return Err(Error::WidthMismatch {
                    expected: d,
                    actual: manifest.d,
                });
            }
        }
        let rows: Vec<IdRow> = jsonl::read(&dir.join(IDS_FILE))?;
        let vpath = dir.join(VECTORS_FILE);
        let bytes = fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::invalid(format!("{} is not a float32 array", vpath.display())));
        }
        let vectors: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if rows.len() != manifest.m {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: manifest.m,
            });
        }
        Self::new(
            rows.into_iter().map(|r| r.passage_id).collect(),
            vectors,
            manifest.d,
            manifest.snapshot_version,
            manifest.encoder_weight_hash,
        )
    }
}

/// Total order used by [`DenseIndex::search`], exposed for oracles.
pub fn compare_results(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(m: usize, d: usize, seed: u64) -> DenseIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..m * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ids = (0..m).map(|i| format!("p{i:05}")).collect();
        DenseIndex::new(ids, v, d, 1, "h".into()).unwrap()
    }

    fn brute_force(index: &DenseIndex, q: &[f32], k: usize) -> Vec<String> {
        let mut all: Vec<(f64, String)> = (0..index.len())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..index.d() {
                    s += q[j] as f64 * index.row(i)[j] as f64;
                }
                (s, index.ids()[i].clone())
            })
            .collect();
        all.sort_by(|a, b| compare_results((a.0, &a.1), (b.0, &b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn dot_similarity_examples() {
        assert_eq!(dot_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot_similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            dot_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn dot_similarity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0f64;
        for i in 0..64 {
            oracle += (a[i] * b[i]) as f64;
        }
        assert!((dot_similarity(&a, &b).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn forced_argmax() {
        let d = 4;
        let mut v = vec![0f32; 5 * d];
        let q = [1.0f32, 0.0, 0.0, 0.0];
        v[2 * d] = 10.0;
        for i in [0usize, 1, 3, 4] {
            v[i * d + 1] = 1.0;
        }
        let ids = (0..5).map(|i| format!("p{i}")).collect();
        let index = DenseIndex::new(ids, v, d, 1, "h".into()).unwrap();
        let top = index.search(&q, 1).unwrap();
        assert_eq!(top[0].passage_id, "p2");
        assert_eq!(top[0].rank, 1);
    }

    #[test]
    fn top_k_matches_brute_force() {
        let index = random_index(100, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got: Vec<String> = index.search(&q, 10).unwrap().into_iter().map(|r| r.passage_id).collect();
        assert_eq!(got, brute_force(&index, &q, 10));
    }

    #[test]
    fn k_equal_to_m_is_a_sorted_permutation() {
        let index = random_index(30, 8, 4);
        let q = vec![0.5f32; 8];
        let res = index.search(&q, 30).unwrap();
        assert_eq!(res.len(), 30);
        assert!(res.windows(2).all(|w| w[0].retriever_score >= w[1].retriever_score));
        assert!(res.iter().enumerate().all(|(i, r)| r.rank == i + 1));
        let mut ids: Vec<_> = res.iter().map(|r| r.passage_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, index.ids().to_vec());
        assert_eq!(index.search(&q, 500).unwrap().len(), 30);
    }

    #[test]
    fn ties_break_by_passage_id() {
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let index = DenseIndex::new(ids, vec![1.0; 3], 1, 1, "h".into()).unwrap();
        let res = index.search(&[1.0], 2).unwrap();
        assert_eq!(res[0].passage_id, "a");
        assert_eq!(res[1].passage_id, "b");
    }

    #[test]
    fn errors() {
        let empty = DenseIndex::new(vec![], vec![], 4, 1, "h".into()).unwrap();
        assert!(matches!(empty.search(&[0.0; 4], 1), Err(Error::EmptyIndex)));
        let index = random_index(3, 4, 0);
        assert!(index.search(&[0.0; 4], 0).is_err());
        assert!(matches!(index.search(&[0.0; 3], 1), Err(Error::WidthMismatch { .. })));
        assert!(DenseIndex::new(vec!["a".into()], vec![0.0; 3], 4, 1, "h".into()).is_err());
    }

    #[test]
    fn persistence_round_trip_and_width_guard() {
        let dir = tempfile::tempdir().unwrap();
        let index = random_index(20, 8, 7);
        index.save(dir.path()).unwrap();
        let back = DenseIndex::load(dir.path(), Some(8)).unwrap();
        assert_eq!(back, index);
        assert!(matches!(
            DenseIndex::load(dir.path(), Some(16)),
            Err(Error::WidthMismatch { .. })
        ));
        let bytes = std::fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        assert_eq!(bytes.len(), 20 * 8 * 4);
        assert_eq!(&bytes[..4], &index.row(0)[0].to_le_bytes());
        let manifest: serde_json::Value = jsonl::read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest["M"], 20);
        assert_eq!(manifest["d"], 8);
    }

    #[test]
    fn repeated_search_is_bit_identical() {
        let index = random_index(50, 8, 11);
        let q = vec![0.1f32; 8];
        let a = index.search(&q, 7).unwrap();
        let b = index.search(&q, 7).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn search_equals_brute_force(m in 1usize..60, k in 1usize..70, seed in 0u64..1000) {
            let index = random_index(m, 6, seed);
            let q: Vec<f32> = index.row(0).iter().rev().copied().collect();
            let got: Vec<String> = index.search(&q, k).unwrap().into_iter().map(|r| r.passage_id).collect();
            prop_assert_eq!(got, brute_force(&index, &q, k));
        }
    }
}
