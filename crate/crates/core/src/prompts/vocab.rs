use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::generate::{Exemplar, VqaSample};
use crate::error::{Error, Result};
use crate::model::forward::{encode_image, pool_global};
use crate::model::weights::BoundWeights;
use crate::model::ModelWeights;
use crate::tensor::{cosine_similarity, Tape, Tensor};

/// Retrieval vocabulary: `M` terms with `D`-space embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyIndex {
    terms: Vec<String>,
    embeddings: Tensor,
    provenance: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabRecord {
    term: String,
    embedding: Vec<f64>,
    provenance: String,
}

impl VocabularyIndex {
    /// Rejects duplicate terms, ragged or zero-norm embeddings.
    pub fn new(terms: Vec<String>, embeddings: Tensor, provenance: Vec<String>) -> Result<Self> {
        let m = terms.len();
        if embeddings.rank() != 2 || embeddings.rows() != m || provenance.len() != m {
            return Err(Error::Shape {
                op: "vocabulary",
                lhs: vec![m, provenance.len()],
                rhs: embeddings.shape().to_vec(),
            });
        }
        let mut seen = HashSet::new();
        for t in &terms {
            if !seen.insert(t.as_str()) {
                return Err(Error::Input(format!("duplicate vocabulary term {t:?}")));
            }
        }
        embeddings.check_finite("vocabulary embeddings")?;
        if (0..m).any(|i| embeddings.row(i).iter().all(|&v| v == 0.0)) {
            return Err(Error::Norm("vocabulary embedding"));
        }
        Ok(Self {
            terms,
            embeddings,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn provenance(&self, i: usize) -> &str {
        &self.provenance[i]
    }

    /// One JSON object per line: `{"term", "embedding", "provenance"}`.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for i in 0..self.len() {
            let rec = VocabRecord {
                term: self.terms[i].clone(),
                embedding: self.embeddings.row(i).to_vec(),
                provenance: self.provenance[i].clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Loads a vocabulary file, checking every embedding has width `dim`.
    pub fn load_jsonl(path: &Path, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut terms = Vec::new();
        let mut data = Vec::new();
        let mut prov = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: VocabRecord = serde_json::from_str(line)?;
            if r.embedding.len() != dim {
                return Err(Error::Dimension {
                    name: format!("vocabulary term {:?}", r.term),
                    expected: vec![dim],
                    found: vec![r.embedding.len()],
                });
            }
            terms.push(r.term);
            data.extend(r.embedding);
            prov.push(r.provenance);
        }
        let m = terms.len();
        Self::new(terms, Tensor::new(&[m, dim], data)?, prov)
    }
}

/// Terms are the unique training answers plus `attributes`; each term is
/// embedded as the pooled vision feature of its exemplar image.
pub fn build_vocabulary(
    train: &[VqaSample],
    attributes: &[String],
    exemplars: &BTreeMap<String, Exemplar>,
    weights: &ModelWeights,
) -> Result<VocabularyIndex> {
    if train.is_empty() {
        return Err(Error::Input("vocabulary from an empty training set".into()));
    }
    let terms: BTreeSet<String> = train
        .iter()
        .map(|s| s.answer.clone())
        .chain(attributes.iter().cloned())
        .collect();
    let cfg = &weights.config;
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let bw = BoundWeights::bind(&mut tape, weights, &mut leaves);
    let base = tape.len();
    let mut data = Vec::with_capacity(terms.len() * cfg.vision_dim);
    let mut prov = Vec::with_capacity(terms.len());
    for term in &terms {
        let ex = exemplars
            .get(term)
            .ok_or_else(|| Error::Provenance(format!("no exemplar for term {term:?}")))?;
        tape.truncate(base);
        let zv = encode_image(&mut tape, &bw.vision, cfg, &ex.image)?;
        let g = pool_global(&mut tape, zv)?;
        data.extend_from_slice(tape.value(g));
        prov.push(ex.provenance.clone());
    }
    let m = terms.len();
    VocabularyIndex::new(
        terms.into_iter().collect(),
        Tensor::new(&[m, cfg.vision_dim], data)?,
        prov,
    )
}

/// Top-`k` terms by cosine similarity between the mean of `zv: [N_v×D]`
/// and each vocabulary embedding; ties go to the lexicographically
/// smaller term.
pub fn retrieve_topk(zv: &Tensor, index: &VocabularyIndex, k: usize) -> Result<Vec<(String, f64)>> {
    if k > index.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds vocabulary size {}",
            index.len()
        )));
    }
    if zv.rank() != 2 || zv.cols() != index.dim() || zv.rows() == 0 {
        return Err(Error::Shape {
            op: "retrieve_topk",
            lhs: zv.shape().to_vec(),
            rhs: vec![index.dim()],
        });
    }
    let d = index.dim();
    let mut q = vec![0.0; d];
    for r in 0..zv.rows() {
        for (a, b) in q.iter_mut().zip(zv.row(r)) {
            *a += b;
        }
    }
    let inv = 1.0 / zv.rows() as f64;
    q.iter_mut().for_each(|v| *v *= inv);
    if q.iter().all(|&v| v == 0.0) {
        return Err(Error::Norm("retrieval query"));
    }
    let mut scored = index
        .terms
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((t.clone(), cosine_similarity(&q, index.embeddings.row(i))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(m: usize, d: usize, rng: &mut ChaCha8Rng) -> VocabularyIndex {
        let terms = (0..m).map(|i| format!("t{i:03}")).collect();
        let data = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        VocabularyIndex::new(terms, Tensor::new(&[m, d], data).unwrap(), vec![String::new(); m]).unwrap()
    }

    #[test]
    fn query_equal_to_a_row_ranks_it_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = random_index(20, 6, &mut rng);
        let zv = Tensor::new(&[1, 6], idx.embeddings().row(7).to_vec()).unwrap();
        let top = retrieve_topk(&zv, &idx, 3).unwrap();
        assert_eq!(top[0].0, "t007");
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_ranking_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = random_index(20, 6, &mut rng);
        let zv = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let all = retrieve_topk(&zv, &idx, 20).unwrap();
        let mut names: Vec<_> = all.iter().map(|(t, _)| t.clone()).collect();
        names.sort();
        assert_eq!(names, idx.terms().to_vec());
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(retrieve_topk(&zv, &idx, 21).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let idx = VocabularyIndex::new(
            vec!["b".into(), "a".into(), "c".into()],
            e,
            vec![String::new(); 3],
        )
        .unwrap();
        let zv = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let top = retrieve_topk(&zv, &idx, 2).unwrap();
        assert_eq!(top[0].0, "a");
        assert_eq!(top[1].0, "b");
    }

    #[test]
    fn zero_query_and_bad_index_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = random_index(5, 3, &mut rng);
        assert!(matches!(
            retrieve_topk(&Tensor::zeros(&[2, 3]), &idx, 1),
            Err(Error::Norm(_))
        ));
        let dup = VocabularyIndex::new(
            vec!["a".into(), "a".into()],
            Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap(),
            vec![String::new(); 2],
        );
        assert!(dup.is_err());
        let zero = VocabularyIndex::new(
            vec!["a".into()],
            Tensor::zeros(&[1, 2]),
            vec![String::new()],
        );
        assert!(matches!(zero, Err(Error::Norm(_))));
    }

    #[test]
    fn jsonl_round_trip_and_dimension_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx = random_index(6, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.jsonl");
        idx.save_jsonl(&p).unwrap();
        let back = VocabularyIndex::load_jsonl(&p, 4).unwrap();
        assert!(back.embeddings().bit_eq(idx.embeddings()));
        assert_eq!(back.terms(), idx.terms());
        assert!(matches!(
            VocabularyIndex::load_jsonl(&p, 5),
            Err(Error::Dimension { .. })
        ));
    }
}
