//! Corpus BLEU and the I1/I2 isotropy measures.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoding::{beam_search, DecodeError, ModelScorer, SearchParams};
use crate::model::{Seq2Seq, TokenId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    CountMismatch { hypotheses: usize, references: usize },
    #[error("empty corpus")]
    Empty,
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

const MAX_ORDER: usize = 4;

fn ngram_counts<W: Eq + Hash>(s: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    for g in s.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus-level 4-gram BLEU in [0, 100] with one reference per hypothesis.
pub fn corpus_bleu<W: Eq + Hash>(hypotheses: &[Vec<W>], references: &[Vec<W>]) -> Result<f64> {
    corpus_bleu_with(hypotheses, references, false)
}

/// As [`corpus_bleu`]; with `smooth`, orders above one get add-one counts.
pub fn corpus_bleu_with<W: Eq + Hash>(hypotheses: &[Vec<W>], references: &[Vec<W>], smooth: bool) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::CountMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut ref_totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        // an order absent from both sides (all sentences too short) carries no evidence
        if totals[n] == 0 && ref_totals[n] == 0 {
            continue;
        }
        orders += 1;
        let (m, t) = if smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_p += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * (log_p / orders as f64).exp()).min(100.0))
}

/// Rows are the vectors whose isotropy is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(MetricError::Empty);
        }
        if data.len() != rows * dim {
            return Err(TensorError::BadLength {
                shape: vec![rows, dim],
                len: data.len(),
            }
            .into());
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TensorError::Invalid {
                op: "embedding matrix",
                reason: "ragged rows".into(),
            }
            .into());
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding matrix",
                reason: format!("expected a matrix, got shape {:?}", t.shape()),
            }
            .into());
        }
        Self::new(t.rows(), t.cols(), t.data().iter().map(|x| x.as_f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn log_partition(&self, s: &[f64]) -> f64 {
        let dots: Vec<f64> = (0..self.rows)
            .map(|i| self.row(i).iter().zip(s).map(|(a, b)| a * b).sum())
            .collect();
        let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + dots.iter().map(|d| (d - m).exp()).sum::<f64>().ln()
    }

    /// Unit eigenvectors of WᵀW in ascending eigenvalue order, signed so that
    /// `Σ_i sᵀw_i ≥ 0`; when that sum vanishes the largest-magnitude
    /// component is made positive instead.
    pub fn eigenvectors(&self) -> Vec<Vec<f64>> {
        let w = DMatrix::from_row_slice(self.rows, self.dim, &self.data);
        let gram = w.transpose() * &w;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let col_sum: Vec<f64> = (0..self.dim)
            .map(|j| (0..self.rows).map(|i| self.data[i * self.dim + j]).sum())
            .collect();
        let scale = col_sum.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        order
            .into_iter()
            .map(|k| {
                let mut s: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                let total: f64 = s.iter().zip(&col_sum).map(|(a, b)| a * b).sum();
                let flip = if total.abs() > 1e-10 * scale {
                    total < 0.0
                } else {
                    let big = s.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                    big < 0.0
                };
                if flip {
                    s.iter_mut().for_each(|x| *x = -*x);
                }
                s
            })
            .collect()
    }
}

/// `Z(s) = Σ_i exp(sᵀw_i)` for each eigenvector `s` of WᵀW.
pub fn partition_values(w: &EmbeddingMatrix) -> Vec<f64> {
    log_partition_values(w).into_iter().map(f64::exp).collect()
}

fn log_partition_values(w: &EmbeddingMatrix) -> Vec<f64> {
    w.eigenvectors().iter().map(|s| w.log_partition(s)).collect()
}

/// Both measures are scale-free in Z, so they are computed from Z / max Z.
fn relative_partitions(w: &EmbeddingMatrix) -> Vec<f64> {
    let logs = log_partition_values(w);
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().map(|l| (l - max).exp()).collect()
}

/// `min_s Z(s) / max_s Z(s)`.
pub fn isotropy_i1(w: &EmbeddingMatrix) -> f64 {
    relative_partitions(w).into_iter().fold(f64::INFINITY, f64::min)
}

/// Standard deviation of Z(s) divided by its mean.
pub fn isotropy_i2(w: &EmbeddingMatrix) -> f64 {
    let z = relative_partitions(w);
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let ss: f64 = z.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (n * mean * mean)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSample {
    pub size: usize,
    pub seed: u64,
    pub search: SearchParams,
}

impl StateSample {
    pub fn new(search: SearchParams) -> Self {
        Self {
            size: 128,
            seed: 0,
            search,
        }
    }
}

fn pick_sample(n: usize, cfg: &StateSample) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.size.min(n).max(1);
    let mut picks = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// Mean encoder state of each sentence in a seeded sample, stacked row-wise.
pub fn sample_encoder_states<T: Scalar>(
    model: &Seq2Seq<T>,
    sentences: &[Vec<TokenId>],
    lang: TokenId,
    sample_cfg: &StateSample,
) -> Result<EmbeddingMatrix> {
    let mut rows = Vec::new();
    for i in pick_sample(sentences.len(), sample_cfg)? {
        let mut src = sentences[i].clone();
        src.push(sample_cfg.search.eos);
        let h = model.encode_value(&src, lang).map_err(DecodeError::from)?;
        rows.push(h.mean_rows().data().iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    }
    EmbeddingMatrix::from_rows(&rows)
}

/// Translates a seeded sample of `sentences` (without end token) and stacks
/// the mean decoder state of each output row-wise.
pub fn sample_decoder_states<T: Scalar>(
    model: &Seq2Seq<T>,
    sentences: &[Vec<TokenId>],
    src_lang: TokenId,
    tgt_lang: TokenId,
    sample_cfg: &StateSample,
) -> Result<EmbeddingMatrix> {
    let eos = sample_cfg.search.eos;
    let mut rows = Vec::new();
    for i in pick_sample(sentences.len(), sample_cfg)? {
        let mut src = sentences[i].clone();
        src.push(eos);
        let scorer = ModelScorer::new(model, &src, src_lang, tgt_lang)?;
        let mut out = beam_search(&scorer, &sample_cfg.search)?.tokens;
        out.push(eos);
        let memory = model.encode_value(&src, src_lang).map_err(DecodeError::from)?;
        let (states, _) = model.decode_value(&memory, tgt_lang, &out).map_err(DecodeError::from)?;
        rows.push(states.mean_rows().data().iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    }
    EmbeddingMatrix::from_rows(&rows)
}

/// Decoder-side measures of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub dataset: String,
    pub side: String,
    pub bleu: f64,
    pub i1: f64,
    pub i2: f64,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "model\tdataset\tside\tbleu\ti1\ti2";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.6}\t{:.6}",
            self.model, self.dataset, self.side, self.bleu, self.i1, self.i2
        )
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "model:   {}", self.model)?;
        writeln!(f, "dataset: {}", self.dataset)?;
        writeln!(f, "side:    {}", self.side)?;
        writeln!(f, "BLEU:    {:.2}", self.bleu)?;
        writeln!(f, "I1:      {:.6}", self.i1)?;
        write!(f, "I2:      {:.6}", self.i2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![words("a b c d e"), words("x y z w")];
        assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&[words("q r s t")], &[words("a b c d")]).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[words("a b")], &[words("a b")]).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&[words("a b")], &[words("a b c d")]).unwrap(), 0.0);
        let hyps = vec![
            words("the cat sat on the mat"),
            words("a dog runs"),
            words("hello world again"),
        ];
        let refs = vec![
            words("the cat sat on a mat"),
            words("the dog runs fast"),
            words("hello there world again"),
        ];
        // clipped matches 10/12, 5/9, 2/6, 1/3; lengths 12 vs 14
        let want = 40.312851728393625;
        assert!((corpus_bleu(&hyps, &refs).unwrap() - want).abs() < 1e-6);
        assert!(matches!(
            corpus_bleu(&hyps, &refs[..2]),
            Err(MetricError::CountMismatch { .. })
        ));
    }

    #[test]
    fn smoothing_rescues_missing_orders() {
        let h = vec![words("a b c")];
        let r = vec![words("a b d")];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
        assert!(corpus_bleu_with(&h, &r, true).unwrap() > 0.0);
    }

    #[test]
    fn isotropy_examples() {
        let e = std::f64::consts::E;
        let sym = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let z = partition_values(&sym);
        let want = 2.0 * 1f64.cosh() + 2.0;
        assert!(z.iter().all(|v| (v - want).abs() < 1e-9), "{z:?}");
        assert!((isotropy_i1(&sym) - 1.0).abs() < 1e-12);
        assert!(isotropy_i2(&sym).abs() < 1e-12);

        let dup = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let mut z = partition_values(&dup);
        z.sort_by(f64::total_cmp);
        assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] - 2.0 * e).abs() < 1e-12);
        assert!((isotropy_i1(&dup) - 1.0 / e).abs() < 1e-12);
        assert!((isotropy_i2(&dup) - (e - 1.0) / (e + 1.0)).abs() < 1e-12);

        let one = EmbeddingMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(partition_values(&one), vec![1.0]);
        assert_eq!((isotropy_i1(&one), isotropy_i2(&one)), (1.0, 0.0));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert_eq!(EmbeddingMatrix::new(0, 2, vec![]), Err(MetricError::Empty));
        assert_eq!(EmbeddingMatrix::new(1, 1, vec![f64::NAN]), Err(MetricError::NonFinite));
    }

    proptest! {
        #[test]
        fn bleu_bounds(c in prop::collection::vec((prop::collection::vec(0u8..5, 0..8), prop::collection::vec(0u8..5, 1..8)), 1..5)) {
            let (h, r): (Vec<_>, Vec<_>) = c.into_iter().unzip();
            let b = corpus_bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            prop_assert_eq!(corpus_bleu(&r, &r).unwrap(), 100.0);
        }

        #[test]
        fn isotropy_bounds(rows in 1usize..6, dim in 1usize..4, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = EmbeddingMatrix::new(rows, dim, data).unwrap();
            let (i1, i2) = (isotropy_i1(&w), isotropy_i2(&w));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&i1));
            prop_assert!(i2 >= 0.0);
        }
    }

    #[test]
    fn decoder_state_sample() {
        let mut cfg = ModelConfig::new(10, vec![2, 3]);
        cfg.d_model = 8;
        cfg.ff_dim = 8;
        cfg.max_len = 8;
        let m = Seq2Seq::<f64>::new(cfg, 1).unwrap();
        let sentences: Vec<Vec<TokenId>> = (0..20).map(|i| vec![4 + i % 6, 5]).collect();
        let mut search = SearchParams::new(1, 5, 1);
        search.banned = vec![0, 2, 3];
        let s = StateSample::new(search);
        let a = sample_decoder_states(&m, &sentences, 2, 3, &s).unwrap();
        assert_eq!((a.rows(), a.dim()), (20, 8));
        assert_eq!(a, sample_decoder_states(&m, &sentences, 2, 3, &s).unwrap());
        let one = sample_decoder_states(&m, &sentences[..1], 2, 3, &s).unwrap();
        assert_eq!((one.rows(), one.dim()), (1, 8));
        let small = StateSample { size: 5, ..s.clone() };
        assert_eq!(sample_decoder_states(&m, &sentences, 2, 3, &small).unwrap().rows(), 5);
        let enc = sample_encoder_states(&m, &sentences, 2, &small).unwrap();
        assert_eq!((enc.rows(), enc.dim()), (5, 8));
        assert_eq!(sample_decoder_states(&m, &[], 2, 3, &s), Err(MetricError::Empty));
    }
}
