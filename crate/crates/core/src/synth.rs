//! A synthetic language pair and the desk-scale experiments run on it.
//!
//! The target language has `words` types drawn with Zipf frequencies. The
//! source language maps every target word to its own word and swaps each
//! adjacent pair of positions, so `t1 t2 t3 t4 t5` becomes `s2 s1 s4 s3 s5`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use thiserror::Error;

use crate::baseline::syn_lexicon_pairs;
use crate::data::{Vocabulary, EOS_ID};
use crate::decoding::{beam_search, DecodeError, ModelScorer, SearchParams};
use crate::dictionary::BilingualDictionary;
use crate::metrics::{corpus_bleu, isotropy_i1, isotropy_i2, sample_decoder_states, sample_encoder_states, MetricError, StateSample};
use crate::model::{ModelConfig, ModelError, Seq2Seq, TokenId};
use crate::scalar::Scalar;
use crate::training::{train, train_supervised, AblationMask, Langs, ParallelExample, SoftFeed, TrainConfig, TrainError, TrainTask};

pub const SOURCE_LANG: &str = "src";
pub const TARGET_LANG: &str = "tgt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid synthetic setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Word types per language.
    pub words: usize,
    pub mono: usize,
    /// Real parallel pairs available to the warm start.
    pub parallel: usize,
    pub test: usize,
    /// Fraction of target types with a dictionary entry.
    pub coverage: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            words: 98,
            mono: 5000,
            parallel: 100,
            test: 200,
            coverage: 0.9,
            min_len: 3,
            max_len: 6,
            zipf: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub vocab: Vocabulary,
    pub source_tag: TokenId,
    pub target_tag: TokenId,
    source_words: Vec<TokenId>,
    target_words: Vec<TokenId>,
    /// Target-language monolingual sentences.
    pub mono: Vec<Vec<TokenId>>,
    /// `(source, target)` pairs.
    pub parallel: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub test: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    /// Target to source.
    pub dict: BilingualDictionary<TokenId>,
}

impl SynthPair {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, ExperimentError> {
        if cfg.words == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len || !(0.0..=1.0).contains(&cfg.coverage) {
            return Err(ExperimentError::Setup(format!("{cfg:?}")));
        }
        let mut vocab = Vocabulary::build::<&str>(&[SOURCE_LANG, TARGET_LANG], std::iter::empty());
        let source_words: Vec<TokenId> = (0..cfg.words).map(|i| vocab.add(&format!("s{i:03}"))).collect();
        let target_words: Vec<TokenId> = (0..cfg.words).map(|i| vocab.add(&format!("t{i:03}"))).collect();
        let source_tag = vocab.tag(SOURCE_LANG).expect("tag added");
        let target_tag = vocab.tag(TARGET_LANG).expect("tag added");

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let zipf = Zipf::new(cfg.words as u64, cfg.zipf).map_err(|e| ExperimentError::Setup(e.to_string()))?;
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            (0..len)
                .map(|_| {
                    let rank = rng.sample(zipf) as usize - 1;
                    target_words[rank.min(cfg.words - 1)]
                })
                .collect()
        };
        let mono: Vec<Vec<TokenId>> = (0..cfg.mono).map(|_| sentence(&mut rng)).collect();
        let parallel_t: Vec<Vec<TokenId>> = (0..cfg.parallel).map(|_| sentence(&mut rng)).collect();
        let test_t: Vec<Vec<TokenId>> = (0..cfg.test).map(|_| sentence(&mut rng)).collect();

        let covered = (cfg.coverage * cfg.words as f64).round() as usize;
        let mut types: Vec<usize> = (0..cfg.words).collect();
        types.shuffle(&mut rng);
        let mut dict = BilingualDictionary::new(TARGET_LANG, SOURCE_LANG);
        for &i in types.iter().take(covered) {
            dict.insert(vec![target_words[i]], vec![source_words[i]]);
        }
        let mut pair = Self {
            vocab,
            source_tag,
            target_tag,
            source_words,
            target_words,
            mono,
            parallel: Vec::new(),
            test: Vec::new(),
            dict,
        };
        pair.parallel = parallel_t.into_iter().map(|t| (pair.to_source(&t), t)).collect();
        pair.test = test_t.into_iter().map(|t| (pair.to_source(&t), t)).collect();
        Ok(pair)
    }

    /// The true source-language rendering of a target sentence.
    pub fn to_source(&self, target: &[TokenId]) -> Vec<TokenId> {
        let base = self.target_words[0];
        let mut out: Vec<TokenId> = target.iter().map(|&t| self.source_words[t - base]).collect();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out
    }

    pub fn langs(&self) -> Langs {
        Langs {
            target: self.target_tag,
            source: self.source_tag,
        }
    }

    pub fn banned(&self) -> Vec<TokenId> {
        self.vocab.non_output_ids()
    }

    /// Dictionary coverage by type.
    pub fn type_coverage(&self) -> f64 {
        self.dict.num_sources() as f64 / self.target_words.len() as f64
    }
}

/// Everything one synthetic run needs besides the data seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub warm: TrainConfig,
    pub biacl: TrainConfig,
    pub eval_beam: usize,
    pub isotropy_sample: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_positions: 16,
            warm: TrainConfig {
                epochs: 15,
                lr: 3e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            biacl: TrainConfig {
                lambda: 0.7,
                epochs: 3,
                lr: 3e-4,
                batch_size: 16,
                beam: 4,
                max_len: 10,
                extra_len: Some(2),
                soft_feed: SoftFeed::ExpectedEmbedding,
                ..TrainConfig::default()
            },
            eval_beam: 2,
            isotropy_sample: 128,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self, pair: &SynthPair) -> ModelConfig {
        let mut m = ModelConfig::new(pair.vocab.len(), vec![pair.source_tag, pair.target_tag]);
        m.d_model = self.d_model;
        m.layers = self.layers;
        m.heads = self.heads;
        m.ff_dim = self.ff_dim;
        m.max_len = self.max_positions;
        m
    }

    fn search(&self, pair: &SynthPair, beam: usize) -> SearchParams {
        let mut s = SearchParams::new(beam, self.synth.max_len + 2, EOS_ID);
        s.banned = pair.banned();
        s.extra_len = self.biacl.extra_len;
        s
    }
}

/// One system's scores on the held-out source-to-target test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResult {
    pub system: String,
    pub bleu: f64,
    pub i1_enc: f64,
    pub i2_enc: f64,
    pub i1_dec: f64,
    pub i2_dec: f64,
    pub seconds: f64,
}

pub const RESULTS_HEADER: &str = "system\tpair\tBLEU\tI1_enc\tI2_enc\tI1_dec\tI2_dec";

impl SystemResult {
    pub fn tsv_row(&self, pair: &str) -> String {
        format!(
            "{}\t{pair}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.system, self.bleu, self.i1_enc, self.i2_enc, self.i1_dec, self.i2_dec
        )
    }
}

pub fn translate<T: Scalar>(
    model: &Seq2Seq<T>,
    source: &[TokenId],
    src_lang: TokenId,
    tgt_lang: TokenId,
    search: &SearchParams,
) -> Result<Vec<TokenId>, DecodeError> {
    let mut src = source.to_vec();
    src.push(search.eos);
    let scorer = ModelScorer::new(model, &src, src_lang, tgt_lang)?;
    match beam_search(&scorer, &search.for_source(source.len())) {
        Ok(h) => Ok(h.tokens),
        Err(DecodeError::NoHypothesis) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Test-set BLEU and pooled-state isotropy of a source-to-target model.
pub fn evaluate<T: Scalar>(
    model: &Seq2Seq<T>,
    pair: &SynthPair,
    cfg: &ExperimentConfig,
    system: &str,
) -> Result<SystemResult, ExperimentError> {
    let search = cfg.search(pair, cfg.eval_beam);
    let mut hyps = Vec::with_capacity(pair.test.len());
    for (src, _) in &pair.test {
        hyps.push(translate(model, src, pair.source_tag, pair.target_tag, &search)?);
    }
    let refs: Vec<Vec<TokenId>> = pair.test.iter().map(|(_, t)| t.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let sources: Vec<Vec<TokenId>> = pair.test.iter().map(|(s, _)| s.clone()).collect();
    let sample = StateSample {
        size: cfg.isotropy_sample,
        seed: cfg.synth.seed,
        search: cfg.search(pair, 1),
    };
    let enc = sample_encoder_states(model, &sources, pair.source_tag, &sample)?;
    let dec = sample_decoder_states(model, &sources, pair.source_tag, pair.target_tag, &sample)?;
    Ok(SystemResult {
        system: system.to_owned(),
        bleu,
        i1_enc: isotropy_i1(&enc),
        i2_enc: isotropy_i2(&enc),
        i1_dec: isotropy_i1(&dec),
        i2_dec: isotropy_i2(&dec),
        seconds: 0.0,
    })
}

/// Supervised training on the small real parallel set, both directions.
pub fn warm_start<T: Scalar>(pair: &SynthPair, cfg: &ExperimentConfig) -> Result<Seq2Seq<T>, ExperimentError> {
    let mut model = Seq2Seq::new(cfg.model_config(pair), cfg.synth.seed)?;
    let mut examples = Vec::with_capacity(2 * pair.parallel.len());
    for (s, t) in &pair.parallel {
        examples.push(ParallelExample {
            source: s.clone(),
            source_lang: pair.source_tag,
            target: t.clone(),
            target_lang: pair.target_tag,
        });
        examples.push(ParallelExample {
            source: t.clone(),
            source_lang: pair.target_tag,
            target: s.clone(),
            target_lang: pair.source_tag,
        });
    }
    let wcfg = TrainConfig {
        seed: cfg.synth.seed,
        ..cfg.warm.clone()
    };
    train_supervised(&mut model, &examples, EOS_ID, &wcfg, true)?;
    Ok(model)
}

fn biacl_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.synth.seed,
        ..cfg.biacl.clone()
    }
}

/// Continues from `warm` with Bi-ACL under `mask`.
pub fn run_biacl<T: Scalar>(
    warm: &Seq2Seq<T>,
    pair: &SynthPair,
    cfg: &ExperimentConfig,
    mask: AblationMask,
) -> Result<Seq2Seq<T>, ExperimentError> {
    let mut model = warm.clone();
    let task = TrainTask {
        corpus: &pair.mono,
        dict: &pair.dict,
        langs: pair.langs(),
        eos: EOS_ID,
        banned: pair.banned(),
    };
    let out = train(&mut model, &task, &biacl_config(cfg), mask, None)?;
    log::info!(
        "bi-acl {}: {} steps, {} skipped, {} curriculum sentences",
        mask.label(),
        out.steps(),
        out.skipped(),
        out.curriculum.len()
    );
    Ok(model)
}

/// Continues from `warm` on dictionary-substituted pairs, with the same
/// curriculum order, optimizer and epochs as Bi-ACL.
pub fn run_syn_lexicon<T: Scalar>(
    warm: &Seq2Seq<T>,
    pair: &SynthPair,
    cfg: &ExperimentConfig,
) -> Result<Seq2Seq<T>, ExperimentError> {
    let tcfg = biacl_config(cfg);
    let plan = crate::data::curriculum_order(&pair.mono, &pair.dict, tcfg.phi).map_err(TrainError::from)?;
    let ordered: Vec<Vec<TokenId>> = plan.order.iter().map(|&i| pair.mono[i].clone()).collect();
    let examples: Vec<ParallelExample> = syn_lexicon_pairs(&ordered, &pair.dict)
        .into_iter()
        .map(|p| ParallelExample {
            source: p.source,
            source_lang: pair.source_tag,
            target: p.target,
            target_lang: pair.target_tag,
        })
        .collect();
    let mut model = warm.clone();
    train_supervised(&mut model, &examples, EOS_ID, &tcfg, false)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub warm: SystemResult,
    pub biacl: SystemResult,
    pub syn_lexicon: SystemResult,
}

impl ExperimentResult {
    pub fn rows(&self) -> [&SystemResult; 3] {
        [&self.warm, &self.syn_lexicon, &self.biacl]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in self.rows() {
            let _ = writeln!(s, "{}", r.tsv_row(&pair_name()));
        }
        s
    }
}

pub fn pair_name() -> String {
    format!("{SOURCE_LANG}-{TARGET_LANG}")
}

fn timed<R>(f: impl FnOnce() -> Result<R, ExperimentError>) -> Result<(R, f64), ExperimentError> {
    let start = Instant::now();
    let r = f()?;
    Ok((r, start.elapsed().as_secs_f64()))
}

/// Warm start, then Bi-ACL and syn_lexicon from the same warm start.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let pair = SynthPair::generate(&cfg.synth)?;
    let (warm, t_warm) = timed(|| warm_start::<T>(&pair, cfg))?;
    let mut warm_r = evaluate(&warm, &pair, cfg, "warm_start")?;
    warm_r.seconds = t_warm;
    let (biacl, t_b) = timed(|| run_biacl(&warm, &pair, cfg, AblationMask::ALL))?;
    let mut biacl_r = evaluate(&biacl, &pair, cfg, "bi_acl")?;
    biacl_r.seconds = t_b;
    let (syn, t_s) = timed(|| run_syn_lexicon(&warm, &pair, cfg))?;
    let mut syn_r = evaluate(&syn, &pair, cfg, "syn_lexicon")?;
    syn_r.seconds = t_s;
    Ok(ExperimentResult {
        warm: warm_r,
        biacl: biacl_r,
        syn_lexicon: syn_r,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub mask: AblationMask,
    pub bleu: f64,
}

pub const ABLATION_HEADER: &str = "seed\tmask\tBLEU";

/// BLEU of every non-empty mask for each seed, each run from that seed's warm start.
pub fn run_ablation<T: Scalar>(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.synth.seed = seed;
        let pair = SynthPair::generate(&c.synth)?;
        let warm = warm_start::<T>(&pair, &c)?;
        for mask in AblationMask::all_nonempty() {
            let m = run_biacl(&warm, &pair, &c, mask)?;
            let r = evaluate(&m, &pair, &c, &mask.label())?;
            log::info!("seed {seed} mask {} BLEU {:.2}", mask.label(), r.bleu);
            rows.push(AblationRow {
                seed,
                mask,
                bleu: r.bleu,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.4}", r.seed, r.mask.label(), r.bleu);
    }
    s
}

/// Seeds where the full mask has the top BLEU (ties count as top).
pub fn full_mask_wins(rows: &[AblationRow]) -> Vec<(u64, bool)> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|seed| {
            let of_seed: Vec<&AblationRow> = rows.iter().filter(|r| r.seed == seed).collect();
            let best = of_seed.iter().map(|r| r.bleu).fold(f64::NEG_INFINITY, f64::max);
            let full = of_seed.iter().find(|r| r.mask == AblationMask::ALL).map(|r| r.bleu);
            (seed, full.is_some_and(|b| b >= best))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            mono: 300,
            parallel: 20,
            test: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_seeded_and_shaped() {
        let a = SynthPair::generate(&small()).unwrap();
        let b = SynthPair::generate(&small()).unwrap();
        assert_eq!(a.mono, b.mono);
        assert_eq!(a.dict, b.dict);
        assert_eq!(a.vocab.len(), 200);
        assert_eq!(a.mono.len(), 300);
        assert!((a.type_coverage() - 0.9).abs() < 0.01);
        assert!(a.mono.iter().all(|s| (3..=6).contains(&s.len())));
        let c = SynthPair::generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.mono, c.mono);
    }

    #[test]
    fn source_rendering() {
        let p = SynthPair::generate(&small()).unwrap();
        let t = |i: usize| p.target_words[i];
        let s = |i: usize| p.source_words[i];
        assert_eq!(p.to_source(&[t(0), t(1), t(2)]), vec![s(1), s(0), s(2)]);
        for (src, tgt) in &p.test {
            assert_eq!(src.len(), tgt.len());
        }
        // dictionary agrees with the true mapping
        for (k, v) in p.dict.pairs() {
            assert_eq!(p.to_source(k), *v);
        }
    }

    #[test]
    fn full_mask_win_count() {
        let row = |seed, mask, bleu| AblationRow { seed, mask, bleu };
        let rows = vec![
            row(0, AblationMask::ALL, 5.0),
            row(0, AblationMask::AE_ONLY, 4.0),
            row(1, AblationMask::ALL, 3.0),
            row(1, AblationMask::AE_ONLY, 4.0),
        ];
        assert_eq!(full_mask_wins(&rows), vec![(0, true), (1, false)]);
        assert!(ablation_tsv(&rows).starts_with(ABLATION_HEADER));
    }
}
