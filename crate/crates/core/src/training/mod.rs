//! Bi-ACL training: online pseudo-source generation, the composite objective and AdamW.

pub mod config;
pub mod losses;
pub mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ConfigError, SoftFeed, TrainConfig};
pub use losses::{
    combine, composite_loss, contrastive_objective, make_negative, make_positive, AblationMask, Components, Langs,
    LossError, LossReport, LossSettings, PerturbationTape,
};
pub use optim::{clip_global_norm, global_norm, AdamW};

use crate::autodiff::Graph;
use crate::data::{curriculum_order, CurriculumPlan, DataError};
use crate::decoding::{generate_batch, DecodeError, SearchParams};
use crate::dictionary::BilingualDictionary;
use crate::model::{ModelError, Seq2Seq, TokenId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no training examples")]
    NoExamples,
    #[error("cannot write training log: {0}")]
    Log(String),
}

/// Monolingual target-side data and everything needed to turn it into pseudo-parallel pairs.
#[derive(Debug, Clone)]
pub struct TrainTask<'d> {
    /// Target-language sentences without the end token.
    pub corpus: &'d [Vec<TokenId>],
    /// Target-side to source-side entries.
    pub dict: &'d BilingualDictionary<TokenId>,
    pub langs: Langs,
    pub eos: TokenId,
    /// Tokens the generator may never emit.
    pub banned: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub reports: Vec<LossReport<T>>,
    pub curriculum: CurriculumPlan,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn steps(&self) -> usize {
        self.reports.len()
    }

    pub fn skipped(&self) -> usize {
        self.reports.iter().map(|r| r.skipped).sum()
    }
}

pub const LOG_HEADER: &str = "step\tae_bkd\tae_fwd\tcl_bkd\tcl_fwd\tstar\tskipped";

fn settings<T: Scalar>(cfg: &TrainConfig) -> LossSettings<T> {
    LossSettings {
        lambda: T::lit(cfg.lambda),
        tau: T::lit(cfg.tau),
        eps_neg: T::lit(cfg.eps_neg),
        eps_pos: T::lit(cfg.eps_pos),
        soft_feed: cfg.soft_feed,
    }
}

/// Overflow inside the network is reported as divergence of that step.
fn overflow(step: usize, e: impl Into<TrainError>) -> TrainError {
    let e = e.into();
    let tensor = |m: &ModelError| matches!(m, ModelError::Tensor(TensorError::NonFinite { .. }));
    let hit = match &e {
        TrainError::Decode(DecodeError::NonFinite { .. }) => true,
        TrainError::Decode(DecodeError::Model(m)) | TrainError::Loss(LossError::Model(m)) | TrainError::Model(m) => {
            tensor(m)
        }
        TrainError::Tensor(TensorError::NonFinite { .. }) => true,
        _ => false,
    };
    if hit {
        TrainError::Diverged { step, what: "activations" }
    } else {
        e
    }
}

fn all_finite<T: Scalar>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(|g| g.is_finite())
}

/// Runs `cfg.epochs` passes over the curriculum. Each batch regenerates its
/// pseudo-sources with the current parameters, then takes one optimizer step.
/// With an all-off mask the parameters are left untouched.
pub fn train<T: Scalar>(
    model: &mut Seq2Seq<T>,
    task: &TrainTask<'_>,
    cfg: &TrainConfig,
    mask: AblationMask,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let curriculum = curriculum_order(task.corpus, task.dict, cfg.phi)?;
    let batches = curriculum.batches(cfg.batch_size)?;
    let settings = settings::<T>(cfg);
    let mut search = SearchParams::new(cfg.beam, cfg.max_len, task.eos);
    search.banned = task.banned.clone();
    search.extra_len = cfg.extra_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), T::lit(cfg.lr), T::lit(cfg.weight_decay));
    let mut reports = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| TrainError::Log(e.to_string()))?;
    }
    for _epoch in 0..cfg.epochs {
        for batch in &batches {
            let step = reports.len();
            let sentences: Vec<Vec<TokenId>> = batch.iter().map(|&i| task.corpus[i].clone()).collect();
            let generated = generate_batch(&sentences, task.dict, model, task.langs.target, task.langs.source, &search)
                .map_err(|e| overflow(step, e))?;
            let mut report = LossReport {
                skipped: generated.skipped,
                ..LossReport::default()
            };
            let mut grads = None;
            if !generated.pairs.is_empty() {
                let mut g = Graph::new();
                let mut tape = PerturbationTape::recording();
                let losses = losses::batch_losses(
                    &mut g,
                    model,
                    &generated.pairs,
                    task.eos,
                    task.langs,
                    &settings,
                    mask,
                    &mut tape,
                    &mut rng,
                )
                .map_err(|e| overflow(step, e))?;
                report = losses.report(&g, generated.skipped);
                if let Err(LossError::NonFinite(what)) = composite_loss(&report.components, settings.lambda) {
                    return Err(TrainError::Diverged { step, what });
                }
                if !report.star.is_finite() {
                    return Err(TrainError::Diverged { step, what: "star" });
                }
                if !mask.is_empty() {
                    grads = Some(g.backward(losses.star).map_err(|e| overflow(step, e))?.param_grads(model.params()));
                }
            }
            if let Some(mut grads) = grads {
                if !all_finite(&grads) {
                    return Err(TrainError::Diverged { step, what: "gradient" });
                }
                clip_global_norm(&mut grads, T::lit(cfg.grad_clip));
                opt.step(model.params_mut(), &grads);
                if !all_finite(model.params().tensors()) {
                    return Err(TrainError::Diverged { step, what: "parameters" });
                }
            }
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", report.log_line(step)).map_err(|e| TrainError::Log(e.to_string()))?;
            }
            log::debug!("{}", report.log_line(step));
            reports.push(report);
        }
    }
    Ok(TrainOutcome { reports, curriculum })
}

/// One parallel example for supervised training; sentences without the end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: Vec<TokenId>,
    pub source_lang: TokenId,
    pub target: Vec<TokenId>,
    pub target_lang: TokenId,
}

/// Plain teacher-forced cross-entropy training on `examples`, in the given
/// order unless `shuffle`. Returns the mean loss of every step.
pub fn train_supervised<T: Scalar>(
    model: &mut Seq2Seq<T>,
    examples: &[ParallelExample],
    eos: TokenId,
    cfg: &TrainConfig,
    shuffle: bool,
) -> Result<Vec<T>, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), T::lit(cfg.lr), T::lit(cfg.weight_decay));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::new();
    for _ in 0..cfg.epochs {
        if shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let step = out.len();
            let (loss, mut grads) = (|| -> Result<_, TrainError> {
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let ex = &examples[i];
                    let mut src = ex.source.clone();
                    src.push(eos);
                    let mut tgt = ex.target.clone();
                    tgt.push(eos);
                    let h = model.encode(&mut g, &src, ex.source_lang)?;
                    let (_, logits) = model.decode(&mut g, &h, ex.target_lang, &tgt)?;
                    terms.push(g.cross_entropy(logits, &tgt)?);
                }
                let s = g.stack(&terms)?;
                let s = g.sum(s)?;
                let mean = g.scale(s, T::one() / T::from_usize_lossy(terms.len()))?;
                let grads = g.backward(mean)?.param_grads(model.params());
                Ok((g.value(mean).item(), grads))
            })()
            .map_err(|e| overflow(step, e))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, what: "loss" });
            }
            if !all_finite(&grads) {
                return Err(TrainError::Diverged { step, what: "gradient" });
            }
            clip_global_norm(&mut grads, T::lit(cfg.grad_clip));
            opt.step(model.params_mut(), &grads);
            if !all_finite(model.params().tensors()) {
                return Err(TrainError::Diverged { step, what: "parameters" });
            }
            out.push(loss);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    // vocab: 0 unk, 1 eos, 2 __a__, 3 __b__, 4..8 language a, 8..12 language b
    fn setup() -> (Seq2Seq<f64>, Vec<Vec<TokenId>>, BilingualDictionary<TokenId>) {
        let mut cfg = ModelConfig::new(12, vec![2, 3]);
        cfg.d_model = 8;
        cfg.ff_dim = 16;
        cfg.max_len = 8;
        let model = Seq2Seq::new(cfg, 5).unwrap();
        let corpus = vec![vec![4, 5], vec![6], vec![5, 7, 4], vec![7, 6]];
        let mut dict = BilingualDictionary::new("a", "b");
        for w in 4..8 {
            dict.insert(vec![w], vec![w + 4]);
        }
        (model, corpus, dict)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            beam: 2,
            max_len: 6,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn task<'d>(corpus: &'d [Vec<TokenId>], dict: &'d BilingualDictionary<TokenId>) -> TrainTask<'d> {
        TrainTask {
            corpus,
            dict,
            langs: Langs { target: 2, source: 3 },
            eos: 1,
            banned: vec![0, 2, 3],
        }
    }

    #[test]
    fn logs_every_step_and_is_deterministic() {
        let (m0, corpus, dict) = setup();
        let t = task(&corpus, &dict);
        let mut a = m0.clone();
        let mut buf = Vec::new();
        let out = train(&mut a, &t, &small_cfg(), AblationMask::ALL, Some(&mut buf)).unwrap();
        assert_eq!(out.steps(), 4);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));
        for r in &out.reports {
            assert!(r.identity_holds(0.7));
        }
        let mut b = m0.clone();
        let out2 = train(&mut b, &t, &small_cfg(), AblationMask::ALL, None).unwrap();
        assert_eq!(out.reports, out2.reports);
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert_ne!(a.params().tensors(), m0.params().tensors());
    }

    #[test]
    fn empty_mask_leaves_parameters() {
        let (m0, corpus, dict) = setup();
        let mut m = m0.clone();
        let out = train(&mut m, &task(&corpus, &dict), &small_cfg(), AblationMask::NONE, None).unwrap();
        assert_eq!(m.params().tensors(), m0.params().tensors());
        assert!(out.reports.iter().all(|r| r.star == 0.0));
    }

    #[test]
    fn divergence_names_the_step() {
        let (mut m, corpus, dict) = setup();
        let cfg = TrainConfig {
            lr: 1e300,
            grad_clip: 0.0,
            weight_decay: 0.0,
            ..small_cfg()
        };
        match train(&mut m, &task(&corpus, &dict), &cfg, AblationMask::AE_ONLY, None) {
            Err(TrainError::Diverged { step, .. }) => assert!(step <= 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn supervised_copy_task_lowers_loss() {
        let (mut m, corpus, _) = setup();
        let examples: Vec<ParallelExample> = corpus
            .iter()
            .map(|s| ParallelExample {
                source: s.clone(),
                source_lang: 2,
                target: s.clone(),
                target_lang: 2,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let losses = train_supervised(&mut m, &examples, 1, &cfg, true).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    }

    #[test]
    fn ae_only_training_lowers_autoencoder_loss() {
        let (mut m, corpus, dict) = setup();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            phi: 0.0,
            ..small_cfg()
        };
        let out = train(&mut m, &task(&corpus, &dict), &cfg, AblationMask::AE_ONLY, None).unwrap();
        let first = out.reports[0].star;
        let last = out.reports.last().unwrap().star;
        assert!(last < first, "{first} -> {last}");
    }
}
