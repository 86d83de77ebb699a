//! Lexically constrained beam search.
//!
//! Hypotheses are grouped into banks by the number of constraint tokens they
//! have satisfied, and every bank gets a share of the beam so unconstrained
//! continuations cannot crowd out hypotheses that are working through a
//! constraint. Phrase progress is tracked per phrase with a KMP-style
//! automaton, so overlapping phrases and phrases embedded in other output are
//! detected exactly.

use thiserror::Error;

use crate::dictionary::BilingualDictionary;
use crate::model::{ModelError, Seq2Seq, TokenId};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_rows, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("constraints need {required} tokens including end-of-sentence but max_len is {max_len} (short by {deficit})")]
    Unsatisfiable {
        required: usize,
        max_len: usize,
        deficit: usize,
    },
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("cannot generate from an empty sentence")]
    EmptySentence,
    #[error("scorer returned {got} scores for a vocabulary of {expected}")]
    ScoreWidth { expected: usize, got: usize },
    #[error("scorer returned a non-finite log-probability for token {token}")]
    NonFinite { token: TokenId },
    #[error("search finished without a complete hypothesis")]
    NoHypothesis,
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

/// Constraint phrases and how far the current output has got through each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    phrases: Vec<Vec<TokenId>>,
    met: Vec<bool>,
    // Length of the longest output suffix that is a proper prefix of the phrase.
    progress: Vec<usize>,
}

impl ConstraintSet {
    /// Empty phrases are dropped and duplicates collapsed, keeping first occurrence.
    pub fn new(phrases: Vec<Vec<TokenId>>) -> Self {
        let mut uniq: Vec<Vec<TokenId>> = Vec::with_capacity(phrases.len());
        for p in phrases {
            if !p.is_empty() && !uniq.contains(&p) {
                uniq.push(p);
            }
        }
        let n = uniq.len();
        Self {
            phrases: uniq,
            met: vec![false; n],
            progress: vec![0; n],
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn phrases(&self) -> &[Vec<TokenId>] {
        &self.phrases
    }

    pub fn met(&self) -> &[bool] {
        &self.met
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn met_count(&self) -> usize {
        self.met.iter().filter(|&&m| m).count()
    }

    pub fn all_met(&self) -> bool {
        self.met.iter().all(|&m| m)
    }

    pub fn total_tokens(&self) -> usize {
        self.phrases.iter().map(Vec::len).sum()
    }

    /// Tokens belonging to satisfied phrases; this is the bank index.
    pub fn met_tokens(&self) -> usize {
        self.phrases
            .iter()
            .zip(&self.met)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p.len())
            .sum()
    }

    /// The unmet phrase with the most progress, as (phrase index, tokens matched).
    pub fn in_progress(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for (i, (&m, &k)) in self.met.iter().zip(&self.progress).enumerate() {
            if !m && k > 0 && best.map_or(true, |(_, b)| k > b) {
                best = Some((i, k));
            }
        }
        best
    }

    /// A lower bound on the further tokens, end-of-sentence included, needed
    /// to satisfy every phrase; exact when all phrases are single tokens.
    ///
    /// Two unmet phrases can only end at the same position if one is a suffix
    /// of the other, so each unmet phrase that is no other's suffix needs a
    /// position of its own.
    pub fn min_tokens_to_finish(&self) -> usize {
        let unmet: Vec<(&Vec<TokenId>, usize)> = self
            .phrases
            .iter()
            .zip(self.met.iter().zip(&self.progress))
            .filter(|(_, (&m, _))| !m)
            .map(|(p, (_, &k))| (p, k))
            .collect();
        let longest = unmet.iter().map(|(p, k)| p.len() - k).max().unwrap_or(0);
        let ends = unmet
            .iter()
            .filter(|(p, _)| !unmet.iter().any(|(q, _)| q.len() > p.len() && q.ends_with(p)))
            .count();
        longest.max(ends) + 1
    }

    /// Tokens that would extend or start an unmet phrase.
    pub fn useful_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (p, (&m, &k)) in self.phrases.iter().zip(self.met.iter().zip(&self.progress)) {
            if m {
                continue;
            }
            for t in [p[k], p[0]] {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// State after emitting `token`.
    pub fn advance(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        for (i, p) in self.phrases.iter().enumerate() {
            if self.met[i] {
                continue;
            }
            let k = extend_match(p, self.progress[i], token);
            if k == p.len() {
                next.met[i] = true;
                next.progress[i] = 0;
            } else {
                next.progress[i] = k;
            }
        }
        next
    }
}

/// Longest suffix of `phrase[..k] ++ [token]` that is a prefix of `phrase`.
fn extend_match(phrase: &[TokenId], k: usize, token: TokenId) -> usize {
    let mut cand = k + 1;
    while cand > 0 {
        // suffix of length cand: phrase[k+1-cand..k] ++ [token]
        let head = &phrase[k + 1 - cand..k];
        if phrase[..cand - 1] == *head && phrase[cand - 1] == token {
            return cand;
        }
        cand -= 1;
    }
    0
}

/// True if `needle` occurs contiguously in `haystack`.
pub fn contains_phrase(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    pub tokens: Vec<TokenId>,
    pub score: T,
    pub constraints: ConstraintSet,
}

/// Next-token log-probabilities given the tokens emitted so far.
pub trait StepScorer<T: Scalar> {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<T>>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchParams {
    pub beam: usize,
    /// Maximum output length, end-of-sentence included.
    pub max_len: usize,
    pub eos: TokenId,
    /// Tokens that are never emitted (language tags, unknown).
    pub banned: Vec<TokenId>,
    /// When set, an output for a source of `n` tokens has at most `n + extra` tokens before the end token.
    pub extra_len: Option<usize>,
}

impl SearchParams {
    pub fn new(beam: usize, max_len: usize, eos: TokenId) -> Self {
        Self {
            beam,
            max_len,
            eos,
            banned: Vec::new(),
            extra_len: None,
        }
    }

    /// These parameters with `max_len` tightened for a source of `src_len` tokens (end token excluded).
    pub fn for_source(&self, src_len: usize) -> Self {
        let mut p = self.clone();
        if let Some(extra) = self.extra_len {
            p.max_len = p.max_len.min(src_len + extra + 1);
        }
        p
    }
}

struct Candidate<T> {
    score: T,
    parent: usize,
    token: TokenId,
    constraints: ConstraintSet,
}

/// Orders by score descending, then lineage for determinism.
fn rank<T: Scalar>(a: &Candidate<T>, b: &Candidate<T>) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Bank that slot `j` serves first: the most advanced bank, then downwards, cycling.
fn slot_bank(j: usize, n_banks: usize) -> usize {
    n_banks - 1 - j % n_banks
}

/// Returns the best complete hypothesis (without the end token) that contains every phrase.
///
/// The beam is a list of slots. Slot `j` is refilled each step with the best
/// unused child of the hypotheses in slots `0..=j`, preferring its own bank.
/// Slot `j`'s choice never depends on later slots, so the hypotheses kept
/// with beam `b` are always a superset of those kept with beam `b - 1`, and a
/// larger beam can never return a lower score.
pub fn constrained_beam_search<T: Scalar, S: StepScorer<T> + ?Sized>(
    scorer: &S,
    constraints: &ConstraintSet,
    params: &SearchParams,
) -> Result<Hypothesis<T>> {
    if params.beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let required = constraints.total_tokens() + 1;
    if params.max_len < required {
        return Err(DecodeError::Unsatisfiable {
            required,
            max_len: params.max_len,
            deficit: required - params.max_len,
        });
    }
    let vocab = scorer.vocab_size();
    let n_banks = if constraints.is_empty() {
        1
    } else {
        constraints.total_tokens() + 1
    };
    let width = params.beam.max(n_banks);
    let allowed: Vec<bool> = (0..vocab)
        .map(|t| t != params.eos && !params.banned.contains(&t))
        .collect();

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: T::zero(),
        constraints: constraints.clone(),
    }];
    let mut best: Option<Hypothesis<T>> = None;

    for step in 0..params.max_len {
        let room_after = params.max_len - step - 1;
        let mut cands: Vec<Candidate<T>> = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != vocab {
                return Err(DecodeError::ScoreWidth {
                    expected: vocab,
                    got: lp.len(),
                });
            }
            if let Some(token) = lp.iter().position(|x| !x.is_finite()) {
                return Err(DecodeError::NonFinite { token });
            }
            if h.constraints.all_met() {
                let score = h.score + lp[params.eos];
                if best.as_ref().map_or(true, |b| score > b.score) {
                    best = Some(Hypothesis {
                        tokens: h.tokens.clone(),
                        score,
                        constraints: h.constraints.clone(),
                    });
                }
            }
            if room_after == 0 {
                continue;
            }
            for t in (0..vocab).filter(|&t| allowed[t]) {
                let cs = h.constraints.advance(t);
                if cs.min_tokens_to_finish() > room_after {
                    continue;
                }
                cands.push(Candidate {
                    score: h.score + lp[t],
                    parent: pi,
                    token: t,
                    constraints: cs,
                });
            }
        }
        if cands.is_empty() {
            break;
        }
        let chosen = fill_slots(cands, live.len(), width, n_banks);
        live = chosen
            .into_iter()
            .map(|c| {
                let mut tokens = live[c.parent].tokens.clone();
                tokens.push(c.token);
                Hypothesis {
                    tokens,
                    score: c.score,
                    constraints: c.constraints,
                }
            })
            .collect();
        // log-probabilities are ≤ 0, so no live hypothesis can overtake a finished one it trails
        if let Some(b) = &best {
            if live.iter().all(|h| h.score <= b.score) {
                break;
            }
        }
    }
    best.ok_or(DecodeError::NoHypothesis)
}

/// Picks up to `width` candidates in slot order.
fn fill_slots<T: Scalar>(mut cands: Vec<Candidate<T>>, n_parents: usize, width: usize, n_banks: usize) -> Vec<Candidate<T>> {
    use std::collections::BTreeSet;

    cands.sort_by(rank);
    let mut by_parent: Vec<Vec<usize>> = vec![Vec::new(); n_parents];
    for (i, c) in cands.iter().enumerate() {
        by_parent[c.parent].push(i);
    }
    // eligible, unchosen candidate indices (index order is rank order)
    let mut any = BTreeSet::new();
    let mut banks: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_banks];
    let mut picks = Vec::with_capacity(width.min(cands.len()));
    for j in 0..width {
        if let Some(new) = by_parent.get(j) {
            for &i in new {
                any.insert(i);
                banks[cands[i].constraints.met_tokens()].insert(i);
            }
        }
        let target = slot_bank(j, n_banks);
        let Some(i) = banks[target].first().copied().or_else(|| any.first().copied()) else {
            if j + 1 >= n_parents {
                break;
            }
            continue;
        };
        any.remove(&i);
        banks[cands[i].constraints.met_tokens()].remove(&i);
        picks.push(i);
    }
    let mut slots: Vec<Option<Candidate<T>>> = cands.into_iter().map(Some).collect();
    picks.into_iter().map(|i| slots[i].take().unwrap()).collect()
}

/// Plain beam search; identical to constrained search with no constraints.
pub fn beam_search<T: Scalar, S: StepScorer<T> + ?Sized>(scorer: &S, params: &SearchParams) -> Result<Hypothesis<T>> {
    constrained_beam_search(scorer, &ConstraintSet::empty(), params)
}

/// Adapts a model conditioned on a fixed encoder memory.
pub struct ModelScorer<'m, T: Scalar> {
    model: &'m Seq2Seq<T>,
    memory: Tensor<T>,
    lang: TokenId,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    /// Encodes `source` (which should end with the end token) in `src_lang`; decodes into `tgt_lang`.
    pub fn new(model: &'m Seq2Seq<T>, source: &[TokenId], src_lang: TokenId, tgt_lang: TokenId) -> Result<Self> {
        let memory = model.encode_value(source, src_lang)?;
        Ok(Self {
            model,
            memory,
            lang: tgt_lang,
        })
    }
}

impl<T: Scalar> StepScorer<T> for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<T>> {
        let logits = self.model.step_logits(&self.memory, self.lang, prefix)?;
        let n = logits.len();
        Ok(log_softmax_rows(&logits, n))
    }
}

/// Model-level entry point: translate `source` from `src_lang` into `tgt_lang` under `constraints`.
pub fn translate_constrained<T: Scalar>(
    model: &Seq2Seq<T>,
    source: &[TokenId],
    src_lang: TokenId,
    tgt_lang: TokenId,
    constraints: &ConstraintSet,
    params: &SearchParams,
) -> Result<Vec<TokenId>> {
    let scorer = ModelScorer::new(model, source, src_lang, tgt_lang)?;
    Ok(constrained_beam_search(&scorer, constraints, params)?.tokens)
}

/// One constraint per distinct covered token, using its first-listed translation.
pub fn build_constraints(sentence: &[TokenId], dict: &BilingualDictionary<TokenId>) -> ConstraintSet {
    let mut phrases = Vec::new();
    let mut seen = Vec::new();
    for &t in sentence {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        if let Some(tr) = dict.first_translation(&t) {
            phrases.push(tr.clone());
        }
    }
    ConstraintSet::new(phrases)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoParallelPair {
    /// The real monolingual sentence, without the end token.
    pub target: Vec<TokenId>,
    /// The generated pseudo-source, without the end token.
    pub source: Vec<TokenId>,
}

/// Generates a pseudo-source for `x_t` (language `tgt_lang`) in `src_lang`
/// against the current parameters. `dict` maps target-side to source-side tokens.
pub fn generate_pseudo_source<T: Scalar>(
    x_t: &[TokenId],
    dict: &BilingualDictionary<TokenId>,
    model: &Seq2Seq<T>,
    tgt_lang: TokenId,
    src_lang: TokenId,
    params: &SearchParams,
) -> Result<PseudoParallelPair> {
    if x_t.is_empty() {
        return Err(DecodeError::EmptySentence);
    }
    let constraints = build_constraints(x_t, dict);
    let mut input = x_t.to_vec();
    input.push(params.eos);
    let params = params.for_source(x_t.len());
    let source = translate_constrained(model, &input, tgt_lang, src_lang, &constraints, &params)?;
    Ok(PseudoParallelPair {
        target: x_t.to_vec(),
        source,
    })
}

/// Outcome of generating pseudo-sources for a batch.
#[derive(Debug, Clone, Default)]
pub struct GenerationBatch {
    pub pairs: Vec<PseudoParallelPair>,
    pub skipped: usize,
}

/// Generates for every sentence, skipping and counting unsatisfiable ones.
pub fn generate_batch<T: Scalar>(
    sentences: &[Vec<TokenId>],
    dict: &BilingualDictionary<TokenId>,
    model: &Seq2Seq<T>,
    tgt_lang: TokenId,
    src_lang: TokenId,
    params: &SearchParams,
) -> Result<GenerationBatch> {
    let mut out = GenerationBatch::default();
    for s in sentences {
        match generate_pseudo_source(s, dict, model, tgt_lang, src_lang, params) {
            Ok(p) => out.pairs.push(p),
            Err(e @ (DecodeError::Unsatisfiable { .. } | DecodeError::NoHypothesis | DecodeError::EmptySentence)) => {
                log::debug!("skipping sentence: {e}");
                out.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Log-probabilities depend on (prefix length, last token) through a random table.
    pub struct TableScorer {
        pub vocab: usize,
        table: Vec<Vec<f64>>,
    }

    impl TableScorer {
        pub fn uniform(vocab: usize) -> Self {
            Self {
                vocab,
                table: vec![vec![-(vocab as f64).ln(); vocab]; 64 * (vocab + 1)],
            }
        }

        pub fn random(vocab: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = (0..8 * (vocab + 1))
                .map(|_| {
                    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    log_softmax_rows(&logits, vocab)
                })
                .collect();
            Self { vocab, table }
        }
    }

    impl StepScorer<f64> for TableScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            let last = prefix.last().map_or(self.vocab, |&t| t);
            let row = (prefix.len() * (self.vocab + 1) + last) % self.table.len();
            Ok(self.table[row].clone())
        }
    }

    /// Best score over every complete sequence of length ≤ max_len that contains all phrases.
    pub fn exhaustive(scorer: &TableScorer, phrases: &[Vec<TokenId>], params: &SearchParams) -> Option<f64> {
        fn rec(
            s: &TableScorer,
            phrases: &[Vec<TokenId>],
            p: &SearchParams,
            prefix: &mut Vec<TokenId>,
            score: f64,
            best: &mut Option<f64>,
        ) {
            let lp = s.log_probs(prefix).unwrap();
            if phrases.iter().all(|ph| contains_phrase(prefix, ph)) {
                let total = score + lp[p.eos];
                if best.map_or(true, |b| total > b) {
                    *best = Some(total);
                }
            }
            if prefix.len() + 1 >= p.max_len {
                return;
            }
            for t in 0..s.vocab {
                if t == p.eos || p.banned.contains(&t) {
                    continue;
                }
                prefix.push(t);
                rec(s, phrases, p, prefix, score + lp[t], best);
                prefix.pop();
            }
        }
        let mut best = None;
        rec(scorer, phrases, params, &mut Vec::new(), 0.0, &mut best);
        best
    }
}
