//! Monolingual corpora, word-level vocabularies and curriculum ordering.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::dictionary::{BilingualDictionary, DictError};
use crate::model::TokenId;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";
pub const UNK_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus cap must be at least 1")]
    ZeroCap,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("curriculum threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("no sentence reaches dictionary coverage {phi}")]
    EmptyCurriculum { phi: f64 },
    #[error("vocabulary file line {line}: {reason}")]
    BadVocab { line: usize, reason: String },
    #[error(transparent)]
    Dict(#[from] DictError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Closed word-level vocabulary. Ids 0 and 1 are `<unk>` and `</s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(UNK);
        v.add(EOS);
        v
    }

    /// Specials, then one `__xx__` tag per language, then words in first-seen order.
    pub fn build<'a, S: AsRef<str> + 'a>(
        languages: &[&str],
        sentences: impl IntoIterator<Item = &'a [S]>,
    ) -> Self {
        let mut v = Self::new();
        for l in languages {
            v.add(&tag_token(l));
        }
        for s in sentences {
            for w in s {
                v.add(w.as_ref());
            }
        }
        v
    }

    /// Returns the id of `token`, adding it if new.
    pub fn add(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag(&self, lang: &str) -> Option<TokenId> {
        self.id(&tag_token(lang))
    }

    /// Ids of language tags and `<unk>`: tokens a decoder should never emit.
    pub fn non_output_ids(&self) -> Vec<TokenId> {
        let mut out = vec![UNK_ID];
        out.extend(
            self.tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| is_tag_token(t))
                .map(|(i, _)| i),
        );
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.encode_words(text.split_whitespace())
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: impl IntoIterator<Item = S>) -> Vec<TokenId> {
        words
            .into_iter()
            .map(|w| self.id(w.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces; ids outside the vocabulary render as `<unk>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// One token per line; line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| DataError::BadVocab {
                line: i + 1,
                reason: reason.to_owned(),
            };
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(bad("token is empty or contains whitespace"));
            }
            if v.index.contains_key(line) {
                return Err(bad("duplicate token"));
            }
            v.add(line);
        }
        if v.token(UNK_ID) != Some(UNK) || v.token(EOS_ID) != Some(EOS) {
            return Err(DataError::BadVocab {
                line: 1,
                reason: format!("first two tokens must be {UNK} and {EOS}"),
            });
        }
        Ok(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

pub fn tag_token(lang: &str) -> String {
    format!("__{lang}__")
}

fn is_tag_token(t: &str) -> bool {
    t.len() > 4 && t.starts_with("__") && t.ends_with("__")
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Cleaned sentences of one language, as whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonolingualCorpus {
    pub lang: String,
    pub sentences: Vec<Vec<String>>,
    pub provenance: Vec<PathBuf>,
}

impl MonolingualCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn to_ids(&self, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
        self.sentences.iter().map(|s| vocab.encode_words(s)).collect()
    }

    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.sentences.iter().map(|s| s.join(" "))
    }
}

/// Why lines were dropped by [`filter_corpus`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub empty: usize,
    pub punctuation: usize,
    pub duplicate: usize,
    pub over_cap: usize,
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input\t{}", self.input)?;
        writeln!(f, "kept\t{}", self.kept)?;
        writeln!(f, "empty\t{}", self.empty)?;
        writeln!(f, "punctuation\t{}", self.punctuation)?;
        writeln!(f, "duplicate\t{}", self.duplicate)?;
        write!(f, "over_cap\t{}", self.over_cap)
    }
}

fn punct_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\p{P}+$").unwrap())
}

/// True if at least half the whitespace tokens consist only of Unicode punctuation.
pub fn mostly_punctuation(tokens: &[&str]) -> bool {
    let p = tokens.iter().filter(|t| punct_re().is_match(t)).count();
    2 * p >= tokens.len()
}

/// Order-preserving cleaning: drops empty lines, punctuation-heavy lines and
/// repeats, then keeps at most `cap` sentences.
pub fn filter_corpus<S: AsRef<str>>(
    lines: impl IntoIterator<Item = S>,
    cap: usize,
    lang: &str,
) -> Result<(MonolingualCorpus, FilterReport)> {
    if cap == 0 {
        return Err(DataError::ZeroCap);
    }
    let mut report = FilterReport::default();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut sentences = Vec::new();
    for line in lines {
        report.input += 1;
        if sentences.len() == cap {
            report.over_cap += 1;
            continue;
        }
        let toks: Vec<&str> = line.as_ref().split_whitespace().collect();
        if toks.is_empty() {
            report.empty += 1;
        } else if mostly_punctuation(&toks) {
            report.punctuation += 1;
        } else {
            let owned: Vec<String> = toks.iter().map(|t| (*t).to_owned()).collect();
            if seen.insert(owned.clone()) {
                sentences.push(owned);
            } else {
                report.duplicate += 1;
            }
        }
    }
    report.kept = sentences.len();
    Ok((
        MonolingualCorpus {
            lang: lang.to_owned(),
            sentences,
            provenance: Vec::new(),
        },
        report,
    ))
}

pub fn read_corpus(path: impl AsRef<Path>, cap: usize, lang: &str) -> Result<(MonolingualCorpus, FilterReport)> {
    let path = path.as_ref();
    let text = read(path)?;
    let (mut corpus, report) = filter_corpus(text.lines(), cap, lang)?;
    corpus.provenance.push(path.to_owned());
    Ok((corpus, report))
}

pub const DEFAULT_PHI: f64 = 0.9;

/// Sentences at or above a coverage threshold, most covered first.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    /// Selected sentence indices in training order.
    pub order: Vec<usize>,
    /// Coverage of every input sentence, by original index.
    pub scores: Vec<f64>,
    pub threshold: f64,
}

impl CurriculumPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Consecutive batches of the ordered indices; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(DataError::ZeroBatch);
        }
        Ok(self.order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }
}

/// Orders by coverage descending with ties by index, excluding coverage < φ.
pub fn curriculum_from_scores(scores: Vec<f64>, phi: f64) -> Result<CurriculumPlan> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(DataError::BadThreshold(phi));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= phi).collect();
    if order.is_empty() {
        return Err(DataError::EmptyCurriculum { phi });
    }
    // stable, so equal scores keep index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(CurriculumPlan {
        order,
        scores,
        threshold: phi,
    })
}

pub fn curriculum_order<W: Clone + Eq + Hash>(
    sentences: &[Vec<W>],
    dict: &BilingualDictionary<W>,
    phi: f64,
) -> Result<CurriculumPlan> {
    let scores = sentences
        .iter()
        .map(|s| dict.coverage(s))
        .collect::<Result<Vec<_>, _>>()?;
    curriculum_from_scores(scores, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filter_examples() {
        let (c, r) = filter_corpus(["a b", "a b", "!!! ."], 10, "xx").unwrap();
        assert_eq!(c.sentences, vec![vec!["a", "b"]]);
        assert_eq!((r.duplicate, r.punctuation, r.kept), (1, 1, 1));

        let (c, r) = filter_corpus(["x ! ?"], 10, "xx").unwrap();
        assert!(c.is_empty());
        assert_eq!(r.punctuation, 1);

        // exactly half punctuation is removed
        let (c, _) = filter_corpus(["x !", "x y !"], 10, "xx").unwrap();
        assert_eq!(c.lines().collect::<Vec<_>>(), vec!["x y !"]);

        let lines: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let (c, r) = filter_corpus(&lines, 3, "xx").unwrap();
        assert_eq!(c.lines().collect::<Vec<_>>(), vec!["w0", "w1", "w2"]);
        assert_eq!(r.over_cap, 7);

        // non-ASCII punctuation counts, symbols do not
        let (c, _) = filter_corpus(["« »", "$ 5"], 10, "xx").unwrap();
        assert_eq!(c.lines().collect::<Vec<_>>(), vec!["$ 5"]);

        assert!(matches!(filter_corpus(["a"], 0, "xx"), Err(DataError::ZeroCap)));
    }

    #[test]
    fn vocab_round_trip() {
        let mut v = Vocabulary::new();
        assert_eq!(v.add("a"), 2);
        assert_eq!(v.add("b"), 3);
        assert_eq!(v.tokenize("a b"), vec![2, 3]);
        assert_eq!(v.tokenize("a zzz"), vec![2, UNK_ID]);
        assert_eq!(v.detokenize(&v.tokenize("b a b")), "b a b");
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::parse("<unk>\n</s>\nx\nx\n").is_err());

        let words = [vec!["x", "y"], vec!["y", "z"]];
        let v = Vocabulary::build(&["en", "de"], words.iter().map(Vec::as_slice));
        assert_eq!(v.tag("de"), Some(3));
        assert_eq!(v.id("z"), Some(6));
        assert_eq!(v.non_output_ids(), vec![0, 2, 3]);
    }

    #[test]
    fn curriculum_examples() {
        let p = curriculum_from_scores(vec![0.9, 0.5, 1.0], 0.8).unwrap();
        assert_eq!(p.order, vec![2, 0]);
        let p = curriculum_from_scores(vec![0.9, 0.5, 1.0], 0.0).unwrap();
        assert_eq!(p.order, vec![2, 0, 1]);
        let p = curriculum_from_scores(vec![0.9, 1.0, 0.5, 1.0], 1.0).unwrap();
        assert_eq!(p.order, vec![1, 3]);
        assert!(matches!(
            curriculum_from_scores(vec![0.2], 0.9),
            Err(DataError::EmptyCurriculum { phi }) if phi == 0.9
        ));
        assert_eq!(p.batches(1).unwrap(), vec![vec![1], vec![3]]);
        assert!(p.batches(0).is_err());
        assert_eq!(DEFAULT_PHI, 0.9);
    }

    #[test]
    fn curriculum_uses_dictionary_coverage() {
        let mut d = BilingualDictionary::new("t", "s");
        d.insert(vec![1], vec![10]);
        d.insert(vec![2], vec![20]);
        let sents = vec![vec![1, 3], vec![1, 2], vec![3, 3]];
        let p = curriculum_order(&sents, &d, 0.5).unwrap();
        assert_eq!(p.order, vec![1, 0]);
        assert_eq!(p.scores, vec![0.5, 1.0, 0.0]);
    }

    fn corpus_lines() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "!", ".", "?"]), 0..5)
                .prop_map(|t| t.join(" ")),
            0..30,
        )
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(lines in corpus_lines(), cap in 1usize..20) {
            let (once, _) = filter_corpus(&lines, cap, "xx").unwrap();
            let (twice, r) = filter_corpus(once.lines(), cap, "xx").unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(r.kept, r.input);
            prop_assert!(once.len() <= cap);
        }

        #[test]
        fn curriculum_properties(scores in prop::collection::vec(0u8..=10, 1..40), a in 0u8..=10, b in 0u8..=10) {
            let scores: Vec<f64> = scores.into_iter().map(|s| f64::from(s) / 10.0).collect();
            let (lo, hi) = (f64::from(a.min(b)) / 10.0, f64::from(a.max(b)) / 10.0);
            let want: HashSet<usize> = (0..scores.len()).filter(|&i| scores[i] >= hi).collect();
            match curriculum_from_scores(scores.clone(), hi) {
                Ok(p) => {
                    let sorted = p.order.windows(2).all(|w| {
                        let (x, y) = (scores[w[0]], scores[w[1]]);
                        x > y || (x == y && w[0] < w[1])
                    });
                    prop_assert!(sorted);
                    prop_assert_eq!(p.order.iter().copied().collect::<HashSet<_>>(), want);
                    let wider = curriculum_from_scores(scores.clone(), lo).unwrap();
                    let wider: HashSet<usize> = wider.order.into_iter().collect();
                    prop_assert!(p.order.iter().all(|i| wider.contains(i)));
                }
                Err(DataError::EmptyCurriculum { .. }) => prop_assert!(want.is_empty()),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }
}
