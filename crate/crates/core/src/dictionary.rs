//! Bilingual phrase dictionaries: loading, pivoting and coverage scoring.
//!
//! File format: UTF-8, one `source<TAB>target` pair per line, tokens within a
//! phrase separated by single spaces, `#` starts a comment line. Matching is
//! case-sensitive.

use std::fmt::Write as _;
use std::hash::Hash;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

pub type Phrase<W> = Vec<W>;

#[derive(Debug, Error)]
pub enum DictError {
    #[error("cannot read dictionary {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{malformed} of {total} dictionary lines are malformed")]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("cannot pivot {left_src}->{left_tgt} with {right_src}->{right_tgt}")]
    LangMismatch {
        left_src: String,
        left_tgt: String,
        right_src: String,
        right_tgt: String,
    },
    #[error("coverage of an empty sentence is undefined")]
    EmptySentence,
}

/// Counts gathered while parsing a dictionary file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub pairs: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub comments: usize,
}

/// Source phrase → ordered target phrases, in file order, without duplicate pairs.
#[derive(Debug, Clone)]
pub struct BilingualDictionary<W = String> {
    src_lang: String,
    tgt_lang: String,
    entries: IndexMap<Phrase<W>, Vec<Phrase<W>>>,
}

/// Equal when languages and the ordered pair lists agree.
impl<W: Clone + Eq + Hash> PartialEq for BilingualDictionary<W> {
    fn eq(&self, other: &Self) -> bool {
        self.src_lang == other.src_lang
            && self.tgt_lang == other.tgt_lang
            && self.pairs().eq(other.pairs())
    }
}

impl<W: Clone + Eq + Hash> BilingualDictionary<W> {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        Self {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            entries: IndexMap::new(),
        }
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }

    /// Adds a pair; returns false for empty phrases and already-present pairs.
    pub fn insert(&mut self, source: Phrase<W>, target: Phrase<W>) -> bool {
        if source.is_empty() || target.is_empty() {
            return false;
        }
        let targets = self.entries.entry(source).or_default();
        if targets.contains(&target) {
            return false;
        }
        targets.push(target);
        true
    }

    pub fn translations(&self, source: &[W]) -> Option<&[Phrase<W>]> {
        self.entries.get(source).map(Vec::as_slice)
    }

    /// First-listed translation of a single-token source phrase.
    pub fn first_translation(&self, token: &W) -> Option<&Phrase<W>> {
        self.entries
            .get(std::slice::from_ref(token))
            .and_then(|t| t.first())
    }

    /// True if `token` on its own is a source phrase.
    pub fn covers(&self, token: &W) -> bool {
        self.entries.contains_key(std::slice::from_ref(token))
    }

    /// Number of (source, target) pairs.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_sources(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Phrase<W>, &[Phrase<W>])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Phrase<W>, &Phrase<W>)> {
        self.entries
            .iter()
            .flat_map(|(s, ts)| ts.iter().map(move |t| (s, t)))
    }

    /// Keeps only pairs accepted by `keep`, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(&[W], &[W]) -> bool) {
        for (s, ts) in self.entries.iter_mut() {
            ts.retain(|t| keep(s, t));
        }
        self.entries.retain(|_, ts| !ts.is_empty());
    }

    /// Translates every token; pairs with an unmappable token are dropped.
    pub fn map_tokens<V: Clone + Eq + Hash>(
        &self,
        mut src: impl FnMut(&W) -> Option<V>,
        mut tgt: impl FnMut(&W) -> Option<V>,
    ) -> BilingualDictionary<V> {
        let mut out = BilingualDictionary::new(self.src_lang.clone(), self.tgt_lang.clone());
        for (s, t) in self.pairs() {
            let s: Option<Vec<V>> = s.iter().map(&mut src).collect();
            let t: Option<Vec<V>> = t.iter().map(&mut tgt).collect();
            if let (Some(s), Some(t)) = (s, t) {
                out.insert(s, t);
            }
        }
        out
    }

    /// Composes `self: a→pivot` with `other: pivot→b` into `a→b`.
    ///
    /// Target lists follow `self`'s order first, then `other`'s.
    pub fn pivot(&self, other: &Self) -> Result<Self, DictError> {
        if self.tgt_lang != other.src_lang {
            return Err(DictError::LangMismatch {
                left_src: self.src_lang.clone(),
                left_tgt: self.tgt_lang.clone(),
                right_src: other.src_lang.clone(),
                right_tgt: other.tgt_lang.clone(),
            });
        }
        let mut out = Self::new(self.src_lang.clone(), other.tgt_lang.clone());
        for (s, mids) in &self.entries {
            for m in mids {
                if let Some(ts) = other.entries.get(m) {
                    for t in ts {
                        out.insert(s.clone(), t.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Fraction of sentence tokens (with repetition) that are single-token source phrases.
    pub fn coverage(&self, sentence: &[W]) -> Result<f64, DictError> {
        if sentence.is_empty() {
            return Err(DictError::EmptySentence);
        }
        let covered = sentence.iter().filter(|t| self.covers(t)).count();
        Ok(covered as f64 / sentence.len() as f64)
    }
}

/// Free-function form of [`BilingualDictionary::pivot`].
pub fn pivot<W: Clone + Eq + Hash>(
    src_en: &BilingualDictionary<W>,
    en_tgt: &BilingualDictionary<W>,
) -> Result<BilingualDictionary<W>, DictError> {
    src_en.pivot(en_tgt)
}

/// Free-function form of [`BilingualDictionary::coverage`].
pub fn coverage<W: Clone + Eq + Hash>(sentence: &[W], dict: &BilingualDictionary<W>) -> Result<f64, DictError> {
    dict.coverage(sentence)
}

fn split_phrase(s: &str) -> Option<Vec<String>> {
    let toks: Vec<String> = s.split(' ').map(str::to_owned).collect();
    if toks.iter().any(String::is_empty) {
        None
    } else {
        Some(toks)
    }
}

impl BilingualDictionary<String> {
    /// Parses TSV text. Fails only when more than half the content lines are malformed.
    pub fn parse(text: &str, src_lang: &str, tgt_lang: &str) -> Result<(Self, LoadReport), DictError> {
        let mut dict = Self::new(src_lang, tgt_lang);
        let mut report = LoadReport::default();
        let mut content = 0;
        for line in text.lines() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with('#') {
                report.comments += 1;
                continue;
            }
            content += 1;
            let parsed = line
                .split_once('\t')
                .filter(|(_, t)| !t.contains('\t'))
                .and_then(|(s, t)| Some((split_phrase(s)?, split_phrase(t)?)));
            match parsed {
                Some((s, t)) => {
                    if dict.insert(s, t) {
                        report.pairs += 1;
                    } else {
                        report.duplicates += 1;
                    }
                }
                None => report.malformed += 1,
            }
        }
        if report.malformed * 2 > content {
            return Err(DictError::TooManyMalformed {
                malformed: report.malformed,
                total: content,
            });
        }
        Ok((dict, report))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, t) in self.pairs() {
            let _ = writeln!(out, "{}\t{}", s.join(" "), t.join(" "));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_tsv())
    }
}

pub fn load_dictionary(
    path: impl AsRef<Path>,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<(BilingualDictionary<String>, LoadReport), DictError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DictError::Io {
        path: path.to_owned(),
        source,
    })?;
    BilingualDictionary::parse(&text, src_lang, tgt_lang)
}

/// Stand-in for language identification: accepts a phrase when every
/// alphabetic character falls inside one of the configured Unicode ranges.
#[derive(Debug, Clone)]
pub struct ScriptFilter {
    ranges: Vec<RangeInclusive<char>>,
}

impl ScriptFilter {
    pub fn new(ranges: Vec<RangeInclusive<char>>) -> Self {
        Self { ranges }
    }

    pub fn latin() -> Self {
        Self::new(vec!['A'..='Z', 'a'..='z', '\u{00C0}'..='\u{024F}'])
    }

    pub fn accepts<S: AsRef<str>>(&self, phrase: &[S]) -> bool {
        phrase
            .iter()
            .flat_map(|w| w.as_ref().chars())
            .filter(|c| c.is_alphabetic())
            .all(|c| self.ranges.iter().any(|r| r.contains(&c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn w(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_owned).collect()
    }

    fn dict(src: &str, tgt: &str, pairs: &[(&str, &str)]) -> BilingualDictionary {
        let mut d = BilingualDictionary::new(src, tgt);
        for (s, t) in pairs {
            d.insert(w(s), w(t));
        }
        d
    }

    #[test]
    fn parse_counts() {
        let (d, r) = BilingualDictionary::parse("cat\tKatze\n", "en", "de").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(r.pairs, 1);

        let (d, r) = BilingualDictionary::parse("cat\tKatze\ncat\tKatze\ndog\tHund\n", "en", "de").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(r.duplicates, 1);

        let text = "# header\ncat\tKatze\nno tab here\nred car\trotes Auto\n";
        let (d, r) = BilingualDictionary::parse(text, "en", "de").unwrap();
        assert_eq!(r.malformed, 1);
        assert_eq!(r.comments, 1);
        assert_eq!(d.translations(&w("red car")).unwrap(), &[w("rotes Auto")]);
    }

    #[test]
    fn mostly_malformed_is_fatal() {
        let err = BilingualDictionary::parse("a\tb\nbad\nworse\n", "x", "y").unwrap_err();
        assert!(matches!(err, DictError::TooManyMalformed { malformed: 2, total: 3 }));
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(matches!(
            load_dictionary("/nonexistent/dict.tsv", "a", "b"),
            Err(DictError::Io { .. })
        ));
    }

    #[test]
    fn pivot_examples() {
        let d1 = dict("a", "en", &[("a", "x")]);
        let d2 = dict("en", "b", &[("x", "p")]);
        assert_eq!(d1.pivot(&d2).unwrap().to_tsv(), "a\tp\n");

        let d2 = dict("en", "b", &[("y", "p")]);
        assert!(d1.pivot(&d2).unwrap().is_empty());

        let d1 = dict("a", "en", &[("a", "x"), ("a", "y")]);
        let d2 = dict("en", "b", &[("x", "p"), ("y", "p"), ("y", "q")]);
        let p = d1.pivot(&d2).unwrap();
        assert_eq!(p.translations(&w("a")).unwrap(), &[w("p"), w("q")]);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn pivot_language_mismatch() {
        let d1 = dict("a", "en", &[("a", "x")]);
        let d2 = dict("fr", "b", &[("x", "p")]);
        assert!(matches!(d1.pivot(&d2), Err(DictError::LangMismatch { .. })));
    }

    #[test]
    fn coverage_examples() {
        let d = dict("en", "de", &[("the", "der"), ("cat", "Katze"), ("red car", "rotes Auto")]);
        let c = d.coverage(&w("the cat sat")).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(d.coverage(&w("dog sat")).unwrap(), 0.0);
        assert_eq!(d.coverage(&w("the cat the")).unwrap(), 1.0);
        // multi-token sources do not count
        assert_eq!(d.coverage(&w("red car")).unwrap(), 0.0);
        assert!(matches!(d.coverage::<>(&[]), Err(DictError::EmptySentence)));
        // case-sensitive
        assert_eq!(d.coverage(&w("The")).unwrap(), 0.0);
    }

    #[test]
    fn script_filter() {
        let f = ScriptFilter::latin();
        assert!(f.accepts(&["Katze", "über"]));
        assert!(!f.accepts(&["кошка"]));
        let mut d = dict("en", "ru", &[("cat", "кошка"), ("cat", "kot")]);
        d.retain(|_, t| f.accepts(t));
        assert_eq!(d.to_tsv(), "cat\tkot\n");
    }

    fn small_dict(pairs: Vec<(u8, u8)>, src: &str, tgt: &str) -> BilingualDictionary<u8> {
        let mut d = BilingualDictionary::new(src, tgt);
        for (s, t) in pairs {
            d.insert(vec![s], vec![t]);
        }
        d
    }

    proptest! {
        #[test]
        fn pivot_matches_double_loop(
            p1 in prop::collection::vec((0u8..6, 0u8..6), 0..12),
            p2 in prop::collection::vec((0u8..6, 0u8..6), 0..12),
        ) {
            let d1 = small_dict(p1, "a", "en");
            let d2 = small_dict(p2, "en", "b");
            let got: BTreeSet<(u8, u8)> = d1.pivot(&d2).unwrap().pairs().map(|(s, t)| (s[0], t[0])).collect();
            let mut want = BTreeSet::new();
            for (s, e) in d1.pairs() {
                for (e2, t) in d2.pairs() {
                    if e == e2 {
                        want.insert((s[0], t[0]));
                    }
                }
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn coverage_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0u8..8, 0u8..8), 0..10),
            sentence in prop::collection::vec(0u8..8, 1..10),
            seed in any::<u64>(),
        ) {
            let d = small_dict(pairs, "a", "b");
            let c = d.coverage(&sentence).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            let mut shuffled = sentence.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(c, d.coverage(&shuffled).unwrap());
        }

        #[test]
        fn tsv_round_trip(pairs in prop::collection::vec(("[a-c]{1,2}( [a-c]{1,2})?", "[x-z]{1,3}"), 0..10)) {
            let mut d = BilingualDictionary::new("s", "t");
            for (s, t) in &pairs {
                d.insert(w(s), w(t));
            }
            let (back, report) = BilingualDictionary::parse(&d.to_tsv(), "s", "t").unwrap();
            prop_assert_eq!(report.malformed, 0);
            prop_assert_eq!(back, d);
        }
    }
}
