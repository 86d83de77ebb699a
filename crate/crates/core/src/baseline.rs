//! The syn_lexicon baseline: word-by-word dictionary substitution.

use std::hash::Hash;

use crate::decoding::PseudoParallelPair;
use crate::dictionary::BilingualDictionary;
use crate::model::TokenId;

/// Replaces every covered token by its first-listed translation and keeps the
/// rest verbatim.
pub fn substitute<W: Clone + Eq + Hash>(sentence: &[W], dict: &BilingualDictionary<W>) -> Vec<W> {
    let mut out = Vec::with_capacity(sentence.len());
    for w in sentence {
        match dict.first_translation(w) {
            Some(t) => out.extend(t.iter().cloned()),
            None => out.push(w.clone()),
        }
    }
    out
}

/// `(target, pseudo-source)` pairs for a target-side corpus and a target-to-source dictionary.
pub fn syn_lexicon_pairs(corpus: &[Vec<TokenId>], dict: &BilingualDictionary<TokenId>) -> Vec<PseudoParallelPair> {
    corpus
        .iter()
        .map(|s| PseudoParallelPair {
            target: s.clone(),
            source: substitute(s, dict),
        })
        .collect()
}

/// Two columns, pseudo-source then target.
pub fn to_tsv<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> String {
    let mut out = String::new();
    for (src, tgt) in pairs {
        let join = |v: &[S]| v.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        out.push_str(&join(src));
        out.push('\t');
        out.push_str(&join(tgt));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(entries: &[(usize, usize)]) -> BilingualDictionary<TokenId> {
        let mut d = BilingualDictionary::new("t", "s");
        for &(a, b) in entries {
            d.insert(vec![a], vec![b]);
        }
        d
    }

    #[test]
    fn examples() {
        let d = dict(&[(1, 11)]);
        assert_eq!(substitute(&[1, 2], &d), vec![11, 2]);
        assert_eq!(substitute(&[3, 2], &d), vec![3, 2]);
        let full = dict(&[(1, 11), (2, 12)]);
        assert_eq!(substitute(&[2, 1, 2], &full), vec![12, 11, 12]);
        let pairs = syn_lexicon_pairs(&[vec![1, 2]], &d);
        assert_eq!(pairs[0].target, vec![1, 2]);
        assert_eq!(pairs[0].source, vec![11, 2]);
    }

    #[test]
    fn first_listed_translation_wins() {
        let mut d = dict(&[(1, 11)]);
        d.insert(vec![1], vec![12]);
        assert_eq!(substitute(&[1], &d), vec![11]);
    }

    #[test]
    fn tsv() {
        let rows = vec![(vec!["s1", "t2"], vec!["t1", "t2"])];
        assert_eq!(to_tsv(&rows), "s1 t2\tt1 t2\n");
    }

    proptest! {
        #[test]
        fn single_token_dictionaries_keep_length(
            s in prop::collection::vec(0usize..10, 0..12),
            map in prop::collection::vec((0usize..10, 10usize..20), 0..10),
        ) {
            let d = dict(&map);
            prop_assert_eq!(substitute(&s, &d).len(), s.len());
            let empty = dict(&[]);
            let once = substitute(&s, &empty);
            prop_assert_eq!(&substitute(&once, &empty), &s);
        }
    }
}
