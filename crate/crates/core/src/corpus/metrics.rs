use std::collections::HashMap;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance over reference length. An empty reference scores 0 for an
/// empty hypothesis and 1 otherwise.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(hyp, reference) as f64 / reference.len() as f64
}

/// Total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return if edits == 0 { 0.0 } else { 1.0 };
    }
    edits as f64 / total as f64
}

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0–100 scale with clipped n-gram precision, add-one
/// smoothing for n ≥ 2, and the usual brevity penalty.
pub fn bleu4<T: std::hash::Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        1.0 - ref_len as f64 / hyp_len as f64
    } else {
        0.0
    };
    100.0 * (bp + log_p / 4.0).exp()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop_assert_eq, proptest};
    use proptest::collection::vec;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Minimum over every alignment path, enumerated recursively.
    fn exhaustive(h: &[u8], r: &[u8]) -> usize {
        match (h.split_first(), r.split_first()) {
            (None, _) => r.len(),
            (_, None) => h.len(),
            (Some((a, hs)), Some((b, rs))) => {
                let sub = exhaustive(hs, rs) + usize::from(a != b);
                let del = exhaustive(hs, r) + 1;
                let ins = exhaustive(h, rs) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&toks("a b c"), &toks("a b c")), 0.0);
        assert_eq!(wer(&toks(""), &toks("a b c")), 1.0);
        assert_eq!(wer(&toks("a b c d"), &toks("a b x d")), 0.25);
        assert_eq!(corpus_wer(&[toks("a"), toks("b c")], &[toks("a"), toks("b d")]), 1.0 / 3.0);
    }

    #[test]
    fn bleu_examples() {
        let r = vec![toks("a b x d")];
        // p1 3/4, p2 (1+1)/(3+1), p3 (0+1)/(2+1), p4 (0+1)/(1+1): product 1/16
        assert!((bleu4(&[toks("a b c d")], &r) - 50.0).abs() < 1e-9);
        let same = vec![toks("a b c d e"), toks("f g")];
        assert_eq!(bleu4(&same, &same), 100.0);
        assert_eq!(bleu4(&[toks("z")], &[toks("a")]), 0.0);
        // brevity: hyp "a b" vs ref "a b c d": p1 1, p2 2/2, p3 1/1, p4 1/1, bp e^(1-2)
        let v = bleu4(&[toks("a b")], &[toks("a b c d")]);
        assert!((v - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn bleu_drops_on_corruption() {
        let refs = vec![toks("a b c d e f"), toks("g h i j")];
        let base = bleu4(&refs, &refs);
        for s in 0..2 {
            for i in 0..refs[s].len() {
                let mut hyps = refs.clone();
                hyps[s][i] = "zz";
                assert!(bleu4(&hyps, &refs) < base);
            }
        }
    }

    proptest! {
        #[test]
        fn dp_matches_exhaustive(h in vec(0u8..3, 0..=6), r in vec(0u8..3, 0..=6)) {
            prop_assert_eq!(edit_distance(&h, &r), exhaustive(&h, &r));
        }
    }
}
