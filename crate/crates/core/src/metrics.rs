//! Recognition and translation metrics: WER with edit decomposition,
//! corpus BLEU and ROUGE-L.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use crate::error::{Error, Result};

/// Edit operations aligning a hypothesis to a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_length as f64
    }

    /// Sums counts, giving the corpus-level rate.
    pub fn merge(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_length += other.reference_length;
    }
}

/// Unit-cost edit distance; the traceback prefers substitution (or match),
/// then deletion, then insertion.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut out = WerBreakdown { reference_length: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(mismatch) == here {
                out.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    Ok(out)
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut map = HashMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *map.entry(g).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus-level BLEU@1..=max_n (clipped n-gram precision, geometric mean,
/// brevity penalty, no smoothing). Orders for which neither hypotheses nor
/// references contain any n-gram are left out of the mean.
pub fn bleu<T: Hash + Eq, H: AsRef<[T]>, R: AsRef<[T]>>(
    hypotheses: &[H],
    references: &[R],
    max_n: usize,
) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut ref_total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            ref_total[n - 1] += rf.len().saturating_sub(n - 1);
            matched[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut zero = false;
    for n in 0..max_n {
        if total[n] == 0 && ref_total[n] == 0 {
            // Vacuous order.
        } else if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
            orders += 1;
        }
        scores.push(if zero || bp == 0.0 || orders == 0 { 0.0 } else { bp * (log_sum / orders as f64).exp() });
    }
    Ok(scores)
}

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 with equal weight on precision and recall.
pub fn rouge_l<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let l = lcs_length(hypothesis, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / hypothesis.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// One whitespace-tokenised sentence per line.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(fs::read_to_string(path)?.lines().map(|l| l.split_whitespace().map(String::from).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        let r = toks("a b c");
        let same = wer(&r, &r).unwrap();
        assert_eq!((same.errors(), same.wer()), (0, 0.0));
        let empty: Vec<&str> = vec![];
        let del = wer(&empty, &r).unwrap();
        assert_eq!((del.deletions, del.wer()), (3, 1.0));
        let sub = wer(&toks("a x c"), &r).unwrap();
        assert_eq!((sub.substitutions, sub.insertions, sub.deletions), (1, 0, 0));
        assert!((sub.wer() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(wer(&r, &empty), Err(Error::EmptyReference)));
    }

    #[test]
    fn wer_tie_order() {
        // "a b" vs "b c": sub+sub or del+ins both cost 2; substitutions win.
        let w = wer(&toks("b c"), &toks("a b")).unwrap();
        assert_eq!((w.substitutions, w.insertions, w.deletions), (2, 0, 0));
        let w = wer(&toks("a b c d"), &toks("a b")).unwrap();
        assert_eq!((w.insertions, w.wer()), (2, 1.0));
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![toks("a b c d"), toks("x y")];
        assert_eq!(bleu(&refs, &refs, 4).unwrap(), vec![1.0; 4]);
        let s = bleu(&[toks("a b c d")], &[toks("a b c e")], 4).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-15);
        assert!((s[1] - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s[2] - (0.75f64 * 2.0 / 3.0 * 0.5).cbrt()).abs() < 1e-15);
        assert_eq!(s[3], 0.0);
        assert_eq!(bleu(&[toks("p q")], &[toks("a b")], 2).unwrap(), vec![0.0, 0.0]);
        let empty: [Vec<&str>; 0] = [];
        assert!(matches!(bleu(&empty, &empty, 4), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn bleu_brevity_penalty() {
        let s = bleu(&[toks("a b")], &[toks("a b c d")], 1).unwrap();
        assert!((s[0] - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b c")).unwrap(), 0.0);
        assert!((rouge_l(&toks("a c"), &toks("a b c")).unwrap() - 0.8).abs() < 1e-15);
        assert!(rouge_l(&toks("a"), &toks("")).is_err());
    }
}
