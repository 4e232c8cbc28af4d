//! Corpus-level BLEU-4 over whitespace tokens, case-sensitive.
//!
//! Clipped n-gram matches and hypothesis n-gram totals are summed over the
//! corpus for n = 1..4. Each precision is `max(matches, 1e-9) / total`; an
//! order for which the hypotheses contain no n-grams at all counts as 1.
//! The brevity penalty is `exp(min(0, 1 - r/c))` with `r` and `c` the
//! reference and hypothesis token totals, and the score is 0 when `c = 0`.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const MATCH_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence<S: AsRef<str>>(&mut self, hyp: &[S], reference: &[S]) {
        let hyp: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(&hyp, n);
            let r = ngram_counts(&reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [1.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                p[n] = (self.matches[n] as f64).max(MATCH_FLOOR) / self.totals[n] as f64;
            }
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    /// Score on the 0..=100 scale.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_mean = self.precisions().iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 of tokenized hypothesis lines against reference lines.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} hypothesis lines but {} reference lines",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add_sentence(h, r);
    }
    Ok(stats)
}

/// BLEU-4 of two texts compared line by line.
pub fn bleu_from_text(hypothesis: &str, reference: &str) -> Result<BleuStats> {
    let split = |t: &str| -> Vec<Vec<String>> { t.lines().map(crate::data::tokenize).collect() };
    corpus_bleu(&split(hypothesis), &split(reference))
}
