//! Wall-clock parse latency over a corpus.

use std::time::Instant;

use crate::grammar::Grammar;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// Milliseconds per parsed command, in corpus order.
    pub samples_ms: Vec<f64>,
    /// Empty entries skipped.
    pub errors: usize,
}

impl LatencyReport {
    /// Nearest-rank percentile; `None` without samples.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        if self.samples_ms.is_empty() {
            return None;
        }
        let mut v = self.samples_ms.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        Some(v[rank.min(v.len()) - 1])
    }

    pub fn p99(&self) -> Option<f64> {
        self.percentile(99.0)
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples_ms.is_empty() {
            None
        } else {
            Some(self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64)
        }
    }
}

pub fn measure_parse_latency<S: AsRef<str>>(grammar: &Grammar, corpus: &[S]) -> LatencyReport {
    let mut samples_ms = Vec::with_capacity(corpus.len());
    let mut errors = 0;
    for text in corpus {
        let text = text.as_ref();
        if text.trim().is_empty() {
            errors += 1;
            continue;
        }
        let t = Instant::now();
        let _ = std::hint::black_box(grammar.parse(std::hint::black_box(text)));
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyReport { samples_ms, errors }
}
