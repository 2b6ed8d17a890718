use std::collections::BTreeMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::ingest::Prefix;

/// Term counts of one document (one AS in one bin).
pub type TermCounts = BTreeMap<Prefix, u32>;

/// Router addresses are grouped into /24s (IPv4) or /64s (IPv6).
pub fn term_for(addr: IpAddr) -> Prefix {
    match addr {
        IpAddr::V4(_) => Prefix::truncate(addr, 24),
        IpAddr::V6(_) => Prefix::truncate(addr, 64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermScore {
    pub prefix: Prefix,
    pub score: f64,
}

/// Ranks the terms of the event documents by `f log(1 + |D| / n_t)`.
///
/// `docs` is the whole collection `D`, and `event` indexes the documents
/// forming the event; their counts are summed into `f`. Scores are sorted
/// descending with ties broken by prefix order.
pub fn tfidf_characterize(docs: &[TermCounts], event: &[usize]) -> Vec<TermScore> {
    let mut freq: BTreeMap<Prefix, u32> = BTreeMap::new();
    for &i in event {
        if let Some(doc) = docs.get(i) {
            for (t, c) in doc {
                *freq.entry(*t).or_default() += c;
            }
        }
    }
    let total_docs = docs.len() as f64;
    let mut scores: Vec<TermScore> = freq
        .into_iter()
        .filter(|(_, f)| *f > 0)
        .map(|(prefix, f)| {
            let n_t = docs
                .iter()
                .filter(|d| d.get(&prefix).is_some_and(|c| *c > 0))
                .count()
                .max(1) as f64;
            TermScore {
                prefix,
                score: f64::from(f) * (1.0 + total_docs / n_t).ln(),
            }
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.prefix.cmp(&b.prefix)));
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn doc(terms: &[(&str, u32)]) -> TermCounts {
        terms.iter().map(|&(t, c)| (p(t), c)).collect()
    }

    #[test]
    fn ubiquitous_term_scores_log_two() {
        let docs: Vec<_> = (0..10).map(|_| doc(&[("10.0.0.0/24", 1)])).collect();
        let s = tfidf_characterize(&docs, &[4]);
        assert_eq!(s.len(), 1);
        assert!((s[0].score - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rare_term_in_event() {
        let mut docs: Vec<_> = (0..100).map(|_| TermCounts::new()).collect();
        docs[37] = doc(&[("192.0.2.0/24", 5)]);
        let s = tfidf_characterize(&docs, &[37]);
        assert!((s[0].score - 23.075_602_584_206_297).abs() < 1e-12);
    }

    #[test]
    fn absent_terms_and_empty_events() {
        let docs = vec![doc(&[("10.0.0.0/24", 3)]), TermCounts::new()];
        assert!(tfidf_characterize(&docs, &[1]).is_empty());
        assert!(tfidf_characterize(&docs, &[]).is_empty());
    }

    #[test]
    fn ranking_and_ties() {
        let docs = vec![
            doc(&[("10.0.2.0/24", 2), ("10.0.1.0/24", 2), ("10.0.9.0/24", 1)]),
            doc(&[("10.0.9.0/24", 1)]),
            TermCounts::new(),
        ];
        let s = tfidf_characterize(&docs, &[0]);
        let order: Vec<String> = s.iter().map(|t| t.prefix.to_string()).collect();
        assert_eq!(order, ["10.0.1.0/24", "10.0.2.0/24", "10.0.9.0/24"]);
        assert!(s.iter().all(|t| t.score >= 0.0));
    }

    #[test]
    fn more_documents_with_term_lower_score() {
        let mut docs: Vec<_> = (0..20).map(|_| TermCounts::new()).collect();
        docs[0] = doc(&[("10.0.0.0/24", 4)]);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            docs[k] = doc(&[("10.0.0.0/24", 1)]);
            let s = tfidf_characterize(&docs, &[0])[0].score;
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn prefix_grouping() {
        assert_eq!(term_for("193.0.14.129".parse().unwrap()), p("193.0.14.0/24"));
        assert_eq!(term_for("2001:7fd::1".parse().unwrap()), p("2001:7fd::/64"));
    }
}
