//! Naive reimplementations of the ranking protocol and metrics.

use std::collections::BTreeMap;

/// Two-pass cluster rank: rank every NP, keep each cluster's best-ranked
/// member, then rank those representatives by NP position. Excluded NPs
/// outside the gold cluster are dropped first.
pub fn cluster_rank(scores: &[f64], labels: &[u32], excluded: &[bool], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| labels[i] == labels[gold] || !excluded[i])
        .collect();
    // Selection sort keeps this independent of the library's comparator.
    for i in 0..order.len() {
        let mut best = i;
        for j in i + 1..order.len() {
            let (a, b) = (order[j], order[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let mut representative: BTreeMap<u32, usize> = BTreeMap::new();
    for (pos, &np) in order.iter().enumerate() {
        representative.entry(labels[np]).or_insert(pos);
    }
    let mut reps: Vec<(usize, u32)> = representative.into_iter().map(|(c, p)| (p, c)).collect();
    reps.sort();
    1 + reps.iter().position(|&(_, c)| c == labels[gold]).unwrap()
}

/// MRR, MR, Hits@1, Hits@3, Hits@10 over `(head, tail)` rank pairs.
pub fn metrics(ranks: &[(usize, usize)]) -> [f64; 5] {
    let mut sum_rr = 0.0;
    let mut sum_r = 0.0;
    let mut hits = [0usize; 3];
    let mut n = 0.0;
    for &(h, t) in ranks {
        for r in [h, t] {
            n += 1.0;
            sum_rr += 1.0 / r as f64;
            sum_r += r as f64;
            for (slot, k) in [1, 3, 10].iter().enumerate() {
                if r <= *k {
                    hits[slot] += 1;
                }
            }
        }
    }
    [
        100.0 * sum_rr / n,
        sum_r / n,
        100.0 * hits[0] as f64 / n,
        100.0 * hits[1] as f64 / n,
        100.0 * hits[2] as f64 / n,
    ]
}
