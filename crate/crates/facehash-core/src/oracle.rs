//! Brute-force reference implementations used to verify the retrieval engine
//! and the metric suite. Everything here works on unpacked +1/-1 codes with
//! naive loops and owes nothing to [`crate::hashindex`] or [`crate::evalkit`];
//! it exists so the fast paths can be checked against an independent route.
//! Not part of the production API.

/// Per-bit Hamming distance on unpacked codes.
pub fn naive_hamming(a: &[i8], b: &[i8]) -> u32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

/// Full ranking of the database for one query: stable sort by distance,
/// ties in ascending database order.
pub fn naive_rank(db: &[Vec<i8>], query: &[i8]) -> Vec<(usize, u32)> {
    let mut ranked: Vec<(usize, u32)> = db
        .iter()
        .enumerate()
        .map(|(i, code)| (i, naive_hamming(code, query)))
        .collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

pub fn naive_topm(db: &[Vec<i8>], query: &[i8], m: usize) -> Vec<(usize, u32)> {
    let mut ranked = naive_rank(db, query);
    ranked.truncate(m);
    ranked
}

pub fn naive_radius(db: &[Vec<i8>], query: &[i8], r: u32) -> Vec<usize> {
    db.iter()
        .enumerate()
        .filter(|(_, code)| naive_hamming(code, query) <= r)
        .map(|(i, _)| i)
        .collect()
}

/// Average precision over the top `cutoff` of a ranked relevance list,
/// normalized by `min(total_relevant, cutoff)`; 0 when nothing is relevant.
pub fn naive_average_precision(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total_relevant.min(cutoff) as f64
}

pub fn naive_map(
    db: &[Vec<i8>],
    db_labels: &[u32],
    queries: &[Vec<i8>],
    query_labels: &[u32],
    cutoff: usize,
) -> f64 {
    let mut total = 0.0;
    for (q, &ql) in queries.iter().zip(query_labels) {
        let total_relevant = db_labels.iter().filter(|&&l| l == ql).count();
        let ranked = naive_rank(db, q);
        let relevance: Vec<bool> = ranked.iter().map(|&(i, _)| db_labels[i] == ql).collect();
        total += naive_average_precision(&relevance, total_relevant, cutoff);
    }
    total / queries.len() as f64
}

/// Mean precision of returns within radius `r`; a query with no returns
/// contributes 0.
pub fn naive_precision_at_radius(
    db: &[Vec<i8>],
    db_labels: &[u32],
    queries: &[Vec<i8>],
    query_labels: &[u32],
    r: u32,
) -> f64 {
    let mut total = 0.0;
    for (q, &ql) in queries.iter().zip(query_labels) {
        let returned = naive_radius(db, q, r);
        if returned.is_empty() {
            continue;
        }
        let same = returned.iter().filter(|&&i| db_labels[i] == ql).count();
        total += same as f64 / returned.len() as f64;
    }
    total / queries.len() as f64
}

/// Micro-averaged PR points for every distance threshold d = 0..=K.
pub fn naive_pr_curve(
    db: &[Vec<i8>],
    db_labels: &[u32],
    queries: &[Vec<i8>],
    query_labels: &[u32],
    code_bits: usize,
) -> Vec<(f64, f64)> {
    let mut total_same = 0usize;
    for &ql in query_labels {
        total_same += db_labels.iter().filter(|&&l| l == ql).count();
    }
    let mut points = Vec::with_capacity(code_bits + 1);
    for d in 0..=code_bits as u32 {
        let mut returned = 0usize;
        let mut same_returned = 0usize;
        for (q, &ql) in queries.iter().zip(query_labels) {
            for (code, &dl) in db.iter().zip(db_labels) {
                if naive_hamming(code, q) <= d {
                    returned += 1;
                    if dl == ql {
                        same_returned += 1;
                    }
                }
            }
        }
        let precision = if returned == 0 {
            0.0
        } else {
            same_returned as f64 / returned as f64
        };
        let recall = if total_same == 0 {
            1.0
        } else {
            same_returned as f64 / total_same as f64
        };
        points.push((recall, precision));
    }
    points
}

pub fn naive_precision_at_topm(
    db: &[Vec<i8>],
    db_labels: &[u32],
    queries: &[Vec<i8>],
    query_labels: &[u32],
    m_list: &[usize],
) -> Vec<(usize, f64)> {
    m_list
        .iter()
        .map(|&m| {
            let mut total = 0.0;
            for (q, &ql) in queries.iter().zip(query_labels) {
                let top = naive_topm(db, q, m);
                let same = top.iter().filter(|&&(i, _)| db_labels[i] == ql).count();
                total += same as f64 / top.len() as f64;
            }
            (m, total / queries.len() as f64)
        })
        .collect()
}
