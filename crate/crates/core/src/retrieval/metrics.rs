use super::RetrievalResult;

/// Binary-gain nDCG over the first `k` hits. Zero when `relevant` is empty.
pub fn ndcg_at_k(ranked: &RetrievalResult, relevant: &[&str], k: usize) -> f64 {
    let dcg: f64 = ranked
        .hits
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, hit)| relevant.contains(&hit.doc_id.as_str()))
        .map(|(rank, _)| 1.0 / (rank as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|rank| 1.0 / (rank as f64 + 2.0).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}
