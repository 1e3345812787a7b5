/// `1 − edit_distance / max_len`, case-insensitive, over characters.
pub fn normalized_similarity(a: &str, b: &str) -> f64 {
    let a = a.to_lowercase();
    let b = b.to_lowercase();
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

/// Best normalized similarity against any gold answer, clipped to zero
/// below `threshold`. Returns 0 when `gold` is empty.
pub fn anls(prediction: &str, gold: &[&str], threshold: f64) -> f64 {
    gold.iter()
        .map(|g| {
            let s = normalized_similarity(prediction, g);
            if s < threshold {
                0.0
            } else {
                s
            }
        })
        .fold(0.0, f64::max)
}
