//! Small numeric helpers shared across modules.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Computed as `a.b / sqrt(|a|^2 |b|^2)`, so bit-identical inputs give
/// exactly 1. Callers must reject zero-norm vectors first.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (squared_norm(a) * squared_norm(b)).sqrt();
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(z / temperature)` with the usual max shift.
pub fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_scaled_into(logits, temperature, &mut out);
    out
}

pub fn softmax_scaled_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &z in logits {
        let e = ((z - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= total;
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_identical_vectors_is_exactly_one() {
        let v = [0.137, -2.5, 3.3e-3, 7.0];
        assert_eq!(cosine(&v, &v), 1.0);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_scaled(&[1000.0, 999.0], 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
