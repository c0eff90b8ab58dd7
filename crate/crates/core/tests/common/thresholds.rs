//! Brute-force threshold search used as an oracle.

/// Shannon entropy, written out independently of the library.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.max(1e-12).ln();
        }
    }
    h
}

/// First index of the largest entry.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Per-class threshold for `rho = tenths / 10`, indexing the ascending sort
/// at `floor(len * tenths / 10)` in exact integer arithmetic.
///
/// `pixels[i] = (current-model entropy, old-model argmax)`.
pub fn oracle_thresholds(
    pixels: &[(f64, usize)],
    num_old: usize,
    tenths: usize,
) -> Vec<Option<f64>> {
    (1..=num_old)
        .map(|k| {
            let mut values: Vec<f64> = pixels.iter().filter(|p| p.1 == k).map(|p| p.0).collect();
            if values.is_empty() {
                return None;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = (values.len() * tenths / 10).min(values.len() - 1);
            Some(values[idx])
        })
        .collect()
}
