use crate::error::{ApeError, Result};

/// Row-wise softmax of a `rows × cols` buffer.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Mean token cross-entropy over the rows whose `supervised` flag is set,
/// with the gradient of that mean with respect to the logits.
///
/// Unsupervised rows get a zero gradient. Errors when no row is supervised.
pub fn cross_entropy(
    logits: &[f64],
    cols: usize,
    targets: &[usize],
    supervised: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let rows = logits.len() / cols;
    assert_eq!(rows, targets.len(), "one target per row");
    assert_eq!(rows, supervised.len(), "one mask entry per row");
    let count = supervised.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(ApeError::AllMasked);
    }
    let probs = softmax_rows(logits, cols);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let inv = 1.0 / count as f64;
    for r in 0..rows {
        if !supervised[r] {
            continue;
        }
        let t = targets[r];
        assert!(t < cols, "target {t} outside {cols} classes");
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - row[t];
        let g = &mut grad[r * cols..(r + 1) * cols];
        for (gv, pv) in g.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
            *gv = pv * inv;
        }
        g[t] -= inv;
    }
    Ok((loss * inv, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 37;
        let (loss, _) = cross_entropy(&vec![0.25; 3 * v], v, &[0, 5, 36], &[true; 3]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = vec![0.0; 4];
        logits[2] = 60.0;
        let (loss, _) = cross_entropy(&logits, 4, &[2], &[true]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let logits = vec![1.0, 2.0, 3.0, 9.0, -4.0, 0.5];
        let (a, g) = cross_entropy(&logits, 3, &[0, 1], &[true, false]).unwrap();
        let (b, _) = cross_entropy(&logits[..3], 3, &[0], &[true]).unwrap();
        assert_eq!(a, b);
        assert!(g[3..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            cross_entropy(&logits, 3, &[0, 1], &[false, false]),
            Err(ApeError::AllMasked)
        ));
    }

    #[test]
    fn gradient_matches_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let (_, g) = cross_entropy(&logits, 3, &[2, 0], &[true, true]).unwrap();
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let fd = (cross_entropy(&up, 3, &[2, 0], &[true, true]).unwrap().0
                - cross_entropy(&down, 3, &[2, 0], &[true, true]).unwrap().0)
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
