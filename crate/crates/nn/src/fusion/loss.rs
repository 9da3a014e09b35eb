use geofuse_core::IGNORE_LABEL;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// Mean over labelled pixels, 0 when every pixel is ignored.
    pub loss: f64,
    /// `d loss / d logits`, zero on ignored pixels.
    pub grad: Vec<T>,
    pub labelled: usize,
    /// Set when every pixel carried the ignore label.
    pub all_ignored: bool,
}

/// Softmax cross entropy over `pixels x classes` logits. Accumulation is in
/// f64 regardless of `T`.
pub fn cross_entropy<T: Real>(logits: &[T], labels: &[u8], classes: usize) -> Result<CrossEntropy<T>> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} labels and {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
        return Err(Error::InvalidConfig(format!("label {l} outside {classes} classes")));
    }
    let labelled = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = vec![T::zero(); logits.len()];
    if labelled == 0 {
        return Ok(CrossEntropy {
            loss: 0.0,
            grad,
            labelled,
            all_ignored: true,
        });
    }
    let scale = 1.0 / labelled as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0f64; classes];
    for ((row, g), &label) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        if label == IGNORE_LABEL {
            continue;
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            sum += *p;
        }
        total += sum.ln() + max - row[label as usize].as_f64();
        for (c, (gv, p)) in g.iter_mut().zip(&probs).enumerate() {
            let target = if c == label as usize { 1.0 } else { 0.0 };
            *gv = T::of((p / sum - target) * scale);
        }
    }
    Ok(CrossEntropy {
        loss: total * scale,
        grad,
        labelled,
        all_ignored: false,
    })
}
