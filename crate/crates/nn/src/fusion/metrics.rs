use geofuse_core::IGNORE_LABEL;

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions. Ignored pixels are never
/// counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over defined classes; 0 when none is defined.
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::InvalidConfig(format!("class id outside 0..{c}: pred {p}, gt {g}")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.get(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|g| self.get(g, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn metrics(&self) -> Metrics {
        let per_class_iou: Vec<Option<f64>> = (0..self.classes).map(|c| self.iou(c)).collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Metrics { per_class_iou, miou }
    }
}

pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}

/// Per-pixel argmax over `classes` logits; ties go to the lower class.
pub fn argmax_labels<T: PartialOrd + Copy>(logits: &[T], classes: usize) -> Vec<u8> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let m = miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 4).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.per_class_iou[3], None);
    }

    #[test]
    fn two_class_third() {
        let m = miou(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert!((m.miou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let m = miou(&[0, 1], &[0, IGNORE_LABEL], 2).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(1.0), None]);
        assert!(miou(&[0, 7], &[0, 1], 2).is_err());
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax_labels(&[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
