use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

/// K×K confusion counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let k = self.classes as u32;
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t >= k || p >= k {
                return Err(Error::Data(format!(
                    "pixel {i}: label {t} / prediction {p} out of range for {k} classes"
                )));
            }
            self.counts[(t * k + p) as usize] += 1;
        }
        Ok(())
    }

    /// IoU_k = TP / (TP + FP + FN), averaged over classes seen in truth or prediction.
    pub fn miou(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric(
                "mIoU of an empty confusion matrix".into(),
            ));
        }
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric(
                "pixel accuracy of an empty confusion matrix".into(),
            ));
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }
}

pub fn compute_miou(c: &Confusion) -> Result<MiouReport> {
    c.miou()
}

/// Per-pixel argmax over the channel axis of N×K×H×W logits, in N·H·W order.
/// Ties go to the lowest class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u32>> {
    let (n, k, h, w) = logits.dims4("argmax")?;
    let d = logits.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = d[base + p];
            for c in 1..k {
                let v = d[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_wrong_two_class() {
        let mut c = Confusion::new(2);
        c.add(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let r = c.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn absent_class_excluded() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        let r = c.miou().unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn empty_is_undefined() {
        assert!(matches!(
            Confusion::new(3).miou(),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn argmax_ties_lowest() {
        let t = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        assert_eq!(argmax_classes(&t).unwrap(), vec![0; 4]);
    }
}
