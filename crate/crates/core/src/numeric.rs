//! Small numerical helpers shared by predictors and metrics.

/// Softmax of `scores / temperature`, computed as `exp(x - max) / Σ exp(x - max)`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log softmax(scores / temperature)[index]`.
pub fn log_softmax_at(scores: &[f64], temperature: f64, index: usize) -> f64 {
    let max = scores.iter().map(|s| s / temperature).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s / temperature - max).exp()).sum();
    scores[index] / temperature - max - z.ln()
}

/// Descending order by score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of every entry in descending score order; tied entries share
/// the mean of the positions they occupy.
pub fn mean_ranks(scores: &[f64]) -> Vec<f64> {
    let order = descending_order(scores);
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Compensated running sum (Neumaier).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningSum {
    sum: f64,
    compensation: f64,
}

impl RunningSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax_is_exact() {
        assert!(softmax(&[3.0; 10], 1.0).iter().all(|&p| p == 0.1));
        assert!(softmax(&[0.0; 4], 2.0).iter().all(|&p| p == 0.25));
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let s = [1.0, -2.0, 0.5, 4.0];
        let p = softmax(&s, 1.7);
        for i in 0..4 {
            assert!((log_softmax_at(&s, 1.7, i) - p[i].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_ranks_split_ties() {
        assert_eq!(mean_ranks(&[5.0, 3.0, 5.0, 1.0]), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(mean_ranks(&[0.0; 4]), vec![2.5; 4]);
    }

    #[test]
    fn compensated_sum_of_tenths() {
        let mut s = RunningSum::default();
        for _ in 0..9 {
            s.add(0.1);
        }
        assert_eq!(s.value(), 0.9);
        assert_ne!((0..9).map(|_| 0.1).sum::<f64>(), 0.9);
    }
}
