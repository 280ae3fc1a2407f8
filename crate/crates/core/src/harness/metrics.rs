use serde::{Deserialize, Serialize};

use crate::synthdata::Category;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub count: usize,
    /// Sum of per-instance accuracies.
    pub correct: f64,
}

impl CategoryMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Indexed by [`Category::index`].
    pub categories: [CategoryMetrics; 3],
    /// Mean main loss at the adapted weights.
    pub mean_loss: f64,
    /// Instances whose retrieval came back empty after masking.
    pub skipped: usize,
    /// Mean adaptation loss before each inner step, averaged over batches.
    pub adaptation_trace: Vec<f64>,
    /// `(meta-step, meta-loss)` during training, when known.
    pub meta_loss_curve: Vec<(u64, f64)>,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.categories.iter().map(|c| c.count).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.categories.iter().map(|c| c.correct).sum::<f64>() / n as f64
    }

    pub fn category_accuracy(&self, c: Category) -> f64 {
        self.categories[c.index()].accuracy()
    }

    pub fn skip_rate(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.skipped as f64 / n as f64
        }
    }

    pub fn record(&mut self, category: Category, accuracy: f64) {
        let c = &mut self.categories[category.index()];
        c.count += 1;
        c.correct += accuracy;
    }
}
