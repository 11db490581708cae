use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ProbeSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub support: usize,
    pub correct: usize,
    /// Most frequent wrong prediction for this class, if any.
    pub most_confused_with: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub spec: ProbeSpec,
    pub seed: u64,
    pub train_items: usize,
    pub test_items: usize,
    pub train_accuracy: f64,
    pub dev_accuracy: Option<f64>,
    pub test_accuracy: f64,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub chance: f64,
    pub per_class: Vec<ClassSummary>,
}

impl ProbeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: a summary row, then per-class accuracy.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let dev = self.dev_accuracy.map_or("-".to_string(), |d| format!("{:.4}", d));
        let _ = writeln!(s, "{:<18} {:<15} {:>8} {:>8} {:>8} {:>8}", "task", "classifier", "train", "dev", "test", "chance");
        let _ = writeln!(
            s,
            "{:<18} {:<15} {:>8.4} {:>8} {:>8.4} {:>8.4}",
            self.spec.task.name(),
            self.spec.classifier.name(),
            self.train_accuracy,
            dev,
            self.test_accuracy,
            self.chance
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>8} {:>9}", "class", "support", "correct", "acc", "confused");
        for c in self.per_class.iter().filter(|c| c.support > 0) {
            let confused = c.most_confused_with.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{:>6} {:>8} {:>8} {:>8.4} {:>9}",
                c.class,
                c.support,
                c.correct,
                c.correct as f64 / c.support as f64,
                confused
            );
        }
        s
    }
}
