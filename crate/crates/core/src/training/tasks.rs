use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Rule-checkable synthetic classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Binary tokens; label is the more frequent token (odd lengths only).
    #[default]
    Majority,
    /// Tokens in `0..8`; label is the first token.
    CopyFirst,
    /// Binary tokens; label is their XOR.
    Parity,
}

pub const COPY_FIRST_VOCAB: usize = 8;

impl Task {
    pub fn vocab_size(self) -> usize {
        match self {
            Task::Majority | Task::Parity => 2,
            Task::CopyFirst => COPY_FIRST_VOCAB,
        }
    }

    pub fn num_classes(self) -> usize {
        self.vocab_size()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Majority => "majority",
            Task::CopyFirst => "copy_first",
            Task::Parity => "parity",
        }
    }

    /// Label of a sequence under this task's rule.
    pub fn label(self, seq: &[usize]) -> usize {
        match self {
            Task::Majority => {
                let ones = seq.iter().filter(|&&t| t == 1).count();
                usize::from(2 * ones > seq.len())
            }
            Task::CopyFirst => seq[0],
            Task::Parity => seq.iter().fold(0, |acc, &t| acc ^ (t & 1)),
        }
    }

    pub fn check_length(self, t_len: usize) -> Result<()> {
        if t_len < 2 {
            return Err(Error::Config(format!("train.T must be at least 2, got {t_len}")));
        }
        if self == Task::Majority && t_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "majority needs an odd train.T to avoid ties, got {t_len}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `batch_size` sequences one after another from `rng`, so a larger
/// batch from the same seed extends a smaller one.
pub fn generate_task(task: Task, t_len: usize, batch_size: usize, rng: &mut SeededRng) -> Result<TaskBatch> {
    task.check_length(t_len)?;
    let vocab = task.vocab_size();
    let mut sequences = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let seq: Vec<usize> = (0..t_len).map(|_| rng.below(vocab)).collect();
        labels.push(task.label(&seq));
        sequences.push(seq);
    }
    Ok(TaskBatch { sequences, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_by_hand() {
        assert_eq!(Task::Majority.label(&[0, 0, 1]), 0);
        assert_eq!(Task::Majority.label(&[1, 0, 1]), 1);
        assert_eq!(Task::CopyFirst.label(&[5, 2, 7, 1]), 5);
        assert_eq!(Task::Parity.label(&[1, 1, 0, 1]), 1);
        assert_eq!(Task::Parity.label(&[1, 1, 0, 0]), 0);
    }

    #[test]
    fn length_checks() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            generate_task(Task::Majority, 4, 2, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(generate_task(Task::Parity, 1, 2, &mut rng).is_err());
        assert!(generate_task(Task::Parity, 4, 2, &mut rng).is_ok());
    }

    #[test]
    fn prefix_property() {
        let small = generate_task(Task::CopyFirst, 6, 5, &mut SeededRng::new(3)).unwrap();
        let large = generate_task(Task::CopyFirst, 6, 50, &mut SeededRng::new(3)).unwrap();
        assert_eq!(small.sequences[..], large.sequences[..5]);
    }
}
