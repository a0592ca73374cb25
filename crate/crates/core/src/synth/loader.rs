//! Step-addressable batching over an in-memory split.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::exam::Exam;
use crate::rng::stream;

/// Batches are lists of exams: region counts differ per exam, so there is no
/// dense collation.
#[derive(Debug, Clone)]
pub struct DataLoader {
    exams: Arc<Vec<Exam>>,
    batch_size: usize,
    shuffle: bool,
    augment: bool,
    seed: u64,
}

impl DataLoader {
    /// Training loader: reshuffles every epoch, optional x-flip augmentation.
    pub fn new(exams: Arc<Vec<Exam>>, batch_size: usize, augment: bool, seed: u64) -> Self {
        assert!(!exams.is_empty(), "loader needs at least one exam");
        assert!(batch_size > 0, "batch size must be positive");
        DataLoader {
            exams,
            batch_size,
            shuffle: true,
            augment,
            seed,
        }
    }

    /// Inference loader: file order, no augmentation.
    pub fn sequential(exams: Arc<Vec<Exam>>, batch_size: usize) -> Self {
        DataLoader {
            shuffle: false,
            augment: false,
            ..Self::new(exams, batch_size, false, 0)
        }
    }

    pub fn len_exams(&self) -> usize {
        self.exams.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.exams.len().div_ceil(self.batch_size)
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.exams.len()).collect();
        if self.shuffle {
            idx.shuffle(&mut stream(self.seed, &[epoch]));
        }
        idx
    }

    fn materialize(&self, epoch: u64, positions: std::ops::Range<usize>, order: &[usize]) -> Vec<Exam> {
        positions
            .map(|pos| {
                let exam = &self.exams[order[pos]];
                if self.augment && stream(self.seed, &[epoch, pos as u64, 1]).gen_bool(0.5) {
                    exam.flip_x()
                } else {
                    exam.clone()
                }
            })
            .collect()
    }

    /// The batch used at global step `step`; the same step always yields the
    /// same batch, so resumed training replays the original sequence.
    pub fn batch_for_step(&self, step: u64) -> Vec<Exam> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, b) = (step / per, (step % per) as usize);
        let order = self.order(epoch);
        let start = b * self.batch_size;
        let end = (start + self.batch_size).min(self.exams.len());
        self.materialize(epoch, start..end, &order)
    }

    /// All batches of one epoch.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Vec<Exam>> + '_ {
        let per = self.batches_per_epoch() as u64;
        (0..per).map(move |b| self.batch_for_step(epoch * per + b))
    }
}
