//! Per-region histopathology supervision.

use thiserror::Error;

/// Sentinel for "grade not known for this region".
pub const UNKNOWN_GRADE: i8 = -1;
pub const MAX_GRADE: i8 = 5;

/// Region takes part in no loss.
pub const SIGNAL_NONE: u8 = 0;
/// Targeted lesion: strong, homogeneous supervision.
pub const SIGNAL_LESION: u8 = 1;
/// Sextant or whole-gland row: the grade is a maximum over heterogeneous tissue.
pub const SIGNAL_MAX_GRADE: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SupervisionError {
    #[error("region {region}: supervision signal {signal} not in {{0,1,2}}")]
    BadSignal { region: usize, signal: i32 },
    #[error("region {region}: grade {grade} outside -1..=5")]
    BadGrade { region: usize, grade: i32 },
    #[error("supervision matrix must be R×2, got {0} values")]
    BadLayout(usize),
    #[error("grade matrix row {row} is not one-hot or empty")]
    BadOneHot { row: usize },
    #[error("class count K={0} outside 2..=6")]
    BadClassCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSupervision {
    pub signal: u8,
    pub grade: i8,
}

impl RegionSupervision {
    pub fn lesion(grade: i8) -> Self {
        RegionSupervision {
            signal: SIGNAL_LESION,
            grade,
        }
    }

    pub fn max_grade(grade: i8) -> Self {
        RegionSupervision {
            signal: SIGNAL_MAX_GRADE,
            grade,
        }
    }

    pub fn grade_known(&self) -> bool {
        self.grade != UNKNOWN_GRADE
    }
}

/// `R×2` integer matrix of (signal, grade) rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SupervisionMatrix {
    rows: Vec<RegionSupervision>,
}

impl SupervisionMatrix {
    pub fn new(rows: Vec<RegionSupervision>) -> Result<Self, SupervisionError> {
        for (region, r) in rows.iter().enumerate() {
            if r.signal > SIGNAL_MAX_GRADE {
                return Err(SupervisionError::BadSignal {
                    region,
                    signal: r.signal as i32,
                });
            }
            if r.grade < UNKNOWN_GRADE || r.grade > MAX_GRADE {
                return Err(SupervisionError::BadGrade {
                    region,
                    grade: r.grade as i32,
                });
            }
        }
        Ok(SupervisionMatrix { rows })
    }

    pub fn from_i32(values: &[i32]) -> Result<Self, SupervisionError> {
        if values.len() % 2 != 0 {
            return Err(SupervisionError::BadLayout(values.len()));
        }
        let mut rows = Vec::with_capacity(values.len() / 2);
        for (region, pair) in values.chunks_exact(2).enumerate() {
            let (signal, grade) = (pair[0], pair[1]);
            if !(0..=2).contains(&signal) {
                return Err(SupervisionError::BadSignal { region, signal });
            }
            if !(-1..=5).contains(&grade) {
                return Err(SupervisionError::BadGrade { region, grade });
            }
            rows.push(RegionSupervision {
                signal: signal as u8,
                grade: grade as i8,
            });
        }
        Ok(SupervisionMatrix { rows })
    }

    pub fn to_i32(&self) -> Vec<i32> {
        self.rows
            .iter()
            .flat_map(|r| [r.signal as i32, r.grade as i32])
            .collect()
    }

    pub fn rows(&self) -> &[RegionSupervision] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, r: usize) -> RegionSupervision {
        self.rows[r]
    }
}

pub fn check_class_count(k: usize) -> Result<(), SupervisionError> {
    if (2..=6).contains(&k) {
        Ok(())
    } else {
        Err(SupervisionError::BadClassCount(k))
    }
}

/// Maps an ISUP grade group onto one of `k` classes.
///
/// With `k = 2` the split is clinically significant (grade ≥ 2) or not. For
/// larger `k` grades map to themselves, with everything at or above `k-1`
/// merged into the top class.
pub fn grade_class(grade: i8, k: usize) -> Option<usize> {
    if grade < 0 {
        return None;
    }
    if k == 2 {
        Some(usize::from(grade >= 2))
    } else {
        Some((grade as usize).min(k - 1))
    }
}

/// Lowest class index that denotes clinically significant cancer.
pub fn significant_class(k: usize) -> usize {
    grade_class(2, k).expect("grade 2 is known")
}

/// `R×K` one-hot grade targets; rows for unknown grades are all-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradeOneHot {
    k: usize,
    classes: Vec<Option<usize>>,
}

impl GradeOneHot {
    pub fn from_supervision(sup: &SupervisionMatrix, k: usize) -> Self {
        GradeOneHot {
            k,
            classes: sup.rows().iter().map(|r| grade_class(r.grade, k)).collect(),
        }
    }

    /// Parses a stored `R×K` matrix, checking that every row is one-hot or empty.
    pub fn from_matrix(values: &[f32], k: usize) -> Result<Self, SupervisionError> {
        check_class_count(k)?;
        if values.len() % k != 0 {
            return Err(SupervisionError::BadLayout(values.len()));
        }
        let mut classes = Vec::new();
        for (row, chunk) in values.chunks_exact(k).enumerate() {
            let ones: Vec<usize> = chunk
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| (v == 1.0).then_some(i))
                .collect();
            if chunk.iter().any(|&v| v != 0.0 && v != 1.0) || ones.len() > 1 {
                return Err(SupervisionError::BadOneHot { row });
            }
            classes.push(ones.first().copied());
        }
        Ok(GradeOneHot { k, classes })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, r: usize) -> Option<usize> {
        self.classes[r]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        if let Some(c) = self.classes[r] {
            v[c] = 1.0;
        }
        v
    }

    pub fn to_matrix(&self) -> Vec<f32> {
        (0..self.len())
            .flat_map(|r| self.row(r).into_iter().map(|v| v as f32))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_split_at_grade_two() {
        assert_eq!(grade_class(0, 2), Some(0));
        assert_eq!(grade_class(1, 2), Some(0));
        assert_eq!(grade_class(2, 2), Some(1));
        assert_eq!(grade_class(5, 2), Some(1));
        assert_eq!(grade_class(-1, 2), None);
        assert_eq!(significant_class(2), 1);
    }

    #[test]
    fn multiclass_mapping() {
        assert_eq!(grade_class(3, 6), Some(3));
        assert_eq!(grade_class(5, 4), Some(3));
        assert_eq!(significant_class(4), 2);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(
            SupervisionMatrix::from_i32(&[3, 0]),
            Err(SupervisionError::BadSignal { region: 0, signal: 3 })
        ));
        assert!(matches!(
            SupervisionMatrix::from_i32(&[1, 2, 1, 6]),
            Err(SupervisionError::BadGrade { region: 1, grade: 6 })
        ));
        assert!(SupervisionMatrix::from_i32(&[1]).is_err());
    }

    #[test]
    fn one_hot_rows_sum_to_zero_or_one() {
        let sup = SupervisionMatrix::from_i32(&[1, 3, 1, -1, 2, 0]).unwrap();
        let g = GradeOneHot::from_supervision(&sup, 2);
        assert_eq!(g.to_matrix(), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let back = GradeOneHot::from_matrix(&g.to_matrix(), 2).unwrap();
        assert_eq!(back, g);
        assert!(GradeOneHot::from_matrix(&[1.0, 1.0], 2).is_err());
    }
}
