//! Fold construction: stratified 8-fold electrode cross-validation and
//! leave-one-subject-out.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CV_FOLDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    Cv8,
    Loo,
}

impl ValidationMode {
    pub fn label(&self) -> &'static str {
        match self {
            ValidationMode::Cv8 => "cv8",
            ValidationMode::Loo => "loo",
        }
    }
}

/// A labeled electrode as seen by the fold planner.
#[derive(Debug, Clone, Copy)]
pub struct FoldElectrode {
    pub subject_idx: usize,
    pub label: bool,
}

/// One train/test split over electrode indices.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub mode: ValidationMode,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Build the fold plan over labeled electrodes (indices into `electrodes`).
///
/// `cv8` stratifies by label with a seeded shuffle so the positive rate is
/// preserved per fold; `loo` holds out each subject in turn.
pub fn make_folds(
    electrodes: &[FoldElectrode],
    mode: ValidationMode,
    seed: u64,
) -> Result<FoldPlan> {
    let n = electrodes.len();
    let folds = match mode {
        ValidationMode::Cv8 => {
            if n < CV_FOLDS {
                return Err(Error::Config(format!(
                    "8-fold CV needs at least {CV_FOLDS} labeled electrodes, got {n}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pos: Vec<usize> = (0..n).filter(|&i| electrodes[i].label).collect();
            let mut neg: Vec<usize> = (0..n).filter(|&i| !electrodes[i].label).collect();
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let mut assignment = vec![0usize; n];
            for (k, &i) in pos.iter().chain(neg.iter()).enumerate() {
                assignment[i] = k % CV_FOLDS;
            }
            (0..CV_FOLDS)
                .map(|f| {
                    let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
                    let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
                    Fold { train, test }
                })
                .collect()
        }
        ValidationMode::Loo => {
            let mut subjects: Vec<usize> = electrodes.iter().map(|e| e.subject_idx).collect();
            subjects.sort_unstable();
            subjects.dedup();
            if subjects.len() < 2 {
                return Err(Error::Config(format!(
                    "leave-one-subject-out needs at least 2 subjects, got {}",
                    subjects.len()
                )));
            }
            subjects
                .iter()
                .map(|&s| {
                    let test: Vec<usize> = (0..n)
                        .filter(|&i| electrodes[i].subject_idx == s)
                        .collect();
                    let train: Vec<usize> = (0..n)
                        .filter(|&i| electrodes[i].subject_idx != s)
                        .collect();
                    Fold { train, test }
                })
                .collect()
        }
    };
    Ok(FoldPlan { mode, folds, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn electrodes(n_subjects: usize, per_subject: usize, pos_every: usize) -> Vec<FoldElectrode> {
        let mut out = Vec::new();
        for s in 0..n_subjects {
            for e in 0..per_subject {
                out.push(FoldElectrode {
                    subject_idx: s,
                    label: (s * per_subject + e) % pos_every == 0,
                });
            }
        }
        out
    }

    #[test]
    fn loo_yields_one_fold_per_subject() {
        let els = electrodes(16, 5, 4);
        let plan = make_folds(&els, ValidationMode::Loo, 0).unwrap();
        assert_eq!(plan.folds.len(), 16);
        for fold in &plan.folds {
            // test electrodes all share one subject
            let s = els[fold.test[0]].subject_idx;
            assert!(fold.test.iter().all(|&i| els[i].subject_idx == s));
            assert!(fold.train.iter().all(|&i| els[i].subject_idx != s));
        }
    }

    #[test]
    fn cv8_even_split_of_80() {
        let els = electrodes(4, 20, 5);
        let plan = make_folds(&els, ValidationMode::Cv8, 3).unwrap();
        assert_eq!(plan.folds.len(), 8);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 10);
            assert_eq!(fold.train.len(), 70);
        }
    }

    #[test]
    fn folds_partition_and_are_disjoint() {
        let els = electrodes(5, 13, 3);
        for mode in [ValidationMode::Cv8, ValidationMode::Loo] {
            let plan = make_folds(&els, mode, 7).unwrap();
            let mut seen = vec![false; els.len()];
            for fold in &plan.folds {
                for &i in &fold.test {
                    assert!(!seen[i], "electrode {i} tested twice");
                    seen[i] = true;
                    assert!(!fold.train.contains(&i));
                }
                assert_eq!(fold.train.len() + fold.test.len(), els.len());
            }
            assert!(seen.iter().all(|&s| s), "some electrode never tested");
        }
    }

    #[test]
    fn cv8_stratification_keeps_positive_rate() {
        // 160 electrodes, 1 in 5 positive -> every fold gets 4 positives
        let els = electrodes(8, 20, 5);
        let plan = make_folds(&els, ValidationMode::Cv8, 11).unwrap();
        for fold in &plan.folds {
            let pos = fold.test.iter().filter(|&&i| els[i].label).count();
            assert_eq!(pos, 4);
        }
    }

    #[test]
    fn same_seed_same_folds() {
        let els = electrodes(4, 10, 4);
        let a = make_folds(&els, ValidationMode::Cv8, 42).unwrap();
        let b = make_folds(&els, ValidationMode::Cv8, 42).unwrap();
        for (fa, fb) in a.folds.iter().zip(b.folds.iter()) {
            assert_eq!(fa.test, fb.test);
        }
        let c = make_folds(&els, ValidationMode::Cv8, 43).unwrap();
        assert!(a.folds.iter().zip(c.folds.iter()).any(|(x, y)| x.test != y.test));
    }

    #[test]
    fn too_small_inputs_are_config_errors() {
        let els = electrodes(1, 4, 2);
        assert!(matches!(
            make_folds(&els, ValidationMode::Cv8, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_folds(&els, ValidationMode::Loo, 0),
            Err(Error::Config(_))
        ));
    }
}
