//! Sign counting on the rank probe's diagonal and rank trajectories of the
//! materialized prompt during training.

use std::fmt::Write as _;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, DEFAULT_RANK_TOL};
use crate::prompt::PromptParams;
use crate::tasks::TextToTextExample;
use crate::tensor::Tensor;
use crate::trainer::{train_prompt, RunLog, TrainConfig};

pub const DEFAULT_PROBE_EVERY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeRecord {
    pub step: usize,
    pub pos_count: usize,
    pub neg_count: usize,
    pub zero_count: usize,
    pub numerical_rank: usize,
}

/// Strict positive, strict negative and exact-zero counts.
///
/// ```
/// use promptlab::probe::count_sign_diagonal;
/// use promptlab::Tensor;
///
/// let d = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
/// assert_eq!(count_sign_diagonal(&d), (2, 1, 0));
/// ```
pub fn count_sign_diagonal(sigma_diag: &Tensor) -> (usize, usize, usize) {
    sigma_diag.values().iter().fold((0, 0, 0), |(p, n, z), &x| {
        if x > 0.0 {
            (p + 1, n, z)
        } else if x < 0.0 {
            (p, n + 1, z)
        } else {
            (p, n, z + 1)
        }
    })
}

/// Snapshot of a rank-probe parameterization at `step`.
pub fn probe_record(step: usize, params: &PromptParams) -> Result<ProbeRecord> {
    let PromptParams::RankProbe(p) = params else {
        return Err(Error::Usage(format!(
            "rank probing needs a rank-probe prompt, got {}",
            params.kind()
        )));
    };
    let (pos_count, neg_count, zero_count) = count_sign_diagonal(&p.sigma);
    Ok(ProbeRecord {
        step,
        pos_count,
        neg_count,
        zero_count,
        numerical_rank: numerical_rank(&params.materialize(), DEFAULT_RANK_TOL)?,
    })
}

/// Trains a rank-probe prompt as [`train_prompt`] does, recording a
/// [`ProbeRecord`] before the first step and after every `every_n` steps.
/// The records are also stored in the returned log's `probes`.
pub fn probe_run(
    backbone: &Backbone,
    params: &mut PromptParams,
    train: &[TextToTextExample],
    dev: &[TextToTextExample],
    config: &TrainConfig,
    every_n: usize,
) -> Result<(Vec<ProbeRecord>, RunLog)> {
    if !matches!(params, PromptParams::RankProbe(_)) {
        return Err(Error::Usage(format!(
            "rank probing needs a rank-probe prompt, got {}",
            params.kind()
        )));
    }
    if every_n == 0 {
        return Err(Error::Config("probe cadence must be at least 1".into()));
    }
    let mut records = Vec::new();
    let mut last = None;
    let mut observe = |step: usize, p: &PromptParams| -> Result<()> {
        if step % every_n == 0 {
            records.push(probe_record(step, p)?);
        }
        last = Some(step);
        Ok(())
    };
    let mut log = train_prompt(backbone, params, train, dev, config, Some(&mut observe))?;
    if let Some(step) = last {
        if records.last().map(|r| r.step) != Some(step) {
            records.push(probe_record(step, params)?);
        }
    }
    log.probes = records.clone();
    Ok((records, log))
}

pub fn probes_to_csv(records: &[ProbeRecord]) -> String {
    let mut out = String::from("step,pos,neg,zero,rank\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.pos_count, r.neg_count, r.zero_count, r.numerical_rank
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{InitOptions, PromptDims, PromptKind};
    use proptest::prelude::*;

    #[test]
    fn sign_count_examples() {
        assert_eq!(count_sign_diagonal(&Tensor::filled(&[100], 1.0)), (100, 0, 0));
        assert_eq!(count_sign_diagonal(&Tensor::zeros(&[2])), (0, 0, 2));
        assert_eq!(count_sign_diagonal(&Tensor::new(vec![2], vec![-0.0, f64::MIN_POSITIVE]).unwrap()), (1, 0, 1));
    }

    #[test]
    fn initial_record_is_all_positive_full_rank() {
        let dims = PromptDims::new(12, 5);
        let params = PromptParams::init(PromptKind::RankProbe, dims, None, InitOptions::default(), 3).unwrap();
        let r = probe_record(0, &params).unwrap();
        assert_eq!((r.pos_count, r.neg_count, r.zero_count, r.numerical_rank), (5, 0, 0, 5));
    }

    #[test]
    fn rank_bounded_by_positive_count() {
        let dims = PromptDims::new(10, 6);
        let mut params = PromptParams::init(PromptKind::RankProbe, dims, None, InitOptions::default(), 1).unwrap();
        if let PromptParams::RankProbe(p) = &mut params {
            p.sigma.values_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0, -0.1, 1.5]);
        }
        let r = probe_record(7, &params).unwrap();
        assert_eq!((r.pos_count, r.neg_count, r.zero_count), (3, 2, 1));
        assert_eq!(r.numerical_rank, 3);
    }

    #[test]
    fn wrong_kind_is_usage_error() {
        let params = PromptParams::init(PromptKind::Vanilla, PromptDims::new(4, 2), None, InitOptions::default(), 0).unwrap();
        assert!(matches!(probe_record(0, &params), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_layout() {
        let r = ProbeRecord {
            step: 50,
            pos_count: 3,
            neg_count: 1,
            zero_count: 0,
            numerical_rank: 3,
        };
        assert_eq!(probes_to_csv(&[r]), "step,pos,neg,zero,rank\n50,3,1,0,3\n");
    }

    proptest! {
        #[test]
        fn sign_counts_scale_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 1..40),
            k in 1e-3f64..1e3,
        ) {
            let a = Tensor::new(vec![v.len()], v.clone()).unwrap();
            let b = Tensor::new(vec![v.len()], v.iter().map(|x| x * k).collect()).unwrap();
            let (p, n, z) = count_sign_diagonal(&a);
            prop_assert_eq!(p + n + z, v.len());
            prop_assert_eq!((p, n, z), count_sign_diagonal(&b));
        }
    }
}
