//! Shared glue for measuring update commutators on the real model.
//!
//! Both the inline training probe and the post-hoc checkpoint replay build
//! their two-batch gradient pairs here, so the batch construction (and
//! therefore the measured defect) is bitwise identical between them: batches
//! come from substream(seed, "defect-batches", step), and parameters enter
//! as f64 (live values widened, or a widened f32 checkpoint, which agree).

use crate::analyze::defect::{update_commutator, GradPair};
use crate::data::{gather, LabeledBatch, PairDataset, SplitHandle};
use crate::error::Result;
use crate::model::{Model, ParamLayout, ParamVector, Workspace};
use crate::numerics::SeededRng;
use std::sync::Arc;

/// Plain-GD step size inside the commutator probe.
pub const DEFECT_ETA: f64 = 1e-3;

/// Reusable f64 buffers sized for one model.
pub(crate) struct ProbeBuffers {
    pub theta: ParamVector<f64>,
    pub grad: ParamVector<f64>,
    pub ws: Workspace<f64>,
}

impl ProbeBuffers {
    pub fn new(layout: &Arc<ParamLayout>) -> Self {
        ProbeBuffers {
            theta: ParamVector::zeros(layout.clone()),
            grad: ParamVector::zeros(layout.clone()),
            ws: Workspace::new(),
        }
    }
}

/// One loss of the pair: a task subset evaluated on one fixed batch.
pub(crate) struct ProbeSide<'a> {
    pub model: &'a Model,
    pub batch: &'a LabeledBatch,
    pub active: &'a [usize],
}

pub(crate) struct Probe<'a> {
    pub a: ProbeSide<'a>,
    pub b: ProbeSide<'a>,
    pub buf: &'a mut ProbeBuffers,
}

impl Probe<'_> {
    fn eval(side: &ProbeSide, buf: &mut ProbeBuffers, theta: &[f64], out: &mut [f64]) -> Result<()> {
        buf.theta.values.copy_from_slice(theta);
        side.model
            .loss_and_grad(&buf.theta, side.batch, side.active, &mut buf.ws, &mut buf.grad)?;
        out.copy_from_slice(&buf.grad.values);
        Ok(())
    }
}

impl GradPair for Probe<'_> {
    fn grad_a(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        Self::eval(&self.a, self.buf, theta, out)
    }
    fn grad_b(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        Self::eval(&self.b, self.buf, theta, out)
    }
}

/// Update commutators at one training step: one per task (same loss, two
/// batches) and one for the joint loss over all tasks, all on the same two
/// index sets.
pub(crate) struct DefectSample {
    pub per_task: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_defects(
    model: &Model,
    dataset: &PairDataset,
    holdout: &SplitHandle,
    seed: u64,
    batch_size: usize,
    step: u64,
    theta: &[f64],
    buf: &mut ProbeBuffers,
) -> Result<DefectSample> {
    let k = batch_size.min(holdout.train.len());
    let mut rng = SeededRng::substream(seed, "defect-batches", step);
    let mut pick = || -> Vec<u32> {
        rng.sample_indices(holdout.train.len(), k)
            .into_iter()
            .map(|i| holdout.train[i])
            .collect()
    };
    let ia = pick();
    let ib = pick();
    let batch_a = gather(dataset, &ia);
    let batch_b = gather(dataset, &ib);

    let n_tasks = model.config.tasks.len();
    let mut per_task = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let active = [t];
        let mut probe = Probe {
            a: ProbeSide { model, batch: &batch_a, active: &active },
            b: ProbeSide { model, batch: &batch_b, active: &active },
            buf,
        };
        per_task.push(update_commutator(theta, &mut probe, DEFECT_ETA)?);
    }
    let all: Vec<usize> = (0..n_tasks).collect();
    let mut probe = Probe {
        a: ProbeSide { model, batch: &batch_a, active: &all },
        b: ProbeSide { model, batch: &batch_b, active: &all },
        buf,
    };
    let total = update_commutator(theta, &mut probe, DEFECT_ETA)?;
    Ok(DefectSample { per_task, total })
}
