use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernel::{classify_var, KernelConfig};
use crate::nn::BoundLinear;
use crate::stats::StatsBank;

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = vec![0.0; labels.len() * n_classes];
    for (i, &k) in labels.iter().enumerate() {
        if k >= n_classes {
            return Err(Error::Validation(format!("label {k} out of range for {n_classes} classes")));
        }
        t[i * n_classes + k] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, t)
}

/// Pseudo-instance logits and their labels.
pub struct PseudoBatch<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
}

/// Instance-level loss: summed cross-entropy over real instances plus summed
/// cross-entropy over pseudo-instances, both divided by the real batch size.
///
/// `real_targets` are probability rows, so input-mixup soft labels pass
/// through unchanged.
pub fn instance_loss(
    tape: &mut Tape,
    real_logits: Var,
    real_targets: &Tensor,
    pseudo: Option<PseudoBatch<'_>>,
) -> Result<Var> {
    let n_real = tape.value(real_logits).rows();
    let real = tape.softmax_cross_entropy(real_logits, real_targets)?;
    let Some(p) = pseudo else { return Ok(real) };
    let n_classes = tape.value(p.logits).cols();
    let targets = one_hot(p.labels, n_classes)?;
    let ce = tape.softmax_cross_entropy(p.logits, &targets)?;
    let pseudo_term = tape.scale(ce, p.labels.len() as f64 / n_real as f64);
    tape.add(real, pseudo_term)
}

/// A set of row distributions to classify, with probability-row targets.
pub struct DistTerm {
    pub mu: Var,
    pub sigma: Var,
    pub targets: Tensor,
}

/// Distribution-level loss: the sum of the mean cross-entropies of the
/// observed cells, the Universum-mixed cells and (optionally) the mixup cells,
/// each classified against `bank` with the projection head.
pub fn distribution_loss(
    tape: &mut Tape,
    observed: &DistTerm,
    generated: &DistTerm,
    mixup: Option<&DistTerm>,
    bank: &StatsBank,
    cfg: &KernelConfig,
    head: &BoundLinear,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for term in [Some(observed), Some(generated), mixup].into_iter().flatten() {
        let logits = classify_var(tape, term.mu, term.sigma, bank, cfg, head)?;
        let ce = tape.softmax_cross_entropy(logits, &term.targets)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    Ok(total.expect("observed term is always present"))
}
