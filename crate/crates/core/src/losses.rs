//! Loss terms shared by synthesis, storing and the baseline.

use kiop_tape::{Tensor, Var};

use crate::error::{KiopError, Result};

fn same_width(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || a != b {
        return Err(KiopError::ShapeMismatch(format!("logit shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Batch-mean `KL(softmax(p) || softmax(q))`. `p` is the reference.
pub fn kl_sim<'g>(p_logits: Var<'g>, q_logits: Var<'g>) -> Result<Var<'g>> {
    same_width(&p_logits.shape(), &q_logits.shape())?;
    let n = p_logits.shape()[0].max(1);
    let lp = p_logits.log_softmax()?;
    let lq = q_logits.log_softmax()?;
    let per = lp.exp().mul(lp.sub(lq)?)?;
    Ok(per.sum_all().scale(1.0 / n as f32))
}

/// `-KL(teacher || student)`; minimizing it drives the two apart.
pub fn adversarial_divergence<'g>(teacher_logits: Var<'g>, student_logits: Var<'g>) -> Result<Var<'g>> {
    Ok(kl_sim(teacher_logits, student_logits)?.neg())
}

/// Mean cross-entropy of `logits` against class `targets`.
pub fn class_prior_loss<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(KiopError::ShapeMismatch(format!("{} targets for logits {shape:?}", targets.len())));
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(KiopError::InvalidLabel { label, classes: shape[1] });
    }
    Ok(logits.log_softmax()?.pick(targets)?.mean_all().neg())
}

/// Sum over BN layers of squared distances between batch moments of each
/// layer's input and the stored running statistics.
pub fn bn_alignment_loss<'g>(bn_inputs: &[Var<'g>], stats: &[(&Tensor, &Tensor)]) -> Result<Var<'g>> {
    let first = bn_inputs.first().ok_or_else(|| KiopError::UnsupportedModel("teacher has no batch norm layers".into()))?;
    if bn_inputs.len() != stats.len() {
        return Err(KiopError::ShapeMismatch(format!("{} BN inputs, {} stat pairs", bn_inputs.len(), stats.len())));
    }
    let g = first.graph();
    let mut total: Option<Var<'g>> = None;
    for (x, (rm, rv)) in bn_inputs.iter().zip(stats) {
        let dm = x.channel_mean()?.sub(g.constant((*rm).clone()))?;
        let dv = x.channel_var()?.sub(g.constant((*rv).clone()))?;
        let term = dm.square().sum_all().add(dv.square().sum_all())?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Weights of the three inversion terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionWeights {
    pub bn: f32,
    pub prior: f32,
    pub adversarial: f32,
}

/// The individual inversion terms and their weighted sum.
pub struct InversionTerms<'g> {
    pub bn: Var<'g>,
    pub prior: Var<'g>,
    pub adversarial: Var<'g>,
    pub total: Var<'g>,
}

pub fn inversion_loss<'g>(
    bn_inputs: &[Var<'g>],
    stats: &[(&Tensor, &Tensor)],
    teacher_logits: Var<'g>,
    student_logits: Var<'g>,
    targets: &[usize],
    w: InversionWeights,
) -> Result<InversionTerms<'g>> {
    let bn = bn_alignment_loss(bn_inputs, stats)?;
    let prior = class_prior_loss(teacher_logits, targets)?;
    let adversarial = adversarial_divergence(teacher_logits, student_logits)?;
    let total = bn.scale(w.bn).add(prior.scale(w.prior))?.add(adversarial.scale(w.adversarial))?;
    Ok(InversionTerms { bn, prior, adversarial, total })
}

/// Row-wise L2 normalization.
pub fn l2_normalize<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let norm = x.square().sum_axis(1, true)?.add_scalar(1e-12).sqrt();
    Ok(x.div(norm)?)
}

/// InfoNCE over L2-normalized embeddings. Anchor `m` scores its own positive
/// against every other positive and every bank negative:
/// `-mean_m log(exp(s_mm/τ) / Σ_k exp(s_mk/τ))`.
pub fn contrastive_loss<'g>(
    anchors: Var<'g>,
    positives: Var<'g>,
    bank_negatives: Option<Var<'g>>,
    tau: f32,
) -> Result<Var<'g>> {
    let (a, p) = (anchors.shape(), positives.shape());
    if a.len() != 2 || a != p {
        return Err(KiopError::ShapeMismatch(format!("anchors {a:?} vs positives {p:?}")));
    }
    let n = a[0];
    let keys = match bank_negatives {
        Some(neg) => {
            if neg.shape().len() != 2 || neg.shape()[1] != a[1] {
                return Err(KiopError::ShapeMismatch(format!("negatives {:?} vs anchors {a:?}", neg.shape())));
            }
            Var::cat0(&[positives, neg])?
        }
        None => positives,
    };
    if n == 0 || keys.shape()[0] < 2 {
        return Err(KiopError::DegenerateContrast);
    }
    let logits = anchors.matmul(keys.t()?)?.scale(1.0 / tau);
    let diag: Vec<usize> = (0..n).collect();
    Ok(logits.log_softmax()?.pick(&diag)?.mean_all().neg())
}
