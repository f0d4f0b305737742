//! The distillation loss terms.
//!
//! Teacher-side quantities enter as constants ([`TeacherTargets`]), so no
//! gradient can reach a teacher parameter by construction. Intermediate
//! losses are per-sample means over non-padding elements; the attention term
//! additionally averages over heads. Sums run over the mapped layer pairs.

use crate::encoder::ForwardTrace;
use crate::teacher::TrainError;
use crate::tensor::{row_softmax, Tensor};

use super::{DistillPlan, DistillProjections};

type Result<T> = std::result::Result<T, TrainError>;

/// Constant (detached) teacher-side supervision for one batch.
pub struct TeacherTargets {
    /// [B, N, H_T]
    pub embedding: Tensor,
    /// Mapped teacher hidden states, [B, N, H_T] each.
    pub hidden: Vec<Tensor>,
    /// Mapped teacher attention scores, [B, A, N, N] each.
    pub attention: Vec<Tensor>,
    /// Transferable-knowledge vectors, [B, H_T].
    pub transfer: Tensor,
    /// Raw class logits, [B * M].
    pub logits: Vec<f64>,
}

impl TeacherTargets {
    /// Detach a live teacher trace into constant targets, picking the mapped
    /// teacher layers.
    pub fn from_trace(trace: &ForwardTrace, plan: &DistillPlan) -> Self {
        let detach = |t: &Tensor| Tensor::from_vec(t.to_vec(), t.shape());
        TeacherTargets {
            embedding: detach(&trace.embedding_out),
            hidden: plan
                .layer_map
                .iter()
                .map(|&(t, _)| detach(&trace.hidden_states[t - 1]))
                .collect(),
            attention: plan
                .layer_map
                .iter()
                .map(|&(t, _)| detach(&trace.attention_scores[t - 1]))
                .collect(),
            transfer: detach(&trace.transfer_vec),
            logits: trace.class_logits.to_vec(),
        }
    }
}

/// Per-sample intermediate losses (L_embd, L_hidn, L_attn), each of shape
/// [B].
///
/// The student embedding and hidden states are projected into teacher width
/// first. Hidden and attention terms sum over the mapped pairs; padding
/// positions (and padded key/query pairs) are excluded from every mean, so
/// the values are independent of batch padding.
pub fn intermediate_losses(
    targets: &TeacherTargets,
    student: &ForwardTrace,
    plan: &DistillPlan,
    projections: &DistillProjections,
    mask: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let s_emb = &student.embedding_out;
    let (b, n, h_s) = match s_emb.shape() {
        [b, n, h] => (*b, *n, *h),
        other => {
            return Err(TrainError::Invalid(format!(
                "student embedding has shape {other:?}"
            )))
        }
    };
    let h_t = targets.embedding.shape()[2];
    if plan.layer_map.len() != targets.hidden.len()
        || plan.layer_map.len() != targets.attention.len()
    {
        return Err(TrainError::Invalid(
            "teacher targets do not match the layer map".into(),
        ));
    }
    let a = student.attention_scores[0].shape()[1];
    if targets.attention[0].shape()[1] != a {
        return Err(TrainError::Invalid(format!(
            "attention head mismatch: teacher {}, student {a}",
            targets.attention[0].shape()[1]
        )));
    }

    // element masks: token mask broadcast over the feature axis, and the
    // (query, key) product broadcast over heads
    let mut token_mask = vec![0.0; b * n * h_t];
    for (pos, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            token_mask[pos * h_t..(pos + 1) * h_t].fill(1.0);
        }
    }
    let mut attn_mask = vec![0.0; b * a * n * n];
    for r in 0..b {
        for q in 0..n {
            if mask[r * n + q] == 0.0 {
                continue;
            }
            for k in 0..n {
                if mask[r * n + k] == 0.0 {
                    continue;
                }
                for head in 0..a {
                    attn_mask[((r * a + head) * n + q) * n + k] = 1.0;
                }
            }
        }
    }

    let project = |x: &Tensor, proj: &Tensor| -> Result<Tensor> {
        Ok(x.reshape(&[b * n, h_s])?
            .matmul(proj)?
            .reshape(&[b, n, h_t])?)
    };

    let l_embd = project(s_emb, &projections.embed.tensor)?
        .masked_mse_rows(&targets.embedding, Some(&token_mask))?;

    let mut l_hidn: Option<Tensor> = None;
    let mut l_attn: Option<Tensor> = None;
    for (pair, &(_, s_layer)) in plan.layer_map.iter().enumerate() {
        let hidden = project(
            &student.hidden_states[s_layer - 1],
            &projections.hidden[pair].tensor,
        )?
        .masked_mse_rows(&targets.hidden[pair], Some(&token_mask))?;
        l_hidn = Some(match l_hidn {
            Some(acc) => acc.add(&hidden)?,
            None => hidden,
        });
        let attn = student.attention_scores[s_layer - 1]
            .masked_mse_rows(&targets.attention[pair], Some(&attn_mask))?;
        l_attn = Some(match l_attn {
            Some(acc) => acc.add(&attn)?,
            None => attn,
        });
    }
    Ok((
        l_embd,
        l_hidn.expect("layer map is non-empty"),
        l_attn.expect("layer map is non-empty"),
    ))
}

/// Per-sample soft cross-entropy between the teacher's softened distribution
/// and the student's softened logits. No temperature-squared rescaling.
pub fn prediction_loss_rows(
    student_logits: &Tensor,
    target_probs: &[f64],
    temperature: f64,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(TrainError::Invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    Ok(student_logits
        .scale(1.0 / temperature)
        .soft_cross_entropy_rows(target_probs)?)
}

/// Mean prediction loss between teacher logits and student logits at a
/// shared temperature.
pub fn prediction_loss(
    teacher_logits: &[f64],
    student_logits: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    let s = student_logits.shape();
    let (b, m) = (s[0], s[1]);
    if teacher_logits.len() != b * m {
        return Err(TrainError::Invalid(format!(
            "teacher logits have {} values for a [{b}, {m}] student batch",
            teacher_logits.len()
        )));
    }
    let scaled: Vec<f64> = teacher_logits.iter().map(|v| v / temperature).collect();
    let probs = row_softmax(&scaled, b, m);
    Ok(prediction_loss_rows(student_logits, &probs, temperature)?.mean_all())
}

/// Transferable-knowledge distillation: mean squared error between the
/// teacher's transfer vector projected into student width and the student's
/// transfer vector. Returns a scalar (treated as a batch-level quantity).
pub fn tk_loss(
    teacher_transfer: &Tensor,
    projection: &Tensor,
    student_transfer: &Tensor,
) -> Result<Tensor> {
    Ok(teacher_transfer.matmul(projection)?.mse(student_transfer)?)
}

/// How the squared label error in the expertise weight is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrSquared {
    /// 0/1 indicator of a wrong argmax prediction. Class labels are
    /// unordered categories, so a literal difference of label indices is
    /// ill-defined; for binary {0,1} labels both readings coincide.
    #[default]
    Indicator,
    /// The literal squared difference of label indices.
    LiteralDiff,
}

/// Domain expertise weight: (1 + t) / (exp(err^2) + 1).
pub fn expertise_weight(t: f64, predicted: usize, label: usize, mode: ErrSquared) -> f64 {
    let err2 = match mode {
        ErrSquared::Indicator => {
            if predicted == label {
                0.0
            } else {
                1.0
            }
        }
        ErrSquared::LiteralDiff => {
            let d = predicted as f64 - label as f64;
            d * d
        }
    };
    (1.0 + t) / (err2.exp() + 1.0)
}

/// Intermediate-phase objective: the batch mean of
/// `lambda_i * (L_embd_i + L_hidn_i + L_attn_i)` plus `gamma2 * L_tkd`.
pub fn meta_distill_intermediate_loss(
    l_embd: &Tensor,
    l_hidn: &Tensor,
    l_attn: &Tensor,
    lambdas: &[f64],
    gamma2: f64,
    l_tkd: Option<&Tensor>,
) -> Result<Tensor> {
    let b = l_embd.numel();
    if lambdas.len() != b {
        return Err(TrainError::Invalid(format!(
            "{} weights for {b} samples",
            lambdas.len()
        )));
    }
    let weights: Vec<f64> = lambdas.iter().map(|l| l / b as f64).collect();
    let per_sample = l_embd.add(l_hidn)?.add(l_attn)?;
    let mut loss = per_sample.dot_const(&weights)?;
    if gamma2 > 0.0 {
        let tkd = l_tkd.ok_or_else(|| {
            TrainError::Invalid("gamma2 > 0 requires the transferable-knowledge loss".into())
        })?;
        loss = loss.add(&tkd.scale(gamma2))?;
    }
    Ok(loss)
}

/// Prediction-phase objective: the batch mean of `lambda_i * L_pred_i`.
pub fn meta_distill_prediction_loss(l_pred: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
    let b = l_pred.numel();
    if lambdas.len() != b {
        return Err(TrainError::Invalid(format!(
            "{} weights for {b} samples",
            lambdas.len()
        )));
    }
    let weights: Vec<f64> = lambdas.iter().map(|l| l / b as f64).collect();
    Ok(l_pred.dot_const(&weights)?)
}
