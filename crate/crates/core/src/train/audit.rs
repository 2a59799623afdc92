//! Numerical verification of the analytic gradients.
//!
//! For a sample of coordinates in every parameter tensor, the audit
//! compares the hand-written backward pass against central finite
//! differences of the batch loss, reporting the worst relative error. A
//! second sweep at a halved epsilon estimates the truncation order: central
//! differences are second-order accurate, so halving epsilon should shrink
//! the error roughly four-fold wherever truncation (not floating-point
//! noise) dominates. Everything runs in evaluation mode, making the loss a
//! deterministic function of the parameters.

use rand::Rng;

use crate::corpus::datum_rng;
use crate::model::{DropoutCtx, Example, Model};

use super::TrainError;

/// Outcome of a gradient audit.
#[derive(Debug, Clone)]
pub struct AuditReport {
    /// Coordinates checked.
    pub samples: usize,
    /// Worst relative disagreement between analytic and numerical gradient.
    pub max_rel_err: f64,
    /// Tensor and flat index where the worst disagreement occurred.
    pub worst: String,
    /// Median ratio err(ε)/err(ε/2) over well-conditioned coordinates;
    /// ≈ 4 for a correct second-order scheme. `None` when no coordinate
    /// rose above the noise floor.
    pub order_ratio: Option<f64>,
}

/// Compare analytic gradients with central differences on `batch`.
/// `samples_per_tensor` coordinates are drawn from every parameter tensor
/// (seeded, so audits are reproducible).
pub fn finite_difference_audit(
    model: &mut Model,
    batch: &[Example],
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<AuditReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::NoData);
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(TrainError::BadConfig {
            reason: format!("epsilon {epsilon} must be positive"),
        });
    }
    if samples_per_tensor == 0 {
        return Err(TrainError::BadConfig {
            reason: "samples_per_tensor must be positive".into(),
        });
    }

    let base_loss = batch_loss(model, batch)?;
    if base_loss <= 1e-12 {
        return Err(TrainError::DegenerateBatch);
    }

    // analytic gradient of the summed batch loss
    model.zero_grads();
    for example in batch {
        model.forward_backward(example, &mut DropoutCtx::eval())?;
    }
    let analytic: Vec<(String, ndarray::Array2<f64>)> = model
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), t.g.clone()))
        .collect();

    // sample distinct coordinates per tensor, with the analytic value
    let mut rng = datum_rng(seed, "gradient-audit");
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    for (name, g) in &analytic {
        let len = g.len();
        let cols = g.ncols();
        let want = samples_per_tensor.min(len);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < want {
            picked.insert(rng.gen_range(0..len));
        }
        for index in picked {
            coords.push((name.clone(), index, g[[index / cols, index % cols]]));
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    for (name, index, grad) in &coords {
        let fd = central_difference(model, batch, name, *index, epsilon)?;
        let rel = (fd - grad).abs() / (fd.abs() + grad.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = format!("{name}[{index}]");
        }
    }

    // order-of-accuracy estimate on a few well-scaled coordinates, using
    // coarser epsilons so truncation dominates round-off
    let coarse = 1e-2;
    let mut ratios: Vec<f64> = Vec::new();
    for (name, index, grad) in coords.iter().filter(|(_, _, g)| g.abs() > 1e-4).take(8) {
        let err_coarse = (central_difference(model, batch, name, *index, coarse)? - grad).abs();
        let err_fine =
            (central_difference(model, batch, name, *index, coarse / 2.0)? - grad).abs();
        if err_coarse > 1e-9 && err_fine > 1e-12 {
            ratios.push(err_coarse / err_fine);
        }
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let order_ratio = (!ratios.is_empty()).then(|| ratios[ratios.len() / 2]);

    Ok(AuditReport {
        samples: coords.len(),
        max_rel_err,
        worst,
        order_ratio,
    })
}

fn batch_loss(model: &Model, batch: &[Example]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for example in batch {
        let (loss, _) = model.forward_loss(example, &mut DropoutCtx::eval())?;
        total += loss;
    }
    Ok(total)
}

fn central_difference(
    model: &mut Model,
    batch: &[Example],
    name: &str,
    index: usize,
    epsilon: f64,
) -> Result<f64, TrainError> {
    let original = read_coord(model, name, index);
    if original + epsilon == original || original - epsilon == original {
        return Err(TrainError::EpsilonUnderflow {
            epsilon,
            name: name.to_string(),
            index,
        });
    }
    write_coord(model, name, index, original + epsilon);
    let up = batch_loss(model, batch)?;
    write_coord(model, name, index, original - epsilon);
    let down = batch_loss(model, batch)?;
    write_coord(model, name, index, original);
    Ok((up - down) / (2.0 * epsilon))
}

fn read_coord(model: &Model, name: &str, index: usize) -> f64 {
    for (n, t) in model.params() {
        if n == name {
            let cols = t.shape().1;
            return t.v[[index / cols, index % cols]];
        }
    }
    panic!("unknown parameter {name}");
}

fn write_coord(model: &mut Model, name: &str, index: usize, value: f64) {
    for (n, t) in model.params_mut() {
        if n == name {
            let cols = t.shape().1;
            t.v[[index / cols, index % cols]] = value;
            return;
        }
    }
    panic!("unknown parameter {name}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::EncodedSequence;

    fn audit_model() -> Model {
        let mut config = ModelConfig::toy(14);
        config.d_model = 8;
        config.heads = 2;
        config.d_ff = 16;
        config.enc_layers = 1;
        config.dec_layers = 1;
        config.max_len = 8;
        config.max_whole_words = 8;
        config.init_std = 0.08;
        config.seed = 11;
        Model::new(config).unwrap()
    }

    fn batch() -> Vec<Example> {
        vec![
            Example {
                source: EncodedSequence {
                    token_ids: vec![3, 4, 5, 2],
                    whole_word_ids: vec![1, 2, 2, 3],
                },
                target_ids: vec![6, 7, 1],
            },
            Example {
                source: EncodedSequence {
                    token_ids: vec![8, 9],
                    whole_word_ids: vec![1, 2],
                },
                target_ids: vec![10, 1],
            },
        ]
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut model = audit_model();
        let report = finite_difference_audit(&mut model, &batch(), 1e-4, 3, 99).unwrap();
        assert!(report.samples > 60, "only {} samples", report.samples);
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn audit_restores_parameters_exactly() {
        let mut model = audit_model();
        let before: Vec<ndarray::Array2<f64>> =
            model.params().iter().map(|(_, t)| t.v.clone()).collect();
        finite_difference_audit(&mut model, &batch(), 1e-4, 2, 5).unwrap();
        for ((name, t), b) in model.params().iter().zip(before.iter()) {
            assert_eq!(&t.v, b, "{name} not restored after perturbation");
        }
    }

    #[test]
    fn halving_epsilon_shrinks_error_quadratically() {
        let mut model = audit_model();
        let report = finite_difference_audit(&mut model, &batch(), 1e-4, 3, 99).unwrap();
        let ratio = report.order_ratio.expect("some coordinate above floor");
        assert!(
            ratio > 2.0,
            "error ratio {ratio} too small for a second-order scheme"
        );
    }

    #[test]
    fn saturated_zero_loss_batch_is_refused() {
        let mut model = audit_model();
        // saturate the decoder output: gain 0 and a huge bias on channel 0
        // make the final norm output constant, and a one-hot head column
        // sends all mass to token 6 — the loss on target [6] is ~0
        for (name, t) in model.params_mut() {
            match name.as_str() {
                "dec.final_ln.gain" => t.v.fill(0.0),
                "dec.final_ln.bias" => {
                    t.v.fill(0.0);
                    t.v[[0, 0]] = 100.0;
                }
                "head.w" => {
                    t.v.fill(0.0);
                    t.v[[0, 6]] = 1.0;
                }
                _ => {}
            }
        }
        let saturated = vec![Example {
            source: EncodedSequence {
                token_ids: vec![3],
                whole_word_ids: vec![1],
            },
            target_ids: vec![6],
        }];
        assert!(matches!(
            finite_difference_audit(&mut model, &saturated, 1e-4, 2, 0),
            Err(TrainError::DegenerateBatch)
        ));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut model = audit_model();
        assert!(matches!(
            finite_difference_audit(&mut model, &[], 1e-4, 2, 0),
            Err(TrainError::NoData)
        ));
        assert!(matches!(
            finite_difference_audit(&mut model, &batch(), 0.0, 2, 0),
            Err(TrainError::BadConfig { .. })
        ));
        assert!(matches!(
            finite_difference_audit(&mut model, &batch(), 1e-4, 0, 0),
            Err(TrainError::BadConfig { .. })
        ));
    }

    #[test]
    fn epsilon_underflow_is_detected() {
        let mut model = audit_model();
        let err = finite_difference_audit(&mut model, &batch(), 1e-300, 1, 0).unwrap_err();
        assert!(matches!(err, TrainError::EpsilonUnderflow { .. }));
    }
}
