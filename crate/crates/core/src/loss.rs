//! The search objective: task loss + lambda * |S - s*| + mu * O.
//!
//! The size term is a soft constraint pulling the effective parameter count
//! onto the target s*; lambda comes from a closed form fixed once after
//! warmup. The OPs term is a plain objective whose strength mu is the knob
//! that trades accuracy for inference cost.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The addends of one composite-loss evaluation, for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    /// |S - s*| at the current masks.
    pub size_penalty: f64,
    /// O at the current masks.
    pub ops_term: f64,
    pub lambda: f64,
    pub mu: f64,
    pub total: f64,
}

/// total = task + lambda * |S(theta) - s*| + mu * O(theta), on the tape.
pub fn composite_loss(
    tape: &Tape,
    task: &Tensor,
    model: &Model,
    s_star: f64,
    lambda: f64,
    mu: f64,
) -> Result<(Tensor, LossBreakdown)> {
    composite_loss_impl(tape, task, model, s_star, lambda, mu, false)
}

/// Same objective with the masks' clamp surrogate instead of the Heaviside
/// step, so the whole graph is finite-difference checkable.
pub fn composite_loss_relaxed(
    tape: &Tape,
    task: &Tensor,
    model: &Model,
    s_star: f64,
    lambda: f64,
    mu: f64,
) -> Result<(Tensor, LossBreakdown)> {
    composite_loss_impl(tape, task, model, s_star, lambda, mu, true)
}

fn composite_loss_impl(
    tape: &Tape,
    task: &Tensor,
    model: &Model,
    s_star: f64,
    lambda: f64,
    mu: f64,
    relaxed: bool,
) -> Result<(Tensor, LossBreakdown)> {
    if lambda < 0.0 {
        return Err(Error::NegativeStrength { name: "lambda", value: lambda });
    }
    if mu < 0.0 {
        return Err(Error::NegativeStrength { name: "mu", value: mu });
    }
    if s_star <= 0.0 {
        return Err(Error::Config(format!("target size s* must be positive, got {s_star}")));
    }

    let size = if relaxed { cost::size_cost_relaxed(tape, model)? } else { cost::size_cost(tape, model)? };
    let ops = if relaxed { cost::ops_cost_relaxed(tape, model)? } else { cost::ops_cost(tape, model)? };
    let penalty = tape.abs(&tape.add_scalar(&size, -s_star)?)?;
    let weighted = tape.add(
        &tape.scale(&penalty, lambda)?,
        &tape.scale(&ops, mu)?,
    )?;
    let total = tape.add(task, &weighted)?;

    let breakdown = LossBreakdown {
        task: task.item(),
        size_penalty: penalty.item(),
        ops_term: ops.item(),
        lambda,
        mu,
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Closed-form size strength: the task loss and the size penalty start the
/// search with equal magnitude, so the first iterations are not dominated by
/// shrinking alone.
pub fn compute_lambda(seed_task_loss: f64, seed_size: f64, s_star: f64) -> Result<f64> {
    let gap = (seed_size - s_star).abs();
    if gap == 0.0 {
        return Err(Error::TargetEqualsSeedSize { size: seed_size });
    }
    Ok(seed_task_loss / gap)
}

/// Returns a warning when the strengths violate lambda >> mu, where the size
/// constraint no longer dominates the OPs objective.
pub fn strength_warning(lambda: f64, mu: f64) -> Option<String> {
    (lambda > 0.0 && mu >= lambda).then(|| {
        format!("mu ({mu}) >= lambda ({lambda}); the size constraint may be overpowered")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Size,
    Ops,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "size" => Ok(Metric::Size),
            "ops" => Ok(Metric::Ops),
            other => Err(Error::UnknownMetric(other.into())),
        }
    }
}

/// Single-regularizer baseline: total = task + strength * metric(model).
pub fn single_reg_loss(
    tape: &Tape,
    task: &Tensor,
    model: &Model,
    strength: f64,
    metric: Metric,
) -> Result<Tensor> {
    if strength < 0.0 {
        return Err(Error::NegativeStrength { name: "strength", value: strength });
    }
    let r = match metric {
        Metric::Size => cost::size_cost(tape, model)?,
        Metric::Ops => cost::ops_cost(tape, model)?,
    };
    tape.add(task, &tape.scale(&r, strength)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_network_spec;
    use crate::model::build_seed;

    fn toy_model() -> Model {
        let spec = parse_network_spec(
            r#"
            name = "t"
            input_shape = [2, 8, 8]
            output_classes = 3
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 6
            kx = 3
            ky = 3
            px = 1
            py = 1
            inputs = ["input"]
            [[layer]]
            id = "c2"
            kind = "conv2d"
            c_out = 4
            kx = 3
            ky = 3
            sx = 2
            sy = 2
            px = 1
            py = 1
            inputs = ["c1"]
            [[layer]]
            id = "gap"
            kind = "global_avgpool"
            inputs = ["c2"]
            [[layer]]
            id = "fc"
            kind = "dense"
            inputs = ["gap"]
            "#,
        )
        .unwrap();
        build_seed(&spec, 9).unwrap()
    }

    #[test]
    fn degenerate_strengths_reduce_to_task_loss() {
        let model = toy_model();
        let tape = Tape::new();
        let task = Tensor::scalar(1.75);
        let (total, bd) = composite_loss(&tape, &task, &model, 100.0, 0.0, 0.0).unwrap();
        assert_eq!(total.item(), 1.75);
        assert_eq!(bd.total, bd.task);
    }

    #[test]
    fn direct_arithmetic_matches_the_formula() {
        // task 2.0, S = 1000 via a synthetic target: use the real S and pick
        // s* = S - 500 so the penalty is exactly 500
        let model = toy_model();
        let s = cost::exact_counts(&model).total_params_exact as f64;
        let tape = Tape::new();
        let task = Tensor::scalar(2.0);
        let (total, bd) =
            composite_loss(&tape, &task, &model, s - 500.0, 0.004, 0.0).unwrap();
        assert!((bd.size_penalty - 500.0).abs() < 1e-12);
        assert!((total.item() - (2.0 + 0.004 * 500.0)).abs() < 1e-12);
        assert!((total.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_identity_holds() {
        let model = toy_model();
        let tape = Tape::new();
        let task = Tensor::scalar(0.5);
        let (_, bd) = composite_loss(&tape, &task, &model, 100.0, 0.01, 1e-6).unwrap();
        let recomposed = bd.task + bd.lambda * bd.size_penalty + bd.mu * bd.ops_term;
        assert!((bd.total - recomposed).abs() <= 4.0 * f64::EPSILON * bd.total.abs());
    }

    #[test]
    fn negative_strengths_are_rejected() {
        let model = toy_model();
        let tape = Tape::new();
        let task = Tensor::scalar(1.0);
        assert!(matches!(
            composite_loss(&tape, &task, &model, 10.0, -0.1, 0.0),
            Err(Error::NegativeStrength { name: "lambda", .. })
        ));
        assert!(matches!(
            composite_loss(&tape, &task, &model, 10.0, 0.1, -1.0),
            Err(Error::NegativeStrength { name: "mu", .. })
        ));
    }

    #[test]
    fn lambda_closed_form() {
        assert_eq!(compute_lambda(2.0, 1000.0, 500.0).unwrap(), 0.004);
        let l = compute_lambda(0.5, 96_000.0, 72_000.0).unwrap();
        assert!((l - 2.0833e-5).abs() < 1e-9, "{l}");
        // algebraic identity: lambda * |S - s*| == L at the seed
        let (loss, size, target) = (1.234, 5678.0, 1234.0);
        let lam = compute_lambda(loss, size, target).unwrap();
        assert!((lam * (size - target).abs() - loss).abs() <= f64::EPSILON * loss);
    }

    #[test]
    fn lambda_rejects_target_equal_to_seed() {
        match compute_lambda(1.0, 500.0, 500.0) {
            Err(Error::TargetEqualsSeedSize { size }) => assert_eq!(size, 500.0),
            other => panic!("unexpected: {:?}", other.err()),
        }
    }

    #[test]
    fn single_reg_matches_composite_special_cases() {
        let model = toy_model();
        let tape = Tape::new();
        let task = Tensor::scalar(0.3);
        // strength 0 -> task loss
        let zero = single_reg_loss(&tape, &task, &model, 0.0, Metric::Ops).unwrap();
        assert_eq!(zero.item(), 0.3);
        // ops metric equals composite with lambda = 0
        let a = single_reg_loss(&tape, &task, &model, 1e-7, Metric::Ops).unwrap();
        let s_any = 123.0;
        let (b, _) = composite_loss(&tape, &task, &model, s_any, 0.0, 1e-7).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-12);
        // size metric on the all-alive net: task + strength * full count
        let full = cost::exact_counts(&model).total_params_exact as f64;
        let c = single_reg_loss(&tape, &task, &model, 1e-4, Metric::Size).unwrap();
        assert!((c.item() - (0.3 + 1e-4 * full)).abs() < 1e-12);
    }

    #[test]
    fn metric_parses_and_rejects() {
        assert_eq!("size".parse::<Metric>().unwrap(), Metric::Size);
        assert_eq!("ops".parse::<Metric>().unwrap(), Metric::Ops);
        assert!(matches!("energy".parse::<Metric>(), Err(Error::UnknownMetric(_))));
    }

    #[test]
    fn strength_warning_fires_only_when_mu_catches_lambda() {
        assert!(strength_warning(0.01, 0.02).is_some());
        assert!(strength_warning(0.01, 0.01).is_some());
        assert!(strength_warning(0.01, 1e-6).is_none());
        assert!(strength_warning(0.0, 0.0).is_none());
    }

    #[test]
    fn constant_shift_leaves_gradients_unchanged() {
        let model = toy_model();
        model.set_masks_frozen(false);
        let grads_for = |shift: f64| -> Vec<Vec<f64>> {
            for m in &model.masks {
                m.theta().zero_grad();
            }
            let tape = Tape::new();
            let task = tape.add_scalar(
                &{
                    // scalar that depends on theta so task grads are nonzero
                    let s = cost::size_cost(&tape, &model).unwrap();
                    tape.scale(&s, 1e-3).unwrap()
                },
                shift,
            )
            .unwrap();
            let (total, _) = composite_loss(&tape, &task, &model, 50.0, 0.01, 1e-6).unwrap();
            tape.backward(&total).unwrap();
            model.masks.iter().map(|m| m.theta().grad().unwrap()).collect()
        };
        let g0 = grads_for(0.0);
        let g5 = grads_for(5.0);
        assert_eq!(g0, g5);
    }
}
