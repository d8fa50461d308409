//! Model size and inference-cost accounting.
//!
//! Size counts effective (non-masked) conv kernel parameters with the
//! inter-layer coupling C_out of layer n-1 = C_in of layer n; the first
//! conv's input width is pinned to the data channels. OPs weight each
//! layer's effective parameters by its static output feature-map area, one
//! multiply-accumulate per OP. Depthwise layers contribute live * Ky * Kx.
//!
//! Both quantities exist twice: as scalars on the tape, where live channel
//! counts are sums of gated thetas so gradients reach the masks, and as
//! exact integers from the binarized masks. At any binarization point the
//! two agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::LayerKind;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub effective_c_in: usize,
    pub effective_c_out: usize,
    pub params: u64,
    pub ops: u64,
    /// False for the dense head, which stays outside the totals.
    pub counted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    /// Differentiable-form totals evaluated at the current thetas.
    pub total_params: f64,
    pub total_ops: f64,
    /// Exact integer totals of the materialized network (conv kernels only).
    pub total_params_exact: u64,
    pub total_ops_exact: u64,
    /// Dense head, reported separately.
    pub dense_params_exact: u64,
    pub dense_ops_exact: u64,
    /// Biases and batch-norm state (gamma, beta, running mean/var).
    pub aux_params_exact: u64,
    /// Everything stored at inference time: conv + dense + aux.
    pub total_params_inclusive: u64,
}

/// Per-layer ingredients shared by the differentiable and exact paths.
struct CostTerm {
    layer: usize,
    kind: LayerKind,
    /// Mask index of the producer (None = fixed input channels).
    in_mask: Option<usize>,
    fixed_c_in: usize,
    out_mask: Option<usize>,
    fixed_c_out: usize,
    kernel_area: u64,
    out_area: u64,
}

fn cost_terms(model: &Model) -> Vec<CostTerm> {
    model
        .net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.is_conv())
        .map(|(i, l)| {
            let in_mask = match l.input_idx[0] {
                None => None,
                Some(p) => model.mask_of[p],
            };
            let fixed_c_in = match l.input_idx[0] {
                None => model.net.spec.input_shape.0,
                Some(p) => model.net.layers[p].c_out,
            };
            CostTerm {
                layer: i,
                kind: l.kind,
                in_mask,
                fixed_c_in,
                out_mask: model.mask_of[i],
                fixed_c_out: l.c_out,
                kernel_area: (l.kx * l.ky) as u64,
                out_area: (l.out_h * l.out_w) as u64,
            }
        })
        .collect()
}

fn cost_tensor(model: &Model, tape: &Tape, relaxed: bool, weight_by_area: bool) -> Result<Tensor> {
    // one gated sum per mask group, shared across terms
    let lives: Vec<Tensor> = model
        .masks
        .iter()
        .map(|m| tape.sum(&m.binarized(tape, relaxed)))
        .collect::<Result<_>>()?;

    let mut total: Option<Tensor> = None;
    for term in cost_terms(model) {
        let out_live = match term.out_mask {
            Some(mi) => lives[mi].clone(),
            None => Tensor::scalar(term.fixed_c_out as f64),
        };
        let params = match term.kind {
            // depthwise: one KyKx filter per live channel
            LayerKind::DwConv2d => tape.scale(&out_live, term.kernel_area as f64)?,
            _ => {
                let in_live = match term.in_mask {
                    Some(mi) => lives[mi].clone(),
                    None => Tensor::scalar(term.fixed_c_in as f64),
                };
                let prod = tape.mul(&in_live, &out_live)?;
                tape.scale(&prod, term.kernel_area as f64)?
            }
        };
        let contrib =
            if weight_by_area { tape.scale(&params, term.out_area as f64)? } else { params };
        total = Some(match total {
            None => contrib,
            Some(t) => tape.add(&t, &contrib)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Differentiable effective parameter count S (conv layers only).
pub fn size_cost(tape: &Tape, model: &Model) -> Result<Tensor> {
    cost_tensor(model, tape, false, false)
}

/// Differentiable OPs count O: per-layer effective params times output area.
pub fn ops_cost(tape: &Tape, model: &Model) -> Result<Tensor> {
    cost_tensor(model, tape, false, true)
}

/// Relaxed-gate variants for finite-difference checking.
pub fn size_cost_relaxed(tape: &Tape, model: &Model) -> Result<Tensor> {
    cost_tensor(model, tape, true, false)
}

pub fn ops_cost_relaxed(tape: &Tape, model: &Model) -> Result<Tensor> {
    cost_tensor(model, tape, true, true)
}

/// Exact integer accounting at the current binarized masks.
pub fn exact_counts(model: &Model) -> CostReport {
    let live = |mi: Option<usize>, fixed: usize| -> u64 {
        match mi {
            Some(m) => model.masks[m].alive_count() as u64,
            None => fixed as u64,
        }
    };

    let mut per_layer = Vec::new();
    let mut total_params = 0u64;
    let mut total_ops = 0u64;
    for term in cost_terms(model) {
        let c_out = live(term.out_mask, term.fixed_c_out);
        let c_in = live(term.in_mask, term.fixed_c_in);
        let params = match term.kind {
            LayerKind::DwConv2d => c_out * term.kernel_area,
            _ => c_in * c_out * term.kernel_area,
        };
        let ops = params * term.out_area;
        total_params += params;
        total_ops += ops;
        per_layer.push(LayerCost {
            layer_id: model.net.layers[term.layer].spec.id.clone(),
            effective_c_in: c_in as usize,
            effective_c_out: c_out as usize,
            params,
            ops,
            counted: true,
        });
    }

    // dense head and per-channel bookkeeping, outside the Eq-4 totals
    let mut dense_params = 0u64;
    let mut dense_ops = 0u64;
    let mut aux = 0u64;
    for (i, l) in model.net.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Dense => {
                let p = model.net.layers[i].input_idx[0];
                let (plane, in_mask, fixed_c) = match p {
                    None => (
                        model.net.spec.input_shape.1 * model.net.spec.input_shape.2,
                        None,
                        model.net.spec.input_shape.0,
                    ),
                    Some(pi) => (
                        model.net.layers[pi].out_h * model.net.layers[pi].out_w,
                        model.mask_of[pi],
                        model.net.layers[pi].c_out,
                    ),
                };
                let feats = live(in_mask, fixed_c) * plane as u64;
                let params = feats * l.c_out as u64;
                dense_params += params;
                dense_ops += params;
                aux += l.c_out as u64; // bias
                per_layer.push(LayerCost {
                    layer_id: l.spec.id.clone(),
                    effective_c_in: feats as usize,
                    effective_c_out: l.c_out,
                    params,
                    ops: params,
                    counted: false,
                });
            }
            LayerKind::Conv2d | LayerKind::DwConv2d => {
                aux += live(model.mask_of[i], l.c_out); // bias
            }
            LayerKind::Batchnorm => {
                aux += 4 * live(model.mask_of[i], l.c_out); // gamma, beta, mean, var
            }
            _ => {}
        }
    }

    CostReport {
        per_layer,
        total_params: total_params as f64,
        total_ops: total_ops as f64,
        total_params_exact: total_params,
        total_ops_exact: total_ops,
        dense_params_exact: dense_params,
        dense_ops_exact: dense_ops,
        aux_params_exact: aux,
        total_params_inclusive: total_params + dense_params + aux,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_network_spec;
    use crate::model::build_seed;

    fn chain_model() -> Model {
        let spec = parse_network_spec(
            r#"
            name = "chain"
            input_shape = [3, 16, 16]
            output_classes = 4
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 8
            kx = 3
            ky = 3
            px = 1
            py = 1
            inputs = ["input"]
            [[layer]]
            id = "c2"
            kind = "conv2d"
            c_out = 4
            kx = 1
            ky = 1
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
        build_seed(&spec, 0).unwrap()
    }

    #[test]
    fn single_conv_full_mask_is_the_kernel_product() {
        let model = chain_model();
        let report = exact_counts(&model);
        // 3*8*9 + 8*4*1
        assert_eq!(report.per_layer[0].params, 216);
        assert_eq!(report.total_params_exact, 216 + 32);
        let tape = Tape::new();
        let s = size_cost(&tape, &model).unwrap();
        assert_eq!(s.item(), (216 + 32) as f64);
    }

    #[test]
    fn masked_chain_couples_c_in_of_the_next_layer() {
        let model = chain_model();
        // kill 3 of 8 channels of c1
        model.masks[0].theta().set_data(&[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0]);
        let report = exact_counts(&model);
        assert_eq!(report.per_layer[0].params, 3 * 5 * 9);
        assert_eq!(report.per_layer[1].effective_c_in, 5);
        assert_eq!(report.per_layer[1].params, 5 * 4);
        assert_eq!(report.total_params_exact, 3 * 5 * 9 + 5 * 4 * 1);
        assert_eq!(report.total_params_exact, 155);
        let tape = Tape::new();
        assert_eq!(size_cost(&tape, &model).unwrap().item(), 155.0);
    }

    #[test]
    fn ops_weight_params_by_output_area() {
        let model = chain_model();
        let report = exact_counts(&model);
        // c1: 216 params, 16x16 output
        assert_eq!(report.per_layer[0].ops, 216 * 256);
        assert_eq!(report.per_layer[0].ops, 55_296);
        let tape = Tape::new();
        let o = ops_cost(&tape, &model).unwrap();
        assert_eq!(o.item(), report.total_ops_exact as f64);
    }

    #[test]
    fn stride_two_quarters_the_ops_of_equal_params() {
        let spec_at = |stride: usize| {
            parse_network_spec(&format!(
                r#"
                name = "s"
                input_shape = [4, 16, 16]
                output_classes = 2
                [[layer]]
                id = "c1"
                kind = "conv2d"
                c_out = 4
                kx = 3
                ky = 3
                sx = {stride}
                sy = {stride}
                px = 1
                py = 1
                inputs = ["input"]
                [[layer]]
                id = "gap"
                kind = "global_avgpool"
                inputs = ["c1"]
                [[layer]]
                id = "fc"
                kind = "dense"
                inputs = ["gap"]
                "#
            ))
            .unwrap()
        };
        let m1 = build_seed(&spec_at(1), 0).unwrap();
        let m2 = build_seed(&spec_at(2), 0).unwrap();
        let (r1, r2) = (exact_counts(&m1), exact_counts(&m2));
        assert_eq!(r1.total_params_exact, r2.total_params_exact);
        assert_eq!(r1.total_ops_exact, 4 * r2.total_ops_exact);
    }

    #[test]
    fn depthwise_counts_live_channels_times_kernel() {
        let spec = parse_network_spec(
            r#"
            name = "dw"
            input_shape = [3, 8, 8]
            output_classes = 2
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 8
            kx = 1
            ky = 1
            inputs = ["input"]
            [[layer]]
            id = "d1"
            kind = "dw_conv2d"
            kx = 3
            ky = 3
            px = 1
            py = 1
            inputs = ["c1"]
            [[layer]]
            id = "gap"
            kind = "global_avgpool"
            inputs = ["d1"]
            [[layer]]
            id = "fc"
            kind = "dense"
            inputs = ["gap"]
            "#,
        )
        .unwrap();
        let model = build_seed(&spec, 0).unwrap();
        model.masks[0].theta().set_data(&[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        let report = exact_counts(&model);
        let dw = report.per_layer.iter().find(|l| l.layer_id == "d1").unwrap();
        assert_eq!(dw.params, 5 * 9);
        assert_eq!(dw.params, 45);
        let tape = Tape::new();
        assert_eq!(size_cost(&tape, &model).unwrap().item(), (3 * 5 + 45) as f64);
    }

    #[test]
    fn dense_head_reported_but_not_counted() {
        let model = chain_model();
        let report = exact_counts(&model);
        let fc = report.per_layer.iter().find(|l| l.layer_id == "fc").unwrap();
        assert!(!fc.counted);
        assert_eq!(fc.params, 4 * 4);
        assert_eq!(report.dense_params_exact, 16);
        assert_eq!(
            report.total_params_inclusive,
            report.total_params_exact + report.dense_params_exact + report.aux_params_exact
        );
        // aux: conv biases 8 + 4, dense bias 4
        assert_eq!(report.aux_params_exact, 16);
    }

    #[test]
    fn size_gradient_is_positive_for_alive_thetas() {
        let model = chain_model();
        model.set_masks_frozen(false);
        let tape = Tape::new();
        let s = size_cost(&tape, &model).unwrap();
        tape.backward(&s).unwrap();
        for m in &model.masks {
            let g = m.theta().grad().unwrap();
            assert!(g.iter().all(|&v| v > 0.0), "more alive mass must mean more size: {g:?}");
        }
    }

    #[test]
    fn flipping_any_theta_dead_strictly_shrinks_s_and_o() {
        let model = chain_model();
        let base = exact_counts(&model);
        for mi in 0..model.masks.len() {
            for i in 0..model.masks[mi].len() {
                let snap = model.masks[mi].snapshot();
                let mut v = snap.clone();
                v[i] = -1.0;
                model.masks[mi].restore(&v);
                let r = exact_counts(&model);
                assert!(r.total_params_exact < base.total_params_exact);
                assert!(r.total_ops_exact < base.total_ops_exact);
                model.masks[mi].restore(&snap);
            }
        }
    }
}
