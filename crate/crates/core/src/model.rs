//! A runnable model: resolved graph + parameters + channel masks.
//!
//! Every conv layer's per-output-channel parameters (kernel slices, bias)
//! and the per-channel parameters of downstream channel-preserving layers
//! (batch-norm gamma/beta, depthwise kernels) are gated by the mask of
//! their group. A dead channel therefore produces exactly zero through the
//! whole chain, which is what makes the masked network equal the physically
//! shrunk one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{resolve, LayerKind, NetworkSpec, ResolvedNet};
use crate::layers;
use crate::layers::BnMode;
use crate::mask::ChannelMask;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Forward-pass regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics; batch-norm running stats updated with the default
    /// momentum.
    Train,
    /// Running statistics everywhere; nothing mutated.
    Eval,
    /// Batch statistics with caller-controlled running-stat momentum, for
    /// recomputing batch-norm statistics after the architecture changed.
    BnCalibrate { momentum: f64 },
}

pub const BN_MOMENTUM: f64 = 0.1;

pub enum LayerParams {
    Conv { w: Tensor, b: Tensor },
    Dense { w: Tensor, b: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    Stateless,
}

/// Live/seed channel count of one conv layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChannelEntry {
    pub layer_id: String,
    pub live: usize,
    pub seed: usize,
}

pub struct Model {
    pub net: ResolvedNet,
    /// Parallel to `net.layers`.
    pub params: Vec<LayerParams>,
    /// One mask per group, parallel to `net.groups`.
    pub masks: Vec<ChannelMask>,
    /// Per layer, the index into `masks` gating its output channels.
    pub mask_of: Vec<Option<usize>>,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Allocate and initialize all weights and masks for a spec.
///
/// He-uniform (fan-in) for conv/dense kernels, zero biases, batch-norm
/// gamma=1 beta=0, every theta at 1. Deterministic in `rng_seed`.
pub fn build_seed(spec: &NetworkSpec, rng_seed: u64) -> Result<Model> {
    let net = resolve(spec)?;
    build_from_resolved(net, rng_seed)
}

pub(crate) fn build_from_resolved(net: ResolvedNet, rng_seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let masks: Vec<ChannelMask> =
        net.groups.iter().map(|(name, c)| ChannelMask::new(*c, Some(name.clone()))).collect();
    let mask_of: Vec<Option<usize>> = net
        .layers
        .iter()
        .map(|l| l.mask_group.as_deref().and_then(|g| net.group_index(g)))
        .collect();

    let mut params = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let p = match l.kind {
            LayerKind::Conv2d => {
                let len = l.c_out * l.c_in * l.ky * l.kx;
                let w = Tensor::param(&[l.c_out, l.c_in, l.ky, l.kx],
                    he_uniform(&mut rng, l.c_in * l.ky * l.kx, len))?;
                let b = Tensor::param(&[l.c_out], vec![0.0; l.c_out])?;
                LayerParams::Conv { w, b }
            }
            LayerKind::DwConv2d => {
                let len = l.c_out * l.ky * l.kx;
                let w = Tensor::param(&[l.c_out, 1, l.ky, l.kx],
                    he_uniform(&mut rng, l.ky * l.kx, len))?;
                let b = Tensor::param(&[l.c_out], vec![0.0; l.c_out])?;
                LayerParams::Conv { w, b }
            }
            LayerKind::Dense => {
                let len = l.c_out * l.c_in;
                let w = Tensor::param(&[l.c_out, l.c_in], he_uniform(&mut rng, l.c_in, len))?;
                let b = Tensor::param(&[l.c_out], vec![0.0; l.c_out])?;
                LayerParams::Dense { w, b }
            }
            LayerKind::Batchnorm => LayerParams::BatchNorm {
                gamma: Tensor::param(&[l.c_out], vec![1.0; l.c_out])?,
                beta: Tensor::param(&[l.c_out], vec![0.0; l.c_out])?,
                running_mean: Tensor::zeros(&[l.c_out]),
                running_var: Tensor::ones(&[l.c_out]),
            },
            _ => LayerParams::Stateless,
        };
        params.push(p);
    }
    Ok(Model { net, params, masks, mask_of })
}

impl Model {
    /// Trainable weight tensors (W), mask thetas excluded. Stable order.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                    out.push(w.clone());
                    out.push(b.clone());
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.clone());
                    out.push(beta.clone());
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    /// Theta tensors of all non-frozen masks, in group order.
    pub fn theta_parameters(&self) -> Vec<Tensor> {
        self.masks.iter().filter(|m| !m.frozen()).map(|m| m.theta().clone()).collect()
    }

    pub fn set_masks_frozen(&self, frozen: bool) {
        for m in &self.masks {
            m.set_frozen(frozen);
        }
    }

    pub fn mask_for_layer(&self, idx: usize) -> Option<&ChannelMask> {
        self.mask_of[idx].map(|mi| &self.masks[mi])
    }

    /// Live input channels of layer `idx`: the alive count of its producer's
    /// mask, or the full producer width when unmasked.
    pub fn live_c_in(&self, idx: usize) -> usize {
        let l = &self.net.layers[idx];
        match l.input_idx[0] {
            None => self.net.spec.input_shape.0,
            Some(p) => match self.mask_of[p] {
                Some(mi) => self.masks[mi].alive_count(),
                None => self.net.layers[p].c_out,
            },
        }
    }

    pub fn live_c_out(&self, idx: usize) -> usize {
        match self.mask_of[idx] {
            Some(mi) => self.masks[mi].alive_count(),
            None => self.net.layers[idx].c_out,
        }
    }

    /// Live/seed channel counts for every conv layer.
    pub fn channel_config(&self) -> Vec<ChannelEntry> {
        self.net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_conv())
            .map(|(i, l)| ChannelEntry {
                layer_id: l.spec.id.clone(),
                live: self.live_c_out(i),
                seed: l.c_out,
            })
            .collect()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_with(tape, x, mode, false)
    }

    /// Full masked forward. With `relax_masks` the Heaviside gates become
    /// their clamp surrogate, making the graph finite-difference checkable.
    pub fn forward_with(
        &self,
        tape: &Tape,
        x: &Tensor,
        mode: Mode,
        relax_masks: bool,
    ) -> Result<Tensor> {
        // one binarization per group per forward; every user shares the node
        let gates: Vec<Tensor> =
            self.masks.iter().map(|m| m.binarized(tape, relax_masks)).collect();
        let gate_of = |idx: usize| -> Option<&Tensor> { self.mask_of[idx].map(|mi| &gates[mi]) };

        let bn_mode = match mode {
            Mode::Train => BnMode::Train { momentum: BN_MOMENTUM },
            Mode::Eval => BnMode::Eval,
            Mode::BnCalibrate { momentum } => BnMode::Train { momentum },
        };

        let mut outs: Vec<Tensor> = Vec::with_capacity(self.net.layers.len());
        for (i, l) in self.net.layers.iter().enumerate() {
            let input = |slot: usize| -> &Tensor {
                match l.input_idx[slot] {
                    None => x,
                    Some(p) => &outs[p],
                }
            };
            let y = match (&l.kind, &self.params[i]) {
                (LayerKind::Conv2d, LayerParams::Conv { w, b }) => {
                    let (wm, bm) = self.gated(tape, w, b, gate_of(i))?;
                    layers::conv2d(tape, input(0), &wm, Some(&bm), (l.sy, l.sx), (l.py, l.px))?
                }
                (LayerKind::DwConv2d, LayerParams::Conv { w, b }) => {
                    let (wm, bm) = self.gated(tape, w, b, gate_of(i))?;
                    layers::dw_conv2d(tape, input(0), &wm, Some(&bm), (l.sy, l.sx), (l.py, l.px))?
                }
                (LayerKind::Dense, LayerParams::Dense { w, b }) => {
                    let xin = input(0);
                    let x2 = if xin.shape().len() == 4 {
                        tape.reshape(xin, &[xin.shape()[0], l.c_in])?
                    } else {
                        xin.clone()
                    };
                    layers::linear(tape, &x2, w, b)?
                }
                (
                    LayerKind::Batchnorm,
                    LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
                ) => {
                    let (gm, bm) = self.gated(tape, gamma, beta, gate_of(i))?;
                    layers::batchnorm(tape, input(0), &gm, &bm, running_mean, running_var, bn_mode)?
                }
                (LayerKind::Relu, _) => tape.relu(input(0))?,
                (LayerKind::Maxpool, _) => {
                    layers::maxpool(tape, input(0), (l.ky, l.kx), (l.sy, l.sx))?
                }
                (LayerKind::Avgpool, _) => {
                    layers::avgpool(tape, input(0), (l.ky, l.kx), (l.sy, l.sx))?
                }
                (LayerKind::GlobalAvgpool, _) => layers::global_avgpool(tape, input(0))?,
                (LayerKind::Flatten, _) => {
                    let xin = input(0);
                    tape.reshape(xin, &[xin.shape()[0], l.c_out])?
                }
                (LayerKind::Add, _) => {
                    let mut acc = input(0).clone();
                    for s in 1..l.input_idx.len() {
                        acc = tape.add(&acc, input(s))?;
                    }
                    acc
                }
                _ => {
                    return Err(Error::InvalidSpec {
                        layer: l.spec.id.clone(),
                        reason: "layer kind/parameter mismatch".into(),
                    })
                }
            };
            outs.push(y);
        }
        Ok(outs.pop().expect("net has layers"))
    }

    fn gated(
        &self,
        tape: &Tape,
        w: &Tensor,
        b: &Tensor,
        gate: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        match gate {
            Some(h) => Ok((tape.channel_scale(w, h)?, tape.channel_scale(b, h)?)),
            None => Ok((w.clone(), b.clone())),
        }
    }

    /// Build the physically shrunk network: dead channels removed from every
    /// kernel, bias, batch-norm buffer and downstream input slice. Weights
    /// are copied, so masked forward and shrunk forward coincide.
    pub fn materialize(&self) -> Result<(NetworkSpec, Model)> {
        let spec = self.materialized_spec();
        let mut out = build_seed(&spec, 0)?;

        // live output-channel indices per source layer
        let live_out: Vec<Vec<usize>> = (0..self.net.layers.len())
            .map(|i| match self.mask_of[i] {
                Some(mi) => self.masks[mi].live_indices(),
                None => (0..self.net.layers[i].c_out).collect(),
            })
            .collect();
        let live_in = |idx: usize| -> Vec<usize> {
            match self.net.layers[idx].input_idx[0] {
                None => (0..self.net.spec.input_shape.0).collect(),
                Some(p) => live_out[p].clone(),
            }
        };

        for (i, l) in self.net.layers.iter().enumerate() {
            match (&self.params[i], &mut out.params[i]) {
                (LayerParams::Conv { w, b }, LayerParams::Conv { w: nw, b: nb }) => {
                    let rows = &live_out[i];
                    let (kh, kw) = (l.ky, l.kx);
                    let ks = kh * kw;
                    let wv = w.data();
                    let bv = b.data();
                    let mut nwv = nw.data_mut();
                    let mut nbv = nb.data_mut();
                    match l.kind {
                        LayerKind::Conv2d => {
                            let cols = live_in(i);
                            let ci = l.c_in;
                            for (r2, &r) in rows.iter().enumerate() {
                                nbv[r2] = bv[r];
                                for (c2, &c) in cols.iter().enumerate() {
                                    let src = (r * ci + c) * ks;
                                    let dst = (r2 * cols.len() + c2) * ks;
                                    nwv[dst..dst + ks].copy_from_slice(&wv[src..src + ks]);
                                }
                            }
                        }
                        LayerKind::DwConv2d => {
                            for (r2, &r) in rows.iter().enumerate() {
                                nbv[r2] = bv[r];
                                nwv[r2 * ks..(r2 + 1) * ks]
                                    .copy_from_slice(&wv[r * ks..(r + 1) * ks]);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                (LayerParams::Dense { w, b }, LayerParams::Dense { w: nw, b: nb }) => {
                    // producer features flatten as channel-major blocks of
                    // the spatial plane
                    let p = l.input_idx[0];
                    let (ph, pw) = match p {
                        None => (self.net.spec.input_shape.1, self.net.spec.input_shape.2),
                        Some(pi) => (self.net.layers[pi].out_h, self.net.layers[pi].out_w),
                    };
                    let plane = ph * pw;
                    let cols = live_in(i);
                    let f_old = l.c_in;
                    let f_new = cols.len() * plane;
                    let k = l.c_out;
                    let wv = w.data();
                    let mut nwv = nw.data_mut();
                    for r in 0..k {
                        for (c2, &c) in cols.iter().enumerate() {
                            let src = r * f_old + c * plane;
                            let dst = r * f_new + c2 * plane;
                            nwv[dst..dst + plane].copy_from_slice(&wv[src..src + plane]);
                        }
                    }
                    nb.set_data(&b.to_vec());
                }
                (
                    LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
                    LayerParams::BatchNorm {
                        gamma: ng,
                        beta: nb,
                        running_mean: nrm,
                        running_var: nrv,
                    },
                ) => {
                    let keep = &live_out[i];
                    for (src, dst) in [
                        (gamma, ng),
                        (beta, nb),
                        (running_mean, nrm),
                        (running_var, nrv),
                    ] {
                        let sv = src.data();
                        let mut dv = dst.data_mut();
                        for (j2, &j) in keep.iter().enumerate() {
                            dv[j2] = sv[j];
                        }
                    }
                }
                _ => {}
            }
        }
        Ok((spec, out))
    }

    /// The shrunk spec alone: conv widths set to live counts, seed widths
    /// recorded in `seed_c_out`.
    pub fn materialized_spec(&self) -> NetworkSpec {
        materialized_spec_from(&self.net, &self.channel_config())
    }

    /// Checkpointable snapshot of all numeric state.
    pub fn state(&self) -> ModelState {
        let mut tensors = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let id = &self.net.layers[i].spec.id;
            match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                    tensors.push((format!("{id}.w"), w.to_vec()));
                    tensors.push((format!("{id}.b"), b.to_vec()));
                }
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    tensors.push((format!("{id}.gamma"), gamma.to_vec()));
                    tensors.push((format!("{id}.beta"), beta.to_vec()));
                    tensors.push((format!("{id}.running_mean"), running_mean.to_vec()));
                    tensors.push((format!("{id}.running_var"), running_var.to_vec()));
                }
                LayerParams::Stateless => {}
            }
        }
        let thetas = self
            .masks
            .iter()
            .zip(&self.net.groups)
            .map(|(m, (g, _))| (g.clone(), m.snapshot()))
            .collect();
        ModelState { tensors, thetas }
    }

    pub fn load_state(&self, state: &ModelState) -> Result<()> {
        let mut lookup: std::collections::HashMap<&str, &Vec<f64>> =
            state.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut take = |key: String, t: &Tensor| -> Result<()> {
            match lookup.remove(key.as_str()) {
                Some(v) if v.len() == t.numel() => {
                    t.set_data(v);
                    Ok(())
                }
                Some(v) => Err(Error::Config(format!(
                    "checkpoint tensor `{key}` has {} values, expected {}",
                    v.len(),
                    t.numel()
                ))),
                None => Err(Error::Config(format!("checkpoint is missing tensor `{key}`"))),
            }
        };
        for (i, p) in self.params.iter().enumerate() {
            let id = &self.net.layers[i].spec.id;
            match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                    take(format!("{id}.w"), w)?;
                    take(format!("{id}.b"), b)?;
                }
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    take(format!("{id}.gamma"), gamma)?;
                    take(format!("{id}.beta"), beta)?;
                    take(format!("{id}.running_mean"), running_mean)?;
                    take(format!("{id}.running_var"), running_var)?;
                }
                LayerParams::Stateless => {}
            }
        }
        for (m, (g, _)) in self.masks.iter().zip(&self.net.groups) {
            let v = state
                .thetas
                .iter()
                .find(|(name, _)| name == g)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing theta `{g}`")))?;
            m.restore(v);
        }
        Ok(())
    }
}

/// Shrink a spec according to live channel counts (no weights involved).
pub fn materialized_spec_from(net: &ResolvedNet, config: &[ChannelEntry]) -> NetworkSpec {
    let live = |id: &str| -> Option<usize> {
        config.iter().find(|e| e.layer_id == id).map(|e| e.live)
    };
    let mut spec = net.spec.clone();
    spec.name = format!("{}-shrunk", spec.name);
    for (ls, rl) in spec.layers.iter_mut().zip(&net.layers) {
        // resolve() re-infers c_in and channel-preserving widths
        ls.c_in = None;
        match ls.kind {
            LayerKind::Conv2d => {
                if let Some(n) = live(&ls.id) {
                    ls.seed_c_out = Some(rl.c_out);
                    ls.c_out = Some(n);
                }
            }
            LayerKind::DwConv2d => {
                ls.seed_c_out = Some(rl.c_out);
                ls.c_out = None;
            }
            _ => {
                ls.c_out = None;
            }
        }
    }
    spec
}

/// Serializable model snapshot: named tensors plus per-group thetas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub tensors: Vec<(String, Vec<f64>)>,
    pub thetas: Vec<(String, Vec<f64>)>,
}

/// Mean task loss and accuracy over one dataset batch.
pub fn task_loss(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    layers::softmax_cross_entropy(tape, logits, labels)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = layers::argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}
