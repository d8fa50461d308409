//! Trainable per-output-channel binary gates.
//!
//! Forward binarizes theta with a Heaviside step at threshold 0; backward is
//! a BinaryConnect-style straight-through estimator that passes gradients
//! inside |theta| <= 1 and clips them outside. Masks that belong to one
//! group alias the same theta storage, so residual junctions stay
//! shape-consistent for every sampled architecture.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Binarization threshold: theta >= 0 keeps the channel alive.
pub const THRESHOLD: f64 = 0.0;

/// Clipping window of the straight-through estimator; theta is clamped to
/// the same window after every optimizer step.
pub const STE_WINDOW: f64 = 1.0;

#[derive(Clone)]
pub struct ChannelMask {
    theta: Tensor,
    group: Option<String>,
    frozen: Cell<bool>,
}

impl ChannelMask {
    /// A fresh mask with every theta at exactly 1 (all channels alive),
    /// frozen until a search phase unfreezes it.
    pub fn new(c_out: usize, group: Option<String>) -> ChannelMask {
        let theta = Tensor::from_vec(&[c_out], vec![1.0; c_out]).expect("theta shape");
        ChannelMask { theta, group, frozen: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.theta.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.numel() == 0
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Frozen masks drop out of optimizer parameter lists and record no
    /// gradient at all.
    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.set(frozen);
        self.theta.set_requires_grad(!frozen);
    }

    /// Two masks of one group share storage; binarization agreement between
    /// them is identity, not coincidence.
    pub fn shares_storage(&self, other: &ChannelMask) -> bool {
        self.theta.same_storage(&other.theta)
    }

    /// H(theta) on the tape. With `relaxed` the forward is the STE's
    /// surrogate clamp(theta, -1, 1) instead of the step, which makes the
    /// whole graph finite-difference checkable.
    pub fn binarized(&self, tape: &Tape, relaxed: bool) -> Tensor {
        binarize(tape, &self.theta, relaxed)
    }

    /// Channel liveness without touching the tape.
    pub fn live_flags(&self) -> Vec<bool> {
        self.theta.data().iter().map(|&t| t >= THRESHOLD).collect()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        self.theta
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t >= THRESHOLD).then_some(i))
            .collect()
    }

    pub fn alive_count(&self) -> usize {
        self.theta.data().iter().filter(|&&t| t >= THRESHOLD).count()
    }

    /// Clamp theta into the STE window. Run after every optimizer step.
    pub fn clamp_theta(&self) {
        let mut data = self.theta.data_mut();
        for t in data.iter_mut() {
            *t = t.clamp(-STE_WINDOW, STE_WINDOW);
        }
    }

    /// Keep at least one channel alive: if a step pushed every theta below
    /// the threshold, the largest one is reset onto it. Returns true when a
    /// repair happened.
    pub fn enforce_min_alive(&self) -> bool {
        let mut data = self.theta.data_mut();
        if data.iter().any(|&t| t >= THRESHOLD) {
            return false;
        }
        let argmax = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("theta is finite"))
            .map(|(i, _)| i)
            .expect("mask is nonempty");
        data[argmax] = THRESHOLD;
        true
    }

    pub fn snapshot(&self) -> Vec<f64> {
        self.theta.to_vec()
    }

    pub fn restore(&self, values: &[f64]) {
        self.theta.set_data(values);
    }
}

/// Heaviside step with the STE backward rule. `relaxed` swaps the forward
/// for clamp(theta, -1, 1) — the function whose true derivative the STE is —
/// for gradient checking.
pub fn binarize(tape: &Tape, theta: &Tensor, relaxed: bool) -> Tensor {
    let data: Vec<f64> = theta
        .data()
        .iter()
        .map(|&t| {
            if relaxed {
                t.clamp(-STE_WINDOW, STE_WINDOW)
            } else if t >= THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let out = tape.output(theta.shape(), data, &[theta]);
    let (th, o) = (theta.clone(), out.clone());
    tape.push_rule(&out, move || {
        let g = ste_backward(&o.grad_snapshot(), &th.data());
        th.accum_grad(&g);
    });
    out
}

/// Clipped straight-through rule: pass the upstream gradient where
/// |theta| <= 1, zero elsewhere.
pub fn ste_backward(upstream: &[f64], theta: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(theta)
        .map(|(&g, &t)| if t.abs() <= STE_WINDOW { g } else { 0.0 })
        .collect()
}

/// Gate the per-output-channel slices of a weight tensor: slice i survives
/// iff H(theta)_i = 1. Works for conv kernels (C_out x C_in x Ky x Kx),
/// bias vectors and batch-norm parameter vectors alike.
pub fn apply_mask(tape: &Tape, w: &Tensor, mask: &ChannelMask, relaxed: bool) -> Result<Tensor> {
    let c = *w.shape().first().unwrap_or(&0);
    if mask.len() != c {
        return Err(Error::ShapeMismatch {
            op: "apply_mask".into(),
            detail: format!("mask of length {} on tensor with {} output channels", mask.len(), c),
        });
    }
    let h = mask.binarized(tape, relaxed);
    tape.channel_scale(w, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold_inclusive() {
        let tape = Tape::new();
        let theta = Tensor::from_vec(&[4], vec![-1.0, 0.2, 0.0, -0.001]).unwrap();
        let h = binarize(&tape, &theta, false);
        assert_eq!(h.to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ste_passes_inside_window_and_clips_outside() {
        assert_eq!(ste_backward(&[3.0], &[0.5]), vec![3.0]);
        assert_eq!(ste_backward(&[3.0], &[1.5]), vec![0.0]);
        assert_eq!(ste_backward(&[0.0], &[0.5]), vec![0.0]);
        assert_eq!(ste_backward(&[2.0, 2.0], &[-1.0, -1.01]), vec![2.0, 0.0]);
    }

    #[test]
    fn binarize_records_ste_rule() {
        let tape = Tape::new();
        let theta = Tensor::param(&[3], vec![0.5, 1.5, -0.5]).unwrap();
        let h = binarize(&tape, &theta, false);
        let s = tape.sum(&h).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(theta.grad().unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn apply_mask_zeroes_whole_slices() {
        let tape = Tape::new();
        let w = Tensor::from_vec(&[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let mask = ChannelMask::new(2, None);
        mask.theta().set_data(&[1.0, -1.0]);
        let out = apply_mask(&tape, &w, &mask, false).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn apply_mask_identity_when_all_alive() {
        let tape = Tape::new();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        let mask = ChannelMask::new(3, None);
        let out = apply_mask(&tape, &w, &mask, false).unwrap();
        assert_eq!(out.to_vec(), w.to_vec());
    }

    #[test]
    fn apply_mask_length_mismatch() {
        let tape = Tape::new();
        let w = Tensor::zeros(&[4, 1, 1, 1]);
        let mask = ChannelMask::new(3, None);
        assert!(apply_mask(&tape, &w, &mask, false).is_err());
    }

    #[test]
    fn clamp_pulls_theta_into_window() {
        let mask = ChannelMask::new(3, None);
        mask.theta().set_data(&[1.7, -0.4, -2.5]);
        mask.clamp_theta();
        assert_eq!(mask.snapshot(), vec![1.0, -0.4, -1.0]);
    }

    #[test]
    fn min_alive_revives_the_largest_theta() {
        let mask = ChannelMask::new(3, None);
        mask.theta().set_data(&[-0.9, -0.2, -0.5]);
        assert!(mask.enforce_min_alive());
        assert_eq!(mask.snapshot(), vec![-0.9, 0.0, -0.5]);
        assert_eq!(mask.alive_count(), 1);
        assert!(!mask.enforce_min_alive());
    }

    #[test]
    fn frozen_mask_tracks_no_gradient() {
        let mask = ChannelMask::new(2, None);
        assert!(mask.frozen());
        assert!(!mask.theta().requires_grad());
        mask.set_frozen(false);
        assert!(mask.theta().requires_grad());
        let tape = Tape::new();
        let h = mask.binarized(&tape, false);
        let s = tape.sum(&h).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(mask.theta().grad().unwrap(), vec![1.0, 1.0]);
    }
}
