//! Reverse-mode autodiff tape.
//!
//! Forward ops record a backward rule per output; `backward` replays the
//! rules in reverse. Recording order is the topological order, so a single
//! reversed sweep propagates every gradient. A tape is single-use: a second
//! `backward` without a new forward pass is an error rather than silent
//! accumulation.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Rule = Box<dyn Fn()>;

pub struct Tape {
    rules: RefCell<Vec<Rule>>,
    consumed: Cell<bool>,
    active: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { rules: RefCell::new(Vec::new()), consumed: Cell::new(false), active: true }
    }

    /// A non-recording tape: forwards run, nothing is tracked. Used for
    /// evaluation passes and finite-difference probes.
    pub fn inactive() -> Tape {
        Tape { rules: RefCell::new(Vec::new()), consumed: Cell::new(false), active: false }
    }

    pub fn len(&self) -> usize {
        self.rules.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.borrow().is_empty()
    }

    /// Create an op output. It is tracked iff the tape records and any input
    /// requires a gradient.
    pub(crate) fn output(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor]) -> Tensor {
        let track = self.active && inputs.iter().any(|t| t.requires_grad());
        Tensor::raw(shape, data, track)
    }

    pub(crate) fn push_rule(&self, out: &Tensor, rule: impl Fn() + 'static) {
        if self.active && out.requires_grad() {
            self.rules.borrow_mut().push(Box::new(rule));
        }
    }

    /// Seed `d root / d root = 1` and replay all recorded rules in reverse.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot { numel: root.numel() });
        }
        if self.rules.borrow().is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !root.requires_grad() {
            return Err(Error::MissingGrad { what: "backward root".into() });
        }
        self.consumed.set(true);
        root.accum_grad(&[1.0]);
        for rule in self.rules.borrow().iter().rev() {
            rule();
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = zip_map(a, b, |x, y| x + y);
        let out = self.output(a.shape(), data, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot();
            if a.requires_grad() {
                a.accum_grad(&g);
            }
            if b.requires_grad() {
                b.accum_grad(&g);
            }
        });
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = zip_map(a, b, |x, y| x - y);
        let out = self.output(a.shape(), data, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot();
            if a.requires_grad() {
                a.accum_grad(&g);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accum_grad(&neg);
            }
        });
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = zip_map(a, b, |x, y| x * y);
        let out = self.output(a.shape(), data, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot();
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().zip(b.data().iter()).map(|(g, y)| g * y).collect();
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = g.iter().zip(a.data().iter()).map(|(g, x)| g * x).collect();
                b.accum_grad(&db);
            }
        });
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| c * x).collect();
        let out = self.output(a.shape(), data, &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || {
            let da: Vec<f64> = o.grad_snapshot().iter().map(|g| c * g).collect();
            a.accum_grad(&da);
        });
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        let out = self.output(a.shape(), data, &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || a.accum_grad(&o.grad_snapshot()));
        Ok(out)
    }

    /// |x| with subgradient 0 at x = 0, so a size penalty sitting exactly on
    /// target exerts no force.
    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.abs()).collect();
        let out = self.output(a.shape(), data, &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || {
            let da: Vec<f64> = o
                .grad_snapshot()
                .iter()
                .zip(a.data().iter())
                .map(|(g, x)| g * sign0(*x))
                .collect();
            a.accum_grad(&da);
        });
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        let out = self.output(a.shape(), data, &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || {
            let da: Vec<f64> = o
                .grad_snapshot()
                .iter()
                .zip(a.data().iter())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            a.accum_grad(&da);
        });
        Ok(out)
    }

    // ── reductions and shape ────────────────────────────────────────────

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data().iter().sum();
        let out = self.output(vec![1], vec![total], &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot()[0];
            let da = vec![g; a.numel()];
            a.accum_grad(&da);
        });
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != a.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape".into(),
                detail: format!("cannot view {:?} as {:?}", a.shape(), new_shape),
            });
        }
        let out = self.output(new_shape.to_vec(), a.to_vec(), &[a]);
        let (a, o) = (a.clone(), out.clone());
        self.push_rule(&out, move || a.accum_grad(&o.grad_snapshot()));
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul".into(),
                detail: format!("{:?} x {:?}: inner dimensions must agree", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let av = a.data();
            let bv = b.data();
            mat_mul(&av, &bv, m, k, n)
        };
        let out = self.output(vec![m, n], data, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot();
            if a.requires_grad() {
                // dA = G * B^T
                let bv = b.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                // dB = A^T * G
                let av = a.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                b.accum_grad(&db);
            }
        });
        Ok(out)
    }

    /// Broadcast a length-C vector over the leading dimension of `w`:
    /// `out[i, ..] = w[i, ..] * m[i]`. This is the Hadamard-with-broadcast
    /// used to gate whole filter slices.
    pub fn channel_scale(&self, w: &Tensor, m: &Tensor) -> Result<Tensor> {
        let sw = w.shape();
        let c = *sw.first().unwrap_or(&0);
        if m.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_scale".into(),
                detail: format!("{} channels in {:?} vs mask of length {}", c, sw, m.numel()),
            });
        }
        let slice = if c == 0 { 0 } else { w.numel() / c };
        let data = {
            let wv = w.data();
            let mv = m.data();
            let mut out = Vec::with_capacity(wv.len());
            for i in 0..c {
                let s = mv[i];
                out.extend(wv[i * slice..(i + 1) * slice].iter().map(|x| x * s));
            }
            out
        };
        let out = self.output(sw, data, &[w, m]);
        let (w, m, o) = (w.clone(), m.clone(), out.clone());
        self.push_rule(&out, move || {
            let g = o.grad_snapshot();
            if w.requires_grad() {
                let mv = m.data();
                let mut dw = vec![0.0; g.len()];
                for i in 0..c {
                    let s = mv[i];
                    for j in 0..slice {
                        dw[i * slice + j] = g[i * slice + j] * s;
                    }
                }
                w.accum_grad(&dw);
            }
            if m.requires_grad() {
                let wv = w.data();
                let mut dm = vec![0.0; c];
                for i in 0..c {
                    let mut acc = 0.0;
                    for j in 0..slice {
                        acc += g[i * slice + j] * wv[i * slice + j];
                    }
                    dm[i] = acc;
                }
                m.accum_grad(&dm);
            }
        });
        Ok(out)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: op.into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let t = Tape::new();
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = t.add(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let t = Tape::new();
        let x = Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 0.0, 7.0]).unwrap();
        let y = t.mul(&x, &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // Independent reference: the classic i-j-p accumulation.
        let t = Tape::new();
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..6).map(|_| next()).collect();
        let b: Vec<f64> = (0..6).map(|_| next()).collect();
        let (m, k, n) = (2, 3, 2);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                want[i * n + j] = s;
            }
        }
        let ta = Tensor::from_vec(&[m, k], a).unwrap();
        let tb = Tensor::from_vec(&[k, n], b).unwrap();
        let got = t.matmul(&ta, &tb).unwrap().to_vec();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let t = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = t.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let t = Tape::new();
        let x = Tensor::param(&[2, 3], vec![0.5; 6]).unwrap();
        let s = t.sum(&x).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_square_sum() {
        let t = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = t.mul(&x, &x).unwrap();
        let s = t.sum(&sq).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.mul(&x, &x).unwrap();
        match t.backward(&y) {
            Err(Error::NonScalarRoot { numel: 3 }) => {}
            other => panic!("expected NonScalarRoot, got {:?}", other.err()),
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let t = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let s = t.sum(&x).unwrap();
        t.backward(&s).unwrap();
        match t.backward(&s) {
            Err(Error::TapeConsumed) => {}
            other => panic!("expected TapeConsumed, got {:?}", other.err()),
        }
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let t = Tape::new();
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        match t.backward(&x) {
            Err(Error::EmptyTape) => {}
            other => panic!("expected EmptyTape, got {:?}", other.err()),
        }
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let t = Tape::inactive();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = t.mul(&x, &x).unwrap();
        assert!(!y.requires_grad());
        assert!(t.is_empty());
    }

    #[test]
    fn channel_scale_broadcasts_over_slices() {
        let t = Tape::new();
        let w = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let out = t.channel_scale(&w, &m).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let t = Tape::new();
        let x = Tensor::param(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
        let y = t.abs(&x).unwrap();
        let s = t.sum(&y).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0, 0.0, 1.0]);
    }
}
