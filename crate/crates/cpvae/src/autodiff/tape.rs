use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, P_CLAMP, SELU_ALPHA, SELU_LAMBDA};
use super::tensor::Tensor;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reverse-mode tape. Nodes only reference earlier nodes, so a reverse sweep
/// over the arena is a valid topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Dense { x: Var, w: Var, b: Var },
    MaskedDense { x: Var, w: Var, b: Var, mask: Arc<Tensor> },
    ConvCircular { x: Var, w: Var, b: Var },
    Relu(Var),
    Selu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    GlobalAvgPool(Var),
    ConcatCols(Var, Var),
    BernoulliNllMean { p: Var, target: Arc<Tensor> },
    MseMean { r: Var, target: Arc<Tensor> },
    GaussLogDensityCube { z: Var, mu: Var, logvar: Var },
    SumAxis2(Var),
    LogSumExpAxis1Mat(Var),
    LogSumExpAxis1Cube(Var),
    Diag(Var),
    StdNormalLogPdfSum(Var),
    RowSum(Var),
    MeanAll(Var),
}

/// Gradients of one scalar root with respect to every gradient-requiring node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input (parameters, values under test).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, noise draws).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape() != vb.shape() {
                return Err(Error::shape(
                    format!("{:?}", va.shape()),
                    format!("{:?}", vb.shape()),
                ));
            }
            let values = va
                .values()
                .iter()
                .zip(vb.values())
                .map(|(x, y)| x + y)
                .collect();
            (
                Tensor::new(va.shape().to_vec(), values)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Add(a, b), req))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape() != vb.shape() {
                return Err(Error::shape(
                    format!("{:?}", va.shape()),
                    format!("{:?}", vb.shape()),
                ));
            }
            let values = va
                .values()
                .iter()
                .zip(vb.values())
                .map(|(x, y)| x * y)
                .collect();
            (
                Tensor::new(va.shape().to_vec(), values)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|v| c * v), nodes[a.0].requires_grad)
        };
        self.push(out, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|v| v + c), nodes[a.0].requires_grad)
        };
        self.push(out, Op::AddScalar(a), req)
    }

    /// `a - b`, elementwise.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            (
                Tensor::new(shape, nodes[a.0].value.values().to_vec())?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Reshape(a), req))
    }

    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            check_dense_shapes(vx, vw, vb)?;
            (
                kernels::dense(vx, vw, vb),
                nodes[x.0].requires_grad || nodes[w.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Dense { x, w, b }, req))
    }

    pub fn masked_dense(&self, x: Var, w: Var, b: Var, mask: Arc<Tensor>) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            check_dense_shapes(vx, vw, vb)?;
            if mask.shape() != vw.shape() {
                return Err(Error::shape(
                    format!("mask {:?}", vw.shape()),
                    format!("{:?}", mask.shape()),
                ));
            }
            (
                kernels::masked_dense(vx, vw, vb, &mask),
                nodes[x.0].requires_grad || nodes[w.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::MaskedDense { x, w, b, mask }, req))
    }

    pub fn conv1d_circular(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            if vx.shape().len() != 3 || vw.shape().len() != 3 {
                return Err(Error::shape(
                    "(B,C,N) and (O,C,K)".to_string(),
                    "other".to_string(),
                ));
            }
            if vx.shape()[1] != vw.shape()[1] || vb.shape() != [vw.shape()[0]] {
                return Err(Error::shape(
                    format!("in-channels {} and bias ({})", vx.shape()[1], vw.shape()[0]),
                    format!("{:?} / {:?}", vw.shape(), vb.shape()),
                ));
            }
            if vw.shape()[2] % 2 == 0 {
                return Err(Error::invalid("conv kernel size must be odd"));
            }
            (
                kernels::conv1d_circular(vx, vw, vb),
                nodes[x.0].requires_grad || nodes[w.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::ConvCircular { x, w, b }, req))
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        self.push(out, op, req)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), kernels::relu)
    }

    pub fn selu(&self, a: Var) -> Var {
        self.unary(a, Op::Selu(a), kernels::selu)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), kernels::tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |t| t.map(f64::exp))
    }

    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if va.shape().len() != 3 {
                return Err(Error::shape("(B,C,N)".to_string(), format!("{:?}", va.shape())));
            }
            (kernels::global_avg_pool(va), nodes[a.0].requires_grad)
        };
        Ok(self.push(out, Op::GlobalAvgPool(a), req))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[0] != vb.shape()[0] {
                return Err(Error::shape(
                    "two (B,F) tensors with equal batch".to_string(),
                    format!("{:?} / {:?}", va.shape(), vb.shape()),
                ));
            }
            (
                kernels::concat_cols(va, vb),
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::ConcatCols(a, b), req))
    }

    /// Mean over the batch of the per-sample Bernoulli NLL (sum over sites).
    /// `p` holds probabilities of x = +1; `target` holds spins in {+1,-1}.
    pub fn bernoulli_nll_mean(&self, p: Var, target: Arc<Tensor>) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(Error::shape(
                format!("{:?}", target.shape()),
                format!("{:?}", vp.shape()),
            ));
        }
        let batch = vp.shape()[0] as f64;
        let mut acc = 0.0;
        for (&pv, &xv) in vp.values().iter().zip(target.values()) {
            let pc = kernels::clamp_probability(pv);
            let b = 0.5 * (1.0 + xv);
            acc -= b * pc.ln() + (1.0 - b) * (1.0 - pc).ln();
        }
        let out = Tensor::scalar(acc / batch);
        Ok(self.push(out, Op::BernoulliNllMean { p, target }, self.requires(p)))
    }

    /// Mean squared error over all entries.
    pub fn mse_mean(&self, r: Var, target: Arc<Tensor>) -> Result<Var> {
        let vr = self.value(r);
        if vr.shape() != target.shape() {
            return Err(Error::shape(
                format!("{:?}", target.shape()),
                format!("{:?}", vr.shape()),
            ));
        }
        let n = vr.len() as f64;
        let acc: f64 = vr
            .values()
            .iter()
            .zip(target.values())
            .map(|(rv, xv)| (rv - xv) * (rv - xv))
            .sum();
        let out = Tensor::scalar(acc / n);
        Ok(self.push(out, Op::MseMean { r, target }, self.requires(r)))
    }

    /// Per-dimension Gaussian log densities `out[n,m,j] = log N(z[n,j]; mu[m,j], exp(logvar[m,j]))`.
    pub fn gauss_log_density_cube(&self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let (vz, vmu, vlv) = (
                &nodes[z.0].value,
                &nodes[mu.0].value,
                &nodes[logvar.0].value,
            );
            if vz.shape() != vmu.shape() || vz.shape() != vlv.shape() || vz.shape().len() != 2 {
                return Err(Error::shape(
                    "three equal (M,d) tensors".to_string(),
                    format!("{:?} / {:?} / {:?}", vz.shape(), vmu.shape(), vlv.shape()),
                ));
            }
            let (m, d) = (vz.shape()[0], vz.shape()[1]);
            // The precisions only depend on (mm, j); hoisting the exp out of
            // the M^2 loop removes the dominant cost of this kernel.
            let inv_var: Vec<f64> = vlv.values().iter().map(|&lv| (-lv).exp()).collect();
            let mut out = vec![0.0; m * m * d];
            let zv = vz.values();
            let muv = vmu.values();
            let lvv = vlv.values();
            for n in 0..m {
                let zrow = &zv[n * d..(n + 1) * d];
                for mm in 0..m {
                    let murow = &muv[mm * d..(mm + 1) * d];
                    let lvrow = &lvv[mm * d..(mm + 1) * d];
                    let ivrow = &inv_var[mm * d..(mm + 1) * d];
                    let orow = &mut out[(n * m + mm) * d..(n * m + mm + 1) * d];
                    for j in 0..d {
                        let diff = zrow[j] - murow[j];
                        orow[j] = -0.5 * (LN_2PI + lvrow[j] + diff * diff * ivrow[j]);
                    }
                }
            }
            (
                Tensor::new(vec![m, m, d], out)?,
                nodes[z.0].requires_grad
                    || nodes[mu.0].requires_grad
                    || nodes[logvar.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::GaussLogDensityCube { z, mu, logvar }, req))
    }

    /// `(M,M,d) -> (M,M)` sum over the last axis.
    pub fn sum_axis2(&self, a: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if va.shape().len() != 3 {
                return Err(Error::shape("(M,M,d)".to_string(), format!("{:?}", va.shape())));
            }
            let (m0, m1, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let vv = va.values();
            let mut out = vec![0.0; m0 * m1];
            for (ij, out_ij) in out.iter_mut().enumerate() {
                *out_ij = vv[ij * d..(ij + 1) * d].iter().sum();
            }
            (Tensor::new(vec![m0, m1], out)?, nodes[a.0].requires_grad)
        };
        Ok(self.push(out, Op::SumAxis2(a), req))
    }

    /// `(M,M) -> (M)` numerically stable log-sum-exp over the second axis.
    pub fn logsumexp_axis1_mat(&self, a: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if va.shape().len() != 2 {
                return Err(Error::shape("(M,M)".to_string(), format!("{:?}", va.shape())));
            }
            let (m0, m1) = (va.shape()[0], va.shape()[1]);
            let mut out = vec![0.0; m0];
            for (i, out_i) in out.iter_mut().enumerate() {
                *out_i = logsumexp(&va.values()[i * m1..(i + 1) * m1]);
            }
            (Tensor::new(vec![m0], out)?, nodes[a.0].requires_grad)
        };
        Ok(self.push(out, Op::LogSumExpAxis1Mat(a), req))
    }

    /// `(M,M,d) -> (M,d)` log-sum-exp over the middle axis.
    pub fn logsumexp_axis1_cube(&self, a: Var) -> Result<Var> {
        let (out, req) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if va.shape().len() != 3 {
                return Err(Error::shape("(M,M,d)".to_string(), format!("{:?}", va.shape())));
            }
            let (m0, m1, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let vv = va.values();
            let mut out = vec![0.0; m0 * d];
            let mut buf = vec![0.0; m1];
            for n in 0..m0 {
                for j in 0..d {
                    for (mm, b) in buf.iter_mut().enumerate() {
                        *b = vv[(n * m1 + mm) * d + j];
                    }
                    out[n * d + j] = logsumexp(&buf);
                }
            }
            (Tensor::new(vec![m0, d], out)?, nodes[a.0].requires_grad)
        };
        Ok(self.push(out, Op::LogSumExpAxis1Cube(a), req))
    }

    /// Matrix diagonal `(M,M) -> (M)`.
    pub fn diag(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.shape()[0] != va.shape()[1] {
            return Err(Error::shape("square matrix".to_string(), format!("{:?}", va.shape())));
        }
        let m = va.shape()[0];
        let out = (0..m).map(|i| va.at2(i, i)).collect();
        let out = Tensor::new(vec![m], out)?;
        Ok(self.push(out, Op::Diag(a), self.requires(a)))
    }

    /// `(M,d) -> (M)` row sums of standard-normal log densities.
    pub fn std_normal_logpdf_sum(&self, z: Var) -> Result<Var> {
        let vz = self.value(z);
        if vz.shape().len() != 2 {
            return Err(Error::shape("(M,d)".to_string(), format!("{:?}", vz.shape())));
        }
        let (m, d) = (vz.shape()[0], vz.shape()[1]);
        let mut out = vec![0.0; m];
        for (i, out_i) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                let zv = vz.at2(i, j);
                acc += -0.5 * (LN_2PI + zv * zv);
            }
            *out_i = acc;
        }
        let out = Tensor::new(vec![m], out)?;
        Ok(self.push(out, Op::StdNormalLogPdfSum(z), self.requires(z)))
    }

    /// `(M,d) -> (M)` row sums.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("(M,d)".to_string(), format!("{:?}", va.shape())));
        }
        let (m, d) = (va.shape()[0], va.shape()[1]);
        let out = (0..m)
            .map(|i| va.values()[i * d..(i + 1) * d].iter().sum())
            .collect();
        let out = Tensor::new(vec![m], out)?;
        Ok(self.push(out, Op::RowSum(a), self.requires(a)))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let mean = va.values().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll(a), self.requires(a))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::invalid("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, gout.clone());
                    accumulate(&nodes, &mut grads, *b, gout.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = ewise(&gout, vb, |g, v| g * v);
                    let gb = ewise(&gout, va, |g, v| g * v);
                    accumulate(&nodes, &mut grads, *a, ga);
                    accumulate(&nodes, &mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&nodes, &mut grads, *a, gout.map(|g| g * c));
                }
                Op::AddScalar(a) => {
                    accumulate(&nodes, &mut grads, *a, gout.clone());
                }
                Op::Reshape(a) => {
                    let target_shape = nodes[a.0].value.shape().to_vec();
                    let g = Tensor::new(target_shape, gout.values().to_vec())?;
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) =
                        dense_backward(&nodes[x.0].value, &nodes[w.0].value, &gout, None);
                    accumulate(&nodes, &mut grads, *x, gx);
                    accumulate(&nodes, &mut grads, *w, gw);
                    accumulate(&nodes, &mut grads, *b, gb);
                }
                Op::MaskedDense { x, w, b, mask } => {
                    let (gx, gw, gb) =
                        dense_backward(&nodes[x.0].value, &nodes[w.0].value, &gout, Some(mask));
                    accumulate(&nodes, &mut grads, *x, gx);
                    accumulate(&nodes, &mut grads, *w, gw);
                    accumulate(&nodes, &mut grads, *b, gb);
                }
                Op::ConvCircular { x, w, b } => {
                    let (gx, gw, gb) =
                        conv_backward(&nodes[x.0].value, &nodes[w.0].value, &gout);
                    accumulate(&nodes, &mut grads, *x, gx);
                    accumulate(&nodes, &mut grads, *w, gw);
                    accumulate(&nodes, &mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let va = &nodes[a.0].value;
                    let g = ewise(&gout, va, |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Selu(a) => {
                    let va = &nodes[a.0].value;
                    let g = ewise(&gout, va, |g, v| {
                        if v > 0.0 {
                            g * SELU_LAMBDA
                        } else {
                            g * SELU_LAMBDA * SELU_ALPHA * v.exp()
                        }
                    });
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let g = ewise(&gout, y, |g, s| g * s * (1.0 - s));
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let g = ewise(&gout, y, |g, t| g * (1.0 - t * t));
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let g = ewise(&gout, y, |g, e| g * e);
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::GlobalAvgPool(a) => {
                    let va = &nodes[a.0].value;
                    let (batch, c, n) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut g = Tensor::zeros(vec![batch, c, n]);
                    for bi in 0..batch {
                        for ci in 0..c {
                            let gv = gout.at2(bi, ci) / n as f64;
                            for pos in 0..n {
                                g.values_mut()[(bi * c + ci) * n + pos] = gv;
                            }
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::ConcatCols(a, b) => {
                    let (fa, fb) = (nodes[a.0].value.shape()[1], nodes[b.0].value.shape()[1]);
                    let batch = nodes[a.0].value.shape()[0];
                    let mut ga = Tensor::zeros(vec![batch, fa]);
                    let mut gb = Tensor::zeros(vec![batch, fb]);
                    for bi in 0..batch {
                        for j in 0..fa {
                            ga.values_mut()[bi * fa + j] = gout.at2(bi, j);
                        }
                        for j in 0..fb {
                            gb.values_mut()[bi * fb + j] = gout.at2(bi, fa + j);
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, ga);
                    accumulate(&nodes, &mut grads, *b, gb);
                }
                Op::BernoulliNllMean { p, target } => {
                    let vp = &nodes[p.0].value;
                    let batch = vp.shape()[0] as f64;
                    let g0 = gout.item();
                    let mut g = Tensor::zeros(vp.shape().to_vec());
                    for (i, (&pv, &xv)) in
                        vp.values().iter().zip(target.values()).enumerate()
                    {
                        // Clamped probabilities are flat: zero gradient there.
                        if pv <= P_CLAMP || pv >= 1.0 - P_CLAMP {
                            continue;
                        }
                        let b = 0.5 * (1.0 + xv);
                        g.values_mut()[i] = g0 * (-b / pv + (1.0 - b) / (1.0 - pv)) / batch;
                    }
                    accumulate(&nodes, &mut grads, *p, g);
                }
                Op::MseMean { r, target } => {
                    let vr = &nodes[r.0].value;
                    let n = vr.len() as f64;
                    let g0 = gout.item();
                    let mut g = Tensor::zeros(vr.shape().to_vec());
                    for (i, (&rv, &xv)) in vr.values().iter().zip(target.values()).enumerate()
                    {
                        g.values_mut()[i] = g0 * 2.0 * (rv - xv) / n;
                    }
                    accumulate(&nodes, &mut grads, *r, g);
                }
                Op::GaussLogDensityCube { z, mu, logvar } => {
                    let (vz, vmu, vlv) =
                        (&nodes[z.0].value, &nodes[mu.0].value, &nodes[logvar.0].value);
                    let (m, d) = (vz.shape()[0], vz.shape()[1]);
                    let inv_vars: Vec<f64> =
                        vlv.values().iter().map(|&lv| (-lv).exp()).collect();
                    let mut gz = Tensor::zeros(vec![m, d]);
                    let mut gmu = Tensor::zeros(vec![m, d]);
                    let mut glv = Tensor::zeros(vec![m, d]);
                    for n in 0..m {
                        for mm in 0..m {
                            for j in 0..d {
                                let go = gout.at3(n, mm, j);
                                if go == 0.0 {
                                    continue;
                                }
                                let inv_var = inv_vars[mm * d + j];
                                let diff = vz.at2(n, j) - vmu.at2(mm, j);
                                gz.values_mut()[n * d + j] += go * (-diff * inv_var);
                                gmu.values_mut()[mm * d + j] += go * (diff * inv_var);
                                glv.values_mut()[mm * d + j] +=
                                    go * 0.5 * (diff * diff * inv_var - 1.0);
                            }
                        }
                    }
                    accumulate(&nodes, &mut grads, *z, gz);
                    accumulate(&nodes, &mut grads, *mu, gmu);
                    accumulate(&nodes, &mut grads, *logvar, glv);
                }
                Op::SumAxis2(a) => {
                    let va = &nodes[a.0].value;
                    let (m0, m1, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut g = Tensor::zeros(vec![m0, m1, d]);
                    for i in 0..m0 {
                        for j in 0..m1 {
                            let gv = gout.at2(i, j);
                            for k in 0..d {
                                g.values_mut()[(i * m1 + j) * d + k] = gv;
                            }
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::LogSumExpAxis1Mat(a) => {
                    let va = &nodes[a.0].value;
                    let y = &node.value;
                    let (m0, m1) = (va.shape()[0], va.shape()[1]);
                    let mut g = Tensor::zeros(vec![m0, m1]);
                    for i in 0..m0 {
                        let gy = gout.values()[i];
                        let yi = y.values()[i];
                        for j in 0..m1 {
                            g.values_mut()[i * m1 + j] = gy * (va.at2(i, j) - yi).exp();
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::LogSumExpAxis1Cube(a) => {
                    let va = &nodes[a.0].value;
                    let y = &node.value;
                    let (m0, m1, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let mut g = Tensor::zeros(vec![m0, m1, d]);
                    for n in 0..m0 {
                        for j in 0..d {
                            let gy = gout.at2(n, j);
                            let ynj = y.at2(n, j);
                            for mm in 0..m1 {
                                g.values_mut()[(n * m1 + mm) * d + j] =
                                    gy * (va.at3(n, mm, j) - ynj).exp();
                            }
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::Diag(a) => {
                    let m = nodes[a.0].value.shape()[0];
                    let mut g = Tensor::zeros(vec![m, m]);
                    for i in 0..m {
                        g.values_mut()[i * m + i] = gout.values()[i];
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::StdNormalLogPdfSum(z) => {
                    let vz = &nodes[z.0].value;
                    let (m, d) = (vz.shape()[0], vz.shape()[1]);
                    let mut g = Tensor::zeros(vec![m, d]);
                    for i in 0..m {
                        let gy = gout.values()[i];
                        for j in 0..d {
                            g.values_mut()[i * d + j] = -gy * vz.at2(i, j);
                        }
                    }
                    accumulate(&nodes, &mut grads, *z, g);
                }
                Op::RowSum(a) => {
                    let va = &nodes[a.0].value;
                    let (m, d) = (va.shape()[0], va.shape()[1]);
                    let mut g = Tensor::zeros(vec![m, d]);
                    for i in 0..m {
                        let gy = gout.values()[i];
                        for j in 0..d {
                            g.values_mut()[i * d + j] = gy;
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g);
                }
                Op::MeanAll(a) => {
                    let va = &nodes[a.0].value;
                    let gv = gout.item() / va.len() as f64;
                    let g = Tensor::new(va.shape().to_vec(), vec![gv; va.len()])?;
                    accumulate(&nodes, &mut grads, *a, g);
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn check_dense_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::shape("(B,in) and (out,in)".to_string(), "other rank".to_string()));
    }
    if x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
        return Err(Error::shape(
            format!("in = {}, bias = ({})", w.shape()[1], w.shape()[0]),
            format!("x {:?}, b {:?}", x.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn ewise(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = g
        .values()
        .iter()
        .zip(v.values())
        .map(|(&gv, &vv)| f(gv, vv))
        .collect();
    Tensor::new(g.shape().to_vec(), values).unwrap()
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    mask: Option<&Tensor>,
) -> (Tensor, Tensor, Tensor) {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = w.shape()[0];
    // Fold the mask into the weights up front and into the weight gradient at
    // the end, keeping the batch loop free of per-element mask reads.
    let weights: Vec<f64> = match mask {
        None => w.values().to_vec(),
        Some(m) => w
            .values()
            .iter()
            .zip(m.values())
            .map(|(wi, mi)| wi * mi)
            .collect(),
    };
    let mut gx = Tensor::zeros(vec![batch, n_in]);
    let mut gw = Tensor::zeros(vec![n_out, n_in]);
    let mut gb = Tensor::zeros(vec![n_out]);
    let gxv = gx.values_mut();
    let gwv = gw.values_mut();
    let gbv = gb.values_mut();
    for bi in 0..batch {
        let xrow = &x.values()[bi * n_in..(bi + 1) * n_in];
        let grow = &gout.values()[bi * n_out..(bi + 1) * n_out];
        let gxrow = &mut gxv[bi * n_in..(bi + 1) * n_in];
        for (o, &go) in grow.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            gbv[o] += go;
            let wrow = &weights[o * n_in..(o + 1) * n_in];
            let gwrow = &mut gwv[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gxrow[i] += go * wrow[i];
                gwrow[i] += go * xrow[i];
            }
        }
    }
    if let Some(m) = mask {
        for (g, mi) in gw.values_mut().iter_mut().zip(m.values()) {
            *g *= mi;
        }
    }
    (gx, gw, gb)
}

fn conv_backward(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, c_in, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let mut gx = Tensor::zeros(vec![batch, c_in, n]);
    let mut gw = Tensor::zeros(vec![c_out, c_in, k]);
    let mut gb = Tensor::zeros(vec![c_out]);
    let src = kernels::wrap_table(n, k);
    let xv = x.values();
    let wv = w.values();
    let gv = gout.values();
    let gxv = gx.values_mut();
    let gwv = gw.values_mut();
    let gbv = gb.values_mut();
    for bi in 0..batch {
        for o in 0..c_out {
            let grow = &gv[(bi * c_out + o) * n..(bi * c_out + o + 1) * n];
            gbv[o] += grow.iter().sum::<f64>();
            for c in 0..c_in {
                let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                let xrow = &xv[(bi * c_in + c) * n..(bi * c_in + c + 1) * n];
                let gxrow = &mut gxv[(bi * c_in + c) * n..(bi * c_in + c + 1) * n];
                let gwrow = &mut gwv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                if k == 3 && n >= 2 {
                    let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                    // Wrap-around positions first, then a branch-free interior.
                    let g0 = grow[0];
                    gxrow[n - 1] += g0 * w0;
                    gxrow[0] += g0 * w1;
                    gxrow[1] += g0 * w2;
                    let gl = grow[n - 1];
                    gxrow[n - 2] += gl * w0;
                    gxrow[n - 1] += gl * w1;
                    gxrow[0] += gl * w2;
                    let mut a0 = g0 * xrow[n - 1] + gl * xrow[n - 2];
                    let mut a1 = g0 * xrow[0] + gl * xrow[n - 1];
                    let mut a2 = g0 * xrow[1] + gl * xrow[0];
                    for pos in 1..n - 1 {
                        let go = grow[pos];
                        gxrow[pos - 1] += go * w0;
                        gxrow[pos] += go * w1;
                        gxrow[pos + 1] += go * w2;
                        a0 += go * xrow[pos - 1];
                        a1 += go * xrow[pos];
                        a2 += go * xrow[pos + 1];
                    }
                    gwrow[0] += a0;
                    gwrow[1] += a1;
                    gwrow[2] += a2;
                    continue;
                }
                for (pos, &go) in grow.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (kk, &s) in src[pos * k..(pos + 1) * k].iter().enumerate() {
                        gxrow[s] += go * wrow[kk];
                        gwrow[kk] += go * xrow[s];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.values_mut().iter_mut().zip(delta.values()) {
                *e += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
