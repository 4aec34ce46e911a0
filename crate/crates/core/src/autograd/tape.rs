//! Recording tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the reverse sweep. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and [`Tape::backward`] walks
//! it once, back to front.

use std::fmt;
use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::{numel, Tensor};
use super::{GradError, ParamId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op with a user-supplied reverse rule.
///
/// The forward result is used verbatim; the reverse pass calls `backward`
/// with the saved inputs and output instead of differentiating `forward`.
pub trait CustomFn: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError>;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f32],
    ) -> Vec<Option<Vec<f32>>>;
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor, GradError> + Send + Sync;
type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync;

/// Closure-backed [`CustomFn`].
pub struct FnCustom {
    name: &'static str,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl FnCustom {
    pub fn new<F, B>(name: &'static str, forward: F, backward: B) -> Arc<Self>
    where
        F: Fn(&[&Tensor]) -> Result<Tensor, GradError> + Send + Sync + 'static,
        B: Fn(&[&Tensor], &Tensor, &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    {
        Arc::new(Self {
            name,
            forward: Box::new(forward),
            backward: Box::new(backward),
        })
    }
}

impl CustomFn for FnCustom {
    fn name(&self) -> &'static str {
        self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        (self.forward)(inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f32],
    ) -> Vec<Option<Vec<f32>>> {
        (self.backward)(inputs, output, grad_output)
    }
}

/// `[outer, features, inner]` view used by per-feature normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnLayout {
    pub outer: usize,
    pub features: usize,
    pub inner: usize,
}

impl BnLayout {
    /// Normalize each index of `axis` over all other axes.
    pub fn for_axis(shape: &[usize], axis: usize) -> Result<Self, GradError> {
        if axis >= shape.len() {
            return Err(GradError::InvalidArgument {
                op: "batchnorm",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(Self {
            outer: numel(&shape[..axis]),
            features: shape[axis],
            inner: numel(&shape[axis + 1..]),
        })
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_each_feature<F: FnMut(usize, usize)>(&self, mut f: F) {
        // f(feature, flat index)
        for o in 0..self.outer {
            for c in 0..self.features {
                let base = (o * self.features + c) * self.inner;
                for i in 0..self.inner {
                    f(c, base + i);
                }
            }
        }
    }
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        dims: [usize; 4],
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        take: usize,
    },
    Custom {
        inputs: Vec<Var>,
        f: Arc<dyn CustomFn>,
    },
    LifReset {
        u: Var,
        s: Var,
        beta: f32,
        v_reset: f32,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d_causal",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Custom { f, .. } => f.name(),
            Op::LifReset { .. } => "lif_reset",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// A tape has a single owner; it is consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn shape_err(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, GradError> {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, GradError> {
        self.leaf(value, false)
    }

    pub(crate) fn param_leaf(
        &mut self,
        value: Tensor,
        id: ParamId,
        requires_grad: bool,
    ) -> Result<Var, GradError> {
        self.push(value, Op::Leaf { param: Some(id) }, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, GradError> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var, GradError> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var, GradError> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, &bias);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.any_grad(&[x, b]);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut c);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), rg)
    }

    /// Batched product `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![0.0; g * m * n];
        for gi in 0..g {
            gemm(
                m,
                k,
                n,
                &da[gi * m * k..(gi + 1) * m * k],
                false,
                &db[gi * k * n..(gi + 1) * k * n],
                trans_b,
                0.0,
                &mut c[gi * m * n..(gi + 1) * m * n],
            );
        }
        let rg = self.any_grad(&[a, b]);
        self.push(
            Tensor::from_parts(vec![g, m, n], c),
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                dims: [g, m, k, n],
            },
            rg,
        )
    }

    /// `y = x W + b` on the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GradError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap_or(&1);
        if sx.is_empty() || sw.len() != 2 || sw[0] != d_in {
            return Err(shape_err("affine", format!("input {sx:?}, weight {sw:?}")));
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} for output width {d_out}", self.shape(b)),
                ));
            }
        }
        let rows = numel(&sx) / d_in;
        let mut y = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, self.value(x).data(), false, self.value(w).data(), false, 0.0, &mut y);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(d_out) {
                add_into(row, bias);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(Tensor::from_parts(shape, y), Op::Affine { x, w, b }, rg)
    }

    /// Causal dilated convolution along the last axis.
    ///
    /// `x` is `[n, c_in, t]` (or `[c_in, t]`), `w` is `[c_out, c_in, k]`.
    /// The input is left-padded with zeros so the output keeps length `t`
    /// and position `t` only reads inputs at positions `<= t`.
    pub fn conv1d_causal(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    ) -> Result<Var, GradError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if dilation == 0 {
            return Err(GradError::InvalidArgument {
                op: "conv1d_causal",
                detail: "dilation must be >= 1".into(),
            });
        }
        let (n, c_in, t) = match sx.as_slice() {
            [c, t] => (1, *c, *t),
            [n, c, t] => (*n, *c, *t),
            _ => return Err(shape_err("conv1d_causal", format!("input {sx:?}"))),
        };
        if sw.len() != 3 || sw[1] != c_in {
            return Err(shape_err("conv1d_causal", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d_causal", format!("bias {:?}", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![0.0f32; n * c_out * t];
        for ni in 0..n {
            for o in 0..c_out {
                let out = &mut y[(ni * c_out + o) * t..(ni * c_out + o + 1) * t];
                if let Some(bd) = bd {
                    out.fill(bd[o]);
                }
                for i in 0..c_in {
                    let xi = &xd[(ni * c_in + i) * t..(ni * c_in + i + 1) * t];
                    for j in 0..k {
                        let wv = wd[(o * c_in + i) * k + j];
                        let shift = (k - 1 - j) * dilation;
                        if shift >= t {
                            continue;
                        }
                        for (yo, xv) in out[shift..].iter_mut().zip(&xi[..t - shift]) {
                            *yo += wv * xv;
                        }
                    }
                }
            }
        }
        let shape = if sx.len() == 2 { vec![c_out, t] } else { vec![n, c_out, t] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(Tensor::from_parts(shape, y), Op::Conv1d { x, w, b, dilation }, rg)
    }

    /// Training-mode batch normalization.
    ///
    /// Returns the output plus the batch mean and unbiased batch variance per
    /// feature, for the caller to fold into running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>), GradError> {
        self.check_bn(x, gamma, beta, layout)?;
        let m = layout.count();
        if m < 2 {
            return Err(GradError::BatchTooSmall(m));
        }
        let xd = self.value(x).data();
        let f = layout.features;
        let mut sum = vec![0.0f64; f];
        layout.for_each_feature(|c, i| sum[c] += xd[i] as f64);
        let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
        let mut sq = vec![0.0f64; f];
        layout.for_each_feature(|c, i| {
            let d = xd[i] as f64 - mean[c];
            sq[c] += d * d;
        });
        let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite { op: "batchnorm" });
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut y = vec![0.0f32; xd.len()];
        layout.for_each_feature(|c, i| {
            let h = ((xd[i] as f64 - mean[c]) as f32) * inv_std[c];
            xhat[i] = h;
            y[i] = g[c] * h + b[c];
        });
        let shape = self.shape(x).to_vec();
        let batch_mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let unbiased: Vec<f32> = sq.iter().map(|s| (s / (m - 1) as f64) as f32).collect();
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((v, batch_mean, unbiased))
    }

    /// Inference-mode batch normalization with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var, GradError> {
        self.check_bn(x, gamma, beta, layout)?;
        if mean.len() != layout.features || var.len() != layout.features {
            return Err(shape_err("batchnorm_eval", "running statistics width".into()));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = vec![0.0f32; xd.len()];
        layout.for_each_feature(|c, i| {
            y[i] = g[c] * ((xd[i] - mean[c]) * inv_std[c]) + b[c];
        });
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                layout,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, layout: BnLayout) -> Result<(), GradError> {
        let n = numel(self.shape(x));
        if layout.outer * layout.features * layout.inner != n
            || self.shape(gamma) != [layout.features]
            || self.shape(beta) != [layout.features]
        {
            return Err(shape_err(
                "batchnorm",
                format!(
                    "input {:?}, layout {layout:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m as f32), Op::Mean(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = self.value(a).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                add_into(dst, &d[(o * len + l) * inner..(o * len + l + 1) * inner]);
            }
        }
        if mean {
            let inv = 1.0 / len as f32;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::from_parts(new_shape, out),
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
                mean,
            },
            rg,
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis(a, axis, false)
    }

    /// Averages out `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        if numel(shape) != numel(self.shape(a)) || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("perm {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in inputs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(v).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
            rg,
        )
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var, GradError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("stack", "no inputs".into()))?)
            .to_vec();
        let mut out = Vec::with_capacity(numel(&first) * inputs.len());
        for &v in inputs {
            if self.shape(v) != first.as_slice() {
                return Err(shape_err("stack", format!("{:?} vs {first:?}", self.shape(v))));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(&first);
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer: 1,
                inner: numel(&first),
                lens: vec![1; inputs.len()],
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, take: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || take == 0 || start + take > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}..{}) on axis {axis} of {shape:?}", start + take),
            ));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + start + take) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = take;
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice {
                a,
                outer,
                len,
                inner,
                start,
                take,
            },
            rg,
        )
    }

    /// Selects index `i` of `axis`, dropping the axis.
    pub fn select(&mut self, a: Var, axis: usize, i: usize) -> Result<Var, GradError> {
        let s = self.slice(a, axis, i, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            return Ok(s);
        }
        self.reshape(s, &shape)
    }

    pub fn custom(&mut self, f: Arc<dyn CustomFn>, inputs: &[Var]) -> Result<Var, GradError> {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            f.forward(&vals)?
        };
        let rg = self.any_grad(inputs);
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            rg,
        )
    }

    /// Post-spike membrane update `v_reset * s + (1 - s) * beta * u`.
    ///
    /// Differentiated exactly with respect to both `u` and `s`.
    pub fn lif_reset(&mut self, u: Var, s: Var, beta: f32, v_reset: f32) -> Result<Var, GradError> {
        self.same_shape("lif_reset", u, s)?;
        let out = self.zip_map(u, s, |uv, sv| v_reset * sv + (1.0 - sv) * beta * uv);
        let rg = self.any_grad(&[u, s]);
        self.push(out, Op::LifReset { u, s, beta, v_reset }, rg)
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, GradError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(GradError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(GradError::DetachedLoss);
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backward_node(nodes, node, Var(idx), g, &mut grads, &mut leaves);
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    me: Var,
    g: Vec<f32>,
    grads: &mut [Option<Vec<f32>>],
    leaves: &mut Vec<LeafGrad>,
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf { param } => {
            leaves.push(LeafGrad {
                var: me,
                param: *param,
                grad: g,
            });
        }
        Op::Add(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                add_into(s, &g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                add_into(s, &g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                add_into(s, &g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                s.iter_mut().zip(&g).for_each(|(d, gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                let bv = val(*b);
                for ((d, gv), bv) in s.iter_mut().zip(&g).zip(bv) {
                    *d += gv * bv;
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                let av = val(*a);
                for ((d, gv), av) in s.iter_mut().zip(&g).zip(av) {
                    *d += gv * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(grads, nodes, *a) {
                s.iter_mut().zip(&g).for_each(|(d, gv)| *d += c * gv);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                add_into(s, &g);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(s) = slot(grads, nodes, *x) {
                add_into(s, &g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                let n = s.len();
                for row in g.chunks(n) {
                    add_into(s, row);
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(s) = slot(grads, nodes, *a) {
                gemm(m, n, k, &g, false, val(*b), true, 1.0, s);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                gemm(k, m, n, val(*a), true, &g, false, 1.0, s);
            }
        }
        Op::BatchMatMul {
            a,
            b,
            trans_b,
            dims: [groups, m, k, n],
        } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(s) = slot(grads, nodes, *a) {
                let bv = val(*b);
                for gi in 0..*groups {
                    // dA = dC * op(B)^T
                    gemm(
                        m,
                        n,
                        k,
                        &g[gi * m * n..(gi + 1) * m * n],
                        false,
                        &bv[gi * k * n..(gi + 1) * k * n],
                        !*trans_b,
                        1.0,
                        &mut s[gi * m * k..(gi + 1) * m * k],
                    );
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                let av = val(*a);
                for gi in 0..*groups {
                    let ga = &av[gi * m * k..(gi + 1) * m * k];
                    let gc = &g[gi * m * n..(gi + 1) * m * n];
                    let dst = &mut s[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // B stored [n, k]: dB = dC^T A
                        gemm(n, m, k, gc, true, ga, false, 1.0, dst);
                    } else {
                        gemm(k, m, n, ga, true, gc, false, 1.0, dst);
                    }
                }
            }
        }
        Op::Affine { x, w, b } => {
            let sw = nodes[w.0].value.shape();
            let (d_in, d_out) = (sw[0], sw[1]);
            let rows = g.len() / d_out;
            if let Some(s) = slot(grads, nodes, *x) {
                gemm(rows, d_out, d_in, &g, false, val(*w), true, 1.0, s);
            }
            if let Some(s) = slot(grads, nodes, *w) {
                gemm(d_in, rows, d_out, val(*x), true, &g, false, 1.0, s);
            }
            if let Some(b) = b {
                if let Some(s) = slot(grads, nodes, *b) {
                    for row in g.chunks(d_out) {
                        add_into(s, row);
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, dilation } => {
            let sw = nodes[w.0].value.shape();
            let (c_out, c_in, k) = (sw[0], sw[1], sw[2]);
            let t = *nodes[x.0].value.shape().last().unwrap();
            let n = g.len() / (c_out * t);
            let xd = val(*x);
            let wd = val(*w);
            if let Some(s) = slot(grads, nodes, *x) {
                for ni in 0..n {
                    for o in 0..c_out {
                        let go = &g[(ni * c_out + o) * t..(ni * c_out + o + 1) * t];
                        for i in 0..c_in {
                            let gx = &mut s[(ni * c_in + i) * t..(ni * c_in + i + 1) * t];
                            for j in 0..k {
                                let wv = wd[(o * c_in + i) * k + j];
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t {
                                    continue;
                                }
                                for (d, gv) in gx[..t - shift].iter_mut().zip(&go[shift..]) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *w) {
                for ni in 0..n {
                    for o in 0..c_out {
                        let go = &g[(ni * c_out + o) * t..(ni * c_out + o + 1) * t];
                        for i in 0..c_in {
                            let xi = &xd[(ni * c_in + i) * t..(ni * c_in + i + 1) * t];
                            for j in 0..k {
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t {
                                    continue;
                                }
                                let acc: f32 =
                                    go[shift..].iter().zip(&xi[..t - shift]).map(|(a, b)| a * b).sum();
                                s[(o * c_in + i) * k + j] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(s) = slot(grads, nodes, *b) {
                    for ni in 0..n {
                        for o in 0..c_out {
                            s[o] += g[(ni * c_out + o) * t..(ni * c_out + o + 1) * t].iter().sum::<f32>();
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            inv_std,
        } => {
            let f = layout.features;
            let mut sum_g = vec![0.0f64; f];
            let mut sum_gx = vec![0.0f64; f];
            layout.for_each_feature(|c, i| {
                sum_g[c] += g[i] as f64;
                sum_gx[c] += (g[i] * xhat[i]) as f64;
            });
            if let Some(s) = slot(grads, nodes, *gamma) {
                s.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += *v as f32);
            }
            if let Some(s) = slot(grads, nodes, *beta) {
                s.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += *v as f32);
            }
            if let Some(s) = slot(grads, nodes, *x) {
                let gam = val(*gamma);
                let m = layout.count() as f32;
                // dx = gamma * inv_std / m * (m*g - sum(g) - xhat * sum(g*xhat))
                layout.for_each_feature(|c, i| {
                    let term = m * g[i] - sum_g[c] as f32 - xhat[i] * sum_gx[c] as f32;
                    s[i] += gam[c] * inv_std[c] / m * term;
                });
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            layout,
            mean,
            inv_std,
        } => {
            let xd = val(*x);
            let gam = val(*gamma);
            if let Some(s) = slot(grads, nodes, *gamma) {
                layout.for_each_feature(|c, i| s[c] += g[i] * (xd[i] - mean[c]) * inv_std[c]);
            }
            if let Some(s) = slot(grads, nodes, *beta) {
                layout.for_each_feature(|c, i| s[c] += g[i]);
            }
            if let Some(s) = slot(grads, nodes, *x) {
                layout.for_each_feature(|c, i| s[i] += g[i] * gam[c] * inv_std[c]);
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                let v = g[0] / s.len() as f32;
                s.iter_mut().for_each(|d| *d += v);
            }
        }
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
            mean,
        } => {
            if let Some(s) = slot(grads, nodes, *a) {
                let scale = if *mean { 1.0 / *len as f32 } else { 1.0 };
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut s[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(src) {
                            *d += scale * gv;
                        }
                    }
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(s) = slot(grads, nodes, *a) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(&g, node.value.shape(), &inv);
                add_into(s, &back);
            }
        }
        Op::Concat {
            inputs,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&v, &l) in inputs.iter().zip(lens) {
                if let Some(s) = slot(grads, nodes, v) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                        add_into(&mut s[o * l * inner..(o + 1) * l * inner], src);
                    }
                }
                offset += l;
            }
        }
        Op::Slice {
            a,
            outer,
            len,
            inner,
            start,
            take,
        } => {
            if let Some(s) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    let src = &g[o * take * inner..(o + 1) * take * inner];
                    let dst = &mut s[(o * len + start) * inner..(o * len + start + take) * inner];
                    add_into(dst, src);
                }
            }
        }
        Op::Custom { inputs, f } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let input_grads = f.backward(&vals, &node.value, &g);
            for (&v, ig) in inputs.iter().zip(input_grads) {
                if let (Some(ig), Some(s)) = (ig, slot(grads, nodes, v)) {
                    add_into(s, &ig);
                }
            }
        }
        Op::LifReset { u, s: spikes, beta, v_reset } => {
            let uv = val(*u);
            let sv = val(*spikes);
            if let Some(s) = slot(grads, nodes, *u) {
                for ((d, gv), sv) in s.iter_mut().zip(&g).zip(sv) {
                    *d += gv * (1.0 - sv) * beta;
                }
            }
            if let Some(s) = slot(grads, nodes, *spikes) {
                for ((d, gv), uv) in s.iter_mut().zip(&g).zip(uv) {
                    *d += gv * (v_reset - beta * uv);
                }
            }
        }
    }
}

#[derive(Debug)]
struct LeafGrad {
    var: Var,
    param: Option<ParamId>,
    grad: Vec<f32>,
}

/// Gradients of every differentiable leaf reached from the loss.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<LeafGrad>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.leaves.iter().find(|l| l.var == v).map(|l| l.grad.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.leaves
            .iter()
            .filter_map(|l| l.param.map(|p| (p, l.grad.as_slice())))
    }
}
