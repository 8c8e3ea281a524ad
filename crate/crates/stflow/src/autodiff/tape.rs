use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tensor::MAX_RANK;
use super::{sigmoid_stable, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Work size above which an op parallelizes. Chunking below is a pure
/// function of the problem size, never of the thread count, so results are
/// bit-identical no matter how many workers run.
const PAR_WORK: usize = 1 << 15;

/// Number of partial buffers for parallel parameter-gradient reductions.
const REDUCE_CHUNKS: usize = 16;

enum Op<F: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    /// a + bias, bias broadcast over the trailing axis.
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// a * scale-vector, broadcast over the trailing axis.
    MulBias(TensorId, TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
    /// [..., m, k] x [k, n].
    Matmul(TensorId, TensorId),
    /// Left-multiplication of the node axis of `x: [B, T, N, C]` by a fixed
    /// `[N, N]` operator. `row_ptr`/`cols` index the operator's nonzeros.
    NodeMix {
        operator: TensorId,
        x: TensorId,
        row_ptr: Vec<u32>,
        cols: Vec<u32>,
    },
    /// Valid convolution along the time axis of `x: [B, T, N, C_in]`.
    Conv1dTime {
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    /// Gated linear unit over a channel split of the trailing axis.
    Glu(TensorId),
    Sum(TensorId),
    Scale(TensorId, F),
    Reshape(TensorId),
    Permute { x: TensorId, axes: Vec<usize> },
    MseLoss { pred: TensorId, target: TensorId },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    values: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// A tape is rebuilt for every forward pass. [`Tape::backward`] walks the
/// record in reverse creation order (which is reverse topological order,
/// since ops only reference earlier nodes) and accumulates gradients
/// additively across fan-out and across repeated backward calls.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a tensor as an input; it participates in backward when the
    /// tensor is flagged trainable.
    pub fn leaf(&mut self, t: &Tensor<F>) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Record a tensor that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<F>) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn value_tensor(&self, id: TensorId) -> Tensor<F> {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].values.clone())
            .expect("node shapes are validated on construction")
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    // ---- elementwise ----

    /// Elementwise sum; also accepts a trailing channel-bias vector on
    /// either side.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) == self.shape(b) {
            let values = zip_map(self.value(a), self.value(b), |x, y| x + y);
            debug_check_finite("add", &values);
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(self.shape(a).to_vec(), values, Op::Add(a, b), needs));
        }
        let (main, bias) = self.bias_pair("add", a, b)?;
        let c = *self.shape(main).last().unwrap();
        let values = broadcast_map(self.value(main), self.value(bias), c, |x, y| x + y);
        debug_check_finite("add", &values);
        let needs = self.needs(main) || self.needs(bias);
        Ok(self.push(
            self.shape(main).to_vec(),
            values,
            Op::AddBias(main, bias),
            needs,
        ))
    }

    /// Elementwise product; also accepts a trailing channel vector on
    /// either side.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) == self.shape(b) {
            let values = zip_map(self.value(a), self.value(b), |x, y| x * y);
            debug_check_finite("mul", &values);
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(self.shape(a).to_vec(), values, Op::Mul(a, b), needs));
        }
        let (main, bias) = self.bias_pair("mul", a, b)?;
        let c = *self.shape(main).last().unwrap();
        let values = broadcast_map(self.value(main), self.value(bias), c, |x, y| x * y);
        debug_check_finite("mul", &values);
        let needs = self.needs(main) || self.needs(bias);
        Ok(self.push(
            self.shape(main).to_vec(),
            values,
            Op::MulBias(main, bias),
            needs,
        ))
    }

    /// Resolve which operand is the broadcast trailing vector.
    fn bias_pair(&self, op: &str, a: TensorId, b: TensorId) -> Result<(TensorId, TensorId)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() == 1 && sa.len() > 1 && *sa.last().unwrap() == sb[0] {
            Ok((a, b))
        } else if sa.len() == 1 && sb.len() > 1 && *sb.last().unwrap() == sa[0] {
            Ok((b, a))
        } else {
            Err(Error::Shape(format!(
                "{op}: shapes {sa:?} and {sb:?} are neither equal nor a trailing-vector broadcast"
            )))
        }
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let values: Vec<F> = self.value(a).iter().map(|&x| sigmoid_stable(x)).collect();
        debug_check_finite("sigmoid", &values);
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), values, Op::Sigmoid(a), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let zero = F::zero();
        let values: Vec<F> = self
            .value(a)
            .iter()
            .map(|&x| if x > zero { x } else { zero })
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), values, Op::Relu(a), needs)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = F::zero();
        for &v in self.value(a) {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(vec![], vec![acc], Op::Sum(a), needs)
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let values: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), values, Op::Scale(a, c), needs)
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.len() > MAX_RANK || numel != self.value(a).len() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(a)
            )));
        }
        let values = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), values, Op::Reshape(a), needs))
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Shape(format!(
                "permute: {axes:?} is not a permutation of the axes of {:?}",
                self.shape(a)
            )));
        }
        let src_shape = self.shape(a).to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&ax| src_shape[ax]).collect();
        let values = permute_copy(self.value(a), &src_shape, axes);
        let needs = self.needs(a);
        Ok(self.push(
            out_shape,
            values,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    // ---- linear algebra ----

    /// `a: [..., m, k]` times `b: [k, n]`, batched over the leading axes of `a`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul: want [..., m, k] x [k, n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[0], sb[1]);
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {sa:?} x {sb:?}"
            )));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);

        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![F::zero(); lead * m * n];
        let work = lead * m * n * k;
        if work > PAR_WORK && lead > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(|(l, dst)| {
                matmul_mk_kn(&av[l * m * k..(l + 1) * m * k], bv, m, k, n, dst);
            });
        } else {
            for l in 0..lead {
                matmul_mk_kn(
                    &av[l * m * k..(l + 1) * m * k],
                    bv,
                    m,
                    k,
                    n,
                    &mut out[l * m * n..(l + 1) * m * n],
                );
            }
        }
        debug_check_finite("matmul", &out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, out, Op::Matmul(a, b), needs))
    }

    /// Apply a fixed `[N, N]` operator along the node axis of `x: [B, T, N, C]`:
    /// `out[b, t, i, c] = sum_j op[i, j] * x[b, t, j, c]`.
    pub fn node_mix(&mut self, operator: TensorId, x: TensorId) -> Result<TensorId> {
        let (so, sx) = (self.shape(operator), self.shape(x));
        if so.len() != 2 || so[0] != so[1] || sx.len() != 4 || sx[2] != so[0] {
            return Err(Error::Shape(format!(
                "node_mix: want [n, n] over [b, t, n, c], got {so:?} over {sx:?}"
            )));
        }
        let n = so[0];
        let c = sx[3];
        let slices = sx[0] * sx[1];

        // Sparse index over the operator's nonzeros; with a thresholded
        // Gaussian adjacency most entries are zero.
        let ov = self.value(operator);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0u32);
        for i in 0..n {
            for j in 0..n {
                if ov[i * n + j] != F::zero() {
                    cols.push(j as u32);
                }
            }
            row_ptr.push(cols.len() as u32);
        }

        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        let work = slices * cols.len() * c;
        let apply =
            |slice_x: &[F], dst: &mut [F]| node_mix_slice(ov, &row_ptr, &cols, slice_x, n, c, dst);
        if work > PAR_WORK && slices > 1 {
            out.par_chunks_mut(n * c)
                .zip(xv.par_chunks(n * c))
                .for_each(|(dst, src)| apply(src, dst));
        } else {
            for (dst, src) in out.chunks_mut(n * c).zip(xv.chunks(n * c)) {
                apply(src, dst);
            }
        }
        debug_check_finite("node_mix", &out);
        let needs = self.needs(operator) || self.needs(x);
        Ok(self.push(
            sx.to_vec(),
            out,
            Op::NodeMix {
                operator,
                x,
                row_ptr,
                cols,
            },
            needs,
        ))
    }

    /// Valid (no-padding) convolution along time, applied independently at
    /// every node: `x: [B, T, N, C_in]`, `kernel: [Kt, C_in, C_out]`,
    /// `bias: [C_out]` producing `[B, T - Kt + 1, N, C_out]`.
    pub fn conv1d_time(&mut self, x: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 4 || sk.len() != 3 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "conv1d_time: want x [b, t, n, c_in], kernel [kt, c_in, c_out], bias [c_out]; got {sx:?}, {sk:?}, {sb:?}"
            )));
        }
        let (b, t, n, c_in) = (sx[0], sx[1], sx[2], sx[3]);
        let (kt, kc_in, c_out) = (sk[0], sk[1], sk[2]);
        if kc_in != c_in || sb[0] != c_out {
            return Err(Error::Shape(format!(
                "conv1d_time: channel mismatch, x {sx:?} vs kernel {sk:?} vs bias {sb:?}"
            )));
        }
        if t < kt {
            return Err(Error::Shape(format!(
                "conv1d_time: time axis {t} shorter than kernel {kt}"
            )));
        }
        let t_out = t - kt + 1;
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let mut out = vec![F::zero(); b * t_out * n * c_out];
        let work = b * t_out * n * kt * c_in * c_out;
        let run = |bi: usize, dst: &mut [F]| {
            conv_forward_one(
                &xv[bi * t * n * c_in..(bi + 1) * t * n * c_in],
                kv,
                bv,
                t,
                n,
                c_in,
                kt,
                c_out,
                dst,
            );
        };
        if work > PAR_WORK && b > 1 {
            out.par_chunks_mut(t_out * n * c_out)
                .enumerate()
                .for_each(|(bi, dst)| run(bi, dst));
        } else {
            for (bi, dst) in out.chunks_mut(t_out * n * c_out).enumerate() {
                run(bi, dst);
            }
        }
        debug_check_finite("conv1d_time", &out);
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![b, t_out, n, c_out],
            out,
            Op::Conv1dTime { x, kernel, bias },
            needs,
        ))
    }

    /// Gated linear unit: split the trailing axis into halves P and Q,
    /// output `P * sigmoid(Q)`.
    pub fn glu(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let Some(&last) = sa.last() else {
            return Err(Error::Shape("glu: scalar input has no channel axis".into()));
        };
        if last % 2 != 0 {
            return Err(Error::Shape(format!(
                "glu: trailing axis of {sa:?} must be even"
            )));
        }
        let c = last / 2;
        let av = self.value(a);
        let rows = av.len() / last;
        let mut out = vec![F::zero(); rows * c];
        for r in 0..rows {
            let src = &av[r * last..(r + 1) * last];
            let dst = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                dst[i] = src[i] * sigmoid_stable(src[c + i]);
            }
        }
        debug_check_finite("glu", &out);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = c;
        let needs = self.needs(a);
        Ok(self.push(out_shape, out, Op::Glu(a), needs))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "mse_loss: prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let pv = self.value(pred);
        let tv = self.value(target);
        let mut acc = F::zero();
        for (&p, &t) in pv.iter().zip(tv) {
            let d = p - t;
            acc += d * d;
        }
        let count = F::from_f64(pv.len() as f64);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            vec![],
            vec![acc / count],
            Op::MseLoss { pred, target },
            needs,
        ))
    }

    // ---- backward ----

    /// Propagate d(loss)/d(node) to every node reachable from `loss` that
    /// needs gradients. Repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Per-call adjoints; folded into the persistent accumulators at the
        // end so repeated backward calls add up instead of re-propagating.
        let mut pass: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                pass[idx] = None;
                continue;
            }
            let Some(g) = pass[idx].take() else { continue };
            self.propagate(idx, &g, &mut pass);
            match self.grads[idx].as_mut() {
                Some(acc) => {
                    for (dst, src) in acc.iter_mut().zip(&g) {
                        *dst += *src;
                    }
                }
                None => self.grads[idx] = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[F], pass: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        // Adds `write(buf)` into the per-pass adjoint of `id` when it
        // participates in backward.
        macro_rules! into {
            ($id:expr, $write:expr) => {
                if self.nodes[$id.0].needs_grad {
                    let len = self.nodes[$id.0].values.len();
                    let buf = pass[$id.0].get_or_insert_with(|| vec![F::zero(); len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($write)(buf.as_mut_slice());
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                into!(a, |buf: &mut [F]| add_into(buf, g));
                into!(b, |buf: &mut [F]| add_into(buf, g));
            }
            Op::AddBias(a, bias) => {
                into!(a, |buf: &mut [F]| add_into(buf, g));
                let c = self.nodes[bias.0].values.len();
                into!(bias, |buf: &mut [F]| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                into!(a, |buf: &mut [F]| mul_add_into(buf, g, bv));
                into!(b, |buf: &mut [F]| mul_add_into(buf, g, av));
            }
            Op::MulBias(a, bias) => {
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[bias.0].values);
                let c = bv.len();
                into!(a, |buf: &mut [F]| {
                    for (brow, grow) in buf.chunks_mut(c).zip(g.chunks(c)) {
                        for i in 0..c {
                            brow[i] += grow[i] * bv[i];
                        }
                    }
                });
                into!(bias, |buf: &mut [F]| {
                    for (arow, grow) in av.chunks(c).zip(g.chunks(c)) {
                        for i in 0..c {
                            buf[i] += grow[i] * arow[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.values;
                into!(a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i] * (F::one() - out[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].values;
                into!(a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        if xv[i] > F::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                into!(a, |buf: &mut [F]| {
                    for v in buf.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                into!(a, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }
            Op::Reshape(a) => {
                into!(a, |buf: &mut [F]| add_into(buf, g));
            }
            Op::Permute { x, axes } => {
                // Route the adjoint back through the inverse permutation.
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_copy(g, &node.shape, &inverse);
                into!(x, |buf: &mut [F]| add_into(buf, &back));
            }
            Op::Matmul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = self.nodes[b.0].shape[1];
                let lead: usize = sa[..sa.len() - 2].iter().product();
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                into!(a, |buf: &mut [F]| {
                    matmul_grad_a(g, bv, lead, m, k, n, buf);
                });
                into!(b, |buf: &mut [F]| {
                    matmul_grad_b(av, g, lead, m, k, n, buf);
                });
            }
            Op::NodeMix {
                operator,
                x,
                row_ptr,
                cols,
            } => {
                let n = self.nodes[operator.0].shape[0];
                let c = *self.nodes[x.0].shape.last().unwrap();
                let slices = self.nodes[x.0].values.len() / (n * c);
                let ov = &self.nodes[operator.0].values;
                let xv = &self.nodes[x.0].values;
                into!(x, |buf: &mut [F]| {
                    node_mix_grad_x(ov, row_ptr, cols, g, slices, n, c, buf);
                });
                // The operator is a constant in the model; dense fallback
                // keeps this correct if a caller ever trains it.
                into!(operator, |buf: &mut [F]| {
                    for s in 0..slices {
                        let gs = &g[s * n * c..(s + 1) * n * c];
                        let xs = &xv[s * n * c..(s + 1) * n * c];
                        for i in 0..n {
                            for j in 0..n {
                                let mut acc = F::zero();
                                for ch in 0..c {
                                    acc += gs[i * c + ch] * xs[j * c + ch];
                                }
                                buf[i * n + j] += acc;
                            }
                        }
                    }
                });
            }
            Op::Conv1dTime { x, kernel, bias } => {
                let sx = &self.nodes[x.0].shape;
                let sk = &self.nodes[kernel.0].shape;
                let (b, t, n, c_in) = (sx[0], sx[1], sx[2], sx[3]);
                let (kt, c_out) = (sk[0], sk[2]);
                let t_out = t - kt + 1;
                let xv = &self.nodes[x.0].values;
                let kv = &self.nodes[kernel.0].values;
                into!(x, |buf: &mut [F]| {
                    conv_grad_x(g, kv, b, t, n, c_in, kt, c_out, t_out, buf);
                });
                into!(kernel, |buf: &mut [F]| {
                    conv_grad_kernel(xv, g, b, t, n, c_in, kt, c_out, t_out, buf);
                });
                into!(bias, |buf: &mut [F]| {
                    for row in g.chunks(c_out) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Glu(a) => {
                let av = &self.nodes[a.0].values;
                let c = *node.shape.last().unwrap();
                let two_c = 2 * c;
                into!(a, |buf: &mut [F]| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let src = &av[r * two_c..(r + 1) * two_c];
                        let dst = &mut buf[r * two_c..(r + 1) * two_c];
                        for i in 0..c {
                            let sig = sigmoid_stable(src[c + i]);
                            dst[i] += grow[i] * sig;
                            dst[c + i] += grow[i] * src[i] * sig * (F::one() - sig);
                        }
                    }
                });
            }
            Op::MseLoss { pred, target } => {
                let pv = &self.nodes[pred.0].values;
                let tv = &self.nodes[target.0].values;
                let scale = g[0] * F::from_f64(2.0 / pv.len() as f64);
                into!(pred, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] += scale * (pv[i] - tv[i]);
                    }
                });
                into!(target, |buf: &mut [F]| {
                    for i in 0..buf.len() {
                        buf[i] -= scale * (pv[i] - tv[i]);
                    }
                });
            }
        }
    }
}

// ---- kernels ----

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn broadcast_map<F: Scalar>(main: &[F], bias: &[F], c: usize, f: impl Fn(F, F) -> F) -> Vec<F> {
    let mut out = Vec::with_capacity(main.len());
    for row in main.chunks(c) {
        for i in 0..c {
            out.push(f(row[i], bias[i]));
        }
    }
    out
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mul_add_into<F: Scalar>(dst: &mut [F], g: &[F], other: &[F]) {
    for i in 0..dst.len() {
        dst[i] += g[i] * other[i];
    }
}

/// `dst += a (m x k) * b (k x n)`, dst assumed zeroed by caller.
fn matmul_mk_kn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, dst: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &mut dst[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                drow[j] += av * brow[j];
            }
        }
    }
}

fn matmul_grad_a<F: Scalar>(g: &[F], b: &[F], lead: usize, m: usize, k: usize, n: usize, da: &mut [F]) {
    let run = |l: usize, da_l: &mut [F]| {
        let gl = &g[l * m * n..(l + 1) * m * n];
        for i in 0..m {
            let grow = &gl[i * n..(i + 1) * n];
            let drow = &mut da_l[i * k..(i + 1) * k];
            for kk in 0..k {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = F::zero();
                for j in 0..n {
                    acc += grow[j] * brow[j];
                }
                drow[kk] += acc;
            }
        }
    };
    if lead * m * n * k > PAR_WORK && lead > 1 {
        da.par_chunks_mut(m * k).enumerate().for_each(|(l, d)| run(l, d));
    } else {
        for (l, d) in da.chunks_mut(m * k).enumerate() {
            run(l, d);
        }
    }
}

fn matmul_grad_b<F: Scalar>(a: &[F], g: &[F], lead: usize, m: usize, k: usize, n: usize, db: &mut [F]) {
    let partial = |range: std::ops::Range<usize>| {
        let mut acc = vec![F::zero(); k * n];
        for l in range {
            let al = &a[l * m * k..(l + 1) * m * k];
            let gl = &g[l * m * n..(l + 1) * m * n];
            for i in 0..m {
                let arow = &al[i * k..(i + 1) * k];
                let grow = &gl[i * n..(i + 1) * n];
                for kk in 0..k {
                    let dst = &mut acc[kk * n..(kk + 1) * n];
                    let av = arow[kk];
                    for j in 0..n {
                        dst[j] += av * grow[j];
                    }
                }
            }
        }
        acc
    };
    if lead * m * n * k > PAR_WORK && lead > 1 {
        // Fixed chunking keeps the reduction order independent of the
        // worker count.
        let chunk = lead.div_ceil(REDUCE_CHUNKS);
        let ranges: Vec<_> = (0..lead.div_ceil(chunk))
            .map(|ci| ci * chunk..((ci + 1) * chunk).min(lead))
            .collect();
        let partials: Vec<Vec<F>> = ranges.into_par_iter().map(partial).collect();
        for p in partials {
            add_into(db, &p);
        }
    } else {
        let p = partial(0..lead);
        add_into(db, &p);
    }
}

fn node_mix_slice<F: Scalar>(
    ov: &[F],
    row_ptr: &[u32],
    cols: &[u32],
    x: &[F],
    n: usize,
    c: usize,
    dst: &mut [F],
) {
    for i in 0..n {
        let drow = &mut dst[i * c..(i + 1) * c];
        for e in row_ptr[i] as usize..row_ptr[i + 1] as usize {
            let j = cols[e] as usize;
            let w = ov[i * n + j];
            let xrow = &x[j * c..(j + 1) * c];
            for ch in 0..c {
                drow[ch] += w * xrow[ch];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn node_mix_grad_x<F: Scalar>(
    ov: &[F],
    row_ptr: &[u32],
    cols: &[u32],
    g: &[F],
    slices: usize,
    n: usize,
    c: usize,
    dx: &mut [F],
) {
    let run = |s: usize, dxs: &mut [F]| {
        let gs = &g[s * n * c..(s + 1) * n * c];
        for i in 0..n {
            let grow = &gs[i * c..(i + 1) * c];
            for e in row_ptr[i] as usize..row_ptr[i + 1] as usize {
                let j = cols[e] as usize;
                let w = ov[i * n + j];
                let drow = &mut dxs[j * c..(j + 1) * c];
                for ch in 0..c {
                    drow[ch] += w * grow[ch];
                }
            }
        }
    };
    if slices * cols.len() * c > PAR_WORK && slices > 1 {
        dx.par_chunks_mut(n * c).enumerate().for_each(|(s, d)| run(s, d));
    } else {
        for (s, d) in dx.chunks_mut(n * c).enumerate() {
            run(s, d);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_one<F: Scalar>(
    x: &[F],
    kernel: &[F],
    bias: &[F],
    t: usize,
    n: usize,
    c_in: usize,
    kt: usize,
    c_out: usize,
    out: &mut [F],
) {
    let t_out = t - kt + 1;
    for ti in 0..t_out {
        for ni in 0..n {
            let dst = &mut out[(ti * n + ni) * c_out..(ti * n + ni + 1) * c_out];
            dst.copy_from_slice(bias);
            for tau in 0..kt {
                let src = &x[((ti + tau) * n + ni) * c_in..((ti + tau) * n + ni + 1) * c_in];
                for (i, &xi) in src.iter().enumerate() {
                    let krow = &kernel[(tau * c_in + i) * c_out..(tau * c_in + i + 1) * c_out];
                    for o in 0..c_out {
                        dst[o] += xi * krow[o];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_x<F: Scalar>(
    g: &[F],
    kernel: &[F],
    b: usize,
    t: usize,
    n: usize,
    c_in: usize,
    kt: usize,
    c_out: usize,
    t_out: usize,
    dx: &mut [F],
) {
    let run = |bi: usize, dxb: &mut [F]| {
        let gb = &g[bi * t_out * n * c_out..(bi + 1) * t_out * n * c_out];
        for ti in 0..t_out {
            for ni in 0..n {
                let grow = &gb[(ti * n + ni) * c_out..(ti * n + ni + 1) * c_out];
                for tau in 0..kt {
                    let dst = &mut dxb[((ti + tau) * n + ni) * c_in..((ti + tau) * n + ni + 1) * c_in];
                    for i in 0..c_in {
                        let krow = &kernel[(tau * c_in + i) * c_out..(tau * c_in + i + 1) * c_out];
                        let mut acc = F::zero();
                        for o in 0..c_out {
                            acc += grow[o] * krow[o];
                        }
                        dst[i] += acc;
                    }
                }
            }
        }
    };
    let work = b * t_out * n * kt * c_in * c_out;
    if work > PAR_WORK && b > 1 {
        dx.par_chunks_mut(t * n * c_in).enumerate().for_each(|(bi, d)| run(bi, d));
    } else {
        for (bi, d) in dx.chunks_mut(t * n * c_in).enumerate() {
            run(bi, d);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_kernel<F: Scalar>(
    x: &[F],
    g: &[F],
    b: usize,
    t: usize,
    n: usize,
    c_in: usize,
    kt: usize,
    c_out: usize,
    t_out: usize,
    dk: &mut [F],
) {
    let partial = |range: std::ops::Range<usize>| {
        let mut acc = vec![F::zero(); kt * c_in * c_out];
        for bi in range {
            let xb = &x[bi * t * n * c_in..(bi + 1) * t * n * c_in];
            let gb = &g[bi * t_out * n * c_out..(bi + 1) * t_out * n * c_out];
            for ti in 0..t_out {
                for ni in 0..n {
                    let grow = &gb[(ti * n + ni) * c_out..(ti * n + ni + 1) * c_out];
                    for tau in 0..kt {
                        let src = &xb[((ti + tau) * n + ni) * c_in..((ti + tau) * n + ni + 1) * c_in];
                        for (i, &xi) in src.iter().enumerate() {
                            let dst = &mut acc[(tau * c_in + i) * c_out..(tau * c_in + i + 1) * c_out];
                            for o in 0..c_out {
                                dst[o] += xi * grow[o];
                            }
                        }
                    }
                }
            }
        }
        acc
    };
    let work = b * t_out * n * kt * c_in * c_out;
    if work > PAR_WORK && b > 1 {
        let chunk = b.div_ceil(REDUCE_CHUNKS);
        let ranges: Vec<_> = (0..b.div_ceil(chunk))
            .map(|ci| ci * chunk..((ci + 1) * chunk).min(b))
            .collect();
        let partials: Vec<Vec<F>> = ranges.into_par_iter().map(partial).collect();
        for p in partials {
            add_into(dk, &p);
        }
    } else {
        let p = partial(0..b);
        add_into(dk, &p);
    }
}

fn permute_copy<F: Scalar>(src: &[F], src_shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = src_shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let mut src_strides = vec![1usize; rank];
    for ax in (0..rank - 1).rev() {
        src_strides[ax] = src_strides[ax + 1] * src_shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| src_shape[ax]).collect();
    let out_strides_in_src: Vec<usize> = axes.iter().map(|&ax| src_strides[ax]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; rank];
    loop {
        let src_flat: usize = index
            .iter()
            .zip(&out_strides_in_src)
            .map(|(&i, &s)| i * s)
            .sum();
        out.push(src[src_flat]);
        // Odometer increment over the output index space.
        let mut ax = rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
}

/// Debug-mode invariant: finite inputs never produce a non-finite forward
/// output. Saturating ops (relu, sum, scale) map non-finite in to
/// non-finite out and are left unchecked.
#[cfg(debug_assertions)]
fn debug_check_finite<F: Scalar>(op: &str, values: &[F]) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "{op}: non-finite value in forward output"
    );
}

#[cfg(not(debug_assertions))]
fn debug_check_finite<F: Scalar>(_op: &str, _values: &[F]) {}
