//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a define-by-run Wengert tape: every operation records a node
//! holding its forward value and enough metadata to push gradients back to its
//! inputs. Tensors are handled through `TensorId` indices into the tape arena,
//! so graphs are rebuilt from scratch for every forward pass.
//!
//! Gradients accumulate additively: calling `backward` twice without clearing
//! doubles the stored leaf gradients. Broadcasting is deliberately minimal
//! (scalar constants, a trailing-suffix rule for bias addition, and explicit
//! `expand_to`); everything else must match shapes exactly.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense row-major f64 tensor. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    tape_id: Option<TensorId>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value in tensor of shape {:?}",
                shape
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    /// Mark this tensor as a trainable leaf when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Tape node this tensor was registered under, if any.
    pub fn tape_id(&self) -> Option<TensorId> {
        self.tape_id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element access for rank-4 tensors, mostly for tests and rendering.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cs + c) * hs + h) * ws + w]
    }
}

/// Convolution geometry captured at record time.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId, broadcast: bool },
    Sub { a: TensorId, b: TensorId, broadcast: bool },
    Mul { a: TensorId, b: TensorId, broadcast: bool },
    Neg { a: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: f64 },
    Matmul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, k: TensorId, dims: ConvDims },
    Pad2d { x: TensorId, pad: usize },
    Shift2d { x: TensorId, shifts: Vec<(i64, i64)> },
    MaskWindow { x: TensorId, origins: Vec<(usize, usize)>, win: (usize, usize) },
    AddChannelBias { x: TensorId, b: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Softplus { a: TensorId },
    Relu { a: TensorId },
    LeakyRelu { a: TensorId, slope: f64 },
    Ln { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    ChannelMean { a: TensorId },
    SampleMean { a: TensorId },
    RowSums { a: TensorId },
    ExpandTo { a: TensorId },
    ScalePerSample { a: TensorId, s: Vec<f64> },
    ShiftPerSample { a: TensorId },
    Reshape { a: TensorId },
    Narrow { a: TensorId, axis: usize, start: usize },
    ConcatCols { parts: Vec<TensorId> },
}

struct Node {
    tensor: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Arena of recorded operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Accumulated gradient with the node's shape attached. Absent gradients
    /// come back as zeros.
    pub fn grad_tensor(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.tensor.shape.clone(), g.clone()),
            None => Tensor::zeros(node.tensor.shape.clone()),
        }
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        tensor.tape_id = Some(id);
        self.nodes.push(Node {
            tensor,
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register an input tensor; it participates in gradients when marked
    /// `with_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise binary ops ---------------------------------------

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<bool> {
        let sa = &self.nodes[a.0].tensor.shape;
        let sb = &self.nodes[b.0].tensor.shape;
        if sa == sb {
            return Ok(false);
        }
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] && !sb.is_empty() {
            return Ok(true);
        }
        Err(Error::Shape(format!(
            "{} operands {:?} and {:?} are neither equal nor trailing-broadcastable",
            what, sa, sb
        )))
    }

    fn binary_forward(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(TensorId, TensorId, bool) -> Op,
    ) -> Result<TensorId> {
        let broadcast = self.binary_shapes(a, b, what)?;
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let mut out = Vec::with_capacity(da.len());
        if broadcast {
            let chunk = db.len();
            for block in da.chunks(chunk) {
                for (x, y) in block.iter().zip(db.iter()) {
                    out.push(f(*x, *y));
                }
            }
        } else {
            for (x, y) in da.iter().zip(db.iter()) {
                out.push(f(*x, *y));
            }
        }
        let shape = self.nodes[a.0].tensor.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), make(a, b, broadcast), needs))
    }

    /// Elementwise a + b; b may be a trailing suffix of a's shape.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "add", |x, y| x + y, |a, b, broadcast| Op::Add {
            a,
            b,
            broadcast,
        })
    }

    /// Elementwise a - b; b may be a trailing suffix of a's shape.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "sub", |x, y| x - y, |a, b, broadcast| Op::Sub {
            a,
            b,
            broadcast,
        })
    }

    /// Elementwise a * b; b may be a trailing suffix of a's shape.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "mul", |x, y| x * y, |a, b, broadcast| Op::Mul {
            a,
            b,
            broadcast,
        })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::from_parts(t.shape.clone(), t.data.iter().map(|v| -v).collect());
        let needs = self.needs(a);
        self.push(out, Op::Neg { a }, needs)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::from_parts(t.shape.clone(), t.data.iter().map(|v| v + c).collect());
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a }, needs)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::from_parts(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        let needs = self.needs(a);
        self.push(out, Op::MulScalar { a, c }, needs)
    }

    /// Elementwise square, recorded as `mul(a, a)`.
    pub fn square(&mut self, a: TensorId) -> Result<TensorId> {
        self.mul(a, a)
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product of [m,k] by [k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].tensor.shape.clone();
        let sb = self.nodes[b.0].tensor.shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].tensor.data,
            &self.nodes[b.0].tensor.data,
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// 2-D convolution of [N,C,H,W] by kernels [O,C,kh,kw] with zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let sx = self.nodes[x.0].tensor.shape.clone();
        let sk = self.nodes[k.0].tensor.shape.clone();
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
                sx, sk
            )));
        }
        if sx[1] != sk[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {:?}, kernel {:?}",
                sx, sk
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (batch, in_ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, k_h, k_w) = (sk[0], sk[2], sk[3]);
        if k_h == 0 || k_w == 0 || k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
            return Err(Error::Parameter(format!(
                "conv2d kernel {}x{} does not fit padded input {}x{} (pad {})",
                k_h,
                k_w,
                in_h + 2 * pad,
                in_w + 2 * pad,
                pad
            )));
        }
        let out_h = (in_h + 2 * pad - k_h) / stride + 1;
        let out_w = (in_w + 2 * pad - k_w) / stride + 1;
        let dims = ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad,
        };
        let mut out = vec![0.0; batch * out_ch * out_h * out_w];
        conv2d_forward(
            &self.nodes[x.0].tensor.data,
            &self.nodes[k.0].tensor.data,
            &mut out,
            &dims,
        );
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::from_parts(vec![batch, out_ch, out_h, out_w], out),
            Op::Conv2d { x, k, dims },
            needs,
        ))
    }

    // ---- spatial ops ---------------------------------------------------

    /// Zero-pad the two trailing spatial axes of an [N,C,H,W] tensor.
    pub fn pad2d(&mut self, x: TensorId, pad: usize) -> Result<TensorId> {
        let s = self.nodes[x.0].tensor.shape.clone();
        if s.len() != 4 {
            return Err(Error::Shape(format!("pad2d needs rank-4 input, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n * c {
            for y in 0..h {
                let src_off = (img * h + y) * w;
                let dst_off = (img * oh + y + pad) * ow + pad;
                out[dst_off..dst_off + w].copy_from_slice(&src[src_off..src_off + w]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Pad2d { x, pad },
            needs,
        ))
    }

    /// Integer-translate each sample of an [N,C,H,W] batch, filling with zeros.
    /// `shifts[n] = (dy, dx)` moves content toward higher indices.
    pub fn shift2d(&mut self, x: TensorId, shifts: &[(i64, i64)]) -> Result<TensorId> {
        let s = self.nodes[x.0].tensor.shape.clone();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "shift2d needs rank-4 input, got {:?}",
                s
            )));
        }
        if shifts.len() != s[0] {
            return Err(Error::Shape(format!(
                "shift2d got {} shifts for batch {}",
                shifts.len(),
                s[0]
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let (dy, dx) = shifts[b];
            for ch in 0..c {
                for y in 0..h as i64 {
                    let sy = y - dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for xpos in 0..w as i64 {
                        let sx = xpos - dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let dst = ((b * c + ch) * h + y as usize) * w + xpos as usize;
                        let srci = ((b * c + ch) * h + sy as usize) * w + sx as usize;
                        out[dst] = src[srci];
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::Shift2d {
                x,
                shifts: shifts.to_vec(),
            },
            needs,
        ))
    }

    /// Zero out a per-sample rectangular window of an [N,C,H,W] batch.
    /// `origins[n] = (y0, x0)` places a `win = (wh, ww)` window.
    pub fn mask_window(
        &mut self,
        x: TensorId,
        origins: &[(usize, usize)],
        win: (usize, usize),
    ) -> Result<TensorId> {
        let s = self.nodes[x.0].tensor.shape.clone();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "mask_window needs rank-4 input, got {:?}",
                s
            )));
        }
        if origins.len() != s[0] {
            return Err(Error::Shape(format!(
                "mask_window got {} origins for batch {}",
                origins.len(),
                s[0]
            )));
        }
        let (_n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (wh, ww) = win;
        for (b, &(y0, x0)) in origins.iter().enumerate() {
            if y0 + wh > h || x0 + ww > w {
                return Err(Error::Parameter(format!(
                    "mask_window sample {}: window {}x{} at ({},{}) exceeds {}x{}",
                    b, wh, ww, y0, x0, h, w
                )));
            }
        }
        let src = &self.nodes[x.0].tensor.data;
        let mut out = src.clone();
        for (b, &(y0, x0)) in origins.iter().enumerate() {
            for ch in 0..c {
                for y in y0..y0 + wh {
                    let off = ((b * c + ch) * h + y) * w + x0;
                    out[off..off + ww].fill(0.0);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::MaskWindow {
                x,
                origins: origins.to_vec(),
                win,
            },
            needs,
        ))
    }

    /// Add a per-channel bias [C] to an [N,C,H,W] tensor.
    pub fn add_channel_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.nodes[x.0].tensor.shape.clone();
        let sb = self.nodes[b.0].tensor.shape.clone();
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape(format!(
                "add_channel_bias needs [N,C,H,W] and [C], got {:?} and {:?}",
                sx, sb
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let bias = &self.nodes[b.0].tensor.data;
        let src = &self.nodes[x.0].tensor.data;
        let mut out = Vec::with_capacity(src.len());
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * plane;
                let bv = bias[ch];
                out.extend(src[off..off + plane].iter().map(|v| v + bv));
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::AddChannelBias { x, b },
            needs,
        ))
    }

    // ---- pointwise nonlinearities -------------------------------------

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(TensorId) -> Op,
    ) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::from_parts(t.shape.clone(), t.data.iter().map(|v| f(*v)).collect());
        let needs = self.needs(a);
        self.push(out, op(a), needs)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a })
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, softplus, |a| Op::Softplus { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |v| v.max(0.0), |a| Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        self.unary(
            a,
            |v| if v > 0.0 { v } else { slope * v },
            |a| Op::LeakyRelu { a, slope },
        )
    }

    /// Natural log; all inputs must be strictly positive.
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].tensor.data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Numeric(
                "ln requires strictly positive inputs".into(),
            ));
        }
        Ok(self.unary(a, f64::ln, |a| Op::Ln { a }))
    }

    // ---- reductions and broadcasts ------------------------------------

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].tensor.data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let mean = t.data.iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(mean), Op::MeanAll { a }, needs)
    }

    /// Per-pixel mean over the channel axis: [N,C,H,W] -> [N,1,H,W].
    pub fn channel_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].tensor.shape.clone();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "channel_mean needs rank-4 input, got {:?}",
                s
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = &self.nodes[a.0].tensor.data;
        let mut out = vec![0.0; n * plane];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * plane;
                for p in 0..plane {
                    out[img * plane + p] += src[off + p];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= c as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelMean { a },
            needs,
        ))
    }

    /// Per-sample mean over all non-batch axes, keeping rank:
    /// [N,d1,..,dk] -> [N,1,..,1].
    pub fn sample_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].tensor.shape.clone();
        if s.is_empty() {
            return Err(Error::Shape("sample_mean needs rank >= 1".into()));
        }
        let n = s[0];
        let inner = numel_of(&s[1..]);
        if inner == 0 {
            return Err(Error::Shape(format!("sample_mean of empty samples {:?}", s)));
        }
        let src = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            out.push(src[b * inner..(b + 1) * inner].iter().sum::<f64>() / inner as f64);
        }
        let mut shape = vec![n];
        shape.extend(std::iter::repeat(1).take(s.len() - 1));
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SampleMean { a },
            needs,
        ))
    }

    /// Row sums of an [N,F] matrix, keeping the column axis: -> [N,1].
    pub fn row_sums(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].tensor.shape.clone();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row_sums needs rank-2 input, got {:?}", s)));
        }
        let (n, f) = (s[0], s[1]);
        let src = &self.nodes[a.0].tensor.data;
        let out: Vec<f64> = (0..n)
            .map(|r| src[r * f..(r + 1) * f].iter().sum())
            .collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::RowSums { a }, needs))
    }

    /// Broadcast size-1 axes of `a` up to `target` (ranks must match).
    pub fn expand_to(&mut self, a: TensorId, target: &[usize]) -> Result<TensorId> {
        let s = self.nodes[a.0].tensor.shape.clone();
        if s.len() != target.len() {
            return Err(Error::Shape(format!(
                "expand_to rank mismatch: {:?} vs {:?}",
                s, target
            )));
        }
        for (i, (&have, &want)) in s.iter().zip(target.iter()).enumerate() {
            if have != want && have != 1 {
                return Err(Error::Shape(format!(
                    "expand_to axis {}: cannot expand {} to {}",
                    i, have, want
                )));
            }
        }
        let src = &self.nodes[a.0].tensor.data;
        let mut out = vec![0.0; numel_of(target)];
        for_each_expanded(&s, target, |src_idx, dst_idx| {
            out[dst_idx] = src[src_idx];
        });
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(target.to_vec(), out),
            Op::ExpandTo { a },
            needs,
        ))
    }

    /// Multiply every element of sample n by the constant `s[n]`.
    pub fn scale_per_sample(&mut self, a: TensorId, s: &[f64]) -> Result<TensorId> {
        let shape = self.nodes[a.0].tensor.shape.clone();
        if shape.is_empty() || shape[0] != s.len() {
            return Err(Error::Shape(format!(
                "scale_per_sample got {} factors for shape {:?}",
                s.len(),
                shape
            )));
        }
        let inner = numel_of(&shape[1..]);
        let src = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(src.len());
        for (b, &f) in s.iter().enumerate() {
            out.extend(src[b * inner..(b + 1) * inner].iter().map(|v| v * f));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ScalePerSample { a, s: s.to_vec() },
            needs,
        ))
    }

    /// Add the constant `s[n]` to every element of sample n.
    pub fn shift_per_sample(&mut self, a: TensorId, s: &[f64]) -> Result<TensorId> {
        let shape = self.nodes[a.0].tensor.shape.clone();
        if shape.is_empty() || shape[0] != s.len() {
            return Err(Error::Shape(format!(
                "shift_per_sample got {} offsets for shape {:?}",
                s.len(),
                shape
            )));
        }
        let inner = numel_of(&shape[1..]);
        let src = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(src.len());
        for (b, &off) in s.iter().enumerate() {
            out.extend(src[b * inner..(b + 1) * inner].iter().map(|v| v + off));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ShiftPerSample { a },
            needs,
        ))
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let t = &self.nodes[a.0].tensor;
        if numel_of(&new_shape) != t.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} ({} elements) to {:?} ({} elements)",
                t.shape,
                t.numel(),
                new_shape,
                numel_of(&new_shape)
            )));
        }
        let out = Tensor::from_parts(new_shape, t.data.clone());
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let s = self.nodes[a.0].tensor.shape.clone();
        if axis >= s.len() {
            return Err(Error::Shape(format!(
                "narrow axis {} out of range for shape {:?}",
                axis, s
            )));
        }
        if start + len > s[axis] || len == 0 {
            return Err(Error::Parameter(format!(
                "narrow [{}, {}) out of range for axis {} of {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let outer = numel_of(&s[..axis]);
        let inner = numel_of(&s[axis + 1..]);
        let src = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { a, axis, start },
            needs,
        ))
    }

    /// Concatenate rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let n = {
            let s = &self.nodes[parts[0].0].tensor.shape;
            if s.len() != 2 {
                return Err(Error::Shape(format!(
                    "concat_cols needs rank-2 parts, got {:?}",
                    s
                )));
            }
            s[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p.0].tensor.shape;
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape(format!(
                    "concat_cols parts disagree on rows: {:?}",
                    s
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let src = &self.nodes[p.0].tensor.data;
                out.extend_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients are added to whatever the
    /// nodes already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        // Local buffers for this pass, merged at the end so that repeated
        // backward calls accumulate instead of compounding.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = local[i].take() else { continue };
            self.scatter(i, &gout, &mut local);
            // Merge this node's contribution into its persistent gradient.
            if self.nodes[i].needs_grad {
                let slot = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![0.0; gout.len()]);
                for (g, v) in slot.iter_mut().zip(gout.iter()) {
                    *g += v;
                }
            }
        }
        Ok(())
    }

    fn add_into(
        &self,
        local: &mut [Option<Vec<f64>>],
        id: TensorId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = local[id.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[id.0].tensor.numel()]);
        f(buf);
    }

    fn scatter(&self, i: usize, gout: &[f64], local: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                self.add_into(local, a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                self.add_into(local, b, |gb| {
                    if broadcast {
                        let chunk = gb.len();
                        for block in gout.chunks(chunk) {
                            for (g, v) in gb.iter_mut().zip(block) {
                                *g += v;
                            }
                        }
                    } else {
                        for (g, v) in gb.iter_mut().zip(gout) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Sub { a, b, broadcast } => {
                self.add_into(local, a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                self.add_into(local, b, |gb| {
                    if broadcast {
                        let chunk = gb.len();
                        for block in gout.chunks(chunk) {
                            for (g, v) in gb.iter_mut().zip(block) {
                                *g -= v;
                            }
                        }
                    } else {
                        for (g, v) in gb.iter_mut().zip(gout) {
                            *g -= v;
                        }
                    }
                });
            }
            Op::Mul { a, b, broadcast } => {
                let da = &self.nodes[a.0].tensor.data;
                let db = &self.nodes[b.0].tensor.data;
                self.add_into(local, a, |ga| {
                    if broadcast {
                        let chunk = db.len();
                        for (bi, block) in gout.chunks(chunk).enumerate() {
                            for (j, v) in block.iter().enumerate() {
                                ga[bi * chunk + j] += v * db[j];
                            }
                        }
                    } else {
                        for ((g, v), y) in ga.iter_mut().zip(gout).zip(db) {
                            *g += v * y;
                        }
                    }
                });
                self.add_into(local, b, |gb| {
                    if broadcast {
                        let chunk = gb.len();
                        for (bi, block) in gout.chunks(chunk).enumerate() {
                            for (j, v) in block.iter().enumerate() {
                                gb[j] += v * da[bi * chunk + j];
                            }
                        }
                    } else {
                        for ((g, v), x) in gb.iter_mut().zip(gout).zip(da) {
                            *g += v * x;
                        }
                    }
                });
            }
            Op::Neg { a } => {
                self.add_into(local, a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g -= v;
                    }
                });
            }
            Op::AddScalar { a } | Op::ShiftPerSample { a } | Op::Reshape { a } => {
                self.add_into(local, a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
            }
            Op::MulScalar { a, c } => {
                self.add_into(local, a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v * c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = &self.nodes[a.0].tensor.shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].tensor.shape[1];
                let da = &self.nodes[a.0].tensor.data;
                let db = &self.nodes[b.0].tensor.data;
                self.add_into(local, a, |ga| {
                    matmul_nt(gout, db, ga, m, n, k);
                });
                self.add_into(local, b, |gb| {
                    matmul_tn(da, gout, gb, m, k, n);
                });
            }
            Op::Conv2d { x, k, dims } => {
                let dx_needed = self.nodes[x.0].needs_grad;
                let dk_needed = self.nodes[k.0].needs_grad;
                let xdata = &self.nodes[x.0].tensor.data;
                let kdata = &self.nodes[k.0].tensor.data;
                if dx_needed {
                    self.add_into(local, x, |gx| {
                        conv2d_backward_input(gout, kdata, gx, &dims);
                    });
                }
                if dk_needed {
                    self.add_into(local, k, |gk| {
                        conv2d_backward_kernel(gout, xdata, gk, &dims);
                    });
                }
            }
            Op::Pad2d { x, pad } => {
                let s = &self.nodes[x.0].tensor.shape;
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ow = w + 2 * pad;
                let oh = h + 2 * pad;
                self.add_into(local, x, |gx| {
                    for img in 0..n * c {
                        for y in 0..h {
                            let src_off = (img * oh + y + pad) * ow + pad;
                            let dst_off = (img * h + y) * w;
                            for xx in 0..w {
                                gx[dst_off + xx] += gout[src_off + xx];
                            }
                        }
                    }
                });
            }
            Op::Shift2d { x, shifts } => {
                let s = &self.nodes[x.0].tensor.shape;
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                self.add_into(local, x, |gx| {
                    for b in 0..n {
                        let (dy, dx) = shifts[b];
                        for ch in 0..c {
                            for y in 0..h as i64 {
                                let sy = y - dy;
                                if sy < 0 || sy >= h as i64 {
                                    continue;
                                }
                                for xpos in 0..w as i64 {
                                    let sx = xpos - dx;
                                    if sx < 0 || sx >= w as i64 {
                                        continue;
                                    }
                                    let dst = ((b * c + ch) * h + y as usize) * w
                                        + xpos as usize;
                                    let srci = ((b * c + ch) * h + sy as usize) * w
                                        + sx as usize;
                                    gx[srci] += gout[dst];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskWindow { x, origins, win } => {
                let s = &self.nodes[x.0].tensor.shape;
                let (_n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (wh, ww) = win;
                self.add_into(local, x, |gx| {
                    for idx in 0..gx.len() {
                        gx[idx] += gout[idx];
                    }
                    // The masked window contributed nothing, so remove it again.
                    for (b, &(y0, x0)) in origins.iter().enumerate() {
                        for ch in 0..c {
                            for y in y0..y0 + wh {
                                let off = ((b * c + ch) * h + y) * w + x0;
                                for xx in 0..ww {
                                    gx[off + xx] -= gout[off + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                self.add_into(local, x, |gx| {
                    for (g, v) in gx.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                let s = &self.nodes[x.0].tensor.shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                self.add_into(local, b, |gb| {
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * plane;
                            gb[ch] += gout[off..off + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                let y = &self.nodes[i].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), yv) in ga.iter_mut().zip(gout).zip(y) {
                        *g += v * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[i].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), yv) in ga.iter_mut().zip(gout).zip(y) {
                        *g += v * yv * (1.0 - yv);
                    }
                });
            }
            Op::Softplus { a } => {
                let x = &self.nodes[a.0].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), xv) in ga.iter_mut().zip(gout).zip(x) {
                        *g += v * sigmoid(*xv);
                    }
                });
            }
            Op::Relu { a } => {
                let x = &self.nodes[a.0].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), xv) in ga.iter_mut().zip(gout).zip(x) {
                        if *xv > 0.0 {
                            *g += v;
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let x = &self.nodes[a.0].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), xv) in ga.iter_mut().zip(gout).zip(x) {
                        *g += v * if *xv > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Ln { a } => {
                let x = &self.nodes[a.0].tensor.data;
                self.add_into(local, a, |ga| {
                    for ((g, v), xv) in ga.iter_mut().zip(gout).zip(x) {
                        *g += v / xv;
                    }
                });
            }
            Op::SumAll { a } => {
                let g = gout[0];
                self.add_into(local, a, |ga| {
                    for slot in ga.iter_mut() {
                        *slot += g;
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].tensor.numel() as f64;
                let g = gout[0] / n;
                self.add_into(local, a, |ga| {
                    for slot in ga.iter_mut() {
                        *slot += g;
                    }
                });
            }
            Op::ChannelMean { a } => {
                let s = &self.nodes[a.0].tensor.shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let inv = 1.0 / c as f64;
                self.add_into(local, a, |ga| {
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * plane;
                            for p in 0..plane {
                                ga[off + p] += gout[img * plane + p] * inv;
                            }
                        }
                    }
                });
            }
            Op::SampleMean { a } => {
                let s = &self.nodes[a.0].tensor.shape;
                let n = s[0];
                let inner = numel_of(&s[1..]);
                let inv = 1.0 / inner as f64;
                self.add_into(local, a, |ga| {
                    for b in 0..n {
                        let g = gout[b] * inv;
                        for slot in ga[b * inner..(b + 1) * inner].iter_mut() {
                            *slot += g;
                        }
                    }
                });
            }
            Op::RowSums { a } => {
                let s = &self.nodes[a.0].tensor.shape;
                let (n, f) = (s[0], s[1]);
                self.add_into(local, a, |ga| {
                    for r in 0..n {
                        let g = gout[r];
                        for slot in ga[r * f..(r + 1) * f].iter_mut() {
                            *slot += g;
                        }
                    }
                });
            }
            Op::ExpandTo { a } => {
                let src_shape = self.nodes[a.0].tensor.shape.clone();
                let dst_shape = self.nodes[i].tensor.shape.clone();
                self.add_into(local, a, |ga| {
                    for_each_expanded(&src_shape, &dst_shape, |src_idx, dst_idx| {
                        ga[src_idx] += gout[dst_idx];
                    });
                });
            }
            Op::ScalePerSample { a, s } => {
                let shape = &self.nodes[a.0].tensor.shape;
                let inner = numel_of(&shape[1..]);
                self.add_into(local, a, |ga| {
                    for (b, &f) in s.iter().enumerate() {
                        for (g, v) in ga[b * inner..(b + 1) * inner]
                            .iter_mut()
                            .zip(&gout[b * inner..(b + 1) * inner])
                        {
                            *g += v * f;
                        }
                    }
                });
            }
            Op::Narrow { a, axis, start } => {
                let s = &self.nodes[a.0].tensor.shape;
                let len = self.nodes[i].tensor.shape[axis];
                let outer = numel_of(&s[..axis]);
                let inner = numel_of(&s[axis + 1..]);
                let dim = s[axis];
                self.add_into(local, a, |ga| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let gbase = o * len * inner;
                        for j in 0..len * inner {
                            ga[base + j] += gout[gbase + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = self.nodes[i].tensor.shape[0];
                let total = self.nodes[i].tensor.shape[1];
                let mut col = 0;
                for &p in &parts {
                    let w = self.nodes[p.0].tensor.shape[1];
                    let start = col;
                    self.add_into(local, p, |gp| {
                        for row in 0..n {
                            for j in 0..w {
                                gp[row * w + j] += gout[row * total + start + j];
                            }
                        }
                    });
                    col += w;
                }
            }
        }
    }
}

// ---- raw kernels -------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// C[m,n] += A[m,k] B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,p] B^T where B is [n,p]
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A^T B where A is [p,m], B is [p,n]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, m: usize, n: usize) {
    for row in 0..p {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn conv2d_forward(x: &[f64], k: &[f64], out: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = 0.0;
                    for c in 0..d.in_ch {
                        for ky in 0..d.k_h {
                            let iy = (oy * d.stride + ky) as i64 - d.pad as i64;
                            if iy < 0 || iy >= d.in_h as i64 {
                                continue;
                            }
                            for kx in 0..d.k_w {
                                let ix = (ox * d.stride + kx) as i64 - d.pad as i64;
                                if ix < 0 || ix >= d.in_w as i64 {
                                    continue;
                                }
                                let xi = ((b * d.in_ch + c) * d.in_h + iy as usize)
                                    * d.in_w
                                    + ix as usize;
                                let ki = ((o * d.in_ch + c) * d.k_h + ky) * d.k_w + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * d.out_ch + o) * d.out_h + oy) * d.out_w + ox] = acc;
                }
            }
        }
    }
}

fn conv2d_backward_input(gout: &[f64], k: &[f64], gx: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = gout[((b * d.out_ch + o) * d.out_h + oy) * d.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        for ky in 0..d.k_h {
                            let iy = (oy * d.stride + ky) as i64 - d.pad as i64;
                            if iy < 0 || iy >= d.in_h as i64 {
                                continue;
                            }
                            for kx in 0..d.k_w {
                                let ix = (ox * d.stride + kx) as i64 - d.pad as i64;
                                if ix < 0 || ix >= d.in_w as i64 {
                                    continue;
                                }
                                let xi = ((b * d.in_ch + c) * d.in_h + iy as usize)
                                    * d.in_w
                                    + ix as usize;
                                let ki = ((o * d.in_ch + c) * d.k_h + ky) * d.k_w + kx;
                                gx[xi] += g * k[ki];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(gout: &[f64], x: &[f64], gk: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = gout[((b * d.out_ch + o) * d.out_h + oy) * d.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        for ky in 0..d.k_h {
                            let iy = (oy * d.stride + ky) as i64 - d.pad as i64;
                            if iy < 0 || iy >= d.in_h as i64 {
                                continue;
                            }
                            for kx in 0..d.k_w {
                                let ix = (ox * d.stride + kx) as i64 - d.pad as i64;
                                if ix < 0 || ix >= d.in_w as i64 {
                                    continue;
                                }
                                let xi = ((b * d.in_ch + c) * d.in_h + iy as usize)
                                    * d.in_w
                                    + ix as usize;
                                let ki = ((o * d.in_ch + c) * d.k_h + ky) * d.k_w + kx;
                                gk[ki] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Walk all indices of `dst_shape`, reporting the linear index in a tensor of
/// `src_shape` (size-1 axes pinned to 0) alongside the destination index.
fn for_each_expanded(
    src_shape: &[usize],
    dst_shape: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let rank = dst_shape.len();
    if rank == 0 {
        visit(0, 0);
        return;
    }
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for axis in (0..rank).rev() {
        src_strides[axis] = if src_shape[axis] == 1 { 0 } else { acc };
        acc *= src_shape[axis];
    }
    let total = numel_of(dst_shape);
    let mut idx = vec![0usize; rank];
    let mut src_idx = 0usize;
    for dst_idx in 0..total {
        visit(src_idx, dst_idx);
        // Increment the mixed-radix counter and keep src_idx in sync.
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src_idx += src_strides[axis];
            if idx[axis] < dst_shape[axis] {
                break;
            }
            src_idx -= src_strides[axis] * dst_shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_new_validates_count_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_all_ones_gives_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn conv_rejects_zero_stride_and_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 0, 0), Err(Error::Parameter(_))));
        let big = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Parameter(_))));
        // With padding the same kernel fits again.
        assert!(tape.conv2d(x, big, 1, 1).is_ok());
    }

    #[test]
    fn conv_stride_and_pad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 16, 16]));
        let k = tape.constant(Tensor::zeros(vec![8, 3, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn trailing_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let bad = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn sum_times_grad_is_input_derivative() {
        // f = sum(x * x) so df/dx = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.square(x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_calculation() {
        // loss = sum(A B) with A = [[1,2],[3,4]], B = [[5],[6]].
        // dA = [[5,6],[5,6]], dB = [[4],[6]].
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shift2d_moves_content_and_zero_fills() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.shift2d(x, &[(0, 1)]).unwrap();
        // Shift right by one: vacated left column is zero.
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 3.0]);
        let z = tape.shift2d(x, &[(0, 0)]).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shift2d_gradient_is_reverse_permutation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = tape.shift2d(x, &[(1, 0)]).unwrap();
        // Keep only the surviving row; weight it to make the check sharp.
        let w = tape.constant(t(&[1, 1, 2, 2], &[0.0, 0.0, 10.0, 20.0]));
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        // Row 0 of x landed on row 1 of y; row 1 of x fell off the edge.
        assert_eq!(tape.grad(x).unwrap(), &[10.0, 20.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_window_zeroes_and_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 2.0).with_grad());
        let y = tape.mask_window(x, &[(1, 1)], (2, 2)).unwrap();
        let masked: usize = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(masked, 4);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let zeros: usize = g.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 4);
        assert_eq!(g.iter().sum::<f64>(), 12.0);
    }

    #[test]
    fn mask_window_rejects_out_of_bounds() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        assert!(tape.mask_window(x, &[(3, 0)], (2, 2)).is_err());
    }

    #[test]
    fn pad_and_narrow_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let p = tape.pad2d(x, 1).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1, 4, 4]);
        assert_eq!(tape.value(p).data().iter().sum::<f64>(), 10.0);
        let rows = tape.narrow(p, 2, 1, 2).unwrap();
        let back = tape.narrow(rows, 3, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum_all(back);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn reductions_and_expand() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 3.0, 5.0, 7.0]).with_grad());
        let cm = tape.channel_mean(x).unwrap();
        assert_eq!(tape.value(cm).shape(), &[1, 1, 1, 2]);
        assert_eq!(tape.value(cm).data(), &[3.0, 5.0]);
        let sm = tape.sample_mean(x).unwrap();
        assert_eq!(tape.value(sm).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(sm).data(), &[4.0]);
        let back = tape.expand_to(cm, &[1, 2, 1, 2]).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 5.0, 3.0, 5.0]);
        let loss = tape.sum_all(back);
        tape.backward(loss).unwrap();
        // d/dx of sum(expand(channel_mean(x))) is 1 everywhere.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn per_sample_affine_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let scaled = tape.scale_per_sample(x, &[2.0, -1.0]).unwrap();
        assert_eq!(tape.value(scaled).data(), &[2.0, 4.0, -3.0, -4.0]);
        let shifted = tape.shift_per_sample(scaled, &[10.0, 0.0]).unwrap();
        assert_eq!(tape.value(shifted).data(), &[12.0, 14.0, -3.0, -4.0]);
        let loss = tape.sum_all(shifted);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, -1.0, -1.0]);
    }

    #[test]
    fn row_sums_and_concat() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]).with_grad());
        let rs = tape.row_sums(a).unwrap();
        assert_eq!(tape.value(rs).data(), &[3.0, 7.0]);
        let cat = tape.concat_cols(&[rs, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 2]);
        assert_eq!(tape.value(cat).data(), &[3.0, 5.0, 7.0, 6.0]);
        let w = tape.constant(t(&[2, 2], &[1.0, 10.0, 100.0, 1000.0]));
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 100.0, 100.0]);
        assert_eq!(tape.grad(b).unwrap(), &[10.0, 1000.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-800.0, 0.0, 800.0]));
        let y = tape.softplus(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
    }

    #[test]
    fn ln_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.ln(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn reshape_preserves_data_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let y = tape.reshape(x, vec![3, 2]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        assert!(tape.reshape(x, vec![4, 2]).is_err());
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        assert!(tape
            .grad(x)
            .unwrap()
            .iter()
            .all(|g| (*g - 1.0 / 6.0).abs() < 1e-15));
    }
}
