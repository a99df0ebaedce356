//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Each example gets its own tape, so
//! independent examples can be differentiated on separate threads and their
//! parameter gradients summed afterwards in a fixed order.

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Im2Col3x3 {
        x: Var,
        height: usize,
        width: usize,
    },
    MinMax {
        x: Var,
        argmin: usize,
        argmax: usize,
        range: f64,
        degenerate: bool,
    },
    L2Normalize {
        x: Var,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    node_grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.node_grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(r.cols, self.value(a).cols, "add_row width");
        let mut value = self.value(a).clone();
        let cols = value.cols;
        for chunk in value.data.chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `x * w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v = v.max(0.0);
        }
        self.push(value, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols;
        for row in value.data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut value = xhat.clone();
        for row in value.data.chunks_mut(cols) {
            for ((v, gk), bk) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gk + bk;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols, "slice_cols out of range");
        let mut value = Matrix::zeros(src.rows, len);
        for r in 0..src.rows {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.rows, "slice_rows out of range");
        let data = src.data[start * src.cols..(start + len) * src.cols].to_vec();
        let value = Matrix {
            rows: len,
            cols: src.cols,
            data,
        };
        self.push(value, Op::SliceRows { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let src = self.value(*p);
                assert_eq!(src.rows, rows, "concat_cols row count");
                value.row_mut(r)[offset..offset + src.cols].copy_from_slice(src.row(r));
                offset += src.cols;
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let src = self.value(*p);
            assert_eq!(src.cols, cols, "concat_rows column count");
            data.extend_from_slice(&src.data);
        }
        let rows = data.len() / cols;
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    /// Unfolds a `(height*width) x c` grid into `(height*width) x 9c`
    /// neighborhoods for a 3x3, stride-1, zero-padded convolution. Column
    /// block `k = (dy+1)*3 + (dx+1)` holds the channels of neighbor `(dy, dx)`.
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows, height * width, "im2col grid size");
        let c = src.cols;
        let mut value = Matrix::zeros(height * width, 9 * c);
        for i in 0..height {
            for j in 0..width {
                let out_row = value.row_mut(i * width + j);
                for k in 0..9 {
                    let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                    let (si, sj) = (i as isize + dy, j as isize + dx);
                    if si < 0 || sj < 0 || si >= height as isize || sj >= width as isize {
                        continue;
                    }
                    let src_row = src.row(si as usize * width + sj as usize);
                    out_row[k * c..(k + 1) * c].copy_from_slice(src_row);
                }
            }
        }
        self.push(value, Op::Im2Col3x3 { x, height, width })
    }

    /// Min-max normalization over all entries. When the range falls below
    /// `eps` the output is all zeros and carries no gradient.
    pub fn min_max(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, v) in src.data.iter().enumerate() {
            if *v < src.data[argmin] {
                argmin = i;
            }
            if *v > src.data[argmax] {
                argmax = i;
            }
        }
        let lo = src.data[argmin];
        let range = src.data[argmax] - lo;
        let degenerate = !(range >= eps);
        let mut value = Matrix::zeros(src.rows, src.cols);
        if !degenerate {
            for (o, v) in value.data.iter_mut().zip(&src.data) {
                *o = (v - lo) / range;
            }
        }
        self.push(
            value,
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
                degenerate,
            },
        )
    }

    pub fn is_degenerate(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::MinMax { degenerate: true, .. })
    }

    /// Divides by the Euclidean norm of all entries. Callers must ensure
    /// the norm is nonzero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let norm = crate::tensor::l2_norm(&src.data);
        let mut value = src.clone();
        value.scale(1.0 / norm);
        self.push(value, Op::L2Normalize { x, norm })
    }

    /// Back-propagates the given output seeds through the tape.
    pub fn backward(&self, seeds: &[(Var, &Matrix)]) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { node_grads: grads }
    }

    /// Back-propagates and adds parameter gradients into `buffer`.
    pub fn backward_into(&self, seeds: &[(Var, &Matrix)], buffer: &mut GradBuffer) {
        let grads = self.backward(seeds);
        for (node, g) in self.nodes.iter().zip(&grads.node_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                buffer.accumulate(*id, g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(self.value(*b));
                let gb = self.value(*a).matmul_tn(g);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let ga = g.matmul(self.value(*b));
                let gb = g.matmul_tn(self.value(*a));
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                accumulate(grads, *row, &column_sums(g));
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale(*s);
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (d, xv) in ga.data.iter_mut().zip(&x.data) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (d, &xv) in ga.data.iter_mut().zip(&x.data) {
                    let inner = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *d *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner;
                }
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols;
                let mut ga = Matrix::zeros(y.rows, cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = &self.value(*gain).data;
                let (rows, cols) = xhat.shape();
                let n = cols as f64;
                let mut gx = Matrix::zeros(rows, cols);
                let mut ggain = Matrix::zeros(1, cols);
                let mut gbias = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv[c];
                        ggain.data[c] += gr[c] * xr[c];
                        gbias.data[c] += gr[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gain, &ggain);
                accumulate(grads, *bias, &gbias);
            }
            Op::Transpose(a) => accumulate(grads, *a, &g.transpose()),
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut gx = Matrix::zeros(src.rows, src.cols);
                for r in 0..src.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, &gx);
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut gx = Matrix::zeros(src.rows, src.cols);
                gx.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                accumulate(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    let mut gp = Matrix::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, *p, &gp);
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    let gp = Matrix {
                        rows,
                        cols: g.cols,
                        data: g.data[offset * g.cols..(offset + rows) * g.cols].to_vec(),
                    };
                    accumulate(grads, *p, &gp);
                    offset += rows;
                }
            }
            Op::Im2Col3x3 { x, height, width } => {
                let c = self.value(*x).cols;
                let mut gx = Matrix::zeros(height * width, c);
                for i in 0..*height {
                    for j in 0..*width {
                        let g_row = g.row(i * width + j);
                        for k in 0..9 {
                            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                            let (si, sj) = (i as isize + dy, j as isize + dx);
                            if si < 0 || sj < 0 || si >= *height as isize || sj >= *width as isize {
                                continue;
                            }
                            let dst = gx.row_mut(si as usize * width + sj as usize);
                            for (d, s) in dst.iter_mut().zip(&g_row[k * c..(k + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
                degenerate,
            } => {
                if *degenerate {
                    return;
                }
                let y = &node.value;
                let mut gx = g.clone();
                gx.scale(1.0 / range);
                let mut to_min = 0.0;
                let mut to_max = 0.0;
                for (gv, yv) in g.data.iter().zip(&y.data) {
                    to_min += gv * (yv - 1.0) / range;
                    to_max -= gv * yv / range;
                }
                gx.data[*argmin] += to_min;
                gx.data[*argmax] += to_max;
                accumulate(grads, *x, &gx);
            }
            Op::L2Normalize { x, norm } => {
                let y = &node.value;
                let inner: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
                let mut gx = g.clone();
                for (d, yv) in gx.data.iter_mut().zip(&y.data) {
                    *d = (*d - yv * inner) / norm;
                }
                accumulate(grads, *x, &gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for row in g.data.chunks(g.cols) {
        for (o, v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
