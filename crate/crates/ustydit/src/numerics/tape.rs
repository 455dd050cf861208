use super::tensor::Precision;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[M×K] · b[K×N]
    MatMul(Var, Var),
    /// a[M×K] · b[N×K]ᵀ
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a + c·b, elementwise
    AxPy(Var, Var, f64),
    Scale(Var, f64),
    /// x[L×d] + bias[1×d] broadcast over rows
    AddBias(Var, Var),
    /// row-wise softmax, max-subtracted
    Softmax(Var),
    /// x, gain, bias; cached per-row (mean, inv_std)
    LayerNorm(Var, Var, Var, f64, Vec<(f64, f64)>),
    /// tanh-approximated gelu
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    /// mean((a−b)²) -> scalar
    MeanSqDiff(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

/// Wengert tape for reverse-mode differentiation over 2-D values.
///
/// Single-threaded: one tape per forward/backward pass. Attention score
/// construction increments `score_entries` (per-head score-matrix entries),
/// which backs the cost instrumentation.
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    pub score_entries: u64,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            nodes: Vec::new(),
            score_entries: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, mut data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        if self.precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, x: f64) -> Var {
        self.leaf(1, 1, vec![x])
    }

    fn shape_eq(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                na.rows, na.cols, nb.rows, nb.cols
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += av * bd[p * n + j];
                    }
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// a · bᵀ with b stored [N×K]; used for attention scores.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tb inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[i * k + p] * bd[j * k + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.rows(a), self.cols(a), data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.rows(a), self.cols(a), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.rows(a), self.cols(a), data, Op::Mul(a, b)))
    }

    /// a + c·b elementwise.
    pub fn axpy(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        self.shape_eq(a, b, "axpy")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + c * y)
            .collect();
        Ok(self.push(self.rows(a), self.cols(a), data, Op::AxPy(a, b, c)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        self.push(self.rows(a), self.cols(a), data, Op::Scale(a, c))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (l, d) = (self.rows(x), self.cols(x));
        if self.rows(bias) != 1 || self.cols(bias) != d {
            return Err(Error::Dimension(format!(
                "add_bias: bias {}x{} for x width {d}",
                self.rows(bias),
                self.cols(bias)
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        {
            let bd = &self.nodes[bias.0].data;
            for i in 0..l {
                for j in 0..d {
                    data[i * d + j] += bd[j];
                }
            }
        }
        Ok(self.push(l, d, data, Op::AddBias(x, bias)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (l, d) = (self.rows(x), self.cols(x));
        let mut data = vec![0.0; l * d];
        {
            let xd = &self.nodes[x.0].data;
            for i in 0..l {
                let row = &xd[i * d..(i + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..d {
                    let e = (row[j] - m).exp();
                    data[i * d + j] = e;
                    z += e;
                }
                for j in 0..d {
                    data[i * d + j] /= z;
                }
            }
        }
        self.push(l, d, data, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (l, d) = (self.rows(x), self.cols(x));
        if self.cols(gain) != d || self.cols(bias) != d {
            return Err(Error::Dimension("layer_norm gain/bias width".into()));
        }
        let mut data = vec![0.0; l * d];
        let mut cache = Vec::with_capacity(l);
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gain.0].data;
            let bd = &self.nodes[bias.0].data;
            for i in 0..l {
                let row = &xd[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                cache.push((mean, inv_std));
                for j in 0..d {
                    data[i * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
        }
        Ok(self.push(l, d, data, Op::LayerNorm(x, gain, bias, eps, cache)))
    }

    /// tanh-approximated smooth gating activation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| gelu_val(v))
            .collect();
        self.push(self.rows(x), self.cols(x), data, Op::Gelu(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.cols(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.cols(p) != d {
                return Err(Error::Dimension("concat_rows width mismatch".into()));
            }
            rows += self.rows(p);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(rows, d, data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let (l, d) = (self.rows(x), self.cols(x));
        if start + rows > l {
            return Err(Error::Dimension(format!(
                "slice_rows {start}+{rows} > {l}"
            )));
        }
        let data = self.nodes[x.0].data[start * d..(start + rows) * d].to_vec();
        Ok(self.push(rows, d, data, Op::SliceRows(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let l = self.rows(parts[0]);
        let mut cols = 0;
        for &p in parts {
            if self.rows(p) != l {
                return Err(Error::Dimension("concat_cols height mismatch".into()));
            }
            cols += self.cols(p);
        }
        let mut data = vec![0.0; l * cols];
        let mut off = 0;
        for &p in parts {
            let pc = self.cols(p);
            for i in 0..l {
                let src = &self.nodes[p.0].data[i * pc..(i + 1) * pc];
                data[i * cols + off..i * cols + off + pc].copy_from_slice(src);
            }
            off += pc;
        }
        Ok(self.push(l, cols, data, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, cols: usize) -> Result<Var> {
        let (l, d) = (self.rows(x), self.cols(x));
        if start + cols > d {
            return Err(Error::Dimension(format!(
                "slice_cols {start}+{cols} > {d}"
            )));
        }
        let mut data = vec![0.0; l * cols];
        for i in 0..l {
            data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.nodes[x.0].data[i * d + start..i * d + start + cols]);
        }
        Ok(self.push(l, cols, data, Op::SliceCols(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// mean((a−b)²), a scalar; the training loss.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq(a, b, "mean_sq_diff")?;
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(1, 1, vec![s / n], Op::MeanSqDiff(a, b)))
    }

    /// Linear layer x·W + b with b broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Reverse pass from a scalar loss. Returns one gradient buffer per
    /// node, indexed by `Var`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Parameter("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = g;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.rows(*a), self.cols(*a));
                    let n = self.cols(*b);
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // dA = g · Bᵀ ; dB = Aᵀ · g
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            grads[a.0][i * k + p] += s;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * g[i * n + j];
                            }
                            grads[b.0][p * n + j] += s;
                        }
                    }
                    grads[idx] = g;
                }
                Op::MatMulTransB(a, b) => {
                    // out = A·Bᵀ, A [M×K], B [N×K]
                    let (m, k) = (self.rows(*a), self.cols(*a));
                    let n = self.rows(*b);
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // dA = g·B ; dB = gᵀ·A
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[j * k + p];
                            }
                            grads[a.0][i * k + p] += s;
                        }
                    }
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * ad[i * k + p];
                            }
                            grads[b.0][j * k + p] += s;
                        }
                    }
                    grads[idx] = g;
                }
                Op::Add(a, b) => {
                    for (ga, gv) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gv;
                    }
                    for (gb, gv) in grads[b.0].iter_mut().zip(&g) {
                        *gb += gv;
                    }
                    grads[idx] = g;
                }
                Op::Sub(a, b) => {
                    for (ga, gv) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gv;
                    }
                    for (gb, gv) in grads[b.0].iter_mut().zip(&g) {
                        *gb -= gv;
                    }
                    grads[idx] = g;
                }
                Op::Mul(a, b) => {
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    for (i, gv) in g.iter().enumerate() {
                        grads[a.0][i] += gv * bd[i];
                        grads[b.0][i] += gv * ad[i];
                    }
                    grads[idx] = g;
                }
                Op::AxPy(a, b, c) => {
                    let c = *c;
                    for (i, gv) in g.iter().enumerate() {
                        grads[a.0][i] += gv;
                        grads[b.0][i] += gv * c;
                    }
                    grads[idx] = g;
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    for (i, gv) in g.iter().enumerate() {
                        grads[a.0][i] += gv * c;
                    }
                    grads[idx] = g;
                }
                Op::AddBias(x, bias) => {
                    let d = self.cols(*bias);
                    let l = self.rows(*x);
                    for (gx, gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gv;
                    }
                    for i in 0..l {
                        for j in 0..d {
                            grads[bias.0][j] += g[i * d + j];
                        }
                    }
                    grads[idx] = g;
                }
                Op::Softmax(x) => {
                    let (l, d) = (node.rows, node.cols);
                    let y = &node.data;
                    for i in 0..l {
                        let dot: f64 = (0..d).map(|j| g[i * d + j] * y[i * d + j]).sum();
                        for j in 0..d {
                            grads[x.0][i * d + j] += y[i * d + j] * (g[i * d + j] - dot);
                        }
                    }
                    grads[idx] = g;
                }
                Op::LayerNorm(x, gain, bias, _eps, cache) => {
                    let (l, d) = (node.rows, node.cols);
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    let df = d as f64;
                    for i in 0..l {
                        let (mean, inv_std) = cache[i];
                        // xhat and upstream-through-gain
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xd[i * d + j] - mean) * inv_std;
                            let dh = g[i * d + j] * gd[j];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat;
                            grads[gain.0][j] += g[i * d + j] * xhat;
                            grads[bias.0][j] += g[i * d + j];
                        }
                        for j in 0..d {
                            let xhat = (xd[i * d + j] - mean) * inv_std;
                            let dh = g[i * d + j] * gd[j];
                            grads[x.0][i * d + j] +=
                                inv_std * (dh - sum_dh / df - xhat * sum_dh_xhat / df);
                        }
                    }
                    grads[idx] = g;
                }
                Op::Gelu(x) => {
                    let xd = self.nodes[x.0].data.clone();
                    for (i, gv) in g.iter().enumerate() {
                        grads[x.0][i] += gv * gelu_grad(xd[i]);
                    }
                    grads[idx] = g;
                }
                Op::ConcatRows(parts) => {
                    let d = node.cols;
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pr = self.rows(p);
                        for i in 0..pr * d {
                            grads[p.0][i] += g[off * d + i];
                        }
                        off += pr;
                    }
                    grads[idx] = g;
                }
                Op::SliceRows(x, start) => {
                    let d = node.cols;
                    let (start, rows) = (*start, node.rows);
                    for i in 0..rows * d {
                        grads[x.0][start * d + i] += g[i];
                    }
                    grads[idx] = g;
                }
                Op::ConcatCols(parts) => {
                    let l = node.rows;
                    let cols = node.cols;
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pc = self.cols(p);
                        for i in 0..l {
                            for j in 0..pc {
                                grads[p.0][i * pc + j] += g[i * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                    grads[idx] = g;
                }
                Op::SliceCols(x, start) => {
                    let d = self.cols(*x);
                    let (start, cols, l) = (*start, node.cols, node.rows);
                    for i in 0..l {
                        for j in 0..cols {
                            grads[x.0][i * d + start + j] += g[i * cols + j];
                        }
                    }
                    grads[idx] = g;
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    for gx in grads[x.0].iter_mut() {
                        *gx += gv;
                    }
                    grads[idx] = g;
                }
                Op::MeanSqDiff(a, b) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    let scale = 2.0 * g[0] / n;
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    for i in 0..ad.len() {
                        let diff = scale * (ad[i] - bd[i]);
                        grads[a.0][i] += diff;
                        grads[b.0][i] -= diff;
                    }
                    grads[idx] = g;
                }
            }
        }
        Ok(grads)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_val(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape {
        Tape::new(Precision::F64)
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let a = t.leaf(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let i3 = t.leaf(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = t.matmul(i3, a).unwrap();
        assert_eq!(t.data(out), t.data(a));
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = tape();
        let a = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t.leaf(2, 1, vec![0.0, 1.0]);
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.data(out), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_vs_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 3);
        let ad: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bd: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += ad[i * k + p] * bd[p * n + j];
                }
            }
        }
        let mut t = tape();
        let a = t.leaf(m, k, ad);
        let b = t.leaf(k, n, bd);
        let out = t.matmul(a, b).unwrap();
        for (x, y) in t.data(out).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = tape();
        let a = t.leaf(2, 3, vec![0.0; 6]);
        let b = t.leaf(2, 2, vec![0.0; 4]);
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut t = tape();
        let x = t.leaf(1, 2, vec![0.0, 0.0]);
        let y = t.softmax_rows(x);
        assert!((t.data(y)[0] - 0.5).abs() < 1e-12);

        let x = t.leaf(1, 2, vec![2.0_f64.ln(), 0.0]);
        let y = t.softmax_rows(x);
        assert!((t.data(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.data(y)[1] - 1.0 / 3.0).abs() < 1e-12);

        // large input must not overflow
        let x = t.leaf(1, 2, vec![1000.0, 0.0]);
        let y = t.softmax_rows(x);
        assert!(t.data(y).iter().all(|v| v.is_finite()));
        assert!(t.data(y)[0] > 0.999);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = tape();
        let x = t.leaf(4, 6, (0..24).map(|_| rng.gen_range(-50.0..50.0)).collect());
        let y = t.softmax_rows(x);
        for i in 0..4 {
            let s: f64 = t.data(y)[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(t.data(y)[i * 6..(i + 1) * 6].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = tape();
        let gain = t.leaf(1, 4, vec![1.0; 4]);
        let bias = t.leaf(1, 4, vec![0.0; 4]);

        // constant row -> zeros
        let x = t.leaf(1, 4, vec![3.0; 4]);
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(t.data(y).iter().all(|v| v.abs() < 1e-6));

        // already normalized row, eps -> 0
        let gain2 = t.leaf(1, 2, vec![1.0; 2]);
        let bias2 = t.leaf(1, 2, vec![0.0; 2]);
        let x = t.leaf(1, 2, vec![1.0, -1.0]);
        let y = t.layer_norm(x, gain2, bias2, 1e-12).unwrap();
        assert!((t.data(y)[0] - 1.0).abs() < 1e-6);
        assert!((t.data(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let eps = 1e-5;
        let expect: Vec<f64> = row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

        let mut t = tape();
        let gain = t.leaf(1, d, vec![1.0; d]);
        let bias = t.leaf(1, d, vec![0.0; d]);
        let x = t.leaf(1, d, row);
        let y = t.layer_norm(x, gain, bias, eps).unwrap();
        for (a, b) in t.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_cases() {
        let mut t = tape();
        // identity W, zero b
        let x = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.leaf(1, 2, vec![0.0, 0.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.data(y), t.data(x));

        // zero x -> rows equal b
        let x0 = t.leaf(2, 2, vec![0.0; 4]);
        let w2 = t.leaf(2, 2, vec![0.5; 4]);
        let b2 = t.leaf(1, 2, vec![1.0, -1.0]);
        let y = t.linear(x0, w2, b2).unwrap();
        assert_eq!(t.data(y), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = tape();
        let w = t.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = t.sum(w);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads[w.0], vec![1.0; 6]);
    }

    #[test]
    fn backward_norm_sq_is_2x() {
        let mut t = tape();
        let x = t.leaf(1, 3, vec![1.0, -2.0, 0.5]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads[x.0], vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut t = tape();
        let x = t.leaf(2, 2, vec![0.0; 4]);
        // non-scalar "loss" is a usage error
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_zero_grad_for_uninvolved_params() {
        let mut t = tape();
        let used = t.leaf(1, 2, vec![1.0, 2.0]);
        let unused = t.leaf(1, 2, vec![5.0, 6.0]);
        let loss = t.sum(used);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads[unused.0], vec![0.0, 0.0]);
    }

    #[test]
    fn f32_mode_quantizes_results() {
        let mut t = Tape::new(Precision::F32);
        let a = t.leaf(1, 1, vec![0.1]);
        let b = t.leaf(1, 1, vec![0.2]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.data(c)[0], (0.1_f32 + 0.2_f32) as f64);
    }
}
