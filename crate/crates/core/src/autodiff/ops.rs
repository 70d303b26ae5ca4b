use super::attention;
use super::{Activation, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu<T: Real>(x: T) -> T {
    let phi = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf());
    x * phi
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => {
                if x > T::ZERO {
                    x
                } else {
                    T::ZERO
                }
            }
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::dim(op, shape, &[0, 0]));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::ZERO,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(vec![n, m], out, rg, Op::Transpose { x }, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }, "add")
    }

    /// Adds a length-`n` vector to every row of an `m×n` value.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.any_grad(&[x, bias]);
        self.push(self.shape(x).to_vec(), out, rg, Op::AddRow { x, bias }, "add_row")
    }

    /// `x · w + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, s }, "scale")
    }

    /// Elementwise arithmetic mean, accumulated in double precision.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Parameter("average of an empty list".into()))?;
        for &x in &xs[1..] {
            if self.shape(x) != self.shape(first) {
                return Err(Error::Parameter(format!(
                    "average: shape {:?} differs from {:?}",
                    self.shape(x),
                    self.shape(first)
                )));
            }
        }
        let k = xs.len() as f64;
        let n = self.value(first).len();
        let mut acc = vec![0.0f64; n];
        for &x in xs {
            for (a, v) in acc.iter_mut().zip(self.value(x)) {
                *a += v.to_f64();
            }
        }
        let out = acc.into_iter().map(|a| T::from_f64(a / k)).collect();
        let rg = self.any_grad(xs);
        self.push(
            self.shape(first).to_vec(),
            out,
            rg,
            Op::Average { xs: xs.to_vec() },
            "average",
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::Activation { x, kind },
            "activation",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, d) = self.dims(x);
        if self.value(gain).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(bias)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::ZERO; rows * d];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64(rs);
            for j in 0..d {
                let h = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Row-wise softmax of `x / tau`, shifted by the row max.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let (_, n) = self.dims(x);
        let out = softmax_rows(self.value(x), n, tau);
        let rg = self.any_grad(&[x]);
        let tau = T::from_f64(tau);
        self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x, tau }, "softmax")
    }

    /// Mean over rows of `-log softmax(logits / tau)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let (rows, n) = self.dims(logits);
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!(
                "cross_entropy target {t} out of range for {n} classes"
            )));
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv, n, tau);
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * n..(r + 1) * n];
            let max = row
                .iter()
                .map(|v| v.to_f64() / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .map(|v| (v.to_f64() / tau - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[t].to_f64() / tau;
        }
        let loss = T::from_f64(total / rows as f64);
        let rg = self.any_grad(&[logits]);
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                tau: T::from_f64(tau),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims(x);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::ZERO; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let norm = row
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            for j in 0..d {
                out[r * d + j] = T::from_f64(row[j].to_f64() / norm);
            }
            norms.push(T::from_f64(norm));
        }
        let rg = self.any_grad(&[x]);
        self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::L2NormalizeRows { x, norms },
            "l2_normalize",
        )
    }

    /// Stacks rows picked from several same-width sources.
    /// Each pick is `(source index, row)`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::Parameter("gather from no sources".into()))?;
        let (_, d) = self.dims(first);
        for &s in sources {
            if self.dims(s).1 != d {
                return Err(Error::dim("gather_rows", self.shape(first), self.shape(s)));
            }
        }
        if picks.is_empty() {
            return Err(Error::Parameter("gather with no rows".into()));
        }
        let mut out = Vec::with_capacity(picks.len() * d);
        for &(s, r) in picks {
            let src = *sources
                .get(s)
                .ok_or_else(|| Error::Parameter(format!("gather source {s} out of range")))?;
            let rows = self.dims(src).0;
            if r >= rows {
                return Err(Error::Parameter(format!(
                    "gather row {r} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&self.value(src)[r * d..(r + 1) * d]);
        }
        let rg = self.any_grad(sources);
        self.push(
            vec![picks.len(), d],
            out,
            rg,
            Op::Gather {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Rows `idx` of a single source.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let picks: Vec<_> = idx.iter().map(|&r| (0, r)).collect();
        self.gather_rows(&[x], &picks)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().map(|v| v.to_f64()).sum::<f64>();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![T::from_f64(total)], rg, Op::Sum { x }, "sum")
    }

    /// Multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[n_seq * seq_len, 3 * d]` with query, key and value blocks
    /// side by side; keys past each sequence's valid length are masked.
    pub fn attention(&mut self, qkv: Var, layout: &attention::SeqLayout, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims(qkv);
        let (out, probs) = attention::forward(self.value(qkv), rows, width, layout, heads)?;
        let rg = self.any_grad(&[qkv]);
        let d = width / 3;
        self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention {
                qkv,
                layout: layout.clone(),
                heads,
                probs,
            },
            "attention",
        )
    }
}

#[cfg(test)]
impl<T: Real> Tape<T> {
    pub(crate) fn faulty_square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let rg = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::FaultySquare { x }, "faulty")
    }
}

fn softmax_rows<T: Real>(x: &[T], n: usize, tau: f64) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row
            .iter()
            .map(|v| v.to_f64() / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() / tau - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(exps) {
            *d = T::from_f64(e / z);
        }
    }
    out
}

fn buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
}

/// Propagates the gradient `g` of node `i` into its inputs.
pub(super) fn backward_node<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = buf(nodes, grads, *a) {
                // dA += G · Bᵀ
                T::gemm(m, n, k, g, n as isize, 1, &nodes[b.0].value, 1, n as isize, T::ONE, ga);
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                // dB += Aᵀ · G
                T::gemm(k, m, n, &nodes[a.0].value, 1, k as isize, g, n as isize, 1, T::ONE, gb);
            }
        }
        Op::Transpose { x } => {
            let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(gx) = buf(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(gv) = buf(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            let n = nodes[bias.0].value.len();
            if let Some(gb) = buf(nodes, grads, *bias) {
                let mut acc = vec![0.0f64; n];
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, &s)| *a += s.to_f64());
                }
                gb.iter_mut().zip(acc).for_each(|(d, a)| *d += T::from_f64(a));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = buf(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
        }
        Op::Average { xs } => {
            let inv = T::from_f64(1.0 / xs.len() as f64);
            for x in xs {
                if let Some(gx) = buf(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * inv);
                }
            }
        }
        Op::Activation { x, kind } => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = buf(nodes, grads, *x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += s * kind.derivative(v);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.len();
            let gv = &nodes[gain.0].value;
            if let Some(gx) = buf(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        let dh = gr[j].to_f64() * gv[j].to_f64();
                        m1 += dh;
                        m2 += dh * hr[j].to_f64();
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = gr[j].to_f64() * gv[j].to_f64();
                        let v = rs.to_f64() * (dh - m1 - hr[j].to_f64() * m2);
                        gx[r * d + j] += T::from_f64(v);
                    }
                }
            }
            if let Some(gg) = buf(nodes, grads, *gain) {
                let mut acc = vec![0.0f64; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gr[j].to_f64() * hr[j].to_f64();
                    }
                }
                gg.iter_mut().zip(acc).for_each(|(dst, a)| *dst += T::from_f64(a));
            }
            if let Some(gb) = buf(nodes, grads, *bias) {
                let mut acc = vec![0.0f64; d];
                for gr in g.chunks(d) {
                    acc.iter_mut().zip(gr).for_each(|(a, &s)| *a += s.to_f64());
                }
                gb.iter_mut().zip(acc).for_each(|(dst, a)| *dst += T::from_f64(a));
            }
        }
        Op::Softmax { x, tau } => {
            let n = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(gx) = buf(nodes, grads, *x) {
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    for j in 0..n {
                        let v = yr[j].to_f64() * (gr[j].to_f64() - dot) / tau.to_f64();
                        dr[j] += T::from_f64(v);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            tau,
            probs,
        } => {
            let n = nodes[logits.0].shape.last().copied().unwrap();
            let rows = targets.len();
            let scale = g[0].to_f64() / (tau.to_f64() * rows as f64);
            if let Some(gl) = buf(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * n + j] += T::from_f64((probs[r * n + j].to_f64() - onehot) * scale);
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(gx) = buf(nodes, grads, *x) {
                for (r, norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    for j in 0..d {
                        let v = (gr[j].to_f64() - yr[j].to_f64() * dot) / norm.to_f64();
                        gx[r * d + j] += T::from_f64(v);
                    }
                }
            }
        }
        Op::Attention {
            qkv,
            layout,
            heads,
            probs,
        } => {
            let width = nodes[qkv.0].shape[1];
            let qv = &nodes[qkv.0].value;
            if let Some(gq) = buf(nodes, grads, *qkv) {
                attention::backward(qv, width, layout, *heads, probs, g, gq);
            }
        }
        Op::Gather { sources, picks } => {
            let d = *node.shape.last().unwrap();
            for (out_row, &(s, r)) in picks.iter().enumerate() {
                if let Some(gs) = buf(nodes, grads, sources[s]) {
                    let src = &g[out_row * d..(out_row + 1) * d];
                    gs[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(dst, &v)| *dst += v);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        #[cfg(test)]
        Op::FaultySquare { x } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
    }
}
