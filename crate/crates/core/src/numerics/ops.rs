//! Differentiable operations recorded on the tape. Each op validates shapes
//! up front and registers a closure that routes gradients to parents that
//! need them. Scalar reductions accumulate in f64 so losses are stable
//! enough for finite-difference checks.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::linalg;
use crate::numerics::tensor::Tensor;

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("{what}: expected rank 2, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("{what}: expected rank 3, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Output-index range [lo, hi) whose input index ox*stride + k - pad stays
/// inside [0, limit); lets conv inner loops run without bounds checks.
fn conv_span(k: usize, pad: usize, stride: usize, limit: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if limit + pad <= k {
        0
    } else {
        ((limit + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(out), hi)
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).add(self.value(b));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if na {
                    sink.add(a, g.clone());
                }
                if nb {
                    sink.add(b, g.clone());
                }
            }) as _
        });
        Ok(self.push(y, na || nb, back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.value(a).sub(self.value(b));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if na {
                    sink.add(a, g.clone());
                }
                if nb {
                    sink.add(b, g.scale(-1.0));
                }
            }) as _
        });
        Ok(self.push(y, na || nb, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let y = ta.mul(&tb);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if na {
                    sink.add(a, g.mul(&tb));
                }
                if nb {
                    sink.add(b, g.mul(&ta));
                }
            }) as _
        });
        Ok(self.push(y, na || nb, back))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let y = self.value(a).scale(c);
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                sink.add(a, g.scale(c));
            }) as _
        });
        self.push(y, na, back)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let y = self.value(a).map(|x| x + c);
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                sink.add(a, g.clone());
            }) as _
        });
        self.push(y, na, back)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
        let x = self.value(a).clone();
        let y = x.map(f);
        let na = self.needs_grad(a);
        let yc = y.clone();
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = g.clone();
                {
                    let dd = d.data_mut();
                    let xs = x.data();
                    let ys = yc.data();
                    for i in 0..dd.len() {
                        dd[i] *= df(xs[i], ys[i]);
                    }
                }
                sink.add(a, d);
            }) as _
        });
        self.push(y, na, back)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// C = A·B for [m,k]·[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (m, ka) = dims2(&ta, "matmul lhs")?;
        let (kb, n) = dims2(&tb, "matmul rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!("matmul: [{m},{ka}]·[{kb},{n}]")));
        }
        let y = linalg::mm(&ta, &tb);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if na {
                    sink.add(a, linalg::mm_bt(g, &tb));
                }
                if nb {
                    let mut dw = Tensor::zeros(tb.shape());
                    linalg::mm_at_acc(&mut dw, &ta, g);
                    sink.add(b, dw);
                }
            }) as _
        });
        Ok(self.push(y, na || nb, back))
    }

    /// C = A·Bᵀ for [m,k]·[n,k]ᵀ.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (m, ka) = dims2(&ta, "matmul_bt lhs")?;
        let (n, kb) = dims2(&tb, "matmul_bt rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!("matmul_bt: [{m},{ka}]·[{n},{kb}]T")));
        }
        let y = linalg::mm_bt(&ta, &tb);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if na {
                    sink.add(a, linalg::mm(g, &tb));
                }
                if nb {
                    let mut db = Tensor::zeros(tb.shape());
                    linalg::mm_at_acc(&mut db, g, &ta);
                    sink.add(b, db);
                }
            }) as _
        });
        Ok(self.push(y, na || nb, back))
    }

    /// y = x·W (+ b per row). W is [in,out], b is [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let tb = self.value(b).clone();
        let (rows, cols) = dims2(&tx, "add_row_bias input")?;
        if tb.shape() != [cols] {
            return Err(Error::ShapeMismatch(format!(
                "add_row_bias: input [{rows},{cols}] vs bias {:?}",
                tb.shape()
            )));
        }
        let mut y = tx.clone();
        {
            let yd = y.data_mut();
            let bd = tb.data();
            for r in 0..rows {
                for c in 0..cols {
                    yd[r * cols + c] += bd[c];
                }
            }
        }
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(b));
        let back = (nx || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if nx {
                    sink.add(x, g.clone());
                }
                if nb {
                    let mut db = Tensor::zeros(&[cols]);
                    {
                        let dd = db.data_mut();
                        let gd = g.data();
                        for r in 0..rows {
                            for c in 0..cols {
                                dd[c] += gd[r * cols + c];
                            }
                        }
                    }
                    sink.add(b, db);
                }
            }) as _
        });
        Ok(self.push(y, nx || nb, back))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let (m, n) = dims2(&ta, "transpose")?;
        let mut y = Tensor::zeros(&[n, m]);
        {
            let yd = y.data_mut();
            let ad = ta.data();
            for i in 0..m {
                for j in 0..n {
                    yd[j * m + i] = ad[i * n + j];
                }
            }
        }
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[m, n]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for j in 0..n {
                        for i in 0..m {
                            dd[i * n + j] = gd[j * m + i];
                        }
                    }
                }
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} -> {shape:?}",
                self.value(a).shape()
            )));
        }
        let old = self.value(a).shape().to_vec();
        let y = self.value(a).reshaped(shape);
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                sink.add(a, g.reshaped(old.clone()));
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a).clone();
        let (rows, cols) = dims2(&ta, "slice_rows")?;
        if start + len > rows {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows: {start}+{len} out of {rows} rows"
            )));
        }
        let y = Tensor::from_vec(vec![len, cols], ta.data()[start * cols..(start + len) * cols].to_vec());
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[rows, cols]);
                d.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows: no parts".into()));
        }
        let cols = dims2(self.value(parts[0]), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = dims2(t, "concat_rows part")?;
            if c != cols {
                return Err(Error::ShapeMismatch(format!("concat_rows: {c} cols vs {cols}")));
            }
            spans.push((p, data.len() / cols, r));
            data.extend_from_slice(t.data());
            needs |= self.needs_grad(p);
        }
        let rows = data.len() / cols;
        let y = Tensor::from_vec(vec![rows, cols], data);
        let flags: Vec<bool> = spans.iter().map(|&(p, _, _)| self.needs_grad(p)).collect();
        let back = needs.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                for (idx, &(p, row0, r)) in spans.iter().enumerate() {
                    if !flags[idx] {
                        continue;
                    }
                    let part = Tensor::from_vec(
                        vec![r, cols],
                        g.data()[row0 * cols..(row0 + r) * cols].to_vec(),
                    );
                    sink.add(p, part);
                }
            }) as _
        });
        Ok(self.push(y, needs, back))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a).clone();
        let (rows, cols) = dims2(&ta, "slice_cols")?;
        if start + len > cols {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols: {start}+{len} out of {cols} cols"
            )));
        }
        let mut y = Tensor::zeros(&[rows, len]);
        {
            let yd = y.data_mut();
            let ad = ta.data();
            for r in 0..rows {
                yd[r * len..(r + 1) * len].copy_from_slice(&ad[r * cols + start..r * cols + start + len]);
            }
        }
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[rows, cols]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for r in 0..rows {
                        dd[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                }
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols: no parts".into()));
        }
        let rows = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols part")?;
            if r != rows {
                return Err(Error::ShapeMismatch(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
            needs |= self.needs_grad(p);
        }
        let cols: usize = widths.iter().sum();
        let mut y = Tensor::zeros(&[rows, cols]);
        {
            let yd = y.data_mut();
            let mut off = 0;
            for (i, &p) in parts.iter().enumerate() {
                let t = self.value(p);
                let c = widths[i];
                let td = t.data();
                for r in 0..rows {
                    yd[r * cols + off..r * cols + off + c].copy_from_slice(&td[r * c..(r + 1) * c]);
                }
                off += c;
            }
        }
        let info: Vec<(Var, usize, bool)> = {
            let mut off = 0;
            parts
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let e = (p, off, self.needs_grad(p));
                    off += widths[i];
                    e
                })
                .collect()
        };
        let widths2 = widths.clone();
        let back = needs.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let gd = g.data();
                for (i, &(p, off, wants)) in info.iter().enumerate() {
                    if !wants {
                        continue;
                    }
                    let c = widths2[i];
                    let mut d = Tensor::zeros(&[rows, c]);
                    {
                        let dd = d.data_mut();
                        for r in 0..rows {
                            dd[r * c..(r + 1) * c].copy_from_slice(&gd[r * cols + off..r * cols + off + c]);
                        }
                    }
                    sink.add(p, d);
                }
            }) as _
        });
        Ok(self.push(y, needs, back))
    }

    /// Row lookup (embedding). Repeated ids accumulate gradients.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        let (rows, cols) = dims2(&ta, "gather_rows")?;
        for &i in ids {
            if i >= rows {
                return Err(Error::ShapeMismatch(format!("gather_rows: id {i} out of {rows}")));
            }
        }
        let mut y = Tensor::zeros(&[ids.len(), cols]);
        {
            let yd = y.data_mut();
            let ad = ta.data();
            for (r, &i) in ids.iter().enumerate() {
                yd[r * cols..(r + 1) * cols].copy_from_slice(&ad[i * cols..(i + 1) * cols]);
            }
        }
        let na = self.needs_grad(a);
        let ids_v = ids.to_vec();
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[rows, cols]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for (r, &i) in ids_v.iter().enumerate() {
                        for c in 0..cols {
                            dd[i * cols + c] += gd[r * cols + c];
                        }
                    }
                }
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    /// Mean of selected rows per group; groups index into the input rows.
    pub fn group_mean_rows(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let ta = self.value(a).clone();
        let (rows, cols) = dims2(&ta, "group_mean_rows")?;
        for (gi, grp) in groups.iter().enumerate() {
            if grp.is_empty() {
                return Err(Error::ShapeMismatch(format!("group_mean_rows: group {gi} empty")));
            }
            for &i in grp {
                if i >= rows {
                    return Err(Error::ShapeMismatch(format!(
                        "group_mean_rows: id {i} out of {rows}"
                    )));
                }
            }
        }
        let mut y = Tensor::zeros(&[groups.len(), cols]);
        {
            let yd = y.data_mut();
            let ad = ta.data();
            for (gi, grp) in groups.iter().enumerate() {
                let inv = 1.0 / grp.len() as f32;
                for &i in grp {
                    for c in 0..cols {
                        yd[gi * cols + c] += ad[i * cols + c] * inv;
                    }
                }
            }
        }
        let na = self.needs_grad(a);
        let groups_v: Vec<Vec<usize>> = groups.to_vec();
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[rows, cols]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for (gi, grp) in groups_v.iter().enumerate() {
                        let inv = 1.0 / grp.len() as f32;
                        for &i in grp {
                            for c in 0..cols {
                                dd[i * cols + c] += gd[gi * cols + c] * inv;
                            }
                        }
                    }
                }
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let rows = dims2(self.value(a), "mean_rows")?.0;
        let all: Vec<usize> = (0..rows).collect();
        self.group_mean_rows(a, &[all])
    }

    /// Row softmax. `mask` entries >0.5 participate; others get exactly zero
    /// probability. A row with no participants is an error.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let ta = self.value(a).clone();
        let (rows, cols) = dims2(&ta, "softmax")?;
        if let Some(m) = mask {
            if m.shape() != ta.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "softmax mask {:?} vs input {:?}",
                    m.shape(),
                    ta.shape()
                )));
            }
        }
        let mask_t = mask.cloned();
        let mut y = Tensor::zeros(&[rows, cols]);
        {
            let yd = y.data_mut();
            let ad = ta.data();
            for r in 0..rows {
                let row = &ad[r * cols..(r + 1) * cols];
                let allowed = |c: usize| mask_t.as_ref().map_or(true, |m| m.data()[r * cols + c] > 0.5);
                let mut mx = f32::NEG_INFINITY;
                for c in 0..cols {
                    if allowed(c) {
                        mx = mx.max(row[c]);
                    }
                }
                if mx == f32::NEG_INFINITY {
                    return Err(Error::FullyMaskedRow(r));
                }
                let mxd = mx as f64;
                let mut sum = 0.0f64;
                for c in 0..cols {
                    if allowed(c) {
                        let e = (row[c] as f64 - mxd).exp();
                        yd[r * cols + c] = e as f32;
                        sum += e;
                    }
                }
                let inv = (1.0 / sum) as f32;
                for c in 0..cols {
                    yd[r * cols + c] *= inv;
                }
            }
        }
        let na = self.needs_grad(a);
        let yc = y.clone();
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[rows, cols]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    let yd = yc.data();
                    for r in 0..rows {
                        let mut t = 0.0f64;
                        for c in 0..cols {
                            t += (gd[r * cols + c] * yd[r * cols + c]) as f64;
                        }
                        let t = t as f32;
                        for c in 0..cols {
                            dd[r * cols + c] = yd[r * cols + c] * (gd[r * cols + c] - t);
                        }
                    }
                }
                sink.add(a, d);
            }) as _
        });
        Ok(self.push(y, na, back))
    }

    /// Per-row normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let tx = self.value(x).clone();
        let (rows, cols) = dims2(&tx, "layer_norm")?;
        let tg = self.value(gain).clone();
        let tb = self.value(bias).clone();
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: gain {:?} bias {:?} for width {cols}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut y = Tensor::zeros(&[rows, cols]);
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = vec![0.0f32; rows];
        {
            let yd = y.data_mut();
            let hd = xhat.data_mut();
            let xd = tx.data();
            let gd = tg.data();
            let bd = tb.data();
            // row statistics in f64 so finite-difference probes see a
            // noise-free loss
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mut mean = 0.0f64;
                for &v in row {
                    mean += v as f64;
                }
                let mean = mean / cols as f64;
                let mut var = 0.0f64;
                for &v in row {
                    let d = v as f64 - mean;
                    var += d * d;
                }
                let var = var / cols as f64;
                let inv = 1.0 / (var + EPS as f64).sqrt();
                inv_std[r] = inv as f32;
                for c in 0..cols {
                    let h = (row[c] as f64 - mean) * inv;
                    hd[r * cols + c] = h as f32;
                    yd[r * cols + c] = (h * gd[c] as f64 + bd[c] as f64) as f32;
                }
            }
        }
        let (nx, ng, nb) = (self.needs_grad(x), self.needs_grad(gain), self.needs_grad(bias));
        let needs = nx || ng || nb;
        let back = needs.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let gd = g.data();
                let hd = xhat.data();
                if ng {
                    let mut dg = Tensor::zeros(&[cols]);
                    {
                        let d = dg.data_mut();
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c] += gd[r * cols + c] * hd[r * cols + c];
                            }
                        }
                    }
                    sink.add(gain, dg);
                }
                if nb {
                    let mut db = Tensor::zeros(&[cols]);
                    {
                        let d = db.data_mut();
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c] += gd[r * cols + c];
                            }
                        }
                    }
                    sink.add(bias, db);
                }
                if nx {
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    {
                        let d = dx.data_mut();
                        let gain_d = tg.data();
                        for r in 0..rows {
                            let mut a = 0.0f64;
                            let mut b2 = 0.0f64;
                            for c in 0..cols {
                                let dh = gd[r * cols + c] * gain_d[c];
                                a += dh as f64;
                                b2 += (dh * hd[r * cols + c]) as f64;
                            }
                            let a = (a / cols as f64) as f32;
                            let b2 = (b2 / cols as f64) as f32;
                            for c in 0..cols {
                                let dh = gd[r * cols + c] * gain_d[c];
                                d[r * cols + c] = inv_std[r] * (dh - a - hd[r * cols + c] * b2);
                            }
                        }
                    }
                    sink.add(x, dx);
                }
            }) as _
        });
        Ok(self.push(y, needs, back))
    }

    /// Scaled dot-product attention for one head's [L,dh] slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>, scale: f32) -> Result<Var> {
        let scores = self.matmul_bt(q, k)?;
        let scaled = self.scale(scores, scale);
        let probs = self.softmax_masked(scaled, mask)?;
        self.matmul(probs, v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let mut s = 0.0f64;
        for &v in ta.data() {
            s += v as f64;
        }
        let shape = ta.shape().to_vec();
        let na = self.needs_grad(a);
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                sink.add(a, Tensor::full(&shape, g.data()[0]));
            }) as _
        });
        self.push(Tensor::scalar(s as f32), na, back)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar Σ a∘w with a fixed weight tensor; used by gradient checks to
    /// turn any output into a well-conditioned scalar.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_sum: {:?} vs {:?}",
                ta.shape(),
                w.shape()
            )));
        }
        let mut s = 0.0f64;
        {
            let ad = ta.data();
            let wd = w.data();
            for i in 0..ad.len() {
                s += (ad[i] * wd[i]) as f64;
            }
        }
        let na = self.needs_grad(a);
        let wc = w.clone();
        let back = na.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                sink.add(a, wc.scale(g.data()[0]));
            }) as _
        });
        Ok(self.push(Tensor::scalar(s as f32), na, back))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let diff = self.value(a).sub(self.value(b));
        let n = diff.len();
        let mut s = 0.0f64;
        for &v in diff.data() {
            s += (v as f64) * (v as f64);
        }
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back = (na || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let c = 2.0 * g.data()[0] / n as f32;
                if na {
                    sink.add(a, diff.scale(c));
                }
                if nb {
                    sink.add(b, diff.scale(-c));
                }
            }) as _
        });
        Ok(self.push(Tensor::scalar((s / n as f64) as f32), na || nb, back))
    }

    /// Mean token cross-entropy over rows with `active` set. Targets index
    /// the vocabulary axis.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let tl = self.value(logits).clone();
        let (rows, vocab) = dims2(&tl, "cross_entropy")?;
        if targets.len() != rows || active.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {rows} rows, {} targets, {} flags",
                targets.len(),
                active.len()
            )));
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(Error::ShapeMismatch("cross_entropy: no active rows".into()));
        }
        for (r, &t) in targets.iter().enumerate() {
            if active[r] && t >= vocab {
                return Err(Error::ShapeMismatch(format!("cross_entropy: target {t} out of {vocab}")));
            }
        }
        let mut probs = Tensor::zeros(&[rows, vocab]);
        let mut loss = 0.0f64;
        {
            let pd = probs.data_mut();
            let ld = tl.data();
            for r in 0..rows {
                if !active[r] {
                    continue;
                }
                let row = &ld[r * vocab..(r + 1) * vocab];
                let mut mx = f32::NEG_INFINITY;
                for &v in row {
                    mx = mx.max(v);
                }
                let mxd = mx as f64;
                let mut sum = 0.0f64;
                for c in 0..vocab {
                    let e = (row[c] as f64 - mxd).exp();
                    pd[r * vocab + c] = e as f32;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for c in 0..vocab {
                    pd[r * vocab + c] = (pd[r * vocab + c] as f64 * inv) as f32;
                }
                loss += sum.ln() - (row[targets[r]] as f64 - mxd);
            }
        }
        let nl = self.needs_grad(logits);
        let targets_v = targets.to_vec();
        let active_v = active.to_vec();
        let back = nl.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let c = g.data()[0] / n_active as f32;
                let mut d = Tensor::zeros(&[rows, vocab]);
                {
                    let dd = d.data_mut();
                    let pd = probs.data();
                    for r in 0..rows {
                        if !active_v[r] {
                            continue;
                        }
                        for j in 0..vocab {
                            dd[r * vocab + j] = pd[r * vocab + j] * c;
                        }
                        dd[r * vocab + targets_v[r]] -= c;
                    }
                }
                sink.add(logits, d);
            }) as _
        });
        Ok(self.push(Tensor::scalar((loss / n_active as f64) as f32), nl, back))
    }

    /// 2-D convolution on [C,H,W] with kernel [O,C,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let (cin, h, wid) = dims3(&tx, "conv2d input")?;
        let ws = tw.shape().to_vec();
        if ws.len() != 4 || ws[1] != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {ws:?} vs input channels {cin}"
            )));
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wid + 2 * pad < kw || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input {h}x{wid} pad {pad} kernel {kh}x{kw} stride {stride}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let tb = match b {
            Some(bv) => {
                let t = self.value(bv).clone();
                if t.shape() != [cout] {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d: bias {:?} vs {cout} filters",
                        t.shape()
                    )));
                }
                Some(t)
            }
            None => None,
        };
        let mut y = Tensor::zeros(&[cout, ho, wo]);
        {
            let yd = y.data_mut();
            let xd = tx.data();
            let wd = tw.data();
            for o in 0..cout {
                let base = o * ho * wo;
                if let Some(bt) = &tb {
                    let bv = bt.data()[o];
                    for v in &mut yd[base..base + ho * wo] {
                        *v = bv;
                    }
                }
                for c in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[((o * cin + c) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = conv_span(kx, pad, stride, wid, wo);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = (c * h + iy as usize) * wid;
                                let yrow = base + oy * wo;
                                let x0 = (xrow + lo * stride + kx) - pad;
                                if stride == 1 {
                                    let ys = &mut yd[yrow + lo..yrow + hi];
                                    let xs = &xd[x0..x0 + (hi - lo)];
                                    for (yv, xv) in ys.iter_mut().zip(xs) {
                                        *yv += wv * xv;
                                    }
                                } else {
                                    for (i, ox) in (lo..hi).enumerate() {
                                        yd[yrow + ox] += wv * xd[x0 + i * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let (nx, nw) = (self.needs_grad(x), self.needs_grad(w));
        let nb = b.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        let needs = nx || nw || nb;
        let back = needs.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let gd = g.data();
                if nb {
                    let mut db = Tensor::zeros(&[cout]);
                    {
                        let dd = db.data_mut();
                        for o in 0..cout {
                            let mut s = 0.0f32;
                            for v in &gd[o * ho * wo..(o + 1) * ho * wo] {
                                s += v;
                            }
                            dd[o] = s;
                        }
                    }
                    sink.add(b.unwrap(), db);
                }
                if nw {
                    let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
                    {
                        let dd = dw.data_mut();
                        let xd = tx.data();
                        for o in 0..cout {
                            for c in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let (lo, hi) = conv_span(kx, pad, stride, wid, wo);
                                        let mut s = 0.0f32;
                                        for oy in 0..ho {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let xrow = (c * h + iy as usize) * wid;
                                            let grow = (o * ho + oy) * wo;
                                            if lo >= hi {
                                                continue;
                                            }
                                            let x0 = (xrow + lo * stride + kx) - pad;
                                            if stride == 1 {
                                                let gs = &gd[grow + lo..grow + hi];
                                                let xs = &xd[x0..x0 + (hi - lo)];
                                                for (gv, xv) in gs.iter().zip(xs) {
                                                    s += gv * xv;
                                                }
                                            } else {
                                                for (i, ox) in (lo..hi).enumerate() {
                                                    s += gd[grow + ox] * xd[x0 + i * stride];
                                                }
                                            }
                                        }
                                        dd[((o * cin + c) * kh + ky) * kw + kx] = s;
                                    }
                                }
                            }
                        }
                    }
                    sink.add(w, dw);
                }
                if nx {
                    let mut dx = Tensor::zeros(&[cin, h, wid]);
                    {
                        let dd = dx.data_mut();
                        let wd = tw.data();
                        for o in 0..cout {
                            for c in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let wv = wd[((o * cin + c) * kh + ky) * kw + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        let (lo, hi) = conv_span(kx, pad, stride, wid, wo);
                                        if lo >= hi {
                                            continue;
                                        }
                                        for oy in 0..ho {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let xrow = (c * h + iy as usize) * wid;
                                            let grow = (o * ho + oy) * wo;
                                            let x0 = (xrow + lo * stride + kx) - pad;
                                            if stride == 1 {
                                                let xs = &mut dd[x0..x0 + (hi - lo)];
                                                let gs = &gd[grow + lo..grow + hi];
                                                for (xv, gv) in xs.iter_mut().zip(gs) {
                                                    *xv += wv * gv;
                                                }
                                            } else {
                                                for (i, ox) in (lo..hi).enumerate() {
                                                    dd[x0 + i * stride] += wv * gd[grow + ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    sink.add(x, dx);
                }
            }) as _
        });
        Ok(self.push(y, needs, back))
    }

    /// Nearest-neighbour 2x upsample on [C,H,W].
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let (c, h, w) = dims3(&tx, "upsample2x")?;
        let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
        {
            let yd = y.data_mut();
            let xd = tx.data();
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xd[(ch * h + i) * w + j];
                        let r0 = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
                        let r1 = r0 + 2 * w;
                        yd[r0] = v;
                        yd[r0 + 1] = v;
                        yd[r1] = v;
                        yd[r1 + 1] = v;
                    }
                }
            }
        }
        let nx = self.needs_grad(x);
        let back = nx.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[c, h, w]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
                                let r1 = r0 + 2 * w;
                                dd[(ch * h + i) * w + j] = gd[r0] + gd[r0 + 1] + gd[r1] + gd[r1 + 1];
                            }
                        }
                    }
                }
                sink.add(x, d);
            }) as _
        });
        Ok(self.push(y, nx, back))
    }

    /// 2x2 average pooling with stride 2; input sides must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let (c, h, w) = dims3(&tx, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("avg_pool2: odd sides {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[c, ho, wo]);
        {
            let yd = y.data_mut();
            let xd = tx.data();
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let r0 = (ch * h + 2 * i) * w + 2 * j;
                        let r1 = r0 + w;
                        yd[(ch * ho + i) * wo + j] = 0.25 * (xd[r0] + xd[r0 + 1] + xd[r1] + xd[r1 + 1]);
                    }
                }
            }
        }
        let nx = self.needs_grad(x);
        let back = nx.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut d = Tensor::zeros(&[c, h, w]);
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = 0.25 * gd[(ch * ho + i) * wo + j];
                                let r0 = (ch * h + 2 * i) * w + 2 * j;
                                let r1 = r0 + w;
                                dd[r0] = v;
                                dd[r0 + 1] = v;
                                dd[r1] = v;
                                dd[r1 + 1] = v;
                            }
                        }
                    }
                }
                sink.add(x, d);
            }) as _
        });
        Ok(self.push(y, nx, back))
    }

    /// Per-channel scale on [C,H,W].
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let ts = self.value(s).clone();
        let (c, h, w) = dims3(&tx, "mul_channel input")?;
        if ts.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "mul_channel: scale {:?} vs {c} channels",
                ts.shape()
            )));
        }
        let mut y = tx.clone();
        {
            let yd = y.data_mut();
            let sd = ts.data();
            for ch in 0..c {
                let sv = sd[ch];
                for v in &mut yd[ch * h * w..(ch + 1) * h * w] {
                    *v *= sv;
                }
            }
        }
        let (nx, ns) = (self.needs_grad(x), self.needs_grad(s));
        let back = (nx || ns).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let gd = g.data();
                if nx {
                    let mut d = g.clone();
                    {
                        let dd = d.data_mut();
                        let sd = ts.data();
                        for ch in 0..c {
                            let sv = sd[ch];
                            for v in &mut dd[ch * h * w..(ch + 1) * h * w] {
                                *v *= sv;
                            }
                        }
                    }
                    sink.add(x, d);
                }
                if ns {
                    let mut d = Tensor::zeros(&[c]);
                    {
                        let dd = d.data_mut();
                        let xd = tx.data();
                        for ch in 0..c {
                            let mut acc = 0.0f32;
                            for i in ch * h * w..(ch + 1) * h * w {
                                acc = gd[i].mul_add(xd[i], acc);
                            }
                            dd[ch] = acc;
                        }
                    }
                    sink.add(s, d);
                }
            }) as _
        });
        Ok(self.push(y, nx || ns, back))
    }

    /// Per-channel shift on [C,H,W].
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let tb = self.value(b).clone();
        let (c, h, w) = dims3(&tx, "add_channel input")?;
        if tb.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel: bias {:?} vs {c} channels",
                tb.shape()
            )));
        }
        let mut y = tx;
        {
            let yd = y.data_mut();
            let bd = tb.data();
            for ch in 0..c {
                let bv = bd[ch];
                for v in &mut yd[ch * h * w..(ch + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(b));
        let back = (nx || nb).then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                if nx {
                    sink.add(x, g.clone());
                }
                if nb {
                    let mut d = Tensor::zeros(&[c]);
                    {
                        let dd = d.data_mut();
                        let gd = g.data();
                        for ch in 0..c {
                            let mut acc = 0.0f32;
                            for v in &gd[ch * h * w..(ch + 1) * h * w] {
                                acc += v;
                            }
                            dd[ch] = acc;
                        }
                    }
                    sink.add(b, d);
                }
            }) as _
        });
        Ok(self.push(y, nx || nb, back))
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.leaf(t, false)
    }

    /// Unfolds [C,H,W] into one row per k x k patch at the given stride:
    /// output [n_patches, C*k*k], patches in row-major grid order.
    pub fn extract_patches(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let (c, h, w) = dims3(&tx, "extract_patches input")?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::ShapeMismatch(format!(
                "extract_patches: input {h}x{w}, kernel {k}, stride {stride}"
            )));
        }
        let gh = (h - k) / stride + 1;
        let gw = (w - k) / stride + 1;
        let cols = c * k * k;
        let mut y = Tensor::zeros(&[gh * gw, cols]);
        {
            let yd = y.data_mut();
            let xd = tx.data();
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = (gy * gw + gx) * cols;
                    let mut j = 0;
                    for ch in 0..c {
                        for ky in 0..k {
                            let src = (ch * h + gy * stride + ky) * w + gx * stride;
                            yd[row + j..row + j + k].copy_from_slice(&xd[src..src + k]);
                            j += k;
                        }
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        let back = needs.then(|| {
            Box::new(move |g: &Tensor, sink: &mut crate::numerics::graph::GradSink| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let dd = dx.data_mut();
                    let gd = g.data();
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let row = (gy * gw + gx) * cols;
                            let mut j = 0;
                            for ch in 0..c {
                                for ky in 0..k {
                                    let dst = (ch * h + gy * stride + ky) * w + gx * stride;
                                    for kx in 0..k {
                                        dd[dst + kx] += gd[row + j + kx];
                                    }
                                    j += k;
                                }
                            }
                        }
                    }
                }
                sink.add(x, dx);
            }) as _
        });
        Ok(self.push(y, needs, back))
    }
}
