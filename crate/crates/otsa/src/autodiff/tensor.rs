use std::sync::Arc;

use super::array::Array;
use super::tape::{bits, run_backward, BinaryKind, Gradients, Op, Tape, UnaryKind};
use super::AdError;

/// Dense value with an optional link to the tape node that produced it.
///
/// Cloning is cheap (the payload is shared). A tensor without a link is an
/// immutable value object; one with a link participates in backward passes
/// on its tape.
#[derive(Clone)]
pub struct Tensor {
    array: Array,
    link: Option<(Tape, usize)>,
}

impl From<Array> for Tensor {
    fn from(array: Array) -> Self {
        Tensor { array, link: None }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.array.shape())
            .field("tracked", &self.link.is_some())
            .finish()
    }
}

impl Tensor {
    pub(crate) fn tracked(array: Array, tape: Tape, id: usize) -> Self {
        Tensor {
            array,
            link: Some((tape, id)),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from(Array::scalar(value))
    }

    pub fn array(&self) -> &Array {
        &self.array
    }

    pub fn shape(&self) -> &[usize] {
        self.array.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.array.data()
    }

    pub fn len(&self) -> usize {
        self.array.len()
    }

    pub fn is_empty(&self) -> bool {
        self.array.is_empty()
    }

    pub fn dims2(&self) -> Result<(usize, usize), AdError> {
        self.array.dims2()
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.array.get2(i, j)
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.array.first()
    }

    pub fn is_tracked(&self) -> bool {
        self.link.is_some()
    }

    pub(crate) fn link(&self) -> Option<(Tape, usize)> {
        self.link.clone()
    }

    /// Same values, no tape link.
    pub fn detach(&self) -> Tensor {
        Tensor {
            array: self.array.clone(),
            link: None,
        }
    }

    /// Reverse pass seeded with 1 on a scalar output.
    pub fn backward(&self) -> Result<Gradients, AdError> {
        run_backward(self, None, false)
    }

    /// Reverse pass with an explicit cotangent and/or gradient recording.
    /// With `create_graph` the returned gradients stay on the tape and can be
    /// differentiated again.
    pub fn backward_with(
        &self,
        cotangent: Option<&Array>,
        create_graph: bool,
    ) -> Result<Gradients, AdError> {
        run_backward(self, cotangent, create_graph)
    }

    // ---- recording helpers -------------------------------------------------

    fn unary_op(&self, out: Array, kind: UnaryKind) -> Tensor {
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::Unary { kind, x: *id }, &out, true);
                Tensor::tracked(out, tape.clone(), new_id)
            }
            None => Tensor::from(out),
        }
    }

    fn pick_tape(&self, other: &Tensor) -> Result<Option<Tape>, AdError> {
        match (&self.link, &other.link) {
            (Some((a, _)), Some((b, _))) => {
                if a.same_tape(b) {
                    Ok(Some(a.clone()))
                } else {
                    Err(AdError::TapeMismatch)
                }
            }
            (Some((a, _)), None) => Ok(Some(a.clone())),
            (None, Some((b, _))) => Ok(Some(b.clone())),
            (None, None) => Ok(None),
        }
    }

    fn id_on(&self, tape: &Tape) -> usize {
        match &self.link {
            Some((_, id)) => *id,
            None => tape.push_const_leaf(&self.array),
        }
    }

    fn binary_result(
        &self,
        other: &Tensor,
        out: Array,
        build: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor, AdError> {
        match self.pick_tape(other)? {
            Some(tape) => {
                let lhs = self.id_on(&tape);
                let rhs = other.id_on(&tape);
                let id = tape.push(build(lhs, rhs), &out, true);
                Ok(Tensor::tracked(out, tape, id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_shapes<'a>(
        &'a self,
        other: &'a Tensor,
        op: &'static str,
    ) -> Result<(&'a [usize], bool, bool), AdError> {
        // Returns (output shape, lhs is broadcast scalar, rhs is broadcast scalar).
        if self.shape() == other.shape() {
            Ok((self.shape(), false, false))
        } else if self.len() == 1 {
            Ok((other.shape(), true, false))
        } else if other.len() == 1 {
            Ok((self.shape(), false, true))
        } else {
            Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })
        }
    }

    fn elementwise(
        &self,
        other: &Tensor,
        kind: BinaryKind,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        check_rhs: Option<fn(f64) -> bool>,
    ) -> Result<Tensor, AdError> {
        let (shape, lhs_scalar, rhs_scalar) = self.zip_shapes(other, op)?;
        let shape = shape.to_vec();
        let a = self.data();
        let b = other.data();
        if let Some(bad) = check_rhs {
            if let Some(idx) = b.iter().position(|&v| bad(v)) {
                return Err(AdError::Domain {
                    op,
                    index: idx,
                    value: b[idx],
                });
            }
        }
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        if lhs_scalar {
            let a0 = a[0];
            out.extend(b.iter().map(|&bv| f(a0, bv)));
        } else if rhs_scalar {
            let b0 = b[0];
            out.extend(a.iter().map(|&av| f(av, b0)));
        } else {
            out.extend(a.iter().zip(b.iter()).map(|(&av, &bv)| f(av, bv)));
        }
        let out = Array::from_vec(shape, out)?;
        self.binary_result(other, out, |lhs, rhs| Op::Binary { kind, lhs, rhs })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise(other, BinaryKind::Add, "add", |a, b| a + b, None)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise(other, BinaryKind::Sub, "sub", |a, b| a - b, None)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise(other, BinaryKind::Mul, "mul", |a, b| a * b, None)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise(other, BinaryKind::Div, "div", |a, b| a / b, Some(|v| v == 0.0))
    }

    fn unary_map(
        &self,
        op: &'static str,
        kind: UnaryKind,
        f: impl Fn(f64) -> f64,
        check: Option<fn(f64) -> bool>,
    ) -> Result<Tensor, AdError> {
        if let Some(bad) = check {
            if let Some(idx) = self.data().iter().position(|&v| bad(v)) {
                return Err(AdError::Domain {
                    op,
                    index: idx,
                    value: self.data()[idx],
                });
            }
        }
        let out: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let out = Array::from_vec(self.shape().to_vec(), out)?;
        Ok(self.unary_op(out, kind))
    }

    pub fn neg(&self) -> Result<Tensor, AdError> {
        self.unary_map("neg", UnaryKind::Neg, |v| -v, None)
    }

    pub fn exp(&self) -> Result<Tensor, AdError> {
        self.unary_map("exp", UnaryKind::Exp, f64::exp, None)
    }

    pub fn log(&self) -> Result<Tensor, AdError> {
        self.unary_map("log", UnaryKind::Log, f64::ln, Some(|v| v <= 0.0))
    }

    pub fn sqrt(&self) -> Result<Tensor, AdError> {
        self.unary_map("sqrt", UnaryKind::Sqrt, f64::sqrt, Some(|v| v < 0.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor, AdError> {
        self.unary_map(
            "sigmoid",
            UnaryKind::Sigmoid,
            |v| 1.0 / (1.0 + (-v).exp()),
            None,
        )
    }

    pub fn tanh(&self) -> Result<Tensor, AdError> {
        self.unary_map("tanh", UnaryKind::Tanh, f64::tanh, None)
    }

    pub fn max_with_scalar(&self, c: f64) -> Result<Tensor, AdError> {
        self.unary_map("max_with_scalar", UnaryKind::MaxScalar(bits(c)), |v| v.max(c), None)
    }

    pub fn relu(&self) -> Result<Tensor, AdError> {
        self.max_with_scalar(0.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, AdError> {
        self.unary_map("scale", UnaryKind::Scale(bits(c)), |v| v * c, None)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, AdError> {
        self.unary_map("add_scalar", UnaryKind::AddScalar(bits(c)), |v| v + c, None)
    }

    /// Elementwise `-x ln x` with the limit convention `0 ln 0 = 0`.
    pub fn entropy_term(&self) -> Result<Tensor, AdError> {
        self.unary_map(
            "entropy_term",
            UnaryKind::EntropyTerm,
            |v| if v > 0.0 { -v * v.ln() } else { 0.0 },
            Some(|v| v < 0.0),
        )
    }

    /// Elementwise derivative of [`Tensor::entropy_term`]: `-(1 + ln x)`, 0 at 0.
    pub fn entropy_term_grad(&self) -> Result<Tensor, AdError> {
        self.unary_map(
            "entropy_term_grad",
            UnaryKind::EntropyTermGrad,
            |v| if v > 0.0 { -(1.0 + v.ln()) } else { 0.0 },
            Some(|v| v < 0.0),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        let out = Array::from_vec(vec![m, n], out)?;
        self.binary_result(other, out, |lhs, rhs| Op::Matmul { lhs, rhs })
    }

    pub fn transpose(&self) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2()?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        let out = Array::from_vec(vec![n, m], out)?;
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::Transpose { x: *id }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, AdError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(AdError::BadReshape {
                from: self.shape().to_vec(),
                to: shape,
            });
        }
        let out = Array::from_parts(shape, Arc::new(self.data().to_vec()));
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::Reshape { x: *id }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor, AdError> {
        if self.is_empty() {
            return Err(AdError::EmptyReduction { op: "sum" });
        }
        let s: f64 = self.data().iter().sum();
        let out = Array::scalar(s);
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::SumAll { x: *id }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize), AdError> {
        let (m, n) = self.dims2()?;
        if axis > 1 {
            return Err(AdError::InvalidAxis {
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let reduced = if axis == 0 { m } else { n };
        if reduced == 0 {
            return Err(AdError::EmptyReduction { op });
        }
        Ok((m, n))
    }

    /// Sum over `axis` of a 2-d tensor, keeping the reduced dimension as 1.
    /// `axis = 0` sums over rows (column totals), `axis = 1` over columns.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, AdError> {
        let (m, n) = self.check_axis(axis, "sum")?;
        let a = self.data();
        let out = if axis == 0 {
            let mut acc = vec![0.0; n];
            for i in 0..m {
                for (j, v) in acc.iter_mut().enumerate() {
                    *v += a[i * n + j];
                }
            }
            Array::from_vec(vec![1, n], acc)?
        } else {
            let mut acc = vec![0.0; m];
            for (i, v) in acc.iter_mut().enumerate() {
                *v = a[i * n..(i + 1) * n].iter().sum();
            }
            Array::from_vec(vec![m, 1], acc)?
        };
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::SumAxis { x: *id, axis }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    /// Overflow-safe `log(sum(exp(x)))` over all elements.
    pub fn logsumexp_all(&self) -> Result<Tensor, AdError> {
        if self.is_empty() {
            return Err(AdError::EmptyReduction { op: "logsumexp" });
        }
        let out = Array::scalar(logsumexp_slice(self.data()));
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::LogSumExpAll { x: *id }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    /// Overflow-safe logsumexp over `axis` of a 2-d tensor (keep-dim).
    pub fn logsumexp_axis(&self, axis: usize) -> Result<Tensor, AdError> {
        let (m, n) = self.check_axis(axis, "logsumexp")?;
        let a = self.data();
        let out = if axis == 0 {
            let mut acc = vec![0.0; n];
            let mut lane = vec![0.0; m];
            for (j, v) in acc.iter_mut().enumerate() {
                for i in 0..m {
                    lane[i] = a[i * n + j];
                }
                *v = logsumexp_slice(&lane);
            }
            Array::from_vec(vec![1, n], acc)?
        } else {
            let mut acc = vec![0.0; m];
            for (i, v) in acc.iter_mut().enumerate() {
                *v = logsumexp_slice(&a[i * n..(i + 1) * n]);
            }
            Array::from_vec(vec![m, 1], acc)?
        };
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::LogSumExpAxis { x: *id, axis }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    /// Softmax along `axis` of a 2-d tensor: the slices along that axis are
    /// positive and sum to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, AdError> {
        let (m, n) = self.check_axis(axis, "softmax")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        if axis == 0 {
            for j in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..m {
                    mx = mx.max(a[i * n + j]);
                }
                let mut total = 0.0;
                for i in 0..m {
                    let e = (a[i * n + j] - mx).exp();
                    out[i * n + j] = e;
                    total += e;
                }
                for i in 0..m {
                    out[i * n + j] /= total;
                }
            }
        } else {
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                let orow = &mut out[i * n..(i + 1) * n];
                let mut total = 0.0;
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o = (v - mx).exp();
                    total += *o;
                }
                for o in orow.iter_mut() {
                    *o /= total;
                }
            }
        }
        let out = Array::from_vec(vec![m, n], out)?;
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(Op::Softmax { x: *id, axis }, &out, true);
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    // ---- row selection -------------------------------------------------------

    /// Rows of a 2-d tensor at `indices`, stacked in order (rows may repeat).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2()?;
        let a = self.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(AdError::IndexOutOfRange { index: i, rows: m });
            }
            out.extend_from_slice(&a[i * n..(i + 1) * n]);
        }
        let out = Array::from_vec(vec![indices.len(), n], out)?;
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(
                    Op::GatherRows {
                        x: *id,
                        indices: Arc::new(indices.to_vec()),
                        src_rows: m,
                    },
                    &out,
                    true,
                );
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    /// Adjoint of [`Tensor::gather_rows`]: adds row `i` of `self` into row
    /// `indices[i]` of a zero matrix with `out_rows` rows.
    pub fn scatter_rows(&self, indices: &[usize], out_rows: usize) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2()?;
        if m != indices.len() {
            return Err(AdError::ShapeMismatch {
                op: "scatter_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let a = self.data();
        let mut out = vec![0.0; out_rows * n];
        for (src, &dst) in indices.iter().enumerate() {
            if dst >= out_rows {
                return Err(AdError::IndexOutOfRange {
                    index: dst,
                    rows: out_rows,
                });
            }
            for j in 0..n {
                out[dst * n + j] += a[src * n + j];
            }
        }
        let out = Array::from_vec(vec![out_rows, n], out)?;
        match &self.link {
            Some((tape, id)) => {
                let new_id = tape.push(
                    Op::ScatterRows {
                        x: *id,
                        indices: Arc::new(indices.to_vec()),
                    },
                    &out,
                    true,
                );
                Ok(Tensor::tracked(out, tape.clone(), new_id))
            }
            None => Ok(Tensor::from(out)),
        }
    }

    // ---- broadcast helpers -----------------------------------------------------

    /// Expands a `[1, n]` tensor to `[rows, n]` by repetition (differentiable).
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor, AdError> {
        let ones = Tensor::from(Array::ones(vec![rows, 1]));
        ones.matmul(self)
    }

    /// Expands an `[m, 1]` tensor to `[m, cols]` by repetition (differentiable).
    pub fn broadcast_cols(&self, cols: usize) -> Result<Tensor, AdError> {
        let ones = Tensor::from(Array::ones(vec![1, cols]));
        self.matmul(&ones)
    }
}

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    if !mx.is_finite() {
        return mx;
    }
    let total: f64 = xs.iter().map(|&v| (v - mx).exp()).sum();
    mx + total.ln()
}
