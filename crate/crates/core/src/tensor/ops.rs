use super::{kernels, numel, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Shapes are compatible when equal, or when the smaller one (after
/// dropping leading singleton dims) equals the trailing dims of the larger.
/// Returns the output shape and whether the *lhs* is the broadcast side.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Option<bool>)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let strip = |s: &[usize]| -> Vec<usize> { s.iter().copied().skip_while(|&d| d == 1).collect() };
    let (sa, sb) = (strip(a), strip(b));
    let suffix = |big: &[usize], small: &[usize]| big.len() >= small.len() && big[big.len() - small.len()..] == *small;
    if numel(a) >= numel(b) && suffix(a, &sb) && a.len() >= b.len() {
        Ok((a.to_vec(), Some(false)))
    } else if suffix(b, &sa) && b.len() >= a.len() {
        Ok((b.to_vec(), Some(true)))
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn sum_blocks(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Binary, name: &'static str) -> Result<Tensor> {
        let (shape, small_is_lhs) = broadcast(name, self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let n = numel(&shape);
        let (la, lb) = (a.len(), b.len());
        let f = move |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(a[i % la], b[i % lb])).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                let (a, b) = (pa.data(), pb.data());
                let (la, lb) = (a.len(), b.len());
                let full_a = |i: usize| a[i % la];
                let full_b = |i: usize| b[i % lb];
                let ga = need[0].then(|| {
                    let v: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * full_b(i)).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, gv)| gv / full_b(i)).collect(),
                    };
                    if small_is_lhs == Some(true) {
                        sum_blocks(&v, la)
                    } else {
                        v
                    }
                });
                let gb = need[1].then(|| {
                    let v: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|gv| -gv).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * full_a(i)).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| -gv * full_a(i) / (full_b(i) * full_b(i)))
                            .collect(),
                    };
                    if small_is_lhs == Some(false) {
                        sum_blocks(&v, lb)
                    } else {
                        v
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Div, "div")
    }

    /// Elementwise map with derivative `d(x, y)` where `y = f(x)`.
    pub(crate) fn unary<F, D>(&self, f: F, d: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((gv, &xv), &yv)| gv * d(xv, yv))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it as a singleton dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                data[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let nd = shape.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != nd || check != (0..nd).collect::<Vec<_>>() {
            return Err(Error::Contract(format!("permute: {perm:?} is not a permutation of {nd} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let src_index = permuted_index_map(&out_shape, perm, &in_strides);
        let x = self.data();
        let data: Vec<f64> = src_index.iter().map(|&i| x[i]).collect();
        let n = x.len();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (o, &i) in src_index.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow: range {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n = x.len();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat: axis {axis} out of range for {base:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut offset = 0;
                lens.iter()
                    .zip(need)
                    .map(|(&l, &nd)| {
                        let start = offset;
                        offset += l;
                        nd.then(|| {
                            let mut gp = Vec::with_capacity(outer * l * inner);
                            for o in 0..outer {
                                let b = (o * total + start) * inner;
                                gp.extend_from_slice(&g[b..b + l * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Explicit broadcast of singleton dims to `shape` (same rank).
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        let src = self.shape().to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("expand", &src, shape));
        }
        let out_shape = shape.to_vec();
        let src_strides: Vec<usize> = strides(&src)
            .iter()
            .zip(&src)
            .map(|(&st, &d)| if d == 1 { 0 } else { st })
            .collect();
        let identity: Vec<usize> = (0..src.len()).collect();
        let index = permuted_index_map(&out_shape, &identity, &src_strides);
        let x = self.data();
        let data: Vec<f64> = index.iter().map(|&i| x[i]).collect();
        let n = x.len();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2-D matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let exec = Exec::default();
        let data = kernels::gemm(exec, self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let bt = kernels::transpose(b.data(), k, n);
                    kernels::gemm(exec, g, &bt, m, n, k)
                });
                let gb = need[1].then(|| {
                    let at = kernels::transpose(a.data(), m, k);
                    kernels::gemm(exec, &at, g, k, m, n)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let at = move |o: usize, a: usize, i: usize| (o * len + a) * inner + i;
        for o in 0..outer {
            for i in 0..inner {
                let mx = (0..len).map(|a| x[at(o, a, i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[at(o, a, i)] - mx).exp();
                    y[at(o, a, i)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[at(o, a, i)] /= z;
                }
            }
        }
        let ys = y.clone();
        Ok(Tensor::from_op(
            y,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let dot: f64 = (0..len).map(|a| g[at(o, a, i)] * ys[at(o, a, i)]).sum();
                        for a in 0..len {
                            let j = at(o, a, i);
                            gx[j] = ys[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position (row-major over `out_shape`), the flat source
/// index given source strides indexed through `perm`.
fn permuted_index_map(out_shape: &[usize], perm: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
