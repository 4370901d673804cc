//! Dense row-major matrices and the layer primitives used by the model, each
//! with a hand-written backward pass.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, o: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn add(&self, o: &Mat) -> Mat {
        let mut m = self.clone();
        m.add_assign(o);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `[start, start + n)` as a new matrix.
    pub fn cols_slice(&self, start: usize, n: usize) -> Mat {
        let mut m = Mat::zeros(self.rows, n);
        for r in 0..self.rows {
            m.row_mut(r).copy_from_slice(&self.row(r)[start..start + n]);
        }
        m
    }

    pub fn add_cols(&mut self, start: usize, part: &Mat) {
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r)[start..start + part.cols].iter_mut().zip(part.row(r)) {
                *a += b;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            s[l] += x[l] * y[l];
        }
    }
    let mut t = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
    for (x, y) in ra.iter().zip(rb) {
        t += x * y;
    }
    t
}

/// `a · bᵀ` where `b` is given as an `n × k` row-major slice.
pub fn matmul_nt(a: &Mat, b: &[f64], n: usize) -> Mat {
    let k = a.cols;
    debug_assert_eq!(b.len(), n * k);
    if a.rows == 1 {
        let ar = a.row(0);
        return Mat::from_vec(1, n, (0..n).map(|j| dot(ar, &b[j * k..(j + 1) * k])).collect());
    }
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for (i, &v) in b[j * k..(j + 1) * k].iter().enumerate() {
            bt[i * n + j] = v;
        }
    }
    matmul_nn(a, &bt, n)
}

/// `a · b` where `b` is a `k × n` row-major slice.
pub fn matmul_nn(a: &Mat, b: &[f64], n: usize) -> Mat {
    let k = a.cols;
    debug_assert_eq!(b.len(), k * n);
    let mut out = Mat::zeros(a.rows, n);
    for r in 0..a.rows {
        let ar = a.row(r);
        let o = out.row_mut(r);
        for (i, &x) in ar.iter().enumerate() {
            if x != 0.0 {
                for (oj, bj) in o.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                    *oj += x * bj;
                }
            }
        }
    }
    out
}

/// Accumulates `aᵀ · b` into `out` (`a.cols × b.cols`, row-major).
pub fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut [f64]) {
    debug_assert_eq!(a.rows, b.rows);
    let n = b.cols;
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &x) in ar.iter().enumerate() {
            if x != 0.0 {
                for (oj, bj) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                    *oj += x * bj;
                }
            }
        }
    }
}

/// Offsets of a fully connected layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn forward(&self, x: &Mat, p: &[f64]) -> Mat {
        let mut y = matmul_nt(x, &p[self.w..self.w + self.out * self.inp], self.out);
        let b = &p[self.b..self.b + self.out];
        for r in 0..y.rows {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, x: &Mat, dy: &Mat, p: &[f64], g: &mut [f64]) -> Mat {
        matmul_tn_acc(dy, x, &mut g[self.w..self.w + self.out * self.inp]);
        let gb = &mut g[self.b..self.b + self.out];
        for r in 0..dy.rows {
            for (a, d) in gb.iter_mut().zip(dy.row(r)) {
                *a += d;
            }
        }
        matmul_nn(dy, &p[self.w..self.w + self.out * self.inp], self.inp)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn tanh(y: f64) -> f64 {
    if y.abs() < 0.5 {
        y.tanh()
    } else {
        let t = 1.0 - 2.0 / (1.0 + (2.0 * y.abs()).exp());
        t.copysign(y)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: &Mat) -> Mat {
    let mut y = x.clone();
    for v in &mut y.data {
        let u = *v;
        *v = 0.5 * u * (1.0 + tanh(GELU_C * (u + GELU_A * u * u * u)));
    }
    y
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (d, &u) in dx.data.iter_mut().zip(&x.data) {
        let t = tanh(GELU_C * (u + GELU_A * u * u * u));
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
        *d *= 0.5 * (1.0 + t) + 0.5 * u * dt;
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

/// Cached per-row statistics of a layer normalization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

impl Norm {
    pub fn forward(&self, x: &Mat, p: &[f64]) -> (Mat, NormCache) {
        let d = self.dim;
        let gamma = &p[self.gamma..self.gamma + d];
        let beta = &p[self.beta..self.beta + d];
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let xh = xhat.row(r).to_vec();
            for (i, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = gamma[i] * xh[i] + beta[i];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, c: &NormCache, dy: &Mat, p: &[f64], g: &mut [f64]) -> Mat {
        let d = self.dim;
        let gamma = &p[self.gamma..self.gamma + d];
        let mut dx = Mat::zeros(dy.rows, d);
        for r in 0..dy.rows {
            let xh = c.xhat.row(r);
            let dyr = dy.row(r);
            for i in 0..d {
                g[self.gamma + i] += dyr[i] * xh[i];
                g[self.beta + i] += dyr[i];
            }
            let dxh: Vec<f64> = (0..d).map(|i| dyr[i] * gamma[i]).collect();
            let m1 = dxh.iter().sum::<f64>() / d as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = c.inv_std[r] * (dxh[i] - m1 - xh[i] * m2);
            }
        }
        dx
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for r in 0..y.rows {
        let row = y.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    y
}

pub fn softmax_rows_backward(y: &Mat, dy: &Mat) -> Mat {
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let dr = dy.row(r);
        let s = dot(yr, dr);
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = yr[i] * (dr[i] - s);
        }
    }
    dx
}

/// Multi-head scaled dot-product attention with input/output projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttnCache {
    pub xq: Mat,
    pub xkv: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Attention weights per head (rows = queries).
    pub a: Vec<Mat>,
    pub concat: Mat,
    pub scale: f64,
}

impl Attention {
    /// `temperature` divides the scores; a huge value gives uniform weights.
    pub fn forward(&self, xq: &Mat, xkv: &Mat, p: &[f64], temperature: f64) -> (Mat, AttnCache) {
        let (k, v) = self.project_kv(xkv, p);
        self.forward_kv(xq, xkv, k, v, p, temperature)
    }

    /// Key and value projections of the attended set.
    pub fn project_kv(&self, xkv: &Mat, p: &[f64]) -> (Mat, Mat) {
        (self.k.forward(xkv, p), self.v.forward(xkv, p))
    }

    /// Attention with precomputed key and value projections of `xkv`.
    pub fn forward_kv(&self, xq: &Mat, xkv: &Mat, k: Mat, v: Mat, p: &[f64], temperature: f64) -> (Mat, AttnCache) {
        let d = self.q.out;
        let dh = d / self.heads;
        let q = self.q.forward(xq, p);
        let scale = 1.0 / ((dh as f64).sqrt() * temperature);
        let mut concat = Mat::zeros(xq.rows, d);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.cols_slice(h * dh, dh);
            let kh = k.cols_slice(h * dh, dh);
            let vh = v.cols_slice(h * dh, dh);
            let mut s = matmul_nt(&qh, &kh.data, kh.rows);
            s.data.iter_mut().for_each(|x| *x *= scale);
            let a = softmax_rows(&s);
            let oh = matmul_nn(&a, &vh.data, dh);
            concat.add_cols(h * dh, &oh);
            weights.push(a);
        }
        let y = self.o.forward(&concat, p);
        (y, AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, a: weights, concat, scale })
    }

    /// Returns gradients with respect to the query and key/value inputs.
    pub fn backward(&self, c: &AttnCache, dy: &Mat, p: &[f64], g: &mut [f64]) -> (Mat, Mat) {
        let d = self.q.out;
        let dh = d / self.heads;
        let dconcat = self.o.backward(&c.concat, dy, p, g);
        let mut dq = Mat::zeros(c.q.rows, d);
        let mut dk = Mat::zeros(c.k.rows, d);
        let mut dv = Mat::zeros(c.v.rows, d);
        for h in 0..self.heads {
            let qh = c.q.cols_slice(h * dh, dh);
            let kh = c.k.cols_slice(h * dh, dh);
            let vh = c.v.cols_slice(h * dh, dh);
            let doh = dconcat.cols_slice(h * dh, dh);
            let a = &c.a[h];
            let da = matmul_nt(&doh, &vh.data, vh.rows);
            let mut dvh = Mat::zeros(vh.rows, dh);
            matmul_tn_acc(a, &doh, &mut dvh.data);
            let mut ds = softmax_rows_backward(a, &da);
            ds.data.iter_mut().for_each(|x| *x *= c.scale);
            let dqh = matmul_nn(&ds, &kh.data, dh);
            let mut dkh = Mat::zeros(kh.rows, dh);
            matmul_tn_acc(&ds, &qh, &mut dkh.data);
            dq.add_cols(h * dh, &dqh);
            dk.add_cols(h * dh, &dkh);
            dv.add_cols(h * dh, &dvh);
        }
        let dxq = self.q.backward(&c.xq, &dq, p, g);
        let mut dxkv = self.k.backward(&c.xkv, &dk, p, g);
        dxkv.add_assign(&self.v.backward(&c.xkv, &dv, p, g));
        (dxq, dxkv)
    }
}
