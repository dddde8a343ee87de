//! Dense row-major f64 tensors.
//!
//! All arithmetic is eager and allocates its output. Binary ops broadcast
//! with trailing-dimension alignment. Shape mismatches panic with both
//! shapes in the message; they are programming errors, not runtime input.

use super::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{:.4}, {:.4}, ... {:.4}]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data[self.data.len() - 1]
            )
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.data.len(),
            "reshape {:?} -> {:?}: element count mismatch",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    // ---- broadcasting ----

    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
        let rank = a.len().max(b.len());
        let mut out = vec![0usize; rank];
        for i in 0..rank {
            let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
            let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible broadcast: {:?} vs {:?}",
                a,
                b
            );
            out[i] = da.max(db);
        }
        out
    }

    fn binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        // Fast path: identical shapes.
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor { shape: self.shape.clone(), data };
        }
        // Fast path: rhs scalar.
        if other.data.len() == 1 {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        // Fast path: lhs scalar.
        if self.data.len() == 1 {
            let a = self.data[0];
            return other.map(|b| f(a, b));
        }
        // Fast path: rhs is a trailing suffix of lhs (e.g. bias [D] vs [N,L,D]).
        if other.rank() <= self.rank()
            && self.shape[self.rank() - other.rank()..] == other.shape[..]
        {
            let chunk = other.data.len();
            let mut data = Vec::with_capacity(self.data.len());
            for block in self.data.chunks_exact(chunk) {
                for (a, b) in block.iter().zip(&other.data) {
                    data.push(f(*a, *b));
                }
            }
            return Tensor { shape: self.shape.clone(), data };
        }
        // General strided broadcast.
        let out_shape = Tensor::broadcast_shape(&self.shape, &other.shape);
        let rank = out_shape.len();
        let stride = |shape: &[usize]| {
            let mut s = vec![0isize; rank];
            let offset = rank - shape.len();
            let mut acc = 1isize;
            for i in (0..shape.len()).rev() {
                s[offset + i] = if shape[i] == 1 { 0 } else { acc };
                acc *= shape[i] as isize;
            }
            s
        };
        let sa = stride(&self.shape);
        let sb = stride(&other.shape);
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut oa = 0isize;
        let mut ob = 0isize;
        for _ in 0..n {
            data.push(f(self.data[oa as usize], other.data[ob as usize]));
            for d in (0..rank).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                oa -= sa[d] * out_shape[d] as isize;
                ob -= sb[d] * out_shape[d] as isize;
                idx[d] = 0;
            }
        }
        Tensor { shape: out_shape, data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a / b)
    }

    /// In-place accumulation; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(
            self.shape, other.shape,
            "add_assign shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum a broadcast result back down to `target` shape (backward of
    /// broadcasting).
    pub fn reduce_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let rank = self.rank();
        let offset = rank - target.len();
        let mut out = Tensor::zeros(target);
        // Strides of the target within the broadcast shape.
        let mut tstride = vec![0isize; rank];
        let mut acc = 1isize;
        for i in (0..target.len()).rev() {
            tstride[offset + i] = if target[i] == 1 { 0 } else { acc };
            acc *= target[i] as isize;
        }
        let mut idx = vec![0usize; rank];
        let mut to = 0isize;
        for &v in &self.data {
            out.data[to as usize] += v;
            for d in (0..rank).rev() {
                idx[d] += 1;
                to += tstride[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                to -= tstride[d] * self.shape[d] as isize;
                idx[d] = 0;
            }
        }
        out
    }

    // ---- matmul ----

    /// [M,K] x [K,N] -> [M,N].
    /// [..., K] x [K, N] -> [..., N]; leading lhs dims are treated as one
    /// flattened row dimension, so 3-D activations multiply a 2-D weight
    /// without reshape copies.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() >= 2, "matmul lhs rank: {:?}", self.shape);
        assert_eq!(other.rank(), 2, "matmul rhs rank: {:?}", other.shape);
        let k = self.shape[self.rank() - 1];
        let m = self.data.len() / k;
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(
            k, k2,
            "matmul inner dim mismatch: {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 3, "bmm lhs rank: {:?}", self.shape);
        assert_eq!(other.rank(), 3, "bmm rhs rank: {:?}", other.shape);
        let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (b2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
        assert!(
            b == b2 && k == k2,
            "bmm shape mismatch: {:?} x {:?}",
            self.shape,
            other.shape
        );
        let mut out = Tensor::zeros(&[b, m, n]);
        for i in 0..b {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    other.data.as_ptr().add(i * k * n),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        out
    }

    /// [M,K] x [N,K]^T -> [M,N] without materializing the transpose; the
    /// gemm reads `other` with swapped strides.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() >= 2, "matmul_nt lhs rank: {:?}", self.shape);
        assert_eq!(other.rank(), 2, "matmul_nt rhs rank: {:?}", other.shape);
        let k = self.shape[self.rank() - 1];
        let m = self.data.len() / k;
        let (n, k2) = (other.shape[0], other.shape[1]);
        assert_eq!(
            k, k2,
            "matmul_nt inner dim mismatch: {:?} x {:?}^T",
            self.shape, other.shape
        );
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                1,
                k as isize,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// [K,M]^T x [K,N] -> [M,N] without materializing the transpose; leading
    /// dims on either side are flattened into the contracted K dimension.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() >= 2, "matmul_tn lhs rank: {:?}", self.shape);
        assert!(other.rank() >= 2, "matmul_tn rhs rank: {:?}", other.shape);
        let m = self.shape[self.rank() - 1];
        let k = self.data.len() / m;
        let n = other.shape[other.rank() - 1];
        let k2 = other.data.len() / n;
        assert_eq!(
            k, k2,
            "matmul_tn inner dim mismatch: {:?}^T x {:?}",
            self.shape, other.shape
        );
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                m as isize,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// [B,M,K] x [B,N,K]^T -> [B,M,N], transposed reads via strides.
    pub fn bmm_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 3, "bmm_nt lhs rank: {:?}", self.shape);
        assert_eq!(other.rank(), 3, "bmm_nt rhs rank: {:?}", other.shape);
        let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (b2, n, k2) = (other.shape[0], other.shape[1], other.shape[2]);
        assert!(
            b == b2 && k == k2,
            "bmm_nt shape mismatch: {:?} x {:?}^T",
            self.shape,
            other.shape
        );
        let mut out = Tensor::zeros(&[b, m, n]);
        for i in 0..b {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    other.data.as_ptr().add(i * n * k),
                    1,
                    k as isize,
                    0.0,
                    out.data.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        out
    }

    /// [B,K,M]^T x [B,K,N] -> [B,M,N], transposed reads via strides.
    pub fn bmm_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 3, "bmm_tn lhs rank: {:?}", self.shape);
        assert_eq!(other.rank(), 3, "bmm_tn rhs rank: {:?}", other.shape);
        let (b, k, m) = (self.shape[0], self.shape[1], self.shape[2]);
        let (b2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
        assert!(
            b == b2 && k == k2,
            "bmm_tn shape mismatch: {:?}^T x {:?}",
            self.shape,
            other.shape
        );
        let mut out = Tensor::zeros(&[b, m, n]);
        for i in 0..b {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr().add(i * k * m),
                    1,
                    m as isize,
                    other.data.as_ptr().add(i * k * n),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        out
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Tensor {
        assert!(self.rank() >= 2, "transpose on rank {:?}", self.shape);
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch: usize = self.shape[..r - 2].iter().product();
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut data = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Tensor { shape, data }
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert!(axis < self.rank(), "sum_axis {} on {:?}", axis, self.shape);
        let pre: usize = self.shape[..axis].iter().product();
        let ax = self.shape[axis];
        let post: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut data = vec![0.0; pre * post];
        for p in 0..pre {
            for a in 0..ax {
                let src = &self.data[(p * ax + a) * post..(p * ax + a + 1) * post];
                let dst = &mut data[p * post..(p + 1) * post];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Max over the last axis; returns (values, argmax). First max wins ties.
    pub fn max_last(&self) -> (Tensor, Vec<usize>) {
        assert!(self.rank() >= 1);
        let l = *self.shape.last().unwrap();
        let rows = self.data.len() / l;
        let mut vals = Vec::with_capacity(rows);
        let mut args = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data[r * l..(r + 1) * l];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            vals.push(bv);
            args.push(bi);
        }
        let shape = self.shape[..self.rank() - 1].to_vec();
        (Tensor::new(shape, vals), args)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let l = *self.shape.last().expect("softmax on scalar");
        let mut data = vec![0.0; self.data.len()];
        for (out, row) in data.chunks_exact_mut(l).zip(self.data.chunks_exact(l)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    /// Stable log-sum-exp over the last axis, removing it.
    pub fn logsumexp_last(&self) -> Tensor {
        let l = *self.shape.last().expect("logsumexp on scalar");
        let rows = self.data.len() / l;
        let mut data = Vec::with_capacity(rows);
        for row in self.data.chunks_exact(l) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            data.push(m + s.ln());
        }
        Tensor::new(self.shape[..self.rank() - 1].to_vec(), data)
    }

    /// L2-normalize over the last axis.
    pub fn l2_normalize_last(&self) -> Tensor {
        let l = *self.shape.last().expect("l2norm on scalar");
        let mut data = vec![0.0; self.data.len()];
        for (out, row) in data.chunks_exact_mut(l).zip(self.data.chunks_exact(l)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    /// Layer norm over the last axis (no affine), eps inside the sqrt.
    pub fn layernorm_last(&self, eps: f64) -> Tensor {
        let l = *self.shape.last().expect("layernorm on scalar");
        let mut data = vec![0.0; self.data.len()];
        for (out, row) in data.chunks_exact_mut(l).zip(self.data.chunks_exact(l)) {
            let mean = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    // ---- structural ops ----

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let rank = parts[0].rank();
        assert!(axis < rank);
        for p in parts {
            assert_eq!(p.rank(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape[d], parts[0].shape[d],
                        "concat shape mismatch at axis {}: {:?} vs {:?}",
                        d, p.shape, parts[0].shape
                    );
                }
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let pre: usize = shape[..axis].iter().product();
        let post: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p_idx in 0..pre {
            for p in parts {
                let chunk = p.shape[axis] * post;
                data.extend_from_slice(&p.data[p_idx * chunk..(p_idx + 1) * chunk]);
            }
        }
        Tensor { shape, data }
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(axis < self.rank());
        assert!(
            start + len <= self.shape[axis],
            "narrow [{start}, {}) out of range on axis {axis} of {:?}",
            start + len,
            self.shape
        );
        let pre: usize = self.shape[..axis].iter().product();
        let post: usize = self.shape[axis + 1..].iter().product();
        let ax = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = (p * ax + start) * post;
            data.extend_from_slice(&self.data[base..base + len * post]);
        }
        Tensor { shape, data }
    }

    /// Gather rows along axis 0 (embedding lookup, batch tiling, reordering).
    pub fn index_select0(&self, indices: &[usize]) -> Tensor {
        assert!(self.rank() >= 1);
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < self.shape[0], "index {} out of {:?}", i, self.shape);
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Tensor { shape, data }
    }

    /// Backward of index_select0: scatter-add rows of `self` into a zero
    /// tensor with `rows0` rows.
    pub fn scatter_add0(&self, indices: &[usize], rows0: usize) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        assert_eq!(indices.len(), self.shape[0]);
        let mut shape = self.shape.clone();
        shape[0] = rows0;
        let mut out = Tensor::zeros(&shape);
        for (r, &i) in indices.iter().enumerate() {
            let dst = &mut out.data[i * row..(i + 1) * row];
            let src = &self.data[r * row..(r + 1) * row];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        out
    }

    /// [N,L,D] with per-row token index -> [N,D].
    pub fn gather_token(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 3, "gather_token on {:?}", self.shape);
        let (n, l, d) = (self.shape[0], self.shape[1], self.shape[2]);
        assert_eq!(idx.len(), n);
        let mut data = Vec::with_capacity(n * d);
        for (row, &t) in idx.iter().enumerate() {
            assert!(t < l, "token index {} out of sequence length {}", t, l);
            let base = (row * l + t) * d;
            data.extend_from_slice(&self.data[base..base + d]);
        }
        Tensor::new(vec![n, d], data)
    }

    /// [N,L,D] -> [N*h, L, D/h]: split the channel axis into heads and fold
    /// them into the batch.
    pub fn split_heads(&self, heads: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "split_heads on {:?}", self.shape);
        let (n, l, d) = (self.shape[0], self.shape[1], self.shape[2]);
        assert_eq!(d % heads, 0, "width {} not divisible by {} heads", d, heads);
        let hd = d / heads;
        let mut data = vec![0.0; self.data.len()];
        for b in 0..n {
            for h in 0..heads {
                for t in 0..l {
                    let src = (b * l + t) * d + h * hd;
                    let dst = ((b * heads + h) * l + t) * hd;
                    data[dst..dst + hd].copy_from_slice(&self.data[src..src + hd]);
                }
            }
        }
        Tensor::new(vec![n * heads, l, hd], data)
    }

    /// Inverse of split_heads: [N*h, L, D/h] -> [N, L, D].
    pub fn merge_heads(&self, heads: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "merge_heads on {:?}", self.shape);
        let (nh, l, hd) = (self.shape[0], self.shape[1], self.shape[2]);
        assert_eq!(nh % heads, 0);
        let n = nh / heads;
        let d = hd * heads;
        let mut data = vec![0.0; self.data.len()];
        for b in 0..n {
            for h in 0..heads {
                for t in 0..l {
                    let src = ((b * heads + h) * l + t) * hd;
                    let dst = (b * l + t) * d + h * hd;
                    data[dst..dst + hd].copy_from_slice(&self.data[src..src + hd]);
                }
            }
        }
        Tensor::new(vec![n, l, d], data)
    }

    /// Extract the main diagonal of a square matrix.
    pub fn diag2d(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        assert_eq!(m, n, "diag of non-square {:?}", self.shape);
        let data = (0..n).map(|i| self.data[i * n + i]).collect();
        Tensor::new(vec![n], data)
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// The tanh form 0.5*x*(1 + tanh(u)) is computed as x*sigmoid(2u), which is
// algebraically identical but needs one exp instead of one tanh; libm's tanh
// is roughly 3x slower than exp and this is the hottest transcendental in a
// training step.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp()); // = 0.5*(1 + tanh(u))
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    // d/dx [x*s(x)]: s + x * 2*s*(1-s) * du, using sigmoid' = s(1-s) and chain
    // rule through 2u.
    s + 2.0 * x * s * (1.0 - s) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_suffix_and_general() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3], vec![10., 20., 30.]);
        let c = a.add(&b);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        // column broadcast needs the general path
        let col = Tensor::new(vec![2, 1], vec![100., 200.]);
        let d = a.add(&col);
        assert_eq!(d.data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn reduce_to_shape_inverts_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.; 6]);
        let r = g.reduce_to_shape(&[3]);
        assert_eq!(r.data(), &[2., 2., 2.]);
        let r2 = g.reduce_to_shape(&[2, 1]);
        assert_eq!(r2.data(), &[3., 3.]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        let c = a.bmm(&b);
        for i in 0..4 {
            let ai = a.narrow(0, i, 1).reshape(&[3, 5]);
            let bi = b.narrow(0, i, 1).reshape(&[5, 2]);
            let ci = ai.matmul(&bi);
            assert_eq!(c.narrow(0, i, 1).reshape(&[3, 2]).data(), ci.data());
        }
    }

    #[test]
    fn softmax_uniform() {
        let x = Tensor::new(vec![3], vec![0., 0., 0.]);
        let s = x.softmax_last();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let s = x.softmax_last();
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_345() {
        let x = Tensor::new(vec![2], vec![3., 4.]);
        let n = x.l2_normalize_last();
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_norms_near_one() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[10, 8], 2.0, &mut rng);
        let n = x.l2_normalize_last();
        for row in n.data().chunks(8) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
        let y = x.split_heads(4).merge_heads(4);
        assert_eq!(x.data(), y.data());
        assert_eq!(x.shape(), y.shape());
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 8, 4]);
        assert_eq!(c.narrow(1, 0, 3).data(), a.data());
        assert_eq!(c.narrow(1, 3, 5).data(), b.data());
    }

    #[test]
    fn index_select_scatter_adjoint() {
        // <select(x), g> == <x, scatter(g)> for random data
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let idx = [4usize, 0, 0, 2];
        let g = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let lhs: f64 = x
            .index_select0(&idx)
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(g.scatter_add0(&idx, 5).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "matmul inner dim mismatch")]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let mut rng = Rng::new(7);
        let x = Tensor::randn(&[4, 16], 3.0, &mut rng);
        let y = x.layernorm_last(1e-5);
        for row in y.data().chunks(16) {
            let m: f64 = row.iter().sum::<f64>() / 16.0;
            let v: f64 = row.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
