//! Forward and backward kernels for the graph primitives.
//!
//! Everything is plain loops over flat row-major slices. Shapes are validated
//! by the graph builder before these run, so kernels only `debug_assert`.

use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style trailing broadcast of two shapes, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides for `shape`, with 0 for axes that broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let s = if shape[i] == 1 { 0 } else { acc };
        strides[offset + i] = s;
        acc *= shape[i];
    }
    strides
}

/// After left-padding `shape` against `out`: `Some(block)` when the padded
/// shape equals `out` on a prefix and is all ones after it, i.e. the operand
/// repeats over contiguous blocks of `block` output elements.
fn block_broadcast(shape: &[usize], out: &[usize]) -> Option<usize> {
    let offset = out.len() - shape.len();
    let mut split = out.len();
    for i in (0..out.len()).rev() {
        let d = if i < offset { 1 } else { shape[i - offset] };
        if d == 1 {
            split = i;
        } else {
            break;
        }
    }
    for i in 0..split {
        let d = if i < offset { 1 } else { shape[i - offset] };
        if d != out[i] {
            return None;
        }
    }
    Some(out[split..].iter().product())
}

/// Elementwise op with broadcasting. `f` combines one element of each input.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).expect("validated at build");
    // Fast paths for the common patterns: a scalar operand, or a bias-like
    // operand that repeats over contiguous blocks (e.g. (C,1,1) + (C,H,W)).
    if out_shape == a.shape() {
        if b.numel() == 1 {
            let bv = b.data()[0];
            return a.map(|x| f(x, bv));
        }
        if let Some(block) = block_broadcast(b.shape(), &out_shape) {
            let (da, db) = (a.data(), b.data());
            let data = da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i / block]))
                .collect();
            return Tensor::new(out_shape, data).expect("numel matches");
        }
    } else if out_shape == b.shape() {
        if a.numel() == 1 {
            let av = a.data()[0];
            return b.map(|y| f(av, y));
        }
        if let Some(block) = block_broadcast(a.shape(), &out_shape) {
            let (da, db) = (a.data(), b.data());
            let data = db
                .iter()
                .enumerate()
                .map(|(i, &y)| f(da[i / block], y))
                .collect();
            return Tensor::new(out_shape, data).expect("numel matches");
        }
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(da[off_a], db[off_b]));
        // advance the odometer
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data).expect("numel matches")
}

/// Reduce `grad` (shaped like the broadcast output) back onto `target_shape`
/// by summing over broadcast axes.
pub fn unbroadcast(grad: &Tensor, target_shape: &[usize]) -> Tensor {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    if let Some(block) = block_broadcast(target_shape, grad.shape()) {
        let target_numel: usize = target_shape.iter().product();
        let mut data = vec![0.0f32; target_numel];
        for (i, &g) in grad.data().iter().enumerate() {
            data[i / block] += g;
        }
        return Tensor::new(target_shape.to_vec(), data).expect("numel matches");
    }
    let out_shape = grad.shape();
    let rank = out_shape.len();
    let strides = broadcast_strides(target_shape, out_shape);
    let target_numel: usize = target_shape.iter().product();
    let mut data = vec![0.0f32; target_numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        data[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * out_shape[ax];
        }
    }
    Tensor::new(target_shape.to_vec(), data).expect("numel matches")
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `(M,K) x (K,N) -> (M,N)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &da[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &db[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// Gradient wrt the left operand: `dA = dC x B^T`.
pub fn matmul_grad_a(grad: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (grad.shape()[0], grad.shape()[1]);
    let k = b.shape()[0];
    let (dg, db) = (grad.data(), b.data());
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let grow = &dg[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &db[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (&g, &bv) in grow.iter().zip(brow.iter()) {
                acc += g * bv;
            }
            *o = acc;
        }
    }
    Tensor::new(vec![m, k], out).expect("matmul grad shape")
}

/// Gradient wrt the right operand: `dB = A^T x dC`.
pub fn matmul_grad_b(a: &Tensor, grad: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = grad.shape()[1];
    let (da, dg) = (a.data(), grad.data());
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let arow = &da[i * k..(i + 1) * k];
        let grow = &dg[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &g) in orow.iter_mut().zip(grow.iter()) {
                *o += av * g;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("matmul grad shape")
}

// ---------------------------------------------------------------------------
// conv2d, stride 1, zero same-padding, odd kernel
// ---------------------------------------------------------------------------

/// Zero-pad every `(H,W)` plane of a `(C,H,W)` buffer by `(ph,pw)`.
fn pad_planes(data: &[f32], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * hp + y + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

/// `(Ci,H,W) * (Co,Ci,kh,kw) -> (Co,H,W)`.
pub fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    debug_assert_eq!(k.shape()[1], ci);
    let (ph, pw) = (kh / 2, kw / 2);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let padded = pad_planes(x.data(), ci, h, w, ph, pw);
    let dk = k.data();
    let mut out = vec![0.0f32; co * h * w];
    let mut row = vec![0.0f32; w];
    for o in 0..co {
        for y in 0..h {
            row.fill(0.0);
            for c in 0..ci {
                let plane = &padded[c * hp * wp..(c + 1) * hp * wp];
                let kbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    let src = &plane[(y + ky) * wp..(y + ky) * wp + w + 2 * pw];
                    let krow = &dk[kbase + ky * kw..kbase + (ky + 1) * kw];
                    for (kx, &wv) in krow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let shifted = &src[kx..kx + w];
                        for (r, &s) in row.iter_mut().zip(shifted.iter()) {
                            *r += wv * s;
                        }
                    }
                }
            }
            out[(o * h + y) * w..(o * h + y + 1) * w].copy_from_slice(&row);
        }
    }
    Tensor::new(vec![co, h, w], out).expect("conv shape")
}

/// Gradient of conv2d wrt its input: correlation of the padded upstream
/// gradient with the spatially flipped kernel, channels transposed.
pub fn conv2d_grad_input(grad: &Tensor, k: &Tensor, in_shape: &[usize]) -> Tensor {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let padded = pad_planes(grad.data(), co, h, w, ph, pw);
    let dk = k.data();
    let mut out = vec![0.0f32; ci * h * w];
    let mut row = vec![0.0f32; w];
    for c in 0..ci {
        for y in 0..h {
            row.fill(0.0);
            for o in 0..co {
                let plane = &padded[o * hp * wp..(o + 1) * hp * wp];
                let kbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    let src = &plane[(y + ky) * wp..(y + ky) * wp + w + 2 * pw];
                    for kx in 0..kw {
                        let wv = dk[kbase + (kh - 1 - ky) * kw + (kw - 1 - kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let shifted = &src[kx..kx + w];
                        for (r, &s) in row.iter_mut().zip(shifted.iter()) {
                            *r += wv * s;
                        }
                    }
                }
            }
            out[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&row);
        }
    }
    Tensor::new(in_shape.to_vec(), out).expect("conv grad shape")
}

/// Gradient of conv2d wrt the kernel: per-tap dot products between the padded
/// input and the upstream gradient.
pub fn conv2d_grad_kernel(x: &Tensor, grad: &Tensor, k_shape: &[usize]) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let padded = pad_planes(x.data(), ci, h, w, ph, pw);
    let dg = grad.data();
    let mut out = vec![0.0f32; co * ci * kh * kw];
    for o in 0..co {
        let g_plane = &dg[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let plane = &padded[c * hp * wp..(c + 1) * hp * wp];
            let kbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f32;
                    for y in 0..h {
                        let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                        let grow = &g_plane[y * w..(y + 1) * w];
                        for (&s, &g) in src.iter().zip(grow.iter()) {
                            acc += s * g;
                        }
                    }
                    out[kbase + ky * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), out).expect("conv kernel grad shape")
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Shape after reducing `axis` away (`None` reduces everything to `[1]`).
pub fn reduce_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(ax) => {
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(ax);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        }
    }
}

/// Sum over `axis` (or everything).
pub fn reduce_sum(x: &Tensor, axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::scalar(x.data().iter().sum()),
        Some(ax) => {
            let shape = x.shape();
            let outer: usize = shape[..ax].iter().product();
            let len = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out = vec![0.0f32; outer * inner];
            let data = x.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    let dst = o * inner;
                    for i in 0..inner {
                        out[dst + i] += data[base + i];
                    }
                }
            }
            Tensor::new(reduce_shape(shape, axis), out).expect("reduce shape")
        }
    }
}

/// Spread a reduced adjoint back over the original shape, scaling by `scale`
/// (1 for sum, 1/len for mean).
pub fn reduce_grad(grad: &Tensor, in_shape: &[usize], axis: Option<usize>, scale: f32) -> Tensor {
    match axis {
        None => Tensor::full(in_shape, grad.item() * scale),
        Some(ax) => {
            let outer: usize = in_shape[..ax].iter().product();
            let len = in_shape[ax];
            let inner: usize = in_shape[ax + 1..].iter().product();
            let g = grad.data();
            let mut out = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let dst = (o * len + a) * inner;
                    let src = o * inner;
                    for i in 0..inner {
                        out[dst + i] = g[src + i] * scale;
                    }
                }
            }
            Tensor::new(in_shape.to_vec(), out).expect("reduce grad shape")
        }
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_grad(x: &Tensor, grad: &Tensor) -> Tensor {
    x.zip_map(grad, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_grad(x: &Tensor, grad: &Tensor) -> Tensor {
    x.zip_map(grad, |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (1.0 - s))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1, 1], &[3, 4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[1], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_zip_and_unbroadcast_agree() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let sum = broadcast_zip(&a, &b, |x, y| x + y);
        assert_eq!(sum.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let back = unbroadcast(&sum, &[2, 1]);
        assert_eq!(back.data(), &[6.0, 18.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(matmul(&eye, &a), a);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32 * 0.1).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        assert_eq!(conv2d(&x, &k), x);
    }

    #[test]
    fn conv2d_zero_kernel_is_zero() {
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn reduce_sum_axis() {
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(reduce_sum(&x, Some(0)).data(), &[5., 7., 9.]);
        assert_eq!(reduce_sum(&x, Some(1)).data(), &[6., 15.]);
        assert_eq!(reduce_sum(&x, None).data(), &[21.]);
    }
}
