//! Convolution, pooling and upsampling kernels with their backward passes.
//!
//! Activations are channel-major `c x h x w` buffers. Convolutions are
//! "same" padded with stride 1 and lowered to a matrix product through
//! im2col.

/// `c = a(m x k) * b(k x n) + beta * c`, all row-major unless the
/// transpose flags swap the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three buffers, whose lengths are checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `input` (`channels x n x n`) into `(channels * k * k) x (n * n)`.
pub fn im2col(input: &[f64], channels: usize, n: usize, k: usize) -> Vec<f64> {
    let hw = n * n;
    if k == 1 {
        return input[..channels * hw].to_vec();
    }
    let pad = (k / 2) as isize;
    let mut col = Vec::with_capacity(channels * k * k * hw);
    for ch in 0..channels {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let c_lo = (-dx).max(0) as usize;
                let c_hi = (n as isize - dx).clamp(0, n as isize) as usize;
                for r in 0..n {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= n as isize || c_lo >= c_hi {
                        col.resize(col.len() + n, 0.0);
                        continue;
                    }
                    let s_lo = (c_lo as isize + dx) as usize;
                    let src_row = &plane[sr as usize * n..(sr as usize + 1) * n];
                    col.resize(col.len() + c_lo, 0.0);
                    col.extend_from_slice(&src_row[s_lo..s_lo + (c_hi - c_lo)]);
                    col.resize(col.len() + (n - c_hi), 0.0);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `col` back into `grad_input`.
pub fn col2im(col: &[f64], channels: usize, n: usize, k: usize, grad_input: &mut [f64]) {
    let hw = n * n;
    if k == 1 {
        for (g, c) in grad_input[..channels * hw].iter_mut().zip(col) {
            *g += c;
        }
        return;
    }
    let pad = (k / 2) as isize;
    for ch in 0..channels {
        let plane = &mut grad_input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for r in 0..n {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= n as isize {
                        continue;
                    }
                    let c_lo = (-dx).max(0) as usize;
                    let c_hi = (n as isize - dx).min(n as isize) as usize;
                    if c_lo >= c_hi {
                        continue;
                    }
                    let s_lo = (c_lo as isize + dx) as usize;
                    let dst_row = &mut plane[sr as usize * n + s_lo..sr as usize * n + s_lo + (c_hi - c_lo)];
                    let src_row = &src[r * n + c_lo..r * n + c_hi];
                    for (d, s) in dst_row.iter_mut().zip(src_row) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Convolution forward: returns `(output, col)`; `col` is kept for backward.
pub fn conv_forward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    n: usize,
    k: usize,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hw = n * n;
    let col = im2col(input, in_ch, n, k);
    let mut out = vec![0.0; out_ch * hw];
    for (o, b) in out.chunks_mut(hw).zip(bias) {
        o.fill(*b);
    }
    gemm(out_ch, in_ch * k * k, hw, weight, false, &col, false, 1.0, &mut out);
    (out, col)
}

/// Convolution backward. Accumulates into `grad_w` and `grad_b`; returns the
/// input gradient when `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    grad_out: &[f64],
    col: &[f64],
    in_ch: usize,
    out_ch: usize,
    n: usize,
    k: usize,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = n * n;
    let kk = in_ch * k * k;
    gemm(out_ch, hw, kk, grad_out, false, col, true, 1.0, grad_w);
    for (gb, g) in grad_b.iter_mut().zip(grad_out.chunks(hw)) {
        *gb += g.iter().sum::<f64>();
    }
    if !need_input_grad {
        return None;
    }
    // the input gradient is a "same" correlation of grad_out with the
    // spatially flipped, channel-transposed kernel
    let mut flipped = vec![0.0; weight.len()];
    let taps = k * k;
    for o in 0..out_ch {
        for i in 0..in_ch {
            for t in 0..taps {
                flipped[(i * out_ch + o) * taps + (taps - 1 - t)] = weight[(o * in_ch + i) * taps + t];
            }
        }
    }
    let g_col = im2col(grad_out, out_ch, n, k);
    let mut grad_in = vec![0.0; in_ch * hw];
    gemm(in_ch, out_ch * taps, hw, &flipped, false, &g_col, false, 0.0, &mut grad_in);
    Some(grad_in)
}

/// 2x2 max pooling; returns the pooled map and the argmax index per output.
pub fn maxpool_forward(input: &[f64], channels: usize, n: usize) -> (Vec<f64>, Vec<u32>) {
    let m = n / 2;
    let mut out = Vec::with_capacity(channels * m * m);
    let mut arg = Vec::with_capacity(channels * m * m);
    for ch in 0..channels {
        let base = ch * n * n;
        for r in 0..m {
            for c in 0..m {
                let mut best = base + 2 * r * n + 2 * c;
                for idx in [
                    base + 2 * r * n + 2 * c + 1,
                    base + (2 * r + 1) * n + 2 * c,
                    base + (2 * r + 1) * n + 2 * c + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(grad_out: &[f64], arg: &[u32], grad_in: &mut [f64]) {
    for (&g, &i) in grad_out.iter().zip(arg) {
        grad_in[i as usize] += g;
    }
}

/// Nearest-neighbour 2x upsampling of a `channels x m x m` map.
pub fn upsample_forward(input: &[f64], channels: usize, m: usize) -> Vec<f64> {
    let n = 2 * m;
    let mut out = vec![0.0; channels * n * n];
    for ch in 0..channels {
        for r in 0..n {
            for c in 0..n {
                out[(ch * n + r) * n + c] = input[(ch * m + r / 2) * m + c / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &[f64], channels: usize, m: usize) -> Vec<f64> {
    let n = 2 * m;
    let mut grad_in = vec![0.0; channels * m * m];
    for ch in 0..channels {
        for r in 0..n {
            for c in 0..n {
                grad_in[(ch * m + r / 2) * m + c / 2] += grad_out[(ch * n + r) * n + c];
            }
        }
    }
    grad_in
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(
        input: &[f64],
        in_ch: usize,
        out_ch: usize,
        n: usize,
        k: usize,
        w: &[f64],
        b: &[f64],
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; out_ch * n * n];
        for o in 0..out_ch {
            for r in 0..n {
                for c in 0..n {
                    let mut acc = b[o];
                    for i in 0..in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let rr = r as isize + ky as isize - pad;
                                let cc = c as isize + kx as isize - pad;
                                if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                                    continue;
                                }
                                acc += w[((o * in_ch + i) * k + ky) * k + kx]
                                    * input[(i * n + rr as usize) * n + cc as usize];
                            }
                        }
                    }
                    out[(o * n + r) * n + c] = acc;
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3] {
            let (ci, co, n) = (3, 4, 5);
            let x = ramp(ci * n * n, 0.1);
            let w = ramp(co * ci * k * k, 0.05);
            let b = ramp(co, 0.2);
            let (out, _) = conv_forward(&x, ci, co, n, k, &w, &b);
            let want = conv_naive(&x, ci, co, n, k, &w, &b);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (ch, n, k) = (2, 6, 3);
        let x = ramp(ch * n * n, 0.3);
        let y = ramp(ch * k * k * n * n, 0.07);
        let lhs: f64 = im2col(&x, ch, n, k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; ch * n * n];
        col2im(&y, ch, n, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let (p, arg) = maxpool_forward(&x, 1, 4);
        assert_eq!(p, vec![5.0, 7.0, 13.0, 15.0]);
        let mut g = vec![0.0; 16];
        maxpool_backward(&[1.0, 2.0, 3.0, 4.0], &arg, &mut g);
        assert_eq!(g[5] + g[7] + g[13] + g[15], 10.0);
        let u = upsample_forward(&p, 1, 2);
        assert_eq!(&u[..4], &[5.0, 5.0, 7.0, 7.0]);
        assert_eq!(upsample_backward(&vec![1.0; 16], 1, 2), vec![4.0; 4]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
