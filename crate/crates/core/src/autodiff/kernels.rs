//! Raw loops behind the tape ops. All buffers are row-major.

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×n]`, a k×n result.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
    c
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums so the loop vectorises without reassociation flags.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 3×3, stride-1, zero-padding-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * 9
    }
}

/// Unfold every 3×3 neighbourhood: per sample a `[C·9, H·W]` block.
pub(crate) fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w, p) = (g.height, g.width, g.pixels());
    let mut cols = vec![0.0; g.batch * g.col_rows() * p];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = &input[(n * g.in_channels + c) * p..][..p];
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = c * 9 + ky * 3 + kx;
                    let dst = &mut cols[(n * g.col_rows() + r) * p..][..p];
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let src_row = &plane[(iy - 1) * w..][..w];
                        let dst_row = &mut dst[y * w..][..w];
                        for x in 0..w {
                            let ix = x + kx;
                            if ix >= 1 && ix <= w {
                                dst_row[x] = src_row[ix - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w, p) = (g.height, g.width, g.pixels());
    let mut out = vec![0.0; g.batch * g.in_channels * p];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = &mut out[(n * g.in_channels + c) * p..][..p];
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = c * 9 + ky * 3 + kx;
                    let src = &cols[(n * g.col_rows() + r) * p..][..p];
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let dst_row = &mut plane[(iy - 1) * w..][..w];
                        let src_row = &src[y * w..][..w];
                        for x in 0..w {
                            let ix = x + kx;
                            if ix >= 1 && ix <= w {
                                dst_row[ix - 1] += src_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

const TILE_M: usize = 4;
const TILE_N: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`, register-tiled. Each output element is
/// accumulated in increasing `p` order, like the naive loop.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_m = m - m % TILE_M;
    let full_n = n - n % TILE_N;
    for i0 in (0..full_m).step_by(TILE_M) {
        for j0 in (0..full_n).step_by(TILE_N) {
            let mut acc = [[0.0; TILE_N]; TILE_M];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..][..TILE_N]);
            }
            for p in 0..k {
                let bv: &[f64; TILE_N] = b[p * n + j0..][..TILE_N].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for l in 0..TILE_N {
                        row[l] += av * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..][..TILE_N].copy_from_slice(row);
            }
        }
        for i in i0..i0 + TILE_M {
            gemm_edge(a, b, c, i, full_n..n, k, n);
        }
    }
    for i in full_m..m {
        gemm_edge(a, b, c, i, 0..n, k, n);
    }
}

fn gemm_edge(a: &[f64], b: &[f64], c: &mut [f64], i: usize, cols: std::ops::Range<usize>, k: usize, n: usize) {
    if cols.is_empty() {
        return;
    }
    let c_row = &mut c[i * n + cols.start..i * n + cols.end];
    for p in 0..k {
        let av = a[i * k + p];
        for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
            *cv += av * bv;
        }
    }
}

/// Row-major transpose of an `m×n` block.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub(crate) fn conv_forward(cols: &[f64], kernel: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let (p, r, k_out) = (g.pixels(), g.col_rows(), g.out_channels);
    let mut out = vec![0.0; g.batch * k_out * p];
    for n in 0..g.batch {
        let sample_out = &mut out[n * k_out * p..][..k_out * p];
        for (k, row) in sample_out.chunks_mut(p).enumerate() {
            row.fill(bias[k]);
        }
        gemm_acc(kernel, &cols[n * r * p..][..r * p], sample_out, k_out, r, p);
    }
    out
}

/// Returns `(d_cols, d_kernel, d_bias)`; `d_cols` is empty unless `need_input`.
pub(crate) fn conv_backward(
    cols: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: ConvGeom,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (p, r, k_out) = (g.pixels(), g.col_rows(), g.out_channels);
    let mut d_cols = if need_input { vec![0.0; cols.len()] } else { Vec::new() };
    let mut d_kernel = vec![0.0; kernel.len()];
    let mut d_bias = vec![0.0; k_out];
    let kernel_t = transpose(kernel, k_out, r);
    for n in 0..g.batch {
        let sample_cols = &cols[n * r * p..][..r * p];
        let sample_grad = &grad_out[n * k_out * p..][..k_out * p];
        for (k, g_row) in sample_grad.chunks(p).enumerate() {
            d_bias[k] += g_row.iter().sum::<f64>();
        }
        let cols_t = transpose(sample_cols, r, p);
        gemm_acc(sample_grad, &cols_t, &mut d_kernel, k_out, p, r);
        if need_input {
            gemm_acc(&kernel_t, sample_grad, &mut d_cols[n * r * p..][..r * p], r, k_out, p);
        }
    }
    (d_cols, d_kernel, d_bias)
}
