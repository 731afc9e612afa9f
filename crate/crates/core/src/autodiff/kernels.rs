//! Raw slice kernels behind the tape operations.

/// `c = a · b + beta · c` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(g: &ConvGeom, input: &[f32], col: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(g: &ConvGeom, col: &[f32], input_grad: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst_row[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation over a batch of `n` images. Also returns the
/// unfolded patches (empty for pointwise kernels) for reuse in backward.
pub(crate) fn conv_forward(g: &ConvGeom, n: usize, input: &[f32], weight: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_plane();
    let col_img = g.patch() * g.out_plane();
    let mut out = vec![0.0f32; n * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; n * col_img]
    };
    for b in 0..n {
        let x = &input[b * in_img..(b + 1) * in_img];
        let y = &mut out[b * out_img..(b + 1) * out_img];
        let patches: &[f32] = if g.is_pointwise() {
            x
        } else {
            let c = &mut cols[b * col_img..(b + 1) * col_img];
            im2col(g, x, c);
            c
        };
        gemm(g.cout, g.patch(), g.out_plane(), weight, false, patches, false, 0.0, y);
    }
    (out, cols)
}

/// Gradients of a batched convolution. Either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    n: usize,
    input: &[f32],
    cols: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_weight: Option<&mut [f32]>,
) {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_plane();
    let col_img = g.patch() * g.out_plane();
    let mut dcol = vec![0.0f32; g.patch() * g.out_plane()];
    for b in 0..n {
        let x = &input[b * in_img..(b + 1) * in_img];
        let gy = &grad_out[b * out_img..(b + 1) * out_img];
        if let Some(gw) = grad_weight.as_deref_mut() {
            let patches: &[f32] = if g.is_pointwise() {
                x
            } else {
                &cols[b * col_img..(b + 1) * col_img]
            };
            // dW[cout, patch] += dY[cout, plane] · patchesᵀ
            gemm(g.cout, g.out_plane(), g.patch(), gy, false, patches, true, 1.0, gw);
        }
        if let Some(gx) = grad_input.as_deref_mut() {
            let gx = &mut gx[b * in_img..(b + 1) * in_img];
            // dcol[patch, plane] = Wᵀ · dY
            gemm(
                g.patch(),
                g.cout,
                g.out_plane(),
                weight,
                true,
                gy,
                false,
                0.0,
                &mut dcol,
            );
            if g.is_pointwise() {
                for (d, s) in gx.iter_mut().zip(&dcol) {
                    *d += s;
                }
            } else {
                col2im_add(g, &dcol, gx);
            }
        }
    }
}
