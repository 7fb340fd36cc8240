//! Dense f64 kernels behind the tape ops. Everything here is single
//! threaded and has a fixed summation order, so results are bit identical
//! across runs on the same target.

/// c[m,n] += a[m,k] * b[k,n]. The (i,p,j) axpy ordering keeps the inner
/// loop contiguous in both b and c, which the compiler vectorizes.
pub fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] = a[m,k] * b[k,n].
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_nn_acc(a, b, &mut c, m, k, n);
    c
}

/// Four-lane dot product with a fixed combine order: lanes accumulate
/// strided partials, then fold as ((s0+s1)+(s2+s3)) + tail. Deterministic
/// and still vectorizable.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// c[m,k] += a[m,n] * b[k,n]^T, i.e. c[i,p] += dot(a row i, b row p).
/// Used for gradients where both operands are stored row major in the
/// contraction axis.
pub fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            crow[p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of one conv application; shared by forward and backward so the
/// two sides can never disagree about padding arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, hin: usize, win: usize, ksize: usize, stride: usize, pad: usize) -> Self {
        let hout = (hin + 2 * pad - ksize) / stride + 1;
        let wout = (win + 2 * pad - ksize) / stride + 1;
        ConvGeom { cin, hin, win, ksize, stride, pad, hout, wout }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn col_cols(&self) -> usize {
        self.hout * self.wout
    }
}

/// Unfold one image [cin, hin, win] into [cin*k*k, hout*wout]. Out of
/// bounds taps read as zero.
pub fn im2col(img: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(img.len(), g.cin * g.hin * g.win);
    debug_assert_eq!(out.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &img[c * g.hin * g.win..(c + 1) * g.hin * g.win];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (c * g.ksize + ky) * g.ksize + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.hin as isize {
                        for _ in 0..g.wout {
                            dst[idx] = 0.0;
                            idx += 1;
                        }
                        continue;
                    }
                    let base = iy as usize * g.win;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[idx] = if ix < 0 || ix >= g.win as isize {
                            0.0
                        } else {
                            plane[base + ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into image coordinates.
pub fn col2im_acc(cols_mat: &[f64], g: &ConvGeom, img: &mut [f64]) {
    debug_assert_eq!(img.len(), g.cin * g.hin * g.win);
    debug_assert_eq!(cols_mat.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut img[c * g.hin * g.win..(c + 1) * g.hin * g.win];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (c * g.ksize + ky) * g.ksize + kx;
                let src = &cols_mat[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.hin as isize {
                        idx += g.wout;
                        continue;
                    }
                    let base = iy as usize * g.win;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.win as isize {
                            plane[base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}
