use crate::error::{GrailError, Result};
use crate::linalg::matmul_a_bt;
use crate::tensor::Tensor;

pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of an `N×C×H×W` batch with an `O×C×kH×kW` kernel.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    x.expect_rank(4, "conv2d input")?;
    w.expect_rank(4, "conv2d kernel")?;
    let (n, c, h, wd) = dims4(x);
    let (o, wc, kh, kw) = dims4(w);
    if wc != c {
        return Err(GrailError::shape("conv2d", x.shape(), w.shape()));
    }
    let (ho, wo) = match (out_extent(h, kh, stride, pad), out_extent(wd, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(GrailError::InvalidArgument(format!(
                "kernel {kh}x{kw} with stride {stride}, padding {pad} does not fit input {h}x{wd}"
            )))
        }
    };
    let patches = im2col(x, kh, kw, stride, pad, ho, wo);
    let wmat = w.clone().reshape(vec![o, c * kh * kw])?;
    // (N·Ho·Wo) × O
    let y = matmul_a_bt(&patches, &wmat)?;
    let mut out = vec![0.0; n * o * ho * wo];
    let plane = ho * wo;
    for img in 0..n {
        for p in 0..plane {
            let row = y.row(img * plane + p);
            for (oc, &v) in row.iter().enumerate() {
                let b = bias.map_or(0.0, |b| b.data()[oc]);
                out[(img * o + oc) * plane + p] = v + b;
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let cols = c * kh * kw;
    let mut data = vec![0.0; n * ho * wo * cols];
    let xd = x.data();
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((img * ho + oy) * wo + ox) * cols;
                for ch in 0..c {
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            data[row + (ch * kh + i) * kw + j] =
                                xd[((img * c + ch) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * ho * wo, cols], data).expect("im2col shape")
}

/// `N×C×H×W` → `(N·H·W)×C`: one row per spatial position.
pub(crate) fn positions_as_rows(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let plane = h * w;
    let mut out = vec![0.0; n * plane * c];
    let xd = x.data();
    for img in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[(img * plane + p) * c + ch] = xd[(img * c + ch) * plane + p];
            }
        }
    }
    Tensor::new(vec![n * plane, c], out).expect("rows shape")
}
