//! Dense NCHW tensors of `f64` and the GEMM/convolution kernels that the
//! autodiff graph builds on.

use crate::error::{invalid, Result};

/// `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(a, b, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice of one batch element.
    pub fn item(&self, n: usize) -> &[f64] {
        let sz = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let sz = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * sz..(n + 1) * sz]
    }

    /// Copy of batch element `n` as a `[1, C, H, W]` tensor.
    pub fn select(&self, n: usize) -> Tensor {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    /// Stack `[1, C, H, W]` (or `[k, C, H, W]`) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(invalid(format!(
                    "stack: shape {:?} does not match {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every value through `f32`, so the tensor is exactly
    /// representable in single-precision storage.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked above to cover every index touched with
    // these strides.
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

/// Geometry of a stride-1 2-D convolution with square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding).saturating_sub(self.dilation * (self.kernel - 1))
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding).saturating_sub(self.dilation * (self.kernel - 1))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }
}

/// Unfold one image `[C, H, W]` into a `[C*k*k, Ho*Wo]` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                // valid output columns: 0 <= ox + dx < w
                let x0 = (-dx).clamp(0, ow as isize) as usize;
                let x1 = (w - dx).clamp(0, ow as isize) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + dy;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let base = iy as usize * g.in_w;
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[base + sx0..base + sx0 + (x1 - x0)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                let x0 = (-dx).clamp(0, ow as isize) as usize;
                let x1 = (w - dx).clamp(0, ow as isize) as usize;
                if x0 < x1 {
                    for oy in 0..oh {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = iy as usize * g.in_w;
                        let sx0 = (x0 as isize + dx) as usize;
                        let d = &mut dst[base + sx0..base + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(&src[oy * ow + x0..oy * ow + x1]) {
                            *a += b;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convolution `y = w * x + b`. `weight` is `[Cout, Cin, k, k]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, k2] = weight.shape();
    if wcin != cin || k != k2 {
        return Err(invalid(format!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if dilation == 0 {
        return Err(invalid("conv2d: dilation must be >= 1"));
    }
    let geo = ConvGeometry {
        in_channels: cin,
        kernel: k,
        dilation,
        padding,
        in_h: h,
        in_w: w,
    };
    let (oh, ow) = (geo.out_h(), geo.out_w());
    if oh == 0 || ow == 0 {
        return Err(invalid(format!(
            "conv2d: input {}x{} too small for kernel {} at dilation {}",
            h, w, k, dilation
        )));
    }
    let plane = oh * ow;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let kk = geo.patch_len();
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kk * plane] };
    for b in 0..n {
        let img = x.item(b);
        let src: &[f64] = if geo.is_pointwise() {
            img
        } else {
            im2col(img, &geo, &mut cols);
            &cols
        };
        let dst = out.item_mut(b);
        let beta = if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
            1.0
        } else {
            0.0
        };
        gemm(cout, kk, plane, weight.data(), false, src, false, dst, beta);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    dilation: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let geo = ConvGeometry {
        in_channels: cin,
        kernel: k,
        dilation,
        padding,
        in_h: h,
        in_w: w,
    };
    let plane = geo.out_h() * geo.out_w();
    let kk = geo.patch_len();
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let pointwise = geo.is_pointwise();
    let mut cols = vec![0.0; kk * plane];
    for b in 0..n {
        let go = grad_out.item(b);
        if let Some(gw) = gw.as_mut() {
            let src: &[f64] = if pointwise {
                x.item(b)
            } else {
                im2col(x.item(b), &geo, &mut cols);
                &cols
            };
            gemm(cout, plane, kk, go, false, src, true, gw.data_mut(), 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            if pointwise {
                gemm(kk, cout, plane, weight.data(), true, go, false, gx.item_mut(b), 1.0);
            } else {
                gemm(kk, cout, plane, weight.data(), true, go, false, &mut cols, 0.0);
                col2im(&cols, &geo, gx.item_mut(b));
            }
        }
    }
    (gx, gw)
}
