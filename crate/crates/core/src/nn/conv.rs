use rand::Rng;

use super::{gemm, Init, Param, Tensor};
use crate::exec::{chunk_ranges, Exec};

/// Samples per work unit in the batched convolution loops.
const CONV_CHUNK: usize = 4;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn convt_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Geometry of a strided, zero-padded square-kernel window scan.
#[derive(Debug, Clone, Copy)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Window {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_len(height, kernel, stride, pad),
            out_w: conv_out_len(width, kernel, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(col_row, col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + ih as usize) * self.width;
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw >= self.width as isize {
                                continue;
                            }
                            f(row, oh * self.out_w + ow, base + iw as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        cols.fill(0.0);
        let n = self.cols();
        self.for_each_tap(|row, col, idx| cols[row * n + col] = image[idx]);
    }

    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let n = self.cols();
        self.for_each_tap(|row, col, idx| image[idx] += cols[row * n + col]);
    }
}

fn check_input(x: &Tensor, channels: usize, layer: &str) -> (usize, usize, usize) {
    let s = x.shape();
    assert!(
        s.len() == 4 && s[1] == channels,
        "{layer}: expected [batch, {channels}, h, w] input, got {s:?}"
    );
    (s[0], s[2], s[3])
}

/// Sum of per-chunk gradient buffers, in chunk order.
fn reduce_in_order(parts: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>, dx: &mut [f32], dw: &mut [f32], db: &mut [f32], chunk_in: usize) {
    for (i, (dx_part, dw_part, db_part)) in parts.into_iter().enumerate() {
        dx[i * chunk_in..i * chunk_in + dx_part.len()].copy_from_slice(&dx_part);
        dw.iter_mut().zip(&dw_part).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&db_part).for_each(|(a, b)| *a += b);
    }
}

/// 2-D convolution, NCHW layout, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(init.sample(&[out_channels, in_channels, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(ndarray::IxDyn(&[out_channels]))),
        }
    }

    fn window(&self, h: usize, w: usize) -> Window {
        Window::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Tensor {
        let (batch, h, w) = check_input(x, self.in_channels, "conv2d");
        let win = self.window(h, w);
        let (rows, cols, out_c) = (win.rows(), win.cols(), self.out_channels);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let wt = self.weight.value.as_slice().expect("contiguous weight");
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let out_len = out_c * cols;
        let mut out = vec![0f32; batch * out_len];
        exec.for_each_chunk_mut(&mut out, CONV_CHUNK * out_len, |ci, chunk| {
            let mut buf = vec![0f32; rows * cols];
            for (j, o) in chunk.chunks_mut(out_len).enumerate() {
                let b = ci * CONV_CHUNK + j;
                win.im2col(&xs[b * win.image_len()..(b + 1) * win.image_len()], &mut buf);
                for (oc, row) in o.chunks_mut(cols).enumerate() {
                    row.fill(bias[oc]);
                }
                gemm(out_c, cols, rows, wt, false, &buf, false, 1.0, o);
            }
        });
        Tensor::from_shape_vec(vec![batch, out_c, win.out_h, win.out_w], out).expect("conv output shape")
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad: &Tensor, exec: Exec) -> Tensor {
        let (batch, h, w) = check_input(x, self.in_channels, "conv2d");
        let win = self.window(h, w);
        let (rows, cols, out_c) = (win.rows(), win.cols(), self.out_channels);
        let x = x.as_standard_layout();
        let g = grad.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        let wt = self.weight.value.as_slice().expect("contiguous weight");
        let (in_len, out_len) = (win.image_len(), out_c * cols);
        let parts = exec.map(batch.div_ceil(CONV_CHUNK), |ci| {
            let (start, end) = chunk_ranges(batch, CONV_CHUNK)[ci];
            let mut buf = vec![0f32; rows * cols];
            let mut dx = vec![0f32; (end - start) * in_len];
            let mut dw = vec![0f32; out_c * rows];
            let mut db = vec![0f32; out_c];
            for b in start..end {
                let gb = &gs[b * out_len..(b + 1) * out_len];
                win.im2col(&xs[b * in_len..(b + 1) * in_len], &mut buf);
                gemm(out_c, rows, cols, gb, false, &buf, true, 1.0, &mut dw);
                for (oc, row) in gb.chunks(cols).enumerate() {
                    db[oc] += row.iter().sum::<f32>();
                }
                gemm(rows, cols, out_c, wt, true, gb, false, 0.0, &mut buf);
                win.col2im(&buf, &mut dx[(b - start) * in_len..(b - start + 1) * in_len]);
            }
            (dx, dw, db)
        });
        let mut dx = vec![0f32; batch * in_len];
        reduce_in_order(
            parts,
            &mut dx,
            self.weight.grad.as_slice_mut().expect("contiguous"),
            self.bias.grad.as_slice_mut().expect("contiguous"),
            CONV_CHUNK * in_len,
        );
        Tensor::from_shape_vec(vec![batch, self.in_channels, h, w], dx).expect("input grad shape")
    }
}

/// Transposed 2-D convolution (the adjoint of [`Conv2d`] on its input).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[in, out, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about in * (k / stride)^2 contributions.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(init.sample(&[in_channels, out_channels, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(ndarray::IxDyn(&[out_channels]))),
        }
    }

    /// Window of the equivalent forward convolution from output to input.
    fn window(&self, h: usize, w: usize) -> Window {
        let oh = convt_out_len(h, self.kernel, self.stride, self.pad);
        let ow = convt_out_len(w, self.kernel, self.stride, self.pad);
        let win = Window::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad);
        debug_assert_eq!((win.out_h, win.out_w), (h, w));
        win
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Tensor {
        let (batch, h, w) = check_input(x, self.in_channels, "conv_transpose2d");
        let win = self.window(h, w);
        let (rows, cols, in_c) = (win.rows(), win.cols(), self.in_channels);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let wt = self.weight.value.as_slice().expect("contiguous weight");
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let (in_len, out_len) = (in_c * cols, win.image_len());
        let plane = win.height * win.width;
        let mut out = vec![0f32; batch * out_len];
        exec.for_each_chunk_mut(&mut out, CONV_CHUNK * out_len, |ci, chunk| {
            let mut buf = vec![0f32; rows * cols];
            for (j, o) in chunk.chunks_mut(out_len).enumerate() {
                let b = ci * CONV_CHUNK + j;
                gemm(rows, cols, in_c, wt, true, &xs[b * in_len..(b + 1) * in_len], false, 0.0, &mut buf);
                for (oc, p) in o.chunks_mut(plane).enumerate() {
                    p.fill(bias[oc]);
                }
                win.col2im(&buf, o);
            }
        });
        Tensor::from_shape_vec(vec![batch, self.out_channels, win.height, win.width], out)
            .expect("conv transpose output shape")
    }

    pub fn backward(&mut self, x: &Tensor, grad: &Tensor, exec: Exec) -> Tensor {
        let (batch, h, w) = check_input(x, self.in_channels, "conv_transpose2d");
        let win = self.window(h, w);
        let (rows, cols, in_c) = (win.rows(), win.cols(), self.in_channels);
        let x = x.as_standard_layout();
        let g = grad.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        let wt = self.weight.value.as_slice().expect("contiguous weight");
        let (in_len, out_len) = (in_c * cols, win.image_len());
        let plane = win.height * win.width;
        let out_c = self.out_channels;
        let parts = exec.map(batch.div_ceil(CONV_CHUNK), |ci| {
            let (start, end) = chunk_ranges(batch, CONV_CHUNK)[ci];
            let mut buf = vec![0f32; rows * cols];
            let mut dx = vec![0f32; (end - start) * in_len];
            let mut dw = vec![0f32; in_c * rows];
            let mut db = vec![0f32; out_c];
            for b in start..end {
                let gb = &gs[b * out_len..(b + 1) * out_len];
                for (oc, p) in gb.chunks(plane).enumerate() {
                    db[oc] += p.iter().sum::<f32>();
                }
                win.im2col(gb, &mut buf);
                let xb = &xs[b * in_len..(b + 1) * in_len];
                gemm(in_c, rows, cols, xb, false, &buf, true, 1.0, &mut dw);
                gemm(in_c, cols, rows, wt, false, &buf, false, 0.0, &mut dx[(b - start) * in_len..(b - start + 1) * in_len]);
            }
            (dx, dw, db)
        });
        let mut dx = vec![0f32; batch * in_len];
        reduce_in_order(
            parts,
            &mut dx,
            self.weight.grad.as_slice_mut().expect("contiguous"),
            self.bias.grad.as_slice_mut().expect("contiguous"),
            CONV_CHUNK * in_len,
        );
        Tensor::from_shape_vec(vec![batch, in_c, h, w], dx).expect("input grad shape")
    }
}
