use super::{cache_get, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};
use rand::Rng;

/// Square-kernel 2-D convolution with "same"-style zero padding (`k / 2`),
/// computed as im2col followed by a GEMM per sample.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self::with_scale(cin, cout, kernel, stride, 1.0, rng)
    }

    pub fn with_scale<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        let fan_in = cin * kernel * kernel;
        Self {
            weight: Param::uniform(cout * fan_in, fan_in, scale * 3f64.sqrt(), rng),
            bias: Param::zeros(cout),
            cin,
            cout,
            kernel,
            stride,
            input: None,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let plane = oh * ow;
        for c in 0..self.cin {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let plane = oh * ow;
        for c in 0..self.cin {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv expects {} input channels, got {c}", self.cin);
        let (oh, ow) = self.out_hw(h, w);
        let plane = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = Tensor::zeros(&[n, self.cout, oh, ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
        for i in 0..n {
            let yi = y.item_mut(i);
            for (o, chunk) in yi.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            let src: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut cols);
                &cols
            };
            matmul(self.cout, kk, plane, &self.weight.value, false, src, false, yi, true);
        }
        if mode.caches() {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take();
        let x = cache_get(&x, "conv2d");
        let (n, _, h, w) = x.dims4();
        let (oh, ow) = self.out_hw(h, w);
        let plane = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * plane] };
        let mut dcols = vec![T::zero(); kk * plane];
        for i in 0..n {
            let dyi = dy.item(i);
            if !self.weight.frozen {
                let src: &[T] = if pointwise {
                    x.item(i)
                } else {
                    self.im2col(x.item(i), h, w, &mut cols);
                    &cols
                };
                matmul(self.cout, plane, kk, dyi, false, src, true, &mut self.weight.grad, true);
                for (o, chunk) in dyi.chunks(plane).enumerate() {
                    let mut s = T::zero();
                    for &v in chunk {
                        s += v;
                    }
                    self.bias.grad[o] += s;
                }
            }
            if pointwise {
                matmul(kk, self.cout, plane, &self.weight.value, true, dyi, false, dx.item_mut(i), false);
            } else {
                matmul(kk, self.cout, plane, &self.weight.value, true, dyi, false, &mut dcols, false);
                self.col2im(&dcols, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
