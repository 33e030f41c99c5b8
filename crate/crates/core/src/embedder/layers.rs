//! The fixed layer vocabulary of the reference embedders, each with a
//! forward pass and a hand-derived input-gradient pass.

/// Channel-major activation tensor (`data[(c * h + y) * w + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_c][in_c][kernel][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = (self.out_dim(x.h), self.out_dim(x.w));
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        for oc in 0..self.out_c {
            let out = &mut y.data[oc * oh * ow..(oc + 1) * oh * ow];
            out.fill(self.bias[oc]);
            for ic in 0..self.in_c {
                let plane = &x.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((oc * self.in_c + ic) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - p;
                                if ix >= 0 && ix < x.w as isize {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn backward(&self, x: &Tensor, gy: &Tensor) -> Tensor {
        let (oh, ow) = (gy.h, gy.w);
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        for oc in 0..self.out_c {
            let g = &gy.data[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..self.in_c {
                let plane = &mut gx.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((oc * self.in_c + ic) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row = &mut plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            for ox in 0..ow {
                                let ix = (ox * s) as isize + kx as isize - p;
                                if ix >= 0 && ix < x.w as isize {
                                    row[ix as usize] += wv * g[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim][in_dim]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Tensor {
        let out = (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Tensor::vector(out)
    }

    fn backward(&self, gy: &Tensor) -> Tensor {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in gy.data.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (acc, w) in gx.iter_mut().zip(row) {
                *acc += w * g;
            }
        }
        Tensor::vector(gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Adds a constant offset to every input value.
    Shift(f64),
    Conv(Conv2d),
    Tanh,
    GlobalAvgPool,
    Linear(Linear),
    L2Normalize,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Shift(_) => "shift",
            Layer::Conv(_) => "conv",
            Layer::Tanh => "tanh",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear(_) => "linear",
            Layer::L2Normalize => "l2norm",
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Shift(s) => Tensor {
                data: x.data.iter().map(|v| v + s).collect(),
                ..x.clone()
            },
            Layer::Conv(conv) => conv.forward(x),
            Layer::Tanh => Tensor {
                data: x.data.iter().map(|v| v.tanh()).collect(),
                ..x.clone()
            },
            Layer::GlobalAvgPool => {
                let n = (x.h * x.w) as f64;
                Tensor::vector(
                    x.data
                        .chunks_exact(x.h * x.w)
                        .map(|p| p.iter().sum::<f64>() / n)
                        .collect(),
                )
            }
            Layer::Linear(lin) => lin.forward(x),
            Layer::L2Normalize => {
                let norm = x.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                Tensor {
                    data: x.data.iter().map(|v| v / norm).collect(),
                    ..x.clone()
                }
            }
        }
    }

    /// Gradient with respect to the layer input, given the input `x`, the
    /// forward output `y` and the output gradient `gy`.
    pub fn backward(&self, x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor {
        match self {
            Layer::Shift(_) => gy.clone(),
            Layer::Conv(conv) => conv.backward(x, gy),
            Layer::Tanh => Tensor {
                data: y
                    .data
                    .iter()
                    .zip(&gy.data)
                    .map(|(t, g)| g * (1.0 - t * t))
                    .collect(),
                ..gy.clone()
            },
            Layer::GlobalAvgPool => {
                let n = x.h * x.w;
                let mut gx = Tensor::zeros(x.c, x.h, x.w);
                for (plane, g) in gx.data.chunks_exact_mut(n).zip(&gy.data) {
                    plane.fill(g / n as f64);
                }
                gx
            }
            Layer::Linear(lin) => lin.backward(gy),
            Layer::L2Normalize => {
                let norm = x.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = y.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum();
                Tensor {
                    data: y
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(yi, gi)| (gi - yi * dot) / norm)
                        .collect(),
                    ..gy.clone()
                }
            }
        }
    }
}
