//! Reference implementations of the three training convolutions and the
//! mini-batch weight update.
//!
//! Index conventions: `A[n][c][y][x]`, `W[f][c][ky][kx]`, `O[n][f][oy][ox]`
//! with `O[n][f][oy][ox] = Σ A[n][c][oy·s+ky−p][ox·s+kx−p] · W[f][c][ky][kx]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Tensor4, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerType {
    #[default]
    Conv,
    /// A convolution whose kernel covers the whole input.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub stride: usize,
    /// `(Kx, Ky)`.
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    /// Zero padding on every spatial edge.
    pub padding: usize,
    pub layer_type: LayerType,
}

impl ConvShape {
    pub fn conv(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let s = ConvShape {
            stride,
            kernel,
            in_channels,
            in_h,
            in_w,
            filters,
            padding,
            layer_type: LayerType::Conv,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn fully_connected(in_channels: usize, in_h: usize, in_w: usize, filters: usize) -> Result<Self> {
        let s = ConvShape {
            stride: 1,
            kernel: (in_w, in_h),
            in_channels,
            in_h,
            in_w,
            filters,
            padding: 0,
            layer_type: LayerType::Fc,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (kx, ky) = self.kernel;
        if self.stride == 0 || kx == 0 || ky == 0 {
            return Err(Error::Shape("stride and kernel must be positive".into()));
        }
        if self.in_channels == 0 || self.filters == 0 || self.in_h == 0 || self.in_w == 0 {
            return Err(Error::Shape("empty layer".into()));
        }
        if self.in_w + 2 * self.padding < kx || self.in_h + 2 * self.padding < ky {
            return Err(Error::Shape(format!(
                "{kx}x{ky} kernel does not fit a {}x{} input with padding {}",
                self.in_w, self.in_h, self.padding
            )));
        }
        if self.layer_type == LayerType::Fc
            && (self.kernel != (self.in_w, self.in_h) || self.padding != 0 || self.stride != 1)
        {
            return Err(Error::Shape("fully connected layer needs kernel = input dims".into()));
        }
        Ok(())
    }

    /// `(Nox, Noy)`.
    pub fn out_dims(&self) -> (usize, usize) {
        let ox = (self.in_w + 2 * self.padding - self.kernel.0) / self.stride + 1;
        let oy = (self.in_h + 2 * self.padding - self.kernel.1) / self.stride + 1;
        (ox, oy)
    }

    pub fn a_dims(&self, batch: usize) -> Dims4 {
        Dims4::new(batch, self.in_channels, self.in_h, self.in_w)
    }

    pub fn w_dims(&self) -> Dims4 {
        Dims4::new(self.filters, self.in_channels, self.kernel.1, self.kernel.0)
    }

    pub fn o_dims(&self, batch: usize) -> Dims4 {
        let (ox, oy) = self.out_dims();
        Dims4::new(batch, self.filters, oy, ox)
    }
}

impl fmt::Display for ConvShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.layer_type {
            LayerType::Conv => "conv",
            LayerType::Fc => "fc",
        };
        write!(
            f,
            "{kind} c={} {}x{} f={} k={}x{} s={} p={}",
            self.in_channels,
            self.in_h,
            self.in_w,
            self.filters,
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.padding
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: u32,
    pub shape: ConvShape,
    pub batch: usize,
}

impl LayerSpec {
    pub fn new(id: u32, shape: ConvShape, batch: usize) -> Self {
        LayerSpec { id, shape, batch }
    }

    pub fn a_dims(&self) -> Dims4 {
        self.shape.a_dims(self.batch)
    }

    pub fn w_dims(&self) -> Dims4 {
        self.shape.w_dims()
    }

    pub fn o_dims(&self) -> Dims4 {
        self.shape.o_dims(self.batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub alpha: f32,
    pub batch: usize,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.batch == 0 {
            return Err(Error::Config(format!(
                "learning rate {} and batch {} must be positive",
                self.alpha, self.batch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Fwd,
    IGrad,
    WGrad,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Fwd, OpKind::IGrad, OpKind::WGrad];
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fwd" | "forward" => Ok(OpKind::Fwd),
            "igrad" => Ok(OpKind::IGrad),
            "wgrad" => Ok(OpKind::WGrad),
            other => Err(Error::Config(format!("unknown op `{other}`"))),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Fwd => "fwd",
            OpKind::IGrad => "igrad",
            OpKind::WGrad => "wgrad",
        })
    }
}

fn expect_dims(what: &str, got: Dims4, want: Dims4) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} is {got}, layer expects {want}")));
    }
    Ok(())
}

/// Batch size implied by an activation-like tensor.
fn batch_of(t: &Tensor4) -> usize {
    t.dims().n
}

pub fn forward_conv(a: &Tensor4, w: &Tensor4, shape: &ConvShape) -> Result<Tensor4> {
    shape.validate()?;
    let n = batch_of(a);
    expect_dims("A", a.dims(), shape.a_dims(n))?;
    expect_dims("W", w.dims(), shape.w_dims())?;
    let (kx, ky) = shape.kernel;
    let (s, p) = (shape.stride as isize, shape.padding as isize);
    let od = shape.o_dims(n);
    let mut o = Tensor4::zeros(TensorKind::Outputs, od);
    for b in 0..n {
        for f in 0..od.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut acc = 0.0f32;
                    for c in 0..shape.in_channels {
                        for j in 0..ky {
                            for i in 0..kx {
                                let y = oy as isize * s + j as isize - p;
                                let x = ox as isize * s + i as isize - p;
                                acc += a.get_padded(b, c, y, x) * w.get(f, c, j, i);
                            }
                        }
                    }
                    o.set(b, f, oy, ox, acc);
                }
            }
        }
    }
    Ok(o)
}

/// `W_rot[c][f][ky][kx] = W[f][c][Ky−1−ky][Kx−1−kx]`.
pub fn reconstruct_rotated_filters(w: &Tensor4) -> Tensor4 {
    let d = w.dims();
    Tensor4::from_fn(w.kind(), Dims4::new(d.c, d.n, d.h, d.w), |c, f, y, x| {
        w.get(f, c, d.h - 1 - y, d.w - 1 - x)
    })
}

/// Inserts `s − 1` zeros between neighbouring spatial elements.
pub fn dilate(g: &Tensor4, s: usize) -> Tensor4 {
    let d = g.dims();
    if s <= 1 || d.is_empty() {
        return g.clone();
    }
    let dd = Dims4::new(d.n, d.c, (d.h - 1) * s + 1, (d.w - 1) * s + 1);
    let mut out = Tensor4::zeros(g.kind(), dd);
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..d.h {
                for x in 0..d.w {
                    out.set(n, c, y * s, x * s, g.get(n, c, y, x));
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input: the dilated output gradient convolved with
/// the rotated, channel-reconstructed filters.
pub fn input_grad_conv(g_o: &Tensor4, w: &Tensor4, shape: &ConvShape) -> Result<Tensor4> {
    shape.validate()?;
    let n = batch_of(g_o);
    expect_dims("G_O", g_o.dims(), shape.o_dims(n))?;
    expect_dims("W", w.dims(), shape.w_dims())?;
    let gd = dilate(g_o, shape.stride);
    let wr = reconstruct_rotated_filters(w);
    let (kx, ky) = shape.kernel;
    let ox = kx as isize - 1 - shape.padding as isize;
    let oy = ky as isize - 1 - shape.padding as isize;
    let ad = shape.a_dims(n);
    let mut ga = Tensor4::zeros(TensorKind::Gradients, ad);
    for b in 0..n {
        for c in 0..ad.c {
            for y in 0..ad.h {
                for x in 0..ad.w {
                    let mut acc = 0.0f32;
                    for f in 0..shape.filters {
                        for j in 0..ky {
                            for i in 0..kx {
                                let t = y as isize + j as isize - oy;
                                let u = x as isize + i as isize - ox;
                                acc += gd.get_padded(b, f, t, u) * wr.get(c, f, j, i);
                            }
                        }
                    }
                    ga.set(b, c, y, x, acc);
                }
            }
        }
    }
    Ok(ga)
}

/// Gradient w.r.t. the weights, summed over the samples in the batch.
pub fn weight_grad_conv(g_o: &Tensor4, a: &Tensor4, shape: &ConvShape) -> Result<Tensor4> {
    shape.validate()?;
    let n = batch_of(a);
    expect_dims("A", a.dims(), shape.a_dims(n))?;
    expect_dims("G_O", g_o.dims(), shape.o_dims(n))?;
    let gd = dilate(g_o, shape.stride);
    let gdd = gd.dims();
    let p = shape.padding as isize;
    let wd = shape.w_dims();
    let mut gw = Tensor4::zeros(TensorKind::Gradients, wd);
    for f in 0..wd.n {
        for c in 0..wd.c {
            for j in 0..wd.h {
                for i in 0..wd.w {
                    let mut acc = 0.0f32;
                    for b in 0..n {
                        for t in 0..gdd.h {
                            for u in 0..gdd.w {
                                let y = (j + t) as isize - p;
                                let x = (i + u) as isize - p;
                                acc += gd.get(b, f, t, u) * a.get_padded(b, c, y, x);
                            }
                        }
                    }
                    gw.set(f, c, j, i, acc);
                }
            }
        }
    }
    Ok(gw)
}

/// `w − α · (Σ grads) / S`.
pub fn weight_update(w: &Tensor4, grads: &[Tensor4], hyper: &TrainHyper) -> Result<Tensor4> {
    if grads.len() != hyper.batch {
        return Err(Error::Shape(format!(
            "{} gradients for a batch of {}",
            grads.len(),
            hyper.batch
        )));
    }
    if hyper.alpha.is_nan() || hyper.alpha < 0.0 {
        return Err(Error::Config(format!("learning rate {}", hyper.alpha)));
    }
    let mut sum = vec![0.0f32; w.data().len()];
    for g in grads {
        expect_dims("gradient", g.dims(), w.dims())?;
        for (s, v) in sum.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    let scale = hyper.alpha / hyper.batch as f32;
    let data = w.data().iter().zip(&sum).map(|(w, s)| w - scale * s).collect();
    Tensor4::new(w.kind(), w.dims(), w.dtype(), data)
}
