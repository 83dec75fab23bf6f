//! Seeded synthetic sparse tensors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Tensor4, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    /// Every element is zero with probability `s`.
    Iid,
    /// A fraction of channels is nearly dense, the rest nearly empty.
    ChannelClustered { dense_channels: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Values {
    /// Uniform in [-1, 1], never zero.
    #[default]
    Uniform,
    /// Integers in [-8, 8] excluding zero. Products and their sums stay
    /// exact in f32 for the stream lengths used here.
    SmallInt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: TensorKind,
    pub dims: Dims4,
    pub sparsity: f64,
    pub pattern: Pattern,
    pub values: Values,
    pub seed: u64,
}

impl SynthSpec {
    pub fn iid(dims: Dims4, sparsity: f64, seed: u64) -> Self {
        SynthSpec {
            kind: TensorKind::Activations,
            dims,
            sparsity,
            pattern: Pattern::Iid,
            values: Values::Uniform,
            seed,
        }
    }

    pub fn with_kind(self, kind: TensorKind) -> Self {
        SynthSpec { kind, ..self }
    }

    pub fn with_values(self, values: Values) -> Self {
        SynthSpec { values, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Synth(format!("sparsity {} is outside [0, 1]", self.sparsity)));
        }
        if let Pattern::ChannelClustered { dense_channels } = self.pattern {
            clustered_rates(self.sparsity, dense_channels)?;
        }
        Ok(())
    }
}

/// Dense-channel fraction that makes a clustered tensor of sparsity `s`
/// split 5% / 95% zeros between dense and sparse channels.
pub fn default_dense_channels(s: f64) -> f64 {
    ((0.95 - s) / 0.9).clamp(0.0, 1.0)
}

/// Zero probabilities `(dense, sparse)` reaching overall sparsity `s`.
fn clustered_rates(s: f64, f: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Synth(format!("dense channel fraction {f} is outside [0, 1]")));
    }
    let (pd, ps) = if f >= 1.0 {
        (s, 1.0)
    } else if f <= 0.0 {
        (0.0, s)
    } else {
        let ps = (s / (1.0 - f)).min(1.0);
        ((s - (1.0 - f) * ps) / f, ps)
    };
    let dense_ok = f <= 0.0 || pd < 0.1;
    let sparse_ok = f >= 1.0 || ps > 0.9;
    if !(dense_ok && sparse_ok) {
        return Err(Error::Synth(format!(
            "sparsity {s} cannot be split bimodally with {f} dense channels"
        )));
    }
    Ok((pd, ps))
}

fn draw(rng: &mut ChaCha8Rng, values: Values) -> f32 {
    match values {
        Values::Uniform => loop {
            let v: f32 = rng.gen_range(-1.0..=1.0);
            if v != 0.0 {
                return v;
            }
        },
        Values::SmallInt => {
            let m = rng.gen_range(1..=8) as f32;
            if rng.gen() {
                m
            } else {
                -m
            }
        }
    }
}

pub fn synth_tensor(spec: &SynthSpec) -> Result<Tensor4> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dims;
    let len = d
        .checked_len()
        .ok_or_else(|| Error::Synth(format!("dims {d} overflow")))?;
    let rate: Vec<f64> = match spec.pattern {
        Pattern::Iid => vec![spec.sparsity; d.c],
        Pattern::ChannelClustered { dense_channels } => {
            let (pd, ps) = clustered_rates(spec.sparsity, dense_channels)?;
            let n_dense = (dense_channels * d.c as f64).round() as usize;
            let mut order: Vec<usize> = (0..d.c).collect();
            order.shuffle(&mut rng);
            let mut r = vec![ps; d.c];
            for &c in &order[..n_dense] {
                r[c] = pd;
            }
            r
        }
    };
    let mut data = Vec::with_capacity(len);
    for _ in 0..d.n {
        for &p in &rate {
            for _ in 0..d.h * d.w {
                data.push(if rng.gen_bool(p) { 0.0 } else { draw(&mut rng, spec.values) });
            }
        }
    }
    Tensor4::new(spec.kind, d, Default::default(), data)
}

/// A flat stream of `len` values, i.i.d. zero with probability `s`.
pub fn synth_stream(len: usize, s: f64, values: Values, rng: &mut impl Rng) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    (0..len)
        .map(|_| if r.gen_bool(s) { 0.0 } else { draw(&mut r, values) })
        .collect()
}
