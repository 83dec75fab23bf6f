//! Synthetic experiments: speedup against random sparsity and against the
//! number of tile rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::lower::{lower_to_tile, simulate_lowering, SidePolicy};
use crate::pe::{Mode, PeConfig};
use crate::synth::{synth_stream, synth_tensor, SynthSpec, Values};
use crate::tensor::{Tensor4, TensorKind};
use crate::tile::{geometry_sweep, SweepWorkload, TileConfig};
use crate::trainops::{ConvShape, OpKind};

/// 128-channel 3×3 layer with 32 filters over a 30×30 input.
pub fn sweep_layer() -> ConvShape {
    ConvShape::conv(128, 30, 30, 32, (3, 3), 1, 0).expect("valid layer")
}

pub const SPARSITY_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// `min(1 / (1 − s), cap)`.
pub fn ideal_speedup(s: f64, cap: f64) -> f64 {
    if s >= 1.0 {
        cap
    } else {
        (1.0 / (1.0 - s)).min(cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub sparsity: f64,
    pub per_seed: Vec<f64>,
    pub dense_cycles: u64,
    pub sparse_cycles: Vec<u64>,
}

impl CurvePoint {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    /// Largest relative distance of one seed from the mean.
    pub fn max_deviation(&self) -> f64 {
        let m = self.mean();
        self.per_seed
            .iter()
            .map(|v| (v - m).abs() / m)
            .fold(0.0, f64::max)
    }
}

/// `(A, W, G_O)` for one layer: activations and output gradients i.i.d.
/// `s`-sparse, weights dense.
pub fn synth_layer(shape: &ConvShape, batch: usize, s: f64, seed: u64) -> Result<(Tensor4, Tensor4, Tensor4)> {
    let a = synth_tensor(&SynthSpec::iid(shape.a_dims(batch), s, seed))?;
    let w = synth_tensor(
        &SynthSpec::iid(shape.w_dims(), 0.0, seed ^ 0x9E37_79B9_7F4A_7C15).with_kind(TensorKind::Weights),
    )?;
    let g = synth_tensor(
        &SynthSpec::iid(shape.o_dims(batch), s, seed ^ 0x5851_F42D_4C95_7F2D).with_kind(TensorKind::Gradients),
    )?;
    Ok((a, w, g))
}

/// Dense and sparse chip cycles summed over `ops` for one layer whose
/// activations and output gradients have sparsity `s`; weights are dense.
pub fn layer_speedup(
    shape: &ConvShape,
    s: f64,
    seed: u64,
    cfg: &TileConfig,
    ops: &[OpKind],
) -> Result<(u64, u64)> {
    let (a, w, g) = synth_layer(shape, 1, s, seed)?;
    let (map, levels) = cfg.pe.default_map()?;
    let (mut dense, mut sparse) = (0, 0);
    for &op in ops {
        let (x, y) = match op {
            OpKind::Fwd => (&a, &w),
            OpKind::IGrad => (&g, &w),
            OpKind::WGrad => (&g, &a),
        };
        let low = lower_to_tile(op, shape, x, y, cfg.pe.lanes, SidePolicy::Auto)?;
        dense += simulate_lowering(&low, &cfg.with_mode(Mode::Dense), &map, &levels)?.cycles;
        sparse += simulate_lowering(&low, cfg, &map, &levels)?.cycles;
    }
    Ok((dense, sparse))
}

/// Speedup of `shape` for every sparsity level and seed.
pub fn random_sparsity_curve(
    shape: &ConvShape,
    levels: &[f64],
    seeds: &[u64],
    cfg: &TileConfig,
) -> Result<Vec<CurvePoint>> {
    let jobs: Vec<(usize, u64)> = (0..levels.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, seed)| layer_speedup(shape, levels[i], seed, cfg, &OpKind::ALL))
        .collect::<Result<Vec<_>>>()?;
    Ok(levels
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mine: Vec<(u64, u64)> = jobs
                .iter()
                .zip(&runs)
                .filter(|((j, _), _)| *j == i)
                .map(|(_, r)| *r)
                .collect();
            CurvePoint {
                sparsity: s,
                per_seed: mine.iter().map(|(d, sp)| *d as f64 / *sp as f64).collect(),
                dense_cycles: mine.first().map_or(0, |r| r.0),
                sparse_cycles: mine.iter().map(|r| r.1).collect(),
            }
        })
        .collect())
}

/// Speedup of one tile as its row count varies, on B streams that are
/// i.i.d. `s`-sparse. Every geometry sees the same 16 B streams against
/// 4 dense A streams of `stream_rows` rows each.
pub fn row_scaling(
    rows: &[usize],
    s: f64,
    seed: u64,
    stream_rows: usize,
    pe: PeConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = stream_rows * pe.lanes;
    let work = SweepWorkload {
        b_streams: (0..16).map(|_| synth_stream(len, s, Values::Uniform, &mut rng)).collect(),
        a_streams: (0..4).map(|_| synth_stream(len, 0.0, Values::Uniform, &mut rng)).collect(),
    };
    let (map, levels) = pe.default_map()?;
    let points: Vec<(usize, usize)> = rows.iter().map(|&r| (r, 4)).collect();
    Ok(geometry_sweep(&points, pe, &work, &map, &levels)?
        .into_iter()
        .map(|p| p.speedup)
        .collect())
}
