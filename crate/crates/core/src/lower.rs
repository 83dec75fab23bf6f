//! Lowering of the training convolutions onto tile operand streams.
//!
//! Every output element is a dot product of one "first" stream (filters,
//! rotated filters or activations) and one "second" stream (input windows,
//! gradient windows or gradients). The sparse operand goes on the tile rows,
//! where the schedulers sit.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::energy::EventCounters;
use crate::error::{Error, Result};
use crate::pe::Mode;
use crate::sched::{ConnectivityMap, LevelPartition};
use crate::tensor::{layout_groups, sparsity_stats, Dims4, Tensor4, TensorKind};
use crate::tile::{tile_run, TileConfig};
use crate::trainops::{dilate, reconstruct_rotated_filters, ConvShape, OpKind};

/// Which operand the scheduler extracts sparsity from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SidePolicy {
    /// Activations for FWD, output gradients for IGRAD, the sparser of the
    /// two for WGRAD (ties go to the gradients).
    #[default]
    Auto,
    /// The first operand (weights or activations).
    A,
    /// The second operand (input windows or gradients).
    B,
    /// Both operands.
    Both,
}

impl FromStr for SidePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(SidePolicy::Auto),
            "a" => Ok(SidePolicy::A),
            "b" => Ok(SidePolicy::B),
            "both" => Ok(SidePolicy::Both),
            other => Err(Error::Config(format!("unknown side policy `{other}`"))),
        }
    }
}

impl fmt::Display for SidePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SidePolicy::Auto => "auto",
            SidePolicy::A => "a",
            SidePolicy::B => "b",
            SidePolicy::Both => "both",
        })
    }
}

/// Operand the schedulers watch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
    Both,
}

impl Side {
    /// Tensor name of the sparse operand for `op`.
    pub fn tensor_tag(self, op: OpKind) -> &'static str {
        match (self, op) {
            (Side::Both, _) => "both",
            (Side::First, OpKind::Fwd | OpKind::IGrad) => "W",
            (Side::First, OpKind::WGrad) => "A",
            (Side::Second, OpKind::Fwd) => "A",
            (Side::Second, _) => "G",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lowered {
    pub op: OpKind,
    pub out_dims: Dims4,
    /// One stream per first-operand index.
    pub first: Vec<Vec<f32>>,
    /// One stream per second-operand index.
    pub second: Vec<Vec<f32>>,
    /// `out_index[i * second.len() + j]`: flat output index of
    /// `dot(first[i], second[j])`.
    pub out_index: Vec<usize>,
    pub side: Side,
    /// Zero fraction of the sparse side's source tensor.
    pub side_sparsity: f64,
    pub transposer_ops: u64,
    /// Bits of all input and output tensors, moved once.
    pub tensor_bits: u64,
}

/// One dot product of the lowered op.
#[derive(Debug, Clone, Copy)]
pub struct WorkUnit<'a> {
    pub a: &'a [f32],
    pub b: &'a [f32],
    pub target: usize,
    pub side: Side,
}

impl Lowered {
    pub fn stream_len(&self) -> usize {
        self.first.first().map_or(0, |s| s.len())
    }

    /// MACs a dense schedule issues, padding included.
    pub fn dense_macs(&self) -> u64 {
        (self.first.len() * self.second.len() * self.stream_len()) as u64
    }

    /// `a` is the first operand, `b` the second.
    pub fn units(&self) -> impl Iterator<Item = WorkUnit<'_>> {
        let ns = self.second.len();
        self.first.iter().enumerate().flat_map(move |(i, a)| {
            self.second.iter().enumerate().map(move |(j, b)| WorkUnit {
                a,
                b,
                target: self.out_index[i * ns + j],
                side: self.side,
            })
        })
    }
}

fn pad_to(v: &mut Vec<f32>, lanes: usize) {
    let r = v.len() % lanes;
    if r != 0 {
        v.resize(v.len() + lanes - r, 0.0);
    }
}

/// Appends `count` channel values, padded to a whole number of bricks.
fn push_brick(v: &mut Vec<f32>, lanes: usize, count: usize, f: impl Fn(usize) -> f32) {
    v.extend((0..count).map(f));
    pad_to(v, lanes);
}

fn check(t: &Tensor4, want: Dims4, what: &str) -> Result<()> {
    if t.dims() != want {
        return Err(Error::Shape(format!("{what} is {}, layer expects {want}", t.dims())));
    }
    Ok(())
}

/// Inputs for one op: FWD takes `(A, W)`, IGRAD `(G_O, W)`, WGRAD `(G_O, A)`.
pub fn lower_to_tile(
    op: OpKind,
    shape: &ConvShape,
    x: &Tensor4,
    y: &Tensor4,
    lanes: usize,
    policy: SidePolicy,
) -> Result<Lowered> {
    shape.validate()?;
    if lanes == 0 {
        return Err(Error::Config("lanes must be >= 1".into()));
    }
    let (kx, ky) = shape.kernel;
    let p = shape.padding as isize;
    let s = shape.stride as isize;
    let bits = x.dtype().bits().max(y.dtype().bits());
    let mut low = match op {
        OpKind::Fwd => {
            let (a, w) = (x, y);
            let n = a.dims().n;
            check(a, shape.a_dims(n), "A")?;
            check(w, shape.w_dims(), "W")?;
            let od = shape.o_dims(n);
            let c = shape.in_channels;
            let first = (0..shape.filters)
                .map(|f| {
                    let mut v = Vec::new();
                    for j in 0..ky {
                        for i in 0..kx {
                            push_brick(&mut v, lanes, c, |ch| w.get(f, ch, j, i));
                        }
                    }
                    v
                })
                .collect::<Vec<_>>();
            let mut second = Vec::new();
            let mut pos = Vec::new();
            for b in 0..n {
                for oy in 0..od.h {
                    for ox in 0..od.w {
                        let mut v = Vec::new();
                        for j in 0..ky {
                            for i in 0..kx {
                                let yy = oy as isize * s + j as isize - p;
                                let xx = ox as isize * s + i as isize - p;
                                push_brick(&mut v, lanes, c, |ch| a.get_padded(b, ch, yy, xx));
                            }
                        }
                        second.push(v);
                        pos.push((b, oy, ox));
                    }
                }
            }
            let out_index = (0..shape.filters)
                .flat_map(|f| pos.iter().map(move |&(b, oy, ox)| od.index(b, f, oy, ox)))
                .collect();
            let out_bits = od.len() as u64 * bits;
            Lowered {
                op,
                out_dims: od,
                first,
                second,
                out_index,
                side: Side::Second,
                side_sparsity: sparsity_stats(a).fraction(),
                transposer_ops: 0,
                tensor_bits: (a.data().len() + w.data().len()) as u64 * bits + out_bits,
            }
        }
        OpKind::IGrad => {
            let (g, w) = (x, y);
            let n = g.dims().n;
            check(g, shape.o_dims(n), "G_O")?;
            check(w, shape.w_dims(), "W")?;
            let gd = dilate(g, shape.stride);
            let wr = reconstruct_rotated_filters(w);
            let ad = shape.a_dims(n);
            let nf = shape.filters;
            let first = (0..shape.in_channels)
                .map(|c| {
                    let mut v = Vec::new();
                    for j in 0..ky {
                        for i in 0..kx {
                            push_brick(&mut v, lanes, nf, |f| wr.get(c, f, j, i));
                        }
                    }
                    v
                })
                .collect::<Vec<_>>();
            let offy = ky as isize - 1 - p;
            let offx = kx as isize - 1 - p;
            let mut second = Vec::new();
            let mut pos = Vec::new();
            for b in 0..n {
                for yy in 0..ad.h {
                    for xx in 0..ad.w {
                        let mut v = Vec::new();
                        for j in 0..ky {
                            for i in 0..kx {
                                let t = yy as isize + j as isize - offy;
                                let u = xx as isize + i as isize - offx;
                                push_brick(&mut v, lanes, nf, |f| gd.get_padded(b, f, t, u));
                            }
                        }
                        second.push(v);
                        pos.push((b, yy, xx));
                    }
                }
            }
            let out_index = (0..shape.in_channels)
                .flat_map(|c| pos.iter().map(move |&(b, yy, xx)| ad.index(b, c, yy, xx)))
                .collect();
            Lowered {
                op,
                out_dims: ad,
                first,
                second,
                out_index,
                side: Side::Second,
                side_sparsity: sparsity_stats(g).fraction(),
                // filters are re-read channel-wise
                transposer_ops: 32 * layout_groups(w).groups.len() as u64,
                tensor_bits: (g.data().len() + w.data().len() + ad.len()) as u64 * bits,
            }
        }
        OpKind::WGrad => {
            let (g, a) = (x, y);
            let n = a.dims().n;
            check(a, shape.a_dims(n), "A")?;
            check(g, shape.o_dims(n), "G_O")?;
            let gd = dilate(g, shape.stride);
            let gdd = gd.dims();
            let wd = shape.w_dims();
            let mut first = Vec::new();
            let mut pos = Vec::new();
            for c in 0..shape.in_channels {
                for j in 0..ky {
                    for i in 0..kx {
                        let mut v = Vec::with_capacity(n * gdd.h * gdd.w);
                        for b in 0..n {
                            for t in 0..gdd.h {
                                for u in 0..gdd.w {
                                    let yy = (j + t) as isize - p;
                                    let xx = (i + u) as isize - p;
                                    v.push(a.get_padded(b, c, yy, xx));
                                }
                            }
                        }
                        pad_to(&mut v, lanes);
                        first.push(v);
                        pos.push((c, j, i));
                    }
                }
            }
            let second = (0..shape.filters)
                .map(|f| {
                    let mut v = Vec::with_capacity(n * gdd.h * gdd.w);
                    for b in 0..n {
                        for t in 0..gdd.h {
                            for u in 0..gdd.w {
                                v.push(gd.get(b, f, t, u));
                            }
                        }
                    }
                    pad_to(&mut v, lanes);
                    v
                })
                .collect::<Vec<_>>();
            let nf = shape.filters;
            let out_index = pos
                .iter()
                .flat_map(|&(c, j, i)| (0..nf).map(move |f| wd.index(f, c, j, i)))
                .collect();
            let sg = sparsity_stats(g).fraction();
            let sa = sparsity_stats(a).fraction();
            let (side, side_sparsity) = if sa > sg { (Side::First, sa) } else { (Side::Second, sg) };
            Lowered {
                op,
                out_dims: wd,
                first,
                second,
                out_index,
                side,
                side_sparsity,
                // gradients are re-read along the spatial axes
                transposer_ops: 32 * layout_groups(g).groups.len() as u64,
                tensor_bits: (g.data().len() + a.data().len() + wd.len()) as u64 * bits,
            }
        }
    };
    match policy {
        SidePolicy::Auto => {}
        SidePolicy::A => low.side = Side::First,
        SidePolicy::B => low.side = Side::Second,
        SidePolicy::Both => low.side = Side::Both,
    }
    if policy != SidePolicy::Auto {
        low.side_sparsity = match low.side {
            Side::First => zero_fraction(&low.first),
            Side::Second => zero_fraction(&low.second),
            Side::Both => zero_fraction(&low.first).max(zero_fraction(&low.second)),
        };
    }
    Ok(low)
}

fn zero_fraction(streams: &[Vec<f32>]) -> f64 {
    let total: usize = streams.iter().map(|s| s.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let zeros: usize = streams
        .iter()
        .map(|s| s.iter().filter(|v| **v == 0.0).count())
        .sum();
    zeros as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRun {
    pub output: Tensor4,
    /// Chip cycles: blocks are dealt round-robin to the tiles and the
    /// busiest tile sets the total.
    pub cycles: u64,
    pub events: EventCounters,
    pub mode: Mode,
}

/// Runs every block of a lowered op on `cfg`. The sparse operand goes on the
/// tile rows; `cfg.pe.mode` picks dense or sparse execution, and `Side::Both`
/// upgrades sparse runs to two-sided extraction.
pub fn simulate_lowering(
    low: &Lowered,
    cfg: &TileConfig,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<LayerRun> {
    cfg.validate()?;
    let mut cfg = *cfg;
    if cfg.pe.mode.is_sparse() && low.side == Side::Both {
        cfg.pe.mode = Mode::SparseBoth;
    }
    let (rows, cols, swapped) = match low.side {
        Side::First => (&low.first, &low.second, true),
        _ => (&low.second, &low.first, false),
    };
    let b: Vec<&[f32]> = rows.iter().map(|v| v.as_slice()).collect();
    let a: Vec<&[f32]> = cols.iter().map(|v| v.as_slice()).collect();
    let blocks: Vec<(usize, usize)> = (0..b.len().div_ceil(cfg.rows))
        .flat_map(|r| (0..a.len().div_ceil(cfg.cols)).map(move |c| (r, c)))
        .collect();
    let runs = blocks
        .par_iter()
        .map(|&(br, bc)| {
            let bb = &b[br * cfg.rows..((br + 1) * cfg.rows).min(b.len())];
            let ab = &a[bc * cfg.cols..((bc + 1) * cfg.cols).min(a.len())];
            tile_run(ab, bb, &cfg, map, levels)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = vec![0.0f32; low.out_dims.len()];
    let ns = low.second.len();
    let mut per_tile = vec![0u64; cfg.tiles];
    let mut ev = EventCounters::default();
    for (k, (&(br, bc), run)) in blocks.iter().zip(&runs).enumerate() {
        for r in 0..run.n_rows {
            for c in 0..run.n_cols {
                let (ri, ci) = (br * cfg.rows + r, bc * cfg.cols + c);
                let (i, j) = if swapped { (ri, ci) } else { (ci, ri) };
                out[low.out_index[i * ns + j]] = run.at(r, c);
            }
        }
        per_tile[k % cfg.tiles] += run.cycles;
        ev += run.events;
    }
    let cycles = per_tile.into_iter().max().unwrap_or(0);
    ev.cycles = cycles;
    ev.transposer_ops += low.transposer_ops;
    ev.dram_bits_accessed += low.tensor_bits;
    let kind = match low.op {
        OpKind::Fwd => TensorKind::Outputs,
        _ => TensorKind::Gradients,
    };
    Ok(LayerRun {
        output: Tensor4::new(kind, low.out_dims, Default::default(), out)?,
        cycles,
        events: ev,
        mode: cfg.pe.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::PeConfig;
    use crate::trainops::forward_conv;

    fn t(kind: TensorKind, d: Dims4, f: impl Fn(usize) -> f32) -> Tensor4 {
        Tensor4::new(kind, d, Default::default(), (0..d.len()).map(f).collect()).unwrap()
    }

    #[test]
    fn one_by_one_forward_is_one_row_per_output() {
        let s = ConvShape::conv(16, 4, 4, 1, (1, 1), 1, 0).unwrap();
        let a = t(TensorKind::Activations, s.a_dims(1), |i| (i % 7) as f32 - 3.0);
        let w = t(TensorKind::Weights, s.w_dims(), |i| (i % 5) as f32 - 2.0);
        let low = lower_to_tile(OpKind::Fwd, &s, &a, &w, 16, SidePolicy::Auto).unwrap();
        assert_eq!(low.stream_len(), 16);
        assert_eq!((low.first.len(), low.second.len()), (1, 16));
        assert_eq!(low.side, Side::Second);
        let cfg = TileConfig::default().with_mode(Mode::Dense);
        let (m, l) = cfg.pe.default_map().unwrap();
        let run = simulate_lowering(&low, &cfg, &m, &l).unwrap();
        assert!(run.output.bits_eq(&forward_conv(&a, &w, &s).unwrap()));
    }

    #[test]
    fn wgrad_side_rule() {
        let s = ConvShape::conv(2, 4, 4, 2, (3, 3), 1, 0).unwrap();
        // A 20% zero, G 60% zero
        let a = t(TensorKind::Activations, s.a_dims(1), |i| if i % 5 == 0 { 0.0 } else { 1.0 });
        let g = t(TensorKind::Gradients, s.o_dims(1), |i| if i % 5 < 3 { 0.0 } else { 1.0 });
        let low = lower_to_tile(OpKind::WGrad, &s, &g, &a, 16, SidePolicy::Auto).unwrap();
        assert_eq!(low.side, Side::Second);
        // tie goes to the gradients
        let z = t(TensorKind::Gradients, s.o_dims(1), |_| 1.0);
        let low = lower_to_tile(OpKind::WGrad, &s, &z, &a.map(|_| 1.0), 16, SidePolicy::Auto).unwrap();
        assert_eq!(low.side, Side::Second);
        let low = lower_to_tile(OpKind::WGrad, &s, &z, &a, 16, SidePolicy::Auto).unwrap();
        assert_eq!(low.side, Side::First);
    }

    #[test]
    fn transposer_charges() {
        let s = ConvShape::conv(20, 3, 3, 2, (3, 3), 1, 1).unwrap();
        let w = Tensor4::zeros(TensorKind::Weights, s.w_dims());
        let g = Tensor4::zeros(TensorKind::Gradients, s.o_dims(1));
        let a = Tensor4::zeros(TensorKind::Activations, s.a_dims(1));
        let f = lower_to_tile(OpKind::Fwd, &s, &a, &w, 16, SidePolicy::Auto).unwrap();
        assert_eq!(f.transposer_ops, 0);
        let ig = lower_to_tile(OpKind::IGrad, &s, &g, &w, 16, SidePolicy::Auto).unwrap();
        // W is 2x20x3x3: 2 filters x 3 rows x 1 col group x 2 channel groups
        assert_eq!(ig.transposer_ops, 32 * 12);
        let wg = lower_to_tile(OpKind::WGrad, &s, &g, &a, 16, SidePolicy::Auto).unwrap();
        assert_eq!(wg.transposer_ops, 32 * 3);
    }

    #[test]
    fn fc_uses_the_same_machinery() {
        let s = ConvShape::fully_connected(3, 2, 2, 5).unwrap();
        let a = t(TensorKind::Activations, s.a_dims(2), |i| i as f32 - 5.0);
        let w = t(TensorKind::Weights, s.w_dims(), |i| (i % 4) as f32);
        let low = lower_to_tile(OpKind::Fwd, &s, &a, &w, 16, SidePolicy::Auto).unwrap();
        assert_eq!(low.second.len(), 2);
        let cfg = TileConfig {
            pe: PeConfig::default(),
            ..Default::default()
        };
        let (m, l) = cfg.pe.default_map().unwrap();
        let run = simulate_lowering(&low, &cfg, &m, &l).unwrap();
        assert!(run.output.bits_eq(&forward_conv(&a, &w, &s).unwrap()));
    }
}
