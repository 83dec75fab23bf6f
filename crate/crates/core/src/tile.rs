//! A grid of PEs. PEs in a row share one B stream and (in `SparseB` mode)
//! one scheduler; PEs in a column share one A stream. All rows advance a
//! common staging window, so the row with the most work sets the pace.
//!
//! Synchronization model: every row keeps a residual Z window over the
//! shared anchor. Each cycle every row schedules from its residual, the
//! anchor moves by the minimum rows-drained count over all rows, and each
//! residual shifts by that amount. Pairs scheduled early stay cleared, so
//! nothing is issued twice.

use rayon::prelude::*;

use crate::energy::EventCounters;
use crate::error::{Error, Result};
use crate::pe::{row_masks, Mode, PeConfig};
use crate::sched::{schedule_step, ConnectivityMap, LevelPartition, Schedule, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub rows: usize,
    pub cols: usize,
    pub pe: PeConfig,
    /// Tiles per chip; independent blocks of work are spread across them.
    pub tiles: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            rows: 4,
            cols: 4,
            pe: PeConfig::default(),
            tiles: 16,
        }
    }
}

impl TileConfig {
    pub fn macs_per_cycle(&self) -> usize {
        self.rows * self.cols * self.pe.lanes
    }

    pub fn with_mode(self, mode: Mode) -> Self {
        TileConfig {
            pe: self.pe.with_mode(mode),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.tiles == 0 {
            return Err(Error::Config("tile rows, cols and tiles must be >= 1".into()));
        }
        if self.pe.lanes == 0 || self.pe.depth == 0 {
            return Err(Error::Config("lanes and depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRunResult {
    /// `results[r * n_cols + c]` = dot(b_streams[r], a_streams[c]).
    pub results: Vec<f32>,
    pub n_rows: usize,
    pub n_cols: usize,
    pub cycles: u64,
    pub events: EventCounters,
}

impl TileRunResult {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.results[r * self.n_cols + c]
    }
}

/// Runs one block of work on a tile. Fewer streams than the geometry is
/// allowed (ragged edge blocks); the missing PEs sit idle.
pub fn tile_run(
    a_streams: &[&[f32]],
    b_streams: &[&[f32]],
    cfg: &TileConfig,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<TileRunResult> {
    cfg.validate()?;
    let lanes = cfg.pe.lanes;
    let (nr, nc) = (b_streams.len(), a_streams.len());
    if nr == 0 || nc == 0 || nr > cfg.rows || nc > cfg.cols {
        return Err(Error::Shape(format!(
            "{nr} B streams x {nc} A streams do not fit a {}x{} tile",
            cfg.rows, cfg.cols
        )));
    }
    let len = b_streams[0].len();
    for s in a_streams.iter().chain(b_streams) {
        if s.len() != len {
            return Err(Error::LengthMismatch { a: s.len(), b: len });
        }
    }
    if !len.is_multiple_of(lanes) {
        return Err(Error::Usage(format!(
            "stream length {len} is not a multiple of {lanes} lanes"
        )));
    }
    if cfg.pe.mode.is_sparse() {
        cfg.pe.check_map(map)?;
    }
    let n_rows = len / lanes;
    let mut results = vec![0.0f32; nr * nc];
    let pes = (cfg.rows * cfg.cols) as u64;
    let mut ev = EventCounters::default();
    let mut busy = 0u64;

    match cfg.pe.mode {
        Mode::Dense => {
            for r in 0..nr {
                for c in 0..nc {
                    let mut acc = 0.0f32;
                    for (ra, rb) in a_streams[c]
                        .chunks_exact(lanes)
                        .zip(b_streams[r].chunks_exact(lanes))
                    {
                        let mut partial = 0.0f32;
                        for (&x, &y) in ra.iter().zip(rb) {
                            partial += x * y;
                            ev.macs_effectual += (x != 0.0 && y != 0.0) as u64;
                        }
                        acc += partial;
                    }
                    results[r * nc + c] = acc;
                }
            }
            ev.cycles = n_rows as u64;
            ev.macs_issued = ev.cycles * pes * lanes as u64;
        }
        Mode::SparseB => {
            let masks: Vec<Vec<u64>> = b_streams.iter().map(|s| row_masks(s, lanes)).collect();
            let mut wins: Vec<Window> = masks
                .iter()
                .map(|m| Window::new(m, lanes, cfg.pe.depth))
                .collect();
            let mut steps: Vec<(Schedule, crate::sched::ZVector)> = Vec::with_capacity(nr);
            let mut base = 0;
            while base < n_rows {
                steps.clear();
                steps.extend(wins.iter().map(|w| schedule_step(w.z(), map, levels)));
                let k = steps.iter().map(|(s, _)| s.as_count).min().unwrap_or(1).max(1);
                let mut picked = Vec::with_capacity(lanes);
                for (r, (sched, _)) in steps.iter().enumerate() {
                    let b = b_streams[r];
                    picked.clear();
                    picked.extend(sched.selections(map).map(|(_, step, src)| (base + step) * lanes + src));
                    for c in 0..nc {
                        let a = a_streams[c];
                        let mut partial = 0.0f32;
                        for &i in &picked {
                            partial += a[i] * b[i];
                            ev.macs_effectual += (a[i] != 0.0 && b[i] != 0.0) as u64;
                        }
                        results[r * nc + c] += partial;
                    }
                    busy += (picked.len() * nc) as u64;
                }
                for (w, (_, after)) in wins.iter_mut().zip(&steps) {
                    w.advance(after, k);
                }
                base += k;
                ev.cycles += 1;
                ev.scheduler_steps += cfg.rows as u64;
            }
            charge_sparse(&mut ev, cfg, n_rows, busy);
        }
        Mode::SparseBoth => {
            let bm: Vec<Vec<u64>> = b_streams.iter().map(|s| row_masks(s, lanes)).collect();
            let am: Vec<Vec<u64>> = a_streams.iter().map(|s| row_masks(s, lanes)).collect();
            let z: Vec<Vec<u64>> = (0..nr * nc)
                .map(|i| {
                    let (r, c) = (i / nc, i % nc);
                    bm[r].iter().zip(&am[c]).map(|(x, y)| x & y).collect()
                })
                .collect();
            let mut wins: Vec<Window> = z
                .iter()
                .map(|m| Window::new(m, lanes, cfg.pe.depth))
                .collect();
            let mut base = 0;
            while base < n_rows {
                let steps: Vec<_> = wins.iter().map(|w| schedule_step(w.z(), map, levels)).collect();
                let k = steps.iter().map(|(s, _)| s.as_count).min().unwrap_or(1).max(1);
                for (i, (sched, _)) in steps.iter().enumerate() {
                    let (a, b) = (a_streams[i % nc], b_streams[i / nc]);
                    let mut partial = 0.0f32;
                    for (_, step, src) in sched.selections(map) {
                        let j = (base + step) * lanes + src;
                        partial += a[j] * b[j];
                        ev.macs_effectual += (a[j] != 0.0 && b[j] != 0.0) as u64;
                    }
                    results[i] += partial;
                    busy += sched.busy_lanes() as u64;
                }
                for (w, (_, after)) in wins.iter_mut().zip(&steps) {
                    w.advance(after, k);
                }
                base += k;
                ev.cycles += 1;
                ev.scheduler_steps += pes;
            }
            charge_sparse(&mut ev, cfg, n_rows, busy);
        }
    }
    ev.sram_bits_accessed = (nr + nc) as u64 * len as u64 * cfg.pe.dtype.bits();
    Ok(TileRunResult {
        results,
        n_rows: nr,
        n_cols: nc,
        cycles: ev.cycles,
        events: ev,
    })
}

fn charge_sparse(ev: &mut EventCounters, cfg: &TileConfig, stream_rows: usize, busy: u64) {
    let lanes = cfg.pe.lanes as u64;
    let pes = (cfg.rows * cfg.cols) as u64;
    // absent PEs of a ragged block still clock an idle slot
    ev.macs_issued = ev.cycles * pes * lanes;
    ev.idle_lanes = ev.macs_issued - busy;
    ev.mux_traversals = ev.cycles * pes * 2 * lanes;
    ev.staging_reads = ev.cycles * pes * 2 * lanes;
    // one B buffer per row, one A buffer per column
    ev.staging_writes = stream_rows as u64 * lanes * (cfg.rows + cfg.cols) as u64;
}

/// Speedup for a tile geometry over a fixed workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryPoint {
    pub rows: usize,
    pub cols: usize,
    pub dense_cycles: u64,
    pub sparse_cycles: u64,
    pub speedup: f64,
}

/// Streams for a geometry sweep: every B stream is processed against every
/// A stream, in blocks of `rows × cols`.
#[derive(Debug, Clone)]
pub struct SweepWorkload {
    pub b_streams: Vec<Vec<f32>>,
    pub a_streams: Vec<Vec<f32>>,
}

/// Cycles to process all `b × a` stream pairs on one tile, block by block.
pub fn blocked_cycles(
    work: &SweepWorkload,
    cfg: &TileConfig,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<(u64, EventCounters)> {
    let a: Vec<&[f32]> = work.a_streams.iter().map(|s| s.as_slice()).collect();
    let b: Vec<&[f32]> = work.b_streams.iter().map(|s| s.as_slice()).collect();
    let mut cycles = 0;
    let mut ev = EventCounters::default();
    for bb in b.chunks(cfg.rows) {
        for ab in a.chunks(cfg.cols) {
            let r = tile_run(ab, bb, cfg, map, levels)?;
            cycles += r.cycles;
            ev += r.events;
        }
    }
    Ok((cycles, ev))
}

/// Dense vs. sparse cycles for each `(rows, cols)` point, run in parallel,
/// returned in input order.
pub fn geometry_sweep(
    points: &[(usize, usize)],
    pe: PeConfig,
    work: &SweepWorkload,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<Vec<GeometryPoint>> {
    points
        .par_iter()
        .map(|&(rows, cols)| {
            let cfg = TileConfig {
                rows,
                cols,
                pe,
                tiles: 1,
            };
            let (dense, _) = blocked_cycles(work, &cfg.with_mode(Mode::Dense), map, levels)?;
            let (sparse, _) = blocked_cycles(work, &cfg, map, levels)?;
            Ok(GeometryPoint {
                rows,
                cols,
                dense_cycles: dense,
                sparse_cycles: sparse,
                speedup: dense as f64 / sparse.max(1) as f64,
            })
        })
        .collect()
}

/// Writes sweep points as CSV.
pub fn geometry_csv(points: &[GeometryPoint]) -> String {
    let mut s = String::from("rows,cols,dense_cycles,sparse_cycles,speedup\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            p.rows, p.cols, p.dense_cycles, p.sparse_cycles, p.speedup
        ));
    }
    s
}
