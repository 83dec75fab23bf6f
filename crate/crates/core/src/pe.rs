//! One processing element: a `lanes`-wide MAC with an adder tree, either
//! dense or fronted by A/B staging buffers and the sparsity scheduler.

use std::str::FromStr;

use crate::energy::EventCounters;
use crate::error::{Error, Result};
use crate::sched::{
    combine_z, default_connectivity, level_partition, schedule_step, ConnectivityMap,
    LevelPartition, Window, ZVector,
};
use crate::tensor::{nonzero_bits, DType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    Dense,
    /// Sparsity extracted from the B operand only.
    #[default]
    SparseB,
    /// Sparsity extracted from both operands.
    SparseBoth,
}

impl Mode {
    pub fn is_sparse(self) -> bool {
        self != Mode::Dense
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(Mode::Dense),
            "sparse_b" | "sparse-b" | "b" => Ok(Mode::SparseB),
            "sparse_both" | "sparse-both" | "both" => Ok(Mode::SparseBoth),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dense => "dense",
            Mode::SparseB => "sparse_b",
            Mode::SparseBoth => "sparse_both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeConfig {
    pub lanes: usize,
    pub depth: usize,
    pub mode: Mode,
    pub dtype: DType,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            lanes: 16,
            depth: 3,
            mode: Mode::SparseB,
            dtype: DType::F32,
        }
    }
}

impl PeConfig {
    pub fn with_mode(self, mode: Mode) -> Self {
        PeConfig { mode, ..self }
    }

    /// Default interconnect and level partition for this geometry.
    pub fn default_map(&self) -> Result<(ConnectivityMap, LevelPartition)> {
        let map = default_connectivity(self.lanes, self.depth)?;
        let levels = level_partition(&map)?;
        Ok((map, levels))
    }

    pub(crate) fn check_map(&self, map: &ConnectivityMap) -> Result<()> {
        if map.lanes() != self.lanes || map.depth() != self.depth {
            return Err(Error::Config(format!(
                "connectivity map is {} lanes x {} deep, PE is {} x {}",
                map.lanes(),
                map.depth(),
                self.lanes,
                self.depth
            )));
        }
        Ok(())
    }
}

/// Power-gates the sparsity components and bypasses the staging buffers.
pub fn bypass_mode(cfg: PeConfig) -> PeConfig {
    cfg.with_mode(Mode::Dense)
}

/// Per-layer gating rule: bypass when the sparse-side zero fraction is
/// below `threshold`.
pub fn should_bypass(zero_fraction: f64, threshold: f64) -> bool {
    zero_fraction < threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeRunResult {
    pub accumulator: f32,
    pub cycles: u64,
    pub events: EventCounters,
}

fn check_streams(a: &[f32], b: &[f32], lanes: usize) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if lanes == 0 || !a.len().is_multiple_of(lanes) {
        return Err(Error::Usage(format!(
            "stream length {} is not a multiple of {lanes} lanes",
            a.len()
        )));
    }
    Ok(a.len() / lanes)
}

pub(crate) fn row_masks(stream: &[f32], lanes: usize) -> Vec<u64> {
    stream.chunks_exact(lanes).map(nonzero_bits).collect()
}

/// Baseline: every pair in its dense position, one row per cycle, lanes
/// summed left to right.
pub fn run_dense(a: &[f32], b: &[f32], cfg: &PeConfig) -> Result<PeRunResult> {
    let lanes = cfg.lanes;
    let rows = check_streams(a, b, lanes)? as u64;
    let mut acc = 0.0f32;
    let mut effectual = 0u64;
    for (ra, rb) in a.chunks_exact(lanes).zip(b.chunks_exact(lanes)) {
        let mut partial = 0.0f32;
        for (&x, &y) in ra.iter().zip(rb) {
            partial += x * y;
            effectual += (x != 0.0 && y != 0.0) as u64;
        }
        acc += partial;
    }
    let events = EventCounters {
        macs_issued: rows * lanes as u64,
        macs_effectual: effectual,
        sram_bits_accessed: 2 * a.len() as u64 * cfg.dtype.bits(),
        cycles: rows,
        ..Default::default()
    };
    Ok(PeRunResult {
        accumulator: acc,
        cycles: rows,
        events,
    })
}

/// Sparse datapath. Each cycle the scheduler picks up to `lanes` pairs from
/// the staging window; the same select signals drive both operand sides.
pub fn run_sparse(
    a: &[f32],
    b: &[f32],
    cfg: &PeConfig,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<PeRunResult> {
    let lanes = cfg.lanes;
    check_streams(a, b, lanes)?;
    if cfg.mode == Mode::Dense {
        return run_dense(a, b, cfg);
    }
    cfg.check_map(map)?;
    let depth = cfg.depth;
    let bz = row_masks(b, lanes);
    let zrows = match cfg.mode {
        Mode::SparseBoth => {
            let az = row_masks(a, lanes);
            bz.iter().zip(&az).map(|(x, y)| x & y).collect()
        }
        _ => bz,
    };
    let mut win = Window::new(&zrows, lanes, depth);
    let mut acc = 0.0f32;
    let mut ev = EventCounters::default();
    while !win.exhausted() {
        let (sched, after) = schedule_step(win.z(), map, levels);
        let base = win.base();
        let mut partial = 0.0f32;
        for (_, step, src) in sched.selections(map) {
            let i = (base + step) * lanes + src;
            let (x, y) = (a[i], b[i]);
            partial += x * y;
            ev.macs_effectual += (x != 0.0 && y != 0.0) as u64;
        }
        acc += partial;
        let busy = sched.busy_lanes() as u64;
        ev.macs_issued += lanes as u64;
        ev.idle_lanes += lanes as u64 - busy;
        ev.staging_reads += 2 * lanes as u64;
        ev.mux_traversals += 2 * lanes as u64;
        ev.scheduler_steps += 1;
        ev.cycles += 1;
        debug_assert!(sched.as_count >= 1, "row 0 always drains");
        win.advance(&after, sched.as_count.max(1));
    }
    let rows = zrows.len() as u64;
    ev.staging_writes = 2 * rows * lanes as u64;
    ev.sram_bits_accessed = 2 * a.len() as u64 * cfg.dtype.bits();
    Ok(PeRunResult {
        accumulator: acc,
        cycles: ev.cycles,
        events: ev,
    })
}

/// Runs `cfg.mode` with the default interconnect.
pub fn run(a: &[f32], b: &[f32], cfg: &PeConfig) -> Result<PeRunResult> {
    match cfg.mode {
        Mode::Dense => run_dense(a, b, cfg),
        _ => {
            let (map, levels) = cfg.default_map()?;
            run_sparse(a, b, cfg, &map, &levels)
        }
    }
}

/// The scheduler's view of a stream pair as a window (used by tests and
/// tools that inspect individual steps).
pub fn initial_window(a: &[f32], b: &[f32], cfg: &PeConfig) -> Result<ZVector> {
    check_streams(a, b, cfg.lanes)?;
    let bz = ZVector::from_rows(cfg.lanes, cfg.depth, &row_masks(b, cfg.lanes));
    match cfg.mode {
        Mode::SparseBoth => {
            let az = ZVector::from_rows(cfg.lanes, cfg.depth, &row_masks(a, cfg.lanes));
            combine_z(&az, &bz)
        }
        _ => Ok(bz),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lanes: usize, depth: usize, mode: Mode) -> PeConfig {
        PeConfig {
            lanes,
            depth,
            mode,
            dtype: DType::F32,
        }
    }

    #[test]
    fn dense_cycles() {
        let c = cfg(16, 3, Mode::Dense);
        assert_eq!(run_dense(&[1.0; 16], &[1.0; 16], &c).unwrap().cycles, 1);
        assert_eq!(run_dense(&[1.0; 64], &[1.0; 64], &c).unwrap().cycles, 4);
        let r = run_dense(&[1.0; 32], &[1.0; 32], &c).unwrap();
        assert_eq!((r.accumulator, r.cycles), (32.0, 2));
    }

    #[test]
    fn stream_errors() {
        let c = cfg(16, 3, Mode::SparseB);
        assert!(matches!(
            run_dense(&[1.0; 16], &[1.0; 32], &c),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(run_dense(&[1.0; 15], &[1.0; 15], &c).is_err());
        let (m, l) = cfg(16, 2, Mode::SparseB).default_map().unwrap();
        assert!(matches!(
            run_sparse(&[1.0; 16], &[1.0; 16], &c, &m, &l),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_zero_b_hits_the_depth_cap() {
        let c = cfg(16, 3, Mode::SparseB);
        let r = run(&[1.0; 96], &[0.0; 96], &c).unwrap();
        assert_eq!(r.cycles, 2);
        assert_eq!(r.accumulator, 0.0);
    }

    #[test]
    fn four_lane_example() {
        // 4 rows of 4 pairs, 7 effectual; a(0,0) and a(0,2) are zero
        let a = [
            0.0, 1.0, 0.0, 2.0, //
            3.0, 0.0, 4.0, 0.0, //
            5.0, 0.0, 6.0, 1.0, //
            0.0, 7.0, 0.0, 0.0,
        ];
        let b = [
            1.0, 2.0, 3.0, 4.0, //
            5.0, 6.0, 7.0, 8.0, //
            1.0, 2.0, 3.0, 0.0, //
            5.0, 6.0, 7.0, 8.0,
        ];
        let effectual = a.iter().zip(&b).filter(|(x, y)| **x != 0.0 && **y != 0.0).count();
        assert_eq!(effectual, 7);
        let c = cfg(4, 2, Mode::SparseBoth);
        let dense = run_dense(&a, &b, &c).unwrap();
        let sparse = run(&a, &b, &c).unwrap();
        assert_eq!(dense.cycles, 4);
        assert_eq!(sparse.cycles, 2);
        assert_eq!(sparse.accumulator, dense.accumulator);
        assert_eq!(sparse.events.macs_effectual, 7);
    }

    #[test]
    fn bypass() {
        assert_eq!(bypass_mode(cfg(16, 3, Mode::SparseB)).mode, Mode::Dense);
        assert_eq!(bypass_mode(cfg(16, 3, Mode::Dense)).mode, Mode::Dense);
        assert!(should_bypass(0.01, 0.05));
        assert!(!should_bypass(0.3, 0.05));
    }

    #[test]
    fn dense_mode_through_sparse_entry() {
        let c = cfg(16, 3, Mode::Dense);
        let (m, l) = c.default_map().unwrap();
        let a: Vec<f32> = (0..48).map(|i| (i % 3) as f32).collect();
        let r = run_sparse(&a, &a, &c, &m, &l).unwrap();
        assert_eq!(r.cycles, 3);
    }
}
