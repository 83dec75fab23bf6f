//! Event-driven energy accounting.
//!
//! Energies are in abstract units (one f32 MAC = 1.0). The default table is
//! calibrated so that a default 4×4 tile in a sparse mode draws 1.02× the
//! per-cycle compute energy of the dense baseline, which makes compute-scope
//! energy efficiency equal speedup / 1.02.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCounters {
    /// Multiplier slots fired, idle lanes (fed a zero pair) included.
    pub macs_issued: u64,
    /// Slots whose two operands were both non-zero.
    pub macs_effectual: u64,
    /// Slots with no scheduled pair.
    pub idle_lanes: u64,
    pub staging_reads: u64,
    pub staging_writes: u64,
    pub scheduler_steps: u64,
    pub mux_traversals: u64,
    pub transposer_ops: u64,
    pub sram_bits_accessed: u64,
    pub dram_bits_accessed: u64,
    pub cycles: u64,
}

impl AddAssign for EventCounters {
    fn add_assign(&mut self, o: Self) {
        self.macs_issued += o.macs_issued;
        self.macs_effectual += o.macs_effectual;
        self.idle_lanes += o.idle_lanes;
        self.staging_reads += o.staging_reads;
        self.staging_writes += o.staging_writes;
        self.scheduler_steps += o.scheduler_steps;
        self.mux_traversals += o.mux_traversals;
        self.transposer_ops += o.transposer_ops;
        self.sram_bits_accessed += o.sram_bits_accessed;
        self.dram_bits_accessed += o.dram_bits_accessed;
        self.cycles += o.cycles;
    }
}

impl Add for EventCounters {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl EventCounters {
    pub fn scaled(&self, k: u64) -> Self {
        EventCounters {
            macs_issued: self.macs_issued * k,
            macs_effectual: self.macs_effectual * k,
            idle_lanes: self.idle_lanes * k,
            staging_reads: self.staging_reads * k,
            staging_writes: self.staging_writes * k,
            scheduler_steps: self.scheduler_steps * k,
            mux_traversals: self.mux_traversals * k,
            transposer_ops: self.transposer_ops * k,
            sram_bits_accessed: self.sram_bits_accessed * k,
            dram_bits_accessed: self.dram_bits_accessed * k,
            cycles: self.cycles * k,
        }
    }

    /// Effectual MACs over issued MAC slots.
    pub fn utilization(&self) -> f64 {
        if self.macs_issued == 0 {
            0.0
        } else {
            self.macs_effectual as f64 / self.macs_issued as f64
        }
    }
}

/// Per-event energy for one value type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtypeCosts {
    pub mac: f64,
    pub staging_read: f64,
    pub staging_write: f64,
    pub scheduler_step: f64,
    pub mux_traversal: f64,
    pub transposer_op: f64,
    pub sram_bit: f64,
    pub dram_bit: f64,
    /// Static energy per cycle for the baseline datapath.
    pub static_core: f64,
    /// Static energy per cycle for schedulers, staging buffers and muxes;
    /// only charged when those components are powered.
    pub static_sparse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTable {
    pub f32: DtypeCosts,
    pub bf16: DtypeCosts,
}

/// Default per-row scheduler energy.
const SCHEDULER_STEP: f64 = 0.04;
/// Per lane, per operand side, per PE cycle. With the scheduler cost above
/// this brings the 4×4 tile overhead to exactly 2% of its 256 MAC slots:
/// (4 · 0.04 + 512 · m) / 256 = 0.02.
const MUX_TRAVERSAL: f64 = (0.02 * 256.0 - 4.0 * SCHEDULER_STEP) / 512.0;

impl Default for CostTable {
    fn default() -> Self {
        let f32 = DtypeCosts {
            mac: 1.0,
            // staging-buffer register energy is folded into the mux cost
            staging_read: 0.0,
            staging_write: 0.0,
            scheduler_step: SCHEDULER_STEP,
            mux_traversal: MUX_TRAVERSAL,
            transposer_op: 0.5,
            sram_bit: 0.01,
            dram_bit: 0.2,
            static_core: 0.0,
            static_sparse: 0.0,
        };
        CostTable {
            f32,
            bf16: f32.scaled_for(DType::BF16),
        }
    }
}

impl DtypeCosts {
    /// Scales f32 costs to a narrower type: multipliers quadratically in
    /// significand width, datapath wiring and comparators linearly in value
    /// width, priority encoders not at all.
    pub fn scaled_for(&self, dtype: DType) -> DtypeCosts {
        let m = dtype.mantissa_bits() as f64 / DType::F32.mantissa_bits() as f64;
        let w = dtype.bits() as f64 / DType::F32.bits() as f64;
        DtypeCosts {
            mac: self.mac * m * m,
            staging_read: self.staging_read * w,
            staging_write: self.staging_write * w,
            scheduler_step: self.scheduler_step,
            mux_traversal: self.mux_traversal * w,
            transposer_op: self.transposer_op * w,
            sram_bit: self.sram_bit,
            dram_bit: self.dram_bit,
            static_core: self.static_core * m * m,
            static_sparse: self.static_sparse * w,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.mac,
            self.staging_read,
            self.staging_write,
            self.scheduler_step,
            self.mux_traversal,
            self.transposer_op,
            self.sram_bit,
            self.dram_bit,
            self.static_core,
            self.static_sparse,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("energy costs must be finite and >= 0".into()));
        }
        Ok(())
    }
}

impl CostTable {
    pub fn for_dtype(&self, dtype: DType) -> &DtypeCosts {
        match dtype {
            DType::F32 => &self.f32,
            DType::BF16 => &self.bf16,
        }
    }

    pub fn for_dtype_mut(&mut self, dtype: DType) -> &mut DtypeCosts {
        match dtype {
            DType::F32 => &mut self.f32,
            DType::BF16 => &mut self.bf16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.f32.validate()?;
        self.bf16.validate()
    }

    /// Sets one cost by `<dtype>.<field>` name, e.g. `f32.mac`.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Config(format!("cost `{key}` must be finite and >= 0")));
        }
        let (dt, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("cost key `{key}` must be <dtype>.<field>")))?;
        let costs = self.for_dtype_mut(dt.parse()?);
        let slot = match field {
            "mac" => &mut costs.mac,
            "staging_read" => &mut costs.staging_read,
            "staging_write" => &mut costs.staging_write,
            "scheduler_step" => &mut costs.scheduler_step,
            "mux_traversal" => &mut costs.mux_traversal,
            "transposer_op" => &mut costs.transposer_op,
            "sram_bit" => &mut costs.sram_bit,
            "dram_bit" => &mut costs.dram_bit,
            "static_core" => &mut costs.static_core,
            "static_sparse" => &mut costs.static_sparse,
            other => return Err(Error::Config(format!("unknown cost field `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Which components an energy total covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyScope {
    /// MAC datapath, schedulers, staging buffers and muxes.
    Compute,
    /// Compute plus transposers, on-chip SRAM and off-chip DRAM traffic.
    Chip,
}

/// Σ count·cost + cycles·static. `sparse_powered` selects whether the
/// sparsity-specific static energy is charged (false when bypassed).
pub fn tally_scoped(
    ev: &EventCounters,
    costs: &CostTable,
    dtype: DType,
    scope: EnergyScope,
    sparse_powered: bool,
) -> f64 {
    let c = costs.for_dtype(dtype);
    let mut e = ev.macs_issued as f64 * c.mac
        + ev.staging_reads as f64 * c.staging_read
        + ev.staging_writes as f64 * c.staging_write
        + ev.scheduler_steps as f64 * c.scheduler_step
        + ev.mux_traversals as f64 * c.mux_traversal
        + ev.cycles as f64 * c.static_core;
    if sparse_powered {
        e += ev.cycles as f64 * c.static_sparse;
    }
    if scope == EnergyScope::Chip {
        e += ev.transposer_ops as f64 * c.transposer_op
            + ev.sram_bits_accessed as f64 * c.sram_bit
            + ev.dram_bits_accessed as f64 * c.dram_bit;
    }
    e
}

/// Whole-chip energy with every component powered.
pub fn tally(ev: &EventCounters, costs: &CostTable, dtype: DType) -> f64 {
    tally_scoped(ev, costs, dtype, EnergyScope::Chip, true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub speedup: f64,
    pub energy_eff: f64,
}

/// Baseline vs. sparse comparison from `(cycles, energy)` pairs.
pub fn efficiency(base: (u64, f64), ours: (u64, f64)) -> Result<Efficiency> {
    if ours.0 == 0 {
        return Err(Error::ZeroDenominator("cycles"));
    }
    if ours.1 == 0.0 {
        return Err(Error::ZeroDenominator("energy"));
    }
    Ok(Efficiency {
        speedup: base.0 as f64 / ours.0 as f64,
        energy_eff: base.1 / ours.1,
    })
}
