use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use sparsemac::compress::{backside_schedule, compress_tensor, decompress_group};
use sparsemac::energy::{efficiency, tally_scoped, EventCounters};
use sparsemac::experiment::{synth_layer, SPARSITY_LEVELS};
use sparsemac::lower::{lower_to_tile, simulate_lowering, LayerRun};
use sparsemac::pe::{should_bypass, Mode};
use sparsemac::sched::{ConnectivityMap, LevelPartition};
use sparsemac::tensor::{potential_speedup, sparsity_stats, to_bf16, DType, Tensor4, TensorKind};
use sparsemac::trace::{read_trace, write_trace, Payload, TraceFile, TraceRecord};
use sparsemac::trainops::{ConvShape, OpKind};

use crate::config::{Input, RunConfig};
use crate::CliError;

/// One layer's tensors; W and G_O may be missing from a trace.
pub struct Layer {
    pub name: String,
    pub layer_id: u32,
    pub epoch_id: u32,
    pub shape: ConvShape,
    pub a: Tensor4,
    pub w: Option<Tensor4>,
    pub g: Option<Tensor4>,
}

fn synthetic_shape(cfg: &RunConfig, c: usize, h: usize, w: usize) -> Result<ConvShape, CliError> {
    Ok(ConvShape::conv(c, h, w, cfg.filters, cfg.kernel, cfg.stride, cfg.padding)?)
}

fn synthetic_layer(cfg: &RunConfig, s: f64) -> Result<Layer, CliError> {
    let Input::Synthetic { dims, .. } = &cfg.input else {
        unreachable!("synthetic input expected")
    };
    let shape = synthetic_shape(cfg, dims.c, dims.h, dims.w)?;
    let (a, w, g) = synth_layer(&shape, dims.n, s, cfg.seed)?;
    Ok(Layer {
        name: "synthetic".into(),
        layer_id: 0,
        epoch_id: 0,
        shape,
        a,
        w: Some(w),
        g: Some(g),
    })
}

fn trace_layers(trace: &TraceFile, cfg: &RunConfig) -> Result<Vec<Layer>, CliError> {
    let mut by_layer: BTreeMap<(u32, u32), Vec<&TraceRecord>> = BTreeMap::new();
    for r in &trace.records {
        if r.tensor().is_some() {
            by_layer.entry((r.epoch_id, r.layer_id)).or_default().push(r);
        }
    }
    let mut out = Vec::new();
    for ((epoch, id), recs) in by_layer {
        let find = |k: TensorKind| recs.iter().find(|r| r.tensor().map(|t| t.kind()) == Some(k));
        let bad = |msg: String| CliError::Config(format!("layer {id} epoch {epoch}: {msg}"));
        let a_rec = find(TensorKind::Activations).ok_or_else(|| bad("no A tensor".into()))?;
        let a = a_rec.tensor().cloned().ok_or_else(|| bad("no A tensor".into()))?;
        let w = find(TensorKind::Weights).and_then(|r| r.tensor().cloned());
        let g = find(TensorKind::Gradients).and_then(|r| r.tensor().cloned());
        let (ad, kernel) = (a.dims(), (a_rec.kernel.0 as usize, a_rec.kernel.1 as usize));
        let filters = w.as_ref().map_or(cfg.filters, |w| w.dims().n);
        if let Some(w) = &w {
            let wd = w.dims();
            if (wd.c, wd.w, wd.h) != (ad.c, kernel.0, kernel.1) {
                return Err(bad(format!("W dims {wd} do not fit A {ad} with kernel {kernel:?}")));
            }
        }
        let stride = a_rec.stride as usize;
        let build = |p| ConvShape::conv(ad.c, ad.h, ad.w, filters, kernel, stride, p);
        let shape = match &g {
            Some(g) => (0..=kernel.0.max(kernel.1))
                .filter_map(|p| build(p).ok())
                .find(|s| s.o_dims(ad.n) == g.dims())
                .ok_or_else(|| bad(format!("no padding maps A {ad} to G_O {}", g.dims())))?,
            None => build(cfg.padding).map_err(|e| bad(e.to_string()))?,
        };
        out.push(Layer {
            name: a_rec.name.split('.').next().unwrap_or("").to_string(),
            layer_id: id,
            epoch_id: epoch,
            shape,
            a,
            w,
            g,
        });
    }
    Ok(out)
}

pub fn load_layers(cfg: &RunConfig) -> Result<Vec<Layer>, CliError> {
    let mut layers = match &cfg.input {
        Input::Trace(path) => trace_layers(&read_trace(path)?, cfg)?,
        Input::Synthetic { sparsity, .. } => vec![synthetic_layer(cfg, *sparsity)?],
    };
    if cfg.tile.pe.dtype == DType::BF16 {
        for l in &mut layers {
            l.a = to_bf16(&l.a);
            l.w = l.w.as_ref().map(to_bf16);
            l.g = l.g.as_ref().map(to_bf16);
        }
    }
    Ok(layers)
}

fn label(l: &Layer) -> String {
    if l.name.is_empty() {
        format!("L{}e{}", l.layer_id, l.epoch_id)
    } else {
        format!("{}:L{}e{}", l.name, l.layer_id, l.epoch_id)
    }
}

/// Totals for one (layer, op) or a sum of them.
#[derive(Debug, Clone, Default)]
pub struct OpResult {
    pub dense_cycles: u64,
    pub sparse_cycles: u64,
    pub effectual: u64,
    pub issued: u64,
    pub energy_dense: f64,
    pub energy_sparse: f64,
    pub side: Vec<&'static str>,
    pub bypass: Vec<bool>,
}

impl OpResult {
    fn add(&mut self, o: &OpResult) {
        self.dense_cycles += o.dense_cycles;
        self.sparse_cycles += o.sparse_cycles;
        self.effectual += o.effectual;
        self.issued += o.issued;
        self.energy_dense += o.energy_dense;
        self.energy_sparse += o.energy_sparse;
        self.side.extend(&o.side);
        self.bypass.extend(&o.bypass);
    }

    fn csv(&self) -> Result<String, CliError> {
        let e = efficiency(
            (self.dense_cycles, self.energy_dense),
            (self.sparse_cycles, self.energy_sparse),
        )?;
        let frac = if self.issued == 0 { 0.0 } else { self.effectual as f64 / self.issued as f64 };
        let bypass: Vec<&str> = self.bypass.iter().map(|&b| if b { "yes" } else { "no" }).collect();
        Ok(format!(
            "{},{},{:.6},{:.6},{:.3},{:.3},{:.6},{},{}",
            self.dense_cycles,
            self.sparse_cycles,
            e.speedup,
            frac,
            self.energy_dense,
            self.energy_sparse,
            e.energy_eff,
            self.side.join("+"),
            bypass.join("+")
        ))
    }
}

pub const SIM_HEADER: &str =
    "dense_cycles,sparse_cycles,speedup,effectual_fraction,energy_dense,energy_sparse,energy_efficiency,side,bypass";

fn op_inputs(l: &Layer, op: OpKind) -> Option<(&Tensor4, &Tensor4)> {
    match op {
        OpKind::Fwd => Some((&l.a, l.w.as_ref()?)),
        OpKind::IGrad => Some((l.g.as_ref()?, l.w.as_ref()?)),
        OpKind::WGrad => Some((l.g.as_ref()?, &l.a)),
    }
}

pub fn simulate_op(
    l: &Layer,
    op: OpKind,
    cfg: &RunConfig,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> Result<Option<OpResult>, CliError> {
    let Some((x, y)) = op_inputs(l, op) else {
        return Ok(None);
    };
    let tile = cfg.tile;
    let low = lower_to_tile(op, &l.shape, x, y, tile.pe.lanes, cfg.side)?;
    let dense = simulate_lowering(&low, &tile.with_mode(Mode::Dense), map, levels)?;
    let energy = |ev: &EventCounters, powered| tally_scoped(ev, &cfg.costs, tile.pe.dtype, cfg.scope, powered);
    let sparse_mode = tile.pe.mode.is_sparse();
    let bypass = sparse_mode && should_bypass(low.side_sparsity, cfg.bypass_threshold);
    let run = match sparse_mode && !bypass {
        true => Some(simulate_lowering(&low, &tile, map, levels)?),
        false => None,
    };
    let (sparse, powered): (&LayerRun, bool) = match &run {
        Some(r) => (r, true),
        None => (&dense, false),
    };
    Ok(Some(OpResult {
        dense_cycles: dense.cycles,
        sparse_cycles: sparse.cycles,
        effectual: dense.events.macs_effectual,
        issued: dense.events.macs_issued,
        energy_dense: energy(&dense.events, false),
        energy_sparse: energy(&sparse.events, powered),
        side: vec![low.side.tensor_tag(op)],
        bypass: vec![bypass],
    }))
}

pub fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let layers = load_layers(cfg)?;
    let (map, levels) = cfg.tile.pe.default_map()?;
    let mut s = cfg.echo();
    let _ = writeln!(s, "layer,op,{SIM_HEADER}");
    for l in &layers {
        for op in cfg.op.ops() {
            if let Some(r) = simulate_op(l, op, cfg, &map, &levels)? {
                let _ = writeln!(s, "{},{op},{}", label(l), r.csv()?);
            }
        }
    }
    Ok(s)
}

pub fn sweep(cfg: &RunConfig) -> Result<String, CliError> {
    if !matches!(cfg.input, Input::Synthetic { .. }) {
        return Err(CliError::Config("sweep needs a synthetic input".into()));
    }
    let (map, levels) = cfg.tile.pe.default_map()?;
    let ops = cfg.op.ops();
    let rows = SPARSITY_LEVELS
        .par_iter()
        .map(|&s| {
            let l = synthetic_layer(cfg, s)?;
            let mut total = OpResult::default();
            for &op in &ops {
                if let Some(r) = simulate_op(&l, op, cfg, &map, &levels)? {
                    total.add(&r);
                }
            }
            Ok(format!("{s:.1},{}", total.csv()?))
        })
        .collect::<Result<Vec<String>, CliError>>()?;
    let mut s = cfg.echo();
    let _ = writeln!(s, "sparsity,{SIM_HEADER}");
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    Ok(s)
}

fn dims_str(t: &Tensor4) -> String {
    let d = t.dims();
    format!("{}x{}x{}x{}", d.n, d.c, d.h, d.w)
}

pub fn analyze(cfg: &RunConfig) -> Result<String, CliError> {
    let layers = load_layers(cfg)?;
    let mut s = cfg.echo();
    let _ = writeln!(s, "layer,tensor,dims,dtype,zero_fraction,potential_speedup");
    for l in &layers {
        for t in [Some(&l.a), l.w.as_ref(), l.g.as_ref()].into_iter().flatten() {
            let st = sparsity_stats(t);
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                label(l),
                t.kind().tag(),
                dims_str(t),
                t.dtype(),
                st.fraction(),
                potential_speedup(st)
            );
        }
    }
    Ok(s)
}

pub fn compress(cfg: &RunConfig) -> Result<String, CliError> {
    if cfg.tile.pe.lanes != 16 {
        return Err(CliError::Config("compress works on 16-lane groups".into()));
    }
    let layers = load_layers(cfg)?;
    let (map, levels) = cfg.tile.pe.default_map()?;
    let mut s = cfg.echo();
    let _ = writeln!(s, "layer,tensor,groups,dense_rows,stored_rows,storage_ratio,backside_cycles");
    let mut emitted = Vec::new();
    for l in &layers {
        for t in [Some(&l.a), l.w.as_ref(), l.g.as_ref()].into_iter().flatten() {
            let groups = compress_tensor(t, &map, &levels, cfg.alloc)?;
            // group padding is not counted as data
            let dense = t.data().len().div_ceil(16);
            let (mut stored, mut cycles) = (0usize, 0u64);
            for (_, g) in &groups {
                stored += g.storage_slots() / g.lanes;
                let flat = decompress_group(g, &map)?;
                let mut ev = EventCounters::default();
                cycles += backside_schedule(&flat, &map, &levels, cfg.alloc, &mut ev)?.1;
            }
            let _ = writeln!(
                s,
                "{},{},{},{dense},{stored},{:.6},{cycles}",
                label(l),
                t.kind().tag(),
                groups.len(),
                stored as f64 / dense.max(1) as f64
            );
            if cfg.emit.is_some() {
                for (i, (_, g)) in groups.into_iter().enumerate() {
                    emitted.push(TraceRecord {
                        name: format!("{}.{}.{i}", label(l), t.kind().tag()),
                        layer_id: l.layer_id,
                        epoch_id: l.epoch_id,
                        stride: g.mode.code(),
                        kernel: (g.lanes as u16, g.depth as u16),
                        payload: Payload::Scheduled(g),
                    });
                }
            }
        }
    }
    if let Some(path) = &cfg.emit {
        write_trace(path, &TraceFile { records: emitted })?;
    }
    Ok(s)
}
