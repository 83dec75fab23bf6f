//! Scheduled-form storage. The scheduler doubles as a compression engine:
//! each value is kept as `(v, idx)` where `idx` is the option the lane took,
//! and decompression mirrors the multiplexer stage.

use crate::energy::EventCounters;
use crate::error::{Error, Result};
use crate::pe::row_masks;
use crate::sched::{schedule_step, ConnectivityMap, LevelPartition, Window, ZVector, MAX_DEPTH};
use crate::tensor::{layout_groups, DType, Group16, GroupId, GroupLayout, Tensor4, GROUP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocMode {
    /// Only the steps that carry values, plus a per-group row count.
    #[default]
    Packed,
    /// Space reserved for the dense worst case, directly addressable.
    Slotted,
}

impl AllocMode {
    pub fn code(self) -> u8 {
        match self {
            AllocMode::Packed => 0,
            AllocMode::Slotted => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AllocMode::Packed),
            1 => Some(AllocMode::Slotted),
            _ => None,
        }
    }
}

impl std::str::FromStr for AllocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "packed" => Ok(AllocMode::Packed),
            "slotted" => Ok(AllocMode::Slotted),
            other => Err(Error::Config(format!("unknown allocation mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AllocMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AllocMode::Packed => "packed",
            AllocMode::Slotted => "slotted",
        })
    }
}

/// One lane's output for one step. Idle lanes hold `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Slot {
    pub value: f32,
    pub idx: u8,
}

impl Slot {
    pub fn is_idle(&self) -> bool {
        self.value == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledGroup {
    pub lanes: usize,
    pub depth: usize,
    pub dense_rows: usize,
    pub mode: AllocMode,
    pub dtype: DType,
    /// Dense row that sat in window row 0 for each stored step.
    pub anchors: Vec<usize>,
    pub steps: Vec<Vec<Slot>>,
}

impl ScheduledGroup {
    /// Number of stored rows.
    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn entries(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.iter().filter(|e| !e.is_idle()).count())
            .sum()
    }

    /// Slots occupied in memory: stored steps for PACKED, the dense
    /// footprint for SLOTTED.
    pub fn storage_slots(&self) -> usize {
        match self.mode {
            AllocMode::Packed => self.steps.len() * self.lanes,
            AllocMode::Slotted => self.dense_rows * self.lanes,
        }
    }
}

fn check_width(rows: &[f32], map: &ConnectivityMap) -> Result<usize> {
    let lanes = map.lanes();
    if !rows.len().is_multiple_of(lanes) {
        return Err(Error::Shape(format!(
            "{} values do not form rows of {lanes} lanes",
            rows.len()
        )));
    }
    Ok(rows.len() / lanes)
}

fn emit(
    rows: &[f32],
    lanes: usize,
    base: usize,
    picks: impl Iterator<Item = (usize, usize, usize, usize)>,
) -> Vec<Slot> {
    let mut slots = vec![Slot::default(); lanes];
    for (lane, k, step, src) in picks {
        slots[lane] = Slot {
            value: rows[(base + step) * lanes + src],
            idx: k as u8,
        };
    }
    slots
}

fn finish(
    mut group: ScheduledGroup,
    mode: AllocMode,
) -> ScheduledGroup {
    if mode == AllocMode::Packed {
        let (anchors, steps) = group
            .anchors
            .iter()
            .zip(&group.steps)
            .filter(|(_, s)| s.iter().any(|e| !e.is_idle()))
            .map(|(a, s)| (*a, s.clone()))
            .unzip();
        group.anchors = anchors;
        group.steps = steps;
    }
    group.mode = mode;
    group
}

/// Compresses `rows` (row-major, `map.lanes()` wide) by running the
/// one-sided scheduler over its own non-zero mask.
pub fn compress_group(
    rows: &[f32],
    map: &ConnectivityMap,
    levels: &LevelPartition,
    mode: AllocMode,
) -> Result<ScheduledGroup> {
    let n = check_width(rows, map)?;
    let lanes = map.lanes();
    let masks = row_masks(rows, lanes);
    let mut win = Window::new(&masks, lanes, map.depth());
    let mut group = ScheduledGroup {
        lanes,
        depth: map.depth(),
        dense_rows: n,
        mode,
        dtype: DType::F32,
        anchors: Vec::new(),
        steps: Vec::new(),
    };
    // an empty group still takes one step to discover it is empty
    loop {
        let (sched, after) = schedule_step(win.z(), map, levels);
        let picks = (0..lanes).filter_map(|lane| {
            sched.ms(lane).map(|k| {
                let (s, l) = map.option(lane, k);
                (lane, k, s, l)
            })
        });
        group.anchors.push(win.base());
        group.steps.push(emit(rows, lanes, win.base(), picks));
        win.advance(&after, sched.as_count.max(1));
        if win.exhausted() {
            break;
        }
    }
    Ok(finish(group, mode))
}

/// Writes each `(v, idx)` back to its dense position; untouched positions
/// stay zero.
pub fn decompress_group(g: &ScheduledGroup, map: &ConnectivityMap) -> Result<Vec<f32>> {
    if g.lanes != map.lanes() || g.depth != map.depth() {
        return Err(Error::Corrupt(format!(
            "group is {}x{}, map is {}x{}",
            g.lanes,
            g.depth,
            map.lanes(),
            map.depth()
        )));
    }
    if g.anchors.len() != g.steps.len() {
        return Err(Error::Corrupt("anchor table does not match step count".into()));
    }
    let lanes = g.lanes;
    let mut out = vec![0.0f32; g.dense_rows * lanes];
    let mut written = vec![false; out.len()];
    for (&anchor, slots) in g.anchors.iter().zip(&g.steps) {
        if slots.len() != lanes {
            return Err(Error::Corrupt(format!("step of {} slots, expected {lanes}", slots.len())));
        }
        for (lane, s) in slots.iter().enumerate() {
            if s.is_idle() {
                continue;
            }
            let k = s.idx as usize;
            if k >= map.option_count() {
                return Err(Error::Corrupt(format!("lane {lane}: option index {k} out of range")));
            }
            let (step, src) = map.option(lane, k);
            let row = anchor + step;
            if row >= g.dense_rows {
                return Err(Error::Corrupt(format!(
                    "lane {lane} writes row {row} of a {}-row group",
                    g.dense_rows
                )));
            }
            let pos = row * lanes + src;
            if written[pos] {
                return Err(Error::Corrupt(format!("two entries map to row {row}, lane {src}")));
            }
            written[pos] = true;
            out[pos] = s.value;
        }
    }
    Ok(out)
}

/// Output-side scheduler that resolves one level per cycle. Produces the
/// same group as [`compress_group`] and charges `levels` cycles per step.
pub fn backside_schedule(
    rows: &[f32],
    map: &ConnectivityMap,
    levels: &LevelPartition,
    mode: AllocMode,
    events: &mut EventCounters,
) -> Result<(ScheduledGroup, u64)> {
    let n = check_width(rows, map)?;
    let lanes = map.lanes();
    let depth = map.depth();
    let masks = row_masks(rows, lanes);
    let mask_at = |r: usize| masks.get(r).copied().unwrap_or(0);
    let mut z = ZVector::from_rows(lanes, depth, &masks);
    let mut base = 0usize;
    let mut cycles = 0u64;
    let mut group = ScheduledGroup {
        lanes,
        depth,
        dense_rows: n,
        mode,
        dtype: DType::F32,
        anchors: Vec::new(),
        steps: Vec::new(),
    };
    loop {
        let mut slots = vec![Slot::default(); lanes];
        for level in levels.groups() {
            let mut taken = Vec::new();
            for &lane in level {
                let hit = map
                    .options(lane)
                    .into_iter()
                    .enumerate()
                    .find(|&(_, (s, l))| z.get(s, l));
                if let Some((k, (s, l))) = hit {
                    slots[lane] = Slot {
                        value: rows[(base + s) * lanes + l],
                        idx: k as u8,
                    };
                    taken.push((s, l));
                }
            }
            for (s, l) in taken {
                z.clear(s, l);
            }
            cycles += 1;
        }
        group.anchors.push(base);
        group.steps.push(slots);
        let k = z.leading_empty_rows().clamp(1, depth);
        let mut next = ZVector::empty(lanes, depth);
        for r in 0..depth {
            let bits = if r + k < depth { z.row(r + k) } else { mask_at(base + r + k) };
            for l in 0..lanes {
                if bits >> l & 1 == 1 {
                    next.set(r, l);
                }
            }
        }
        z = next;
        base += k;
        if base >= n {
            break;
        }
    }
    debug_assert!(depth <= MAX_DEPTH);
    events.scheduler_steps += group.steps.len() as u64;
    events.cycles += cycles;
    Ok((finish(group, mode), cycles))
}

/// Compresses every 16×16 group of `t`; each group's rows are its blocks.
pub fn compress_tensor(
    t: &Tensor4,
    map: &ConnectivityMap,
    levels: &LevelPartition,
    mode: AllocMode,
) -> Result<Vec<(GroupId, ScheduledGroup)>> {
    if map.lanes() != GROUP {
        return Err(Error::Config(format!(
            "tensor compression needs a {GROUP}-lane map, got {}",
            map.lanes()
        )));
    }
    let layout = layout_groups(t);
    layout
        .groups
        .iter()
        .map(|(id, g)| {
            let flat: Vec<f32> = g.blocks.iter().flatten().copied().collect();
            let mut sg = compress_group(&flat, map, levels, mode)?;
            sg.dtype = t.dtype();
            Ok((*id, sg))
        })
        .collect()
}

/// Inverse of [`compress_tensor`].
pub fn decompress_tensor(
    groups: &[(GroupId, ScheduledGroup)],
    like: &Tensor4,
    map: &ConnectivityMap,
) -> Result<Tensor4> {
    let template = layout_groups(&Tensor4::zeros(like.kind(), like.dims()));
    if template.groups.len() != groups.len() {
        return Err(Error::Corrupt(format!(
            "{} groups, tensor needs {}",
            groups.len(),
            template.groups.len()
        )));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (id, g) in groups {
        let flat = decompress_group(g, map)?;
        if flat.len() != GROUP * GROUP {
            return Err(Error::Corrupt(format!("group holds {} values", flat.len())));
        }
        out.push((*id, Group16::from_fn(|b, o| flat[b * GROUP + o])));
    }
    let layout = GroupLayout {
        kind: like.kind(),
        dtype: like.dtype(),
        dims: like.dims(),
        groups: out,
        padding: template.padding,
    };
    Ok(layout.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::{default_connectivity, level_partition};

    fn map16() -> (ConnectivityMap, LevelPartition) {
        let m = default_connectivity(16, 3).unwrap();
        let l = level_partition(&m).unwrap();
        (m, l)
    }

    #[test]
    fn dense_group_passes_through() {
        let (m, l) = map16();
        let rows: Vec<f32> = (1..=48).map(|i| i as f32).collect();
        let g = compress_group(&rows, &m, &l, AllocMode::Packed).unwrap();
        assert_eq!(g.rows(), 3);
        assert!(g.steps.iter().flatten().all(|s| s.idx == 0));
        assert_eq!(decompress_group(&g, &m).unwrap(), rows);
    }

    #[test]
    fn zero_group() {
        let (m, l) = map16();
        let z = vec![0.0; 48];
        let s = compress_group(&z, &m, &l, AllocMode::Slotted).unwrap();
        assert_eq!(s.rows(), 1);
        assert!(s.steps[0].iter().all(|e| *e == Slot::default()));
        assert_eq!(s.storage_slots(), 48);
        let p = compress_group(&z, &m, &l, AllocMode::Packed).unwrap();
        assert_eq!((p.rows(), p.storage_slots()), (0, 0));
        assert_eq!(decompress_group(&p, &m).unwrap(), z);
    }

    #[test]
    fn single_entry_lands_via_option_list() {
        let (m, _) = map16();
        // lane 8, option 3 is (+1, lane 7)
        let mut slots = vec![Slot::default(); 16];
        slots[8] = Slot { value: 2.5, idx: 3 };
        let g = ScheduledGroup {
            lanes: 16,
            depth: 3,
            dense_rows: 3,
            mode: AllocMode::Packed,
            dtype: DType::F32,
            anchors: vec![0],
            steps: vec![slots],
        };
        let d = decompress_group(&g, &m).unwrap();
        assert_eq!(d[16 + 7], 2.5);
        assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn corrupt_input() {
        let (m, _) = map16();
        let mut slots = vec![Slot::default(); 16];
        slots[0] = Slot { value: 1.0, idx: 9 };
        let mut g = ScheduledGroup {
            lanes: 16,
            depth: 3,
            dense_rows: 3,
            mode: AllocMode::Packed,
            dtype: DType::F32,
            anchors: vec![0],
            steps: vec![slots.clone()],
        };
        assert!(matches!(decompress_group(&g, &m), Err(Error::Corrupt(_))));
        // lane 0 via (+1, 0) and lane 1 via (+1, 0) also: idx 3 of lane 1 is (+1, 0)
        slots[0] = Slot { value: 1.0, idx: 1 };
        slots[1] = Slot { value: 2.0, idx: 3 };
        g.steps = vec![slots];
        assert!(matches!(decompress_group(&g, &m), Err(Error::Corrupt(_))));
    }

    #[test]
    fn width_mismatch() {
        let (m, l) = map16();
        assert!(matches!(
            compress_group(&[1.0; 17], &m, &l, AllocMode::Packed),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backside_costs_one_cycle_per_level() {
        let (m, l) = map16();
        let mut ev = EventCounters::default();
        let (g, cycles) = backside_schedule(&[0.0; 48], &m, &l, AllocMode::Packed, &mut ev).unwrap();
        assert_eq!(cycles, 6);
        assert_eq!(g.rows(), 0);
        let rows: Vec<f32> = (0..96).map(|i| if i % 5 == 0 { 1.0 + i as f32 } else { 0.0 }).collect();
        let front = compress_group(&rows, &m, &l, AllocMode::Slotted).unwrap();
        let (back, cycles) = backside_schedule(&rows, &m, &l, AllocMode::Slotted, &mut ev).unwrap();
        assert_eq!(front, back);
        assert_eq!(cycles, 6 * front.rows() as u64);
    }

    #[test]
    fn tensor_round_trip() {
        let (m, l) = map16();
        let t = Tensor4::from_fn(
            crate::tensor::TensorKind::Activations,
            crate::tensor::Dims4::new(2, 19, 3, 17),
            |n, c, y, x| if (n + c * 3 + y + x * 7) % 4 == 0 { (c + x) as f32 - 9.0 } else { 0.0 },
        );
        let g = compress_tensor(&t, &m, &l, AllocMode::Packed).unwrap();
        let back = decompress_tensor(&g, &t, &m).unwrap();
        assert!(back.bits_eq(&t));
    }
}
