//! Golden model of the combinational sparsity scheduler.
//!
//! Each lane picks the first still-present pair among its connectivity
//! options (a static priority encoder). Lanes are evaluated in levels whose
//! option sets are pairwise disjoint, and every level removes its picks from
//! the Z window before the next one runs, so no pair is ever issued twice.

use std::fmt;

use crate::error::{Error, Result};

/// Largest staging depth a [`ZVector`] can hold.
pub const MAX_DEPTH: usize = 8;
/// Largest lane count a [`ZVector`] row can hold.
pub const MAX_LANES: usize = 64;

/// One movement relative to the receiving lane: `step` rows ahead in time,
/// `offset` lanes over on the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Move {
    pub step: u8,
    pub offset: i16,
}

impl Move {
    pub const fn new(step: u8, offset: i16) -> Self {
        Move { step, offset }
    }
}

/// Priority order of the default interconnect: the dense slot, two
/// lookaheads, then five lookasides.
pub const DEFAULT_MOVES: [Move; 8] = [
    Move::new(0, 0),
    Move::new(1, 0),
    Move::new(2, 0),
    Move::new(1, -1),
    Move::new(1, 1),
    Move::new(2, -2),
    Move::new(2, 2),
    Move::new(1, -3),
];

/// Sparse interconnect between a staging window and the multiplier lanes.
/// Rotation invariant: lane `i` uses lane 0's moves shifted by `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMap {
    lanes: usize,
    depth: usize,
    moves: Vec<Move>,
    // per lane, per option: (row, single-bit lane mask)
    option_bits: Vec<Vec<(u8, u64)>>,
}

impl ConnectivityMap {
    /// Builds a map from lane 0's ordered moves. The first move must be the
    /// dense slot and no two moves may reach the same position.
    pub fn new(lanes: usize, depth: usize, moves: Vec<Move>) -> Result<Self> {
        if lanes == 0 || lanes > MAX_LANES {
            return Err(Error::Config(format!("lanes must be in 1..={MAX_LANES}, got {lanes}")));
        }
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::Config(format!("depth must be in 1..={MAX_DEPTH}, got {depth}")));
        }
        if moves.first() != Some(&Move::new(0, 0)) {
            return Err(Error::Config("first option must be the dense slot (0,+0)".into()));
        }
        if moves.len() > u8::MAX as usize {
            return Err(Error::Config("too many options per lane".into()));
        }
        let mut seen = Vec::with_capacity(moves.len());
        for m in &moves {
            if m.step as usize >= depth {
                return Err(Error::Config(format!(
                    "option ({},{:+}) reaches past staging depth {depth}",
                    m.step, m.offset
                )));
            }
            let pos = (m.step, m.offset.rem_euclid(lanes as i16));
            if seen.contains(&pos) {
                return Err(Error::Config(format!(
                    "option ({},{:+}) duplicates an earlier option",
                    m.step, m.offset
                )));
            }
            seen.push(pos);
        }
        let option_bits = (0..lanes)
            .map(|lane| {
                moves
                    .iter()
                    .map(|m| {
                        let l = wrap(lane, m.offset, lanes);
                        (m.step, 1u64 << l)
                    })
                    .collect()
            })
            .collect();
        Ok(ConnectivityMap {
            lanes,
            depth,
            moves,
            option_bits,
        })
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn moves(&self) -> &[Move] {
        &self.moves
    }

    pub fn option_count(&self) -> usize {
        self.moves.len()
    }

    /// Absolute `(step, lane)` reached by option `idx` of `lane`.
    pub fn option(&self, lane: usize, idx: usize) -> (usize, usize) {
        let m = self.moves[idx];
        (m.step as usize, wrap(lane, m.offset, self.lanes))
    }

    pub fn options(&self, lane: usize) -> Vec<(usize, usize)> {
        (0..self.moves.len()).map(|k| self.option(lane, k)).collect()
    }

    /// Option index of `lane` that reaches `(step, target)`, if any.
    pub fn option_index(&self, lane: usize, step: usize, target: usize) -> Option<usize> {
        (0..self.moves.len()).find(|&k| self.option(lane, k) == (step, target))
    }

    /// Lane 0's option list as text, e.g. `0:+0,1:+0,1:-1`.
    pub fn format_moves(&self) -> String {
        self.moves
            .iter()
            .map(|m| format!("{}:{:+}", m.step, m.offset))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_moves(s: &str) -> Result<Vec<Move>> {
        s.split(',')
            .map(|item| {
                let item = item.trim();
                let (step, off) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("option `{item}` must be step:offset")))?;
                let step = step
                    .trim()
                    .parse::<u8>()
                    .map_err(|e| Error::Config(format!("option `{item}`: {e}")))?;
                let offset = off
                    .trim()
                    .trim_start_matches('+')
                    .parse::<i16>()
                    .map_err(|e| Error::Config(format!("option `{item}`: {e}")))?;
                Ok(Move::new(step, offset))
            })
            .collect()
    }

    #[inline]
    fn bits(&self, lane: usize) -> &[(u8, u64)] {
        &self.option_bits[lane]
    }
}

#[inline]
fn wrap(lane: usize, offset: i16, lanes: usize) -> usize {
    (lane as i64 + offset as i64).rem_euclid(lanes as i64) as usize
}

/// The default interconnect: for depth 3 all eight moves, for depth 2 the
/// five that stay within one step of lookahead. On small rings moves that
/// alias an earlier position are dropped.
pub fn default_connectivity(lanes: usize, depth: usize) -> Result<ConnectivityMap> {
    if lanes < 4 {
        return Err(Error::Config(format!("default map needs at least 4 lanes, got {lanes}")));
    }
    if !(2..=3).contains(&depth) {
        return Err(Error::Config(format!(
            "default map supports depth 2 or 3, got {depth}"
        )));
    }
    let mut moves: Vec<Move> = Vec::new();
    for m in DEFAULT_MOVES.iter().filter(|m| (m.step as usize) < depth) {
        let pos = |m: &Move| (m.step, m.offset.rem_euclid(lanes as i16));
        if !moves.iter().any(|k| pos(k) == pos(m)) {
            moves.push(*m);
        }
    }
    ConnectivityMap::new(lanes, depth, moves)
}

/// `depth × lanes` bit window; bit `(s, l)` set iff the pair at step `s`,
/// lane `l` is present and effectual.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZVector {
    lanes: u8,
    depth: u8,
    rows: [u64; MAX_DEPTH],
}

impl ZVector {
    pub fn empty(lanes: usize, depth: usize) -> Self {
        assert!(lanes <= MAX_LANES && depth <= MAX_DEPTH);
        ZVector {
            lanes: lanes as u8,
            depth: depth as u8,
            rows: [0; MAX_DEPTH],
        }
    }

    pub fn full(lanes: usize, depth: usize) -> Self {
        let mut z = Self::empty(lanes, depth);
        for r in 0..depth {
            z.rows[r] = lane_mask(lanes);
        }
        z
    }

    /// Rows beyond `rows.len()` are empty; bits beyond `lanes` are dropped.
    pub fn from_rows(lanes: usize, depth: usize, rows: &[u64]) -> Self {
        let mut z = Self::empty(lanes, depth);
        for (r, &bits) in rows.iter().take(depth).enumerate() {
            z.rows[r] = bits & lane_mask(lanes);
        }
        z
    }

    pub fn lanes(&self) -> usize {
        self.lanes as usize
    }

    pub fn depth(&self) -> usize {
        self.depth as usize
    }

    #[inline]
    pub fn row(&self, step: usize) -> u64 {
        self.rows[step]
    }

    pub fn rows(&self) -> &[u64] {
        &self.rows[..self.depth as usize]
    }

    #[inline]
    pub fn get(&self, step: usize, lane: usize) -> bool {
        self.rows[step] >> lane & 1 == 1
    }

    pub fn set(&mut self, step: usize, lane: usize) {
        self.rows[step] |= 1 << lane;
    }

    pub fn clear(&mut self, step: usize, lane: usize) {
        self.rows[step] &= !(1 << lane);
    }

    pub fn count_ones(&self) -> u32 {
        self.rows().iter().map(|r| r.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows().iter().all(|&r| r == 0)
    }

    /// Leading all-zero rows.
    pub fn leading_empty_rows(&self) -> usize {
        self.rows().iter().take_while(|&&r| r == 0).count()
    }

    pub fn same_shape(&self, other: &ZVector) -> bool {
        self.lanes == other.lanes && self.depth == other.depth
    }
}

impl fmt::Debug for ZVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<String> = self
            .rows()
            .iter()
            .map(|r| format!("{:0width$b}", r, width = self.lanes as usize))
            .collect();
        write!(f, "Z[{}]", rows.join("|"))
    }
}

#[inline]
pub fn lane_mask(lanes: usize) -> u64 {
    if lanes >= 64 {
        u64::MAX
    } else {
        (1u64 << lanes) - 1
    }
}

/// Bitwise AND of the two operand windows.
pub fn combine_z(az: &ZVector, bz: &ZVector) -> Result<ZVector> {
    if !az.same_shape(bz) {
        return Err(Error::Shape(format!(
            "Z windows differ: {}x{} vs {}x{}",
            az.depth, az.lanes, bz.depth, bz.lanes
        )));
    }
    let mut z = *az;
    for r in 0..az.depth() {
        z.rows[r] &= bz.rows[r];
    }
    Ok(z)
}

/// Lane groups evaluated one after another within a scheduling step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPartition {
    groups: Vec<Vec<usize>>,
}

impl LevelPartition {
    /// Validates a caller-supplied partition against `map`.
    pub fn new(groups: Vec<Vec<usize>>, map: &ConnectivityMap) -> Result<Self> {
        let mut covered = vec![false; map.lanes()];
        for g in &groups {
            for &l in g {
                if l >= map.lanes() || covered[l] {
                    return Err(Error::Config(format!(
                        "lane {l} is out of range or appears twice in the partition"
                    )));
                }
                covered[l] = true;
            }
        }
        if let Some(l) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!("lane {l} is missing from the partition")));
        }
        for g in &groups {
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    if !options_disjoint(map, a, b) {
                        return Err(Error::Config(format!(
                            "lanes {a} and {b} share an option and cannot be in one level"
                        )));
                    }
                }
            }
        }
        Ok(LevelPartition { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// True iff lanes `a` and `b` cannot reach a common `(step, lane)` position.
pub fn options_disjoint(map: &ConnectivityMap, a: usize, b: usize) -> bool {
    let oa = map.options(a);
    map.options(b).iter().all(|p| !oa.contains(p))
}

const LEVEL_STRIDE: usize = 5;

/// Packs lanes into levels: each level starts at the lowest unassigned lane
/// and takes every fifth lane after it that is disjoint from the members so
/// far. For the default 16-lane map this yields
/// {0,5,10} {1,6,11} {2,7,12} {3,8,13} {4,9,14} {15}.
pub fn level_partition(map: &ConnectivityMap) -> Result<LevelPartition> {
    let lanes = map.lanes();
    let mut assigned = vec![false; lanes];
    let mut groups = Vec::new();
    while let Some(start) = assigned.iter().position(|a| !a) {
        let mut group = vec![start];
        assigned[start] = true;
        let mut cand = start + LEVEL_STRIDE;
        while cand < lanes {
            if !assigned[cand] && group.iter().all(|&g| options_disjoint(map, g, cand)) {
                group.push(cand);
                assigned[cand] = true;
            }
            cand += LEVEL_STRIDE;
        }
        groups.push(group);
    }
    LevelPartition::new(groups, map)
}

/// Per-lane select signals plus the rows-drained count for one cycle.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    lanes: u8,
    ms: [u8; MAX_LANES],
    pub as_count: usize,
}

const IDLE: u8 = u8::MAX;

impl Schedule {
    fn idle(lanes: usize) -> Self {
        Schedule {
            lanes: lanes as u8,
            ms: [IDLE; MAX_LANES],
            as_count: 0,
        }
    }

    /// Selected option index of `lane`, `None` when idle.
    #[inline]
    pub fn ms(&self, lane: usize) -> Option<usize> {
        match self.ms[lane] {
            IDLE => None,
            k => Some(k as usize),
        }
    }

    pub fn lanes(&self) -> usize {
        self.lanes as usize
    }

    pub fn busy_lanes(&self) -> usize {
        self.ms[..self.lanes()].iter().filter(|&&k| k != IDLE).count()
    }

    /// `(lane, step, source lane)` for every busy lane.
    pub fn selections<'a>(
        &'a self,
        map: &'a ConnectivityMap,
    ) -> impl Iterator<Item = (usize, usize, usize)> + 'a {
        (0..self.lanes()).filter_map(move |lane| {
            self.ms(lane).map(|k| {
                let (s, l) = map.option(lane, k);
                (lane, s, l)
            })
        })
    }
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms: Vec<String> = (0..self.lanes())
            .map(|l| match self.ms(l) {
                Some(k) => k.to_string(),
                None => "-".into(),
            })
            .collect();
        write!(f, "Schedule(ms=[{}], as={})", ms.join(" "), self.as_count)
    }
}

/// One scheduling step: returns the schedule and the window with the
/// selected pairs removed. `as_count` is the number of leading empty rows
/// left behind, capped at the depth.
pub fn schedule_step(
    z: &ZVector,
    map: &ConnectivityMap,
    levels: &LevelPartition,
) -> (Schedule, ZVector) {
    assert!(
        z.lanes() == map.lanes() && z.depth() == map.depth(),
        "Z window does not match the connectivity map"
    );
    let mut sched = Schedule::idle(map.lanes());
    let mut cur = *z;
    for group in levels.groups() {
        // lanes in one level decide on the same Z, then their picks are removed
        let mut taken = [0u64; MAX_DEPTH];
        for &lane in group {
            for (k, &(row, bit)) in map.bits(lane).iter().enumerate() {
                if cur.rows[row as usize] & bit != 0 {
                    sched.ms[lane] = k as u8;
                    taken[row as usize] |= bit;
                    break;
                }
            }
        }
        for (r, t) in taken.iter().enumerate().take(map.depth()) {
            cur.rows[r] &= !t;
        }
    }
    sched.as_count = cur.leading_empty_rows().min(map.depth());
    (sched, cur)
}

/// Shifts the window up by `k` rows and appends `fresh` at the bottom.
pub fn advance_window(z: &ZVector, fresh: &[u64], k: usize) -> Result<ZVector> {
    let depth = z.depth();
    if k > depth {
        return Err(Error::Usage(format!("cannot advance {k} rows of a {depth}-row window")));
    }
    if fresh.len() != k {
        return Err(Error::Usage(format!(
            "advance by {k} needs {k} fresh rows, got {}",
            fresh.len()
        )));
    }
    Ok(shift_in(z, fresh, k))
}

#[inline]
pub(crate) fn shift_in(z: &ZVector, fresh: &[u64], k: usize) -> ZVector {
    let depth = z.depth();
    let mask = lane_mask(z.lanes());
    let mut out = ZVector::empty(z.lanes(), depth);
    for r in 0..depth - k {
        out.rows[r] = z.rows[r + k];
    }
    for (i, &f) in fresh.iter().take(k).enumerate() {
        out.rows[depth - k + i] = f & mask;
    }
    out
}

/// Staging window sliding over a stream of per-row non-zero masks.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    rows: &'a [u64],
    base: usize,
    z: ZVector,
}

impl<'a> Window<'a> {
    pub fn new(rows: &'a [u64], lanes: usize, depth: usize) -> Self {
        Window {
            rows,
            base: 0,
            z: ZVector::from_rows(lanes, depth, rows),
        }
    }

    /// Stream row currently in window row 0.
    pub fn base(&self) -> usize {
        self.base
    }

    pub fn z(&self) -> &ZVector {
        &self.z
    }

    pub fn exhausted(&self) -> bool {
        self.base >= self.rows.len()
    }

    /// Replaces the residual window with `after` shifted by `k`, loading the
    /// next `k` stream rows (zero past the end).
    pub fn advance(&mut self, after: &ZVector, k: usize) {
        let depth = after.depth();
        let start = (self.base + depth).min(self.rows.len());
        let end = (self.base + depth + k).min(self.rows.len());
        let mut fresh = [0u64; MAX_DEPTH];
        fresh[..end - start].copy_from_slice(&self.rows[start..end]);
        self.z = shift_in(after, &fresh[..k], k);
        self.base += k;
    }
}
