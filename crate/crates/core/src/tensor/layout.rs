//! 16×16 group memory layout and the on-chip transposer.
//!
//! A group holds 16 consecutive 16-value blocks along a tensor row (the x
//! axis); each block holds 16 consecutive channels. Group origins are
//! aligned by 16 on both x and c. Groups are allocated channel-group
//! fastest, then column group, then row, then sample.

use super::{DType, Dims4, Tensor4, TensorKind};
use crate::energy::EventCounters;

pub const GROUP: usize = 16;

/// `blocks[b][o]`: block `b` is the x offset, `o` the channel offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group16 {
    pub blocks: [[f32; GROUP]; GROUP],
}

impl Default for Group16 {
    fn default() -> Self {
        Group16 {
            blocks: [[0.0; GROUP]; GROUP],
        }
    }
}

impl Group16 {
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut g = Group16::default();
        for (i, row) in g.blocks.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(i, j);
            }
        }
        g
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32; GROUP]> {
        self.blocks.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId {
    pub n: usize,
    pub y: usize,
    pub x_base: usize,
    pub c_base: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    pub kind: TensorKind,
    pub dtype: DType,
    pub dims: Dims4,
    pub groups: Vec<(GroupId, Group16)>,
    /// Zero-padding slots added at ragged x/c edges.
    pub padding: usize,
}

impl GroupLayout {
    pub fn groups_per_row(dims: Dims4) -> (usize, usize) {
        (dims.w.div_ceil(GROUP), dims.c.div_ceil(GROUP))
    }

    /// Position of an element: (group index, block, offset).
    pub fn locate(dims: Dims4, n: usize, c: usize, y: usize, x: usize) -> (usize, usize, usize) {
        let (xg, cg) = Self::groups_per_row(dims);
        let g = ((n * dims.h + y) * xg + x / GROUP) * cg + c / GROUP;
        (g, x % GROUP, c % GROUP)
    }

    pub fn to_tensor(&self) -> Tensor4 {
        let d = self.dims;
        let mut data = vec![0.0f32; d.len()];
        for (id, g) in &self.groups {
            for (b, block) in g.blocks.iter().enumerate() {
                let x = id.x_base + b;
                if x >= d.w {
                    break;
                }
                for (o, &v) in block.iter().enumerate() {
                    let c = id.c_base + o;
                    if c >= d.c {
                        break;
                    }
                    data[d.index(id.n, c, id.y, x)] = v;
                }
            }
        }
        Tensor4::new(self.kind, d, DType::F32, data)
            .expect("layout dims are consistent")
            .with_dtype_unchecked(self.dtype)
    }
}

pub fn layout_groups(t: &Tensor4) -> GroupLayout {
    let d = t.dims();
    let (xg, cg) = GroupLayout::groups_per_row(d);
    let mut groups = Vec::with_capacity(d.n * d.h * xg * cg);
    for n in 0..d.n {
        for y in 0..d.h {
            for gx in 0..xg {
                for gc in 0..cg {
                    let id = GroupId {
                        n,
                        y,
                        x_base: gx * GROUP,
                        c_base: gc * GROUP,
                    };
                    let g = Group16::from_fn(|b, o| {
                        let (x, c) = (id.x_base + b, id.c_base + o);
                        if x < d.w && c < d.c {
                            t.get(n, c, y, x)
                        } else {
                            0.0
                        }
                    });
                    groups.push((id, g));
                }
            }
        }
    }
    let padding = groups.len() * GROUP * GROUP - d.len();
    GroupLayout {
        kind: t.kind(),
        dtype: t.dtype(),
        dims: d,
        groups,
        padding,
    }
}

/// Transposes a group through the transposer buffer: 16 wide reads in, 16
/// wide provides out.
pub fn transpose16(g: &Group16, events: &mut EventCounters) -> Group16 {
    events.transposer_ops += 2 * GROUP as u64;
    Group16::from_fn(|i, j| g.blocks[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_blocks_are_columns() {
        let t = Tensor4::from_fn(TensorKind::Activations, Dims4::new(1, 16, 1, 16), |_, c, _, x| {
            (x * 100 + c) as f32
        });
        let l = layout_groups(&t);
        assert_eq!(l.groups.len(), 1);
        assert_eq!(l.padding, 0);
        for b in 0..16 {
            for o in 0..16 {
                assert_eq!(l.groups[0].1.blocks[b][o], (b * 100 + o) as f32);
            }
        }
    }

    #[test]
    fn element_location() {
        // oracle: direct index arithmetic
        let d = Dims4::new(1, 40, 3, 20);
        let (g, b, o) = GroupLayout::locate(d, 0, 17, 0, 2);
        assert_eq!((b, o), (2, 1));
        let t = Tensor4::from_fn(TensorKind::Activations, d, |_, c, y, x| (c * 1000 + y * 100 + x) as f32);
        let l = layout_groups(&t);
        let (id, grp) = &l.groups[g];
        assert_eq!((id.c_base, id.x_base), (16, 0));
        assert_eq!(grp.blocks[b][o], t.get(0, 17, 0, 2));
    }

    #[test]
    fn ordering_is_channel_then_column_then_row() {
        let d = Dims4::new(1, 20, 2, 20);
        let t = Tensor4::zeros(TensorKind::Activations, d);
        let ids: Vec<_> = layout_groups(&t)
            .groups
            .iter()
            .map(|(id, _)| (id.y, id.x_base, id.c_base))
            .collect();
        assert_eq!(
            ids,
            vec![
                (0, 0, 0),
                (0, 0, 16),
                (0, 16, 0),
                (0, 16, 16),
                (1, 0, 0),
                (1, 0, 16),
                (1, 16, 0),
                (1, 16, 16)
            ]
        );
    }

    #[test]
    fn round_trip_ragged() {
        let d = Dims4::new(3, 37, 9, 23);
        let t = Tensor4::from_fn(TensorKind::Gradients, d, |n, c, y, x| {
            ((n * 7 + c * 13 + y * 5 + x * 3) % 11) as f32 - 5.0
        });
        let l = layout_groups(&t);
        assert_eq!(l.padding, l.groups.len() * 256 - d.len());
        assert!(l.to_tensor().bits_eq(&t));
    }

    #[test]
    fn transposer() {
        let mut ev = EventCounters::default();
        let g = Group16::from_fn(|i, j| (16 * i + j) as f32);
        let t = transpose16(&g, &mut ev);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(t.blocks[i][j], (16 * j + i) as f32);
            }
        }
        assert_eq!(transpose16(&t, &mut ev), g);
        let id = Group16::from_fn(|i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(transpose16(&id, &mut ev), id);
        assert_eq!(ev.transposer_ops, 3 * 32);
    }
}
