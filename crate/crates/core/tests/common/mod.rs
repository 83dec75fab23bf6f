//! Independent reference models used as test oracles.
#![allow(dead_code)]

/// Lane-0 priority list as `(step, lane offset)`.
pub const PRIORITY: [(usize, isize); 8] = [(0, 0), (1, 0), (2, 0), (1, -1), (1, 1), (2, -2), (2, 2), (1, -3)];

pub const LEVELS16: [&[usize]; 6] = [&[0, 5, 10], &[1, 6, 11], &[2, 7, 12], &[3, 8, 13], &[4, 9, 14], &[15]];

/// Options of `lane`, step-limited to `depth`, duplicates removed.
pub fn options(lanes: usize, depth: usize, lane: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(s, o) in PRIORITY.iter() {
        if s >= depth {
            continue;
        }
        let l = (lane as isize + o).rem_euclid(lanes as isize) as usize;
        if !out.contains(&(s, l)) {
            out.push((s, l));
        }
    }
    out
}

pub struct NaiveStep {
    /// Per lane: `(option index, step, source lane)`.
    pub picks: Vec<Option<(usize, usize, usize)>>,
    pub after: Vec<Vec<bool>>,
    pub as_count: usize,
}

/// Level-by-level transliteration of the 16-lane scheduler over a
/// `depth × 16` boolean window.
pub fn naive_step(z: &[Vec<bool>], depth: usize) -> NaiveStep {
    let lanes = 16;
    let mut cur = z.to_vec();
    let mut picks = vec![None; lanes];
    for group in LEVELS16 {
        let snapshot = cur.clone();
        for &lane in group {
            for (k, &(s, l)) in options(lanes, depth, lane).iter().enumerate() {
                if snapshot[s][l] {
                    picks[lane] = Some((k, s, l));
                    break;
                }
            }
        }
        for &lane in group {
            if let Some((_, s, l)) = picks[lane] {
                cur[s][l] = false;
            }
        }
    }
    let mut as_count = 0;
    while as_count < depth && cur[as_count].iter().all(|b| !b) {
        as_count += 1;
    }
    NaiveStep {
        picks,
        after: cur,
        as_count,
    }
}

pub fn bits_to_rows(rows: &[u64], lanes: usize) -> Vec<Vec<bool>> {
    rows.iter()
        .map(|r| (0..lanes).map(|l| r >> l & 1 == 1).collect())
        .collect()
}

/// One-sided dense schedule cycle count.
pub fn dense_cycles(len: usize, lanes: usize) -> u64 {
    (len / lanes) as u64
}

/// f64 forward convolution, written from the index formula.
pub fn conv_f64(
    a: &[f64],
    w: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    (f, kx, ky): (usize, usize, usize),
    s: usize,
    p: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * p - ky) / s + 1;
    let ow = (wd + 2 * p - kx) / s + 1;
    let mut o = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for ff in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for j in 0..ky {
                            for i in 0..kx {
                                let y = (oy * s + j) as isize - p as isize;
                                let x = (ox * s + i) as isize - p as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= wd as isize {
                                    continue;
                                }
                                acc += a[((b * c + ch) * h + y as usize) * wd + x as usize]
                                    * w[((ff * c + ch) * ky + j) * kx + i];
                            }
                        }
                    }
                    o[((b * f + ff) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (o, oh, ow)
}
