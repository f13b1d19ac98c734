//! Uniform-grid bucketing of agents for neighbor and catch queries.
//!
//! The index is rebuilt once per environment per step and stored flat as
//! `[cell_start; num_cells + 1]` followed by agent ids sorted by cell. Queries
//! walk Chebyshev rings of cells outward from the querying agent, so the
//! per-agent cost depends on local density rather than on the agent count.
//! Every query returns exactly what the brute-force scan with the same
//! `(squared distance, agent id)` ordering returns.

use super::config::TagConfig;

#[inline]
pub fn dist2(ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let dx = bx - ax;
    let dy = by - ay;
    dx * dx + dy * dy
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub cells_per_side: usize,
    pub cell_size: f32,
}

impl GridGeometry {
    /// About one agent per cell, never finer than one length unit.
    pub fn for_config(config: &TagConfig) -> Self {
        let side = config.extent();
        let max_cells = (side.floor() as usize).max(1);
        let wanted = ((config.num_agents() as f64).sqrt().ceil() as usize).max(1);
        let cells_per_side = wanted.min(max_cells);
        Self {
            cells_per_side,
            cell_size: side / cells_per_side as f32,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_side * self.cells_per_side
    }

    /// Length of the flat index for `num_agents` agents.
    pub fn index_len(&self, num_agents: usize) -> usize {
        self.num_cells() + 1 + num_agents
    }

    #[inline]
    fn coord(&self, v: f32) -> usize {
        // negative inputs saturate to 0
        ((v / self.cell_size) as usize).min(self.cells_per_side - 1)
    }

    #[inline]
    fn cell(&self, x: f32, y: f32) -> (usize, usize) {
        (self.coord(x), self.coord(y))
    }
}

/// Counting sort of agents into cells.
pub fn build_index(geom: &GridGeometry, xs: &[f32], ys: &[f32], out: &mut [i32]) {
    let cells = geom.num_cells();
    let (starts, agents) = out.split_at_mut(cells + 1);
    starts.fill(0);
    let side = geom.cells_per_side;
    for (&x, &y) in xs.iter().zip(ys) {
        let (cx, cy) = geom.cell(x, y);
        starts[cy * side + cx + 1] += 1;
    }
    for c in 0..cells {
        starts[c + 1] += starts[c];
    }
    let mut cursor: Vec<i32> = starts[..cells].to_vec();
    for (a, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let (cx, cy) = geom.cell(x, y);
        let slot = &mut cursor[cy * side + cx];
        agents[*slot as usize] = a as i32;
        *slot += 1;
    }
}

/// Calls `visit` for every agent bucketed in a cell at Chebyshev distance
/// exactly `ring` from `(cx, cy)`.
fn visit_ring(geom: &GridGeometry, index: &[i32], cx: usize, cy: usize, ring: usize, mut visit: impl FnMut(usize)) {
    let side = geom.cells_per_side as isize;
    let (cx, cy, r) = (cx as isize, cy as isize, ring as isize);
    let starts = &index[..geom.num_cells() + 1];
    let agents = &index[geom.num_cells() + 1..];
    let mut scan = |gx: isize, gy: isize| {
        if gx < 0 || gx >= side {
            return;
        }
        let c = (gy * side + gx) as usize;
        for &a in &agents[starts[c] as usize..starts[c + 1] as usize] {
            visit(a as usize);
        }
    };
    for gy in (cy - r)..=(cy + r) {
        if gy < 0 || gy >= side {
            continue;
        }
        if (gy - cy).abs() == r {
            for gx in (cx - r)..=(cx + r) {
                scan(gx, gy);
            }
        } else {
            scan(cx - r, gy);
            scan(cx + r, gy);
        }
    }
}

/// Inserts `cand` into the ascending list `best`, keeping at most `k` entries.
#[inline]
fn push_best(best: &mut Vec<(f32, u32)>, k: usize, cand: (f32, u32)) {
    let better = |a: &(f32, u32), b: &(f32, u32)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if best.len() == k {
        if !better(&cand, &best[k - 1]) {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|e| better(e, &cand));
    best.insert(pos, cand);
}

/// The `k` agents nearest to `agent` (excluding itself), nearest first, ties
/// by lower id. Results go to `best` as `(squared distance, id)`.
pub fn k_nearest_indexed(
    geom: &GridGeometry,
    index: &[i32],
    xs: &[f32],
    ys: &[f32],
    agent: usize,
    k: usize,
    best: &mut Vec<(f32, u32)>,
) {
    best.clear();
    let (x, y) = (xs[agent], ys[agent]);
    let (cx, cy) = geom.cell(x, y);
    for ring in 0..geom.cells_per_side {
        visit_ring(geom, index, cx, cy, ring, |j| {
            if j != agent {
                push_best(best, k, (dist2(x, y, xs[j], ys[j]), j as u32));
            }
        });
        // one ring of slack absorbs rounding in cell assignment
        let reach = (ring as f32 - 1.0) * geom.cell_size;
        if best.len() == k && reach > 0.0 && best[k - 1].0 < reach * reach {
            break;
        }
    }
}

/// Exhaustive counterpart of [`k_nearest_indexed`].
pub fn k_nearest_brute(xs: &[f32], ys: &[f32], agent: usize, k: usize) -> Vec<usize> {
    let (x, y) = (xs[agent], ys[agent]);
    let mut all: Vec<(f32, usize)> = (0..xs.len())
        .filter(|&j| j != agent)
        .map(|j| (dist2(x, y, xs[j], ys[j]), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Per-env inputs of a catch query.
#[derive(Debug, Clone, Copy)]
pub struct CatchScene<'a> {
    pub xs: &'a [f32],
    pub ys: &'a [f32],
    pub is_tagger: &'a [u8],
    pub active: &'a [u8],
    pub radius: f32,
}

impl CatchScene<'_> {
    #[inline]
    fn candidate(&self, runner: usize, t: usize) -> Option<(f32, u32)> {
        if self.is_tagger[t] == 0 || self.active[t] == 0 {
            return None;
        }
        let d2 = dist2(self.xs[runner], self.ys[runner], self.xs[t], self.ys[t]);
        (d2 <= self.radius * self.radius).then_some((d2, t as u32))
    }
}

fn nearer(a: Option<(f32, u32)>, b: (f32, u32)) -> Option<(f32, u32)> {
    match a {
        Some(cur) if cur.0 < b.0 || (cur.0 == b.0 && cur.1 < b.1) => Some(cur),
        _ => Some(b),
    }
}

/// Nearest active tagger within the catch radius of `runner`, ties by lower id.
pub fn nearest_tagger_brute(scene: &CatchScene<'_>, runner: usize) -> Option<usize> {
    let mut best = None;
    for t in 0..scene.xs.len() {
        if let Some(c) = scene.candidate(runner, t) {
            best = nearer(best, c);
        }
    }
    best.map(|(_, t)| t as usize)
}

/// Grid-accelerated [`nearest_tagger_brute`].
pub fn nearest_tagger_indexed(geom: &GridGeometry, index: &[i32], scene: &CatchScene<'_>, runner: usize) -> Option<usize> {
    let (cx, cy) = geom.cell(scene.xs[runner], scene.ys[runner]);
    let rings = ((scene.radius / geom.cell_size).ceil() as usize + 1).min(geom.cells_per_side - 1);
    let mut best = None;
    for ring in 0..=rings {
        visit_ring(geom, index, cx, cy, ring, |t| {
            if let Some(c) = scene.candidate(runner, t) {
                best = nearer(best, c);
            }
        });
    }
    best.map(|(_, t)| t as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(cells: usize, size: f32) -> GridGeometry {
        GridGeometry {
            cells_per_side: cells,
            cell_size: size / cells as f32,
        }
    }

    #[test]
    fn index_partitions_agents() {
        let g = geom(4, 20.0);
        let xs = [0.0, 19.0, 5.0, 5.1, 20.0];
        let ys = [0.0, 19.0, 0.0, 0.2, 20.0];
        let mut idx = vec![0; g.index_len(5)];
        build_index(&g, &xs, &ys, &mut idx);
        let (starts, agents) = idx.split_at(17);
        assert_eq!(starts[16], 5);
        let mut sorted = agents.to_vec();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        // cell (1,0) holds agents 2 and 3
        assert_eq!(&agents[starts[1] as usize..starts[2] as usize], &[2, 3]);
    }

    #[test]
    fn two_nearest_among_four() {
        let xs = [0.0, 1.0, 3.0, 0.0];
        let ys = [0.0, 0.0, 0.0, 2.0];
        assert_eq!(k_nearest_brute(&xs, &ys, 0, 2), vec![1, 3]);
        let g = geom(2, 4.0);
        let mut idx = vec![0; g.index_len(4)];
        build_index(&g, &xs, &ys, &mut idx);
        let mut best = Vec::new();
        k_nearest_indexed(&g, &idx, &xs, &ys, 0, 2, &mut best);
        assert_eq!(best.iter().map(|b| b.1).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn equidistant_taggers_lowest_id_wins() {
        let xs = [4.0, 6.0, 5.0];
        let ys = [5.0, 5.0, 5.0];
        let scene = CatchScene {
            xs: &xs,
            ys: &ys,
            is_tagger: &[1, 1, 0],
            active: &[1, 1, 1],
            radius: 1.0,
        };
        assert_eq!(nearest_tagger_brute(&scene, 2), Some(0));
        let g = geom(4, 20.0);
        let mut idx = vec![0; g.index_len(3)];
        build_index(&g, &xs, &ys, &mut idx);
        assert_eq!(nearest_tagger_indexed(&g, &idx, &scene, 2), Some(0));
        let far = CatchScene { radius: 0.5, ..scene };
        assert_eq!(nearest_tagger_brute(&far, 2), None);
    }

    fn scene_strategy() -> impl Strategy<Value = (Vec<(f32, f32)>, usize, usize, f32, bool)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20, 0u32..20), n),
                Just(n),
                1usize..n,
                0.0f32..3.0,
                any::<bool>(),
            )
                .prop_map(|(cells, n, k, radius, continuous)| {
                    let pts = cells
                        .into_iter()
                        .enumerate()
                        .map(|(i, (x, y))| {
                            if continuous {
                                // deterministic sub-cell jitter
                                let j = (i as f32 * 0.37).fract();
                                (x as f32 + j, y as f32 + (1.0 - j) * 0.5)
                            } else {
                                (x as f32, y as f32)
                            }
                        })
                        .collect();
                    (pts, n, k, radius, continuous)
                })
        })
    }

    proptest! {
        #[test]
        fn indexed_queries_match_brute_force((pts, n, k, radius, continuous) in scene_strategy()) {
            let xs: Vec<f32> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f32> = pts.iter().map(|p| p.1).collect();
            let cells = ((n as f64).sqrt().ceil() as usize).clamp(1, 20);
            let g = geom(cells, 20.0);
            let mut idx = vec![0; g.index_len(n)];
            build_index(&g, &xs, &ys, &mut idx);
            let mut best = Vec::new();
            let is_tagger: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
            let active: Vec<u8> = (0..n).map(|i| u8::from(i % 7 != 5)).collect();
            let radius = if continuous { radius } else { radius.floor() };
            let scene = CatchScene { xs: &xs, ys: &ys, is_tagger: &is_tagger, active: &active, radius };
            for a in 0..n {
                k_nearest_indexed(&g, &idx, &xs, &ys, a, k, &mut best);
                let fast: Vec<usize> = best.iter().map(|b| b.1 as usize).collect();
                prop_assert_eq!(fast, k_nearest_brute(&xs, &ys, a, k));
                prop_assert_eq!(nearest_tagger_indexed(&g, &idx, &scene, a), nearest_tagger_brute(&scene, a));
            }
        }
    }
}
