//! Permutohedral lattice filter.
//!
//! Points are lifted onto the hyperplane `sum(x) = 0` in `d + 1` dimensions,
//! where the permutohedral lattice tiles space with simplices. Each point
//! splats its value onto the `d + 1` vertices of its enclosing simplex with
//! barycentric weights, the lattice is blurred with a `[1/2, 1, 1/2]` stencil
//! along each of the `d + 1` lattice axes, and values are sliced back with
//! the same weights.

use crate::scalar::Real;

use super::hash::{KeyTable, NONE};

pub(super) struct Lattice<T: Real> {
    dim: usize,
    len: usize,
    /// Lattice vertex id for each (point, remainder) pair.
    vertices: Vec<u32>,
    barycentric: Vec<T>,
    /// `neighbors[(axis * vertex_count + m) * 2]` holds the vertex one step
    /// along `-u_axis`, the next slot the one along `+u_axis`.
    neighbors: Vec<u32>,
    vertex_count: usize,
    /// Diagonal of the lattice operator, subtracted to exclude self-messages.
    self_weights: Vec<T>,
    slice_scale: T,
}

impl<T: Real> Lattice<T> {
    pub(super) fn new(features: &[T], dim: usize) -> Self {
        let d = dim;
        let d1 = d + 1;
        let len = features.len() / d;

        let inv_std_dev = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std_dev / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table = KeyTable::with_capacity(d, len * d1 / 4 + 16);
        let mut vertices = Vec::with_capacity(len * d1);
        let mut barycentric = Vec::with_capacity(len * d1);
        let mut ranks: Vec<u16> = Vec::with_capacity(len * d1);

        let mut elevated = vec![0.0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0f64; d + 2];
        let mut key = vec![0i32; d];

        for point in features.chunks_exact(d) {
            // Elevate onto the hyperplane.
            let mut sum = 0.0;
            for j in (1..=d).rev() {
                let cf = point[j - 1].as_f64() * scale[j - 1];
                elevated[j] = sum - j as f64 * cf;
                sum += cf;
            }
            elevated[0] = sum;

            // Nearest remainder-0 lattice point.
            let mut coord_sum = 0i32;
            for i in 0..d1 {
                let rd = (elevated[i] / d1 as f64).round() as i32;
                rem0[i] = rd * d1 as i32;
                coord_sum += rd;
            }

            // Rank of each coordinate's differential, largest first.
            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in (i + 1)..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            // Bring the rounded point back onto the plane.
            for i in 0..d1 {
                rank[i] += coord_sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) / d1 as f64;
                let slot = d - rank[i] as usize;
                bary[slot] += v;
                bary[slot + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for remainder in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical(d, remainder, rank[i] as usize);
                }
                vertices.push(table.insert(&key));
                barycentric.push(T::of(bary[remainder]));
            }
            ranks.extend(rank.iter().map(|&r| r as u16));
        }

        let vertex_count = table.len();
        let mut neighbors = vec![NONE; d1 * vertex_count * 2];
        let mut down = vec![0i32; d];
        let mut up = vec![0i32; d];
        for axis in 0..d1 {
            for m in 0..vertex_count {
                let k = table.key(m);
                for i in 0..d {
                    down[i] = k[i] - 1;
                    up[i] = k[i] + 1;
                }
                if axis < d {
                    down[axis] = k[axis] + d as i32;
                    up[axis] = k[axis] - d as i32;
                }
                let base = (axis * vertex_count + m) * 2;
                neighbors[base] = table.find(&down);
                neighbors[base + 1] = table.find(&up);
            }
        }

        let mut lattice = Lattice {
            dim: d,
            len,
            vertices,
            barycentric,
            neighbors,
            vertex_count,
            self_weights: Vec::new(),
            slice_scale: T::of(1.0 / (1.0 + 0.5f64.powi(d as i32))),
        };
        lattice.self_weights = (0..len)
            .map(|p| lattice.diagonal(p, &ranks[p * d1..(p + 1) * d1]))
            .collect();
        lattice
    }

    pub(super) fn self_weights(&self) -> &[T] {
        &self.self_weights
    }

    fn neighbor(&self, axis: usize, vertex: u32, step: i8) -> u32 {
        let base = (axis * self.vertex_count + vertex as usize) * 2;
        match step {
            -1 => self.neighbors[base],
            1 => self.neighbors[base + 1],
            _ => vertex,
        }
    }

    /// Weight the forward blur carries from `source` to `target` when the two
    /// differ by `sum_{j in S} u_j`. The displacement fixes the per-axis steps
    /// up to a common offset, which leaves at most three stencil paths.
    fn blur_entry(&self, source: u32, target: u32, in_set: &[bool]) -> f64 {
        let d1 = self.dim + 1;
        let empty = in_set.iter().all(|&b| !b);
        let mut total = 0.0;
        let offsets: &[i8] = if empty { &[0, -1, 1] } else { &[0, -1] };
        for &offset in offsets {
            let mut at = source;
            let mut weight = 1.0;
            for axis in 0..d1 {
                let step = in_set[axis] as i8 + offset;
                if step != 0 {
                    at = self.neighbor(axis, at, step);
                    if at == NONE {
                        weight = 0.0;
                        break;
                    }
                    weight *= 0.5;
                }
            }
            if weight > 0.0 {
                debug_assert_eq!(at, target);
                total += weight;
            }
        }
        total
    }

    /// Diagonal entry of slice * blur * splat for one point.
    fn diagonal(&self, point: usize, rank: &[u16]) -> T {
        let d = self.dim;
        let d1 = d + 1;
        // Consecutive simplex vertices r -> r + 1 differ by u_axis where rank[axis] = d - r.
        let mut axis_of_step = vec![0usize; d1];
        for (axis, &r) in rank.iter().enumerate() {
            axis_of_step[d - r as usize] = axis;
        }
        let verts = &self.vertices[point * d1..(point + 1) * d1];
        let bary = &self.barycentric[point * d1..(point + 1) * d1];
        let mut in_set = vec![false; d1];
        let mut total = 0.0;
        for target in 0..d1 {
            for source in 0..d1 {
                let w = bary[target].as_f64() * bary[source].as_f64();
                if w == 0.0 {
                    continue;
                }
                in_set.iter_mut().for_each(|b| *b = false);
                let (lo, hi, flip) = if target >= source {
                    (source, target, false)
                } else {
                    (target, source, true)
                };
                for &axis in &axis_of_step[lo..hi] {
                    in_set[axis] = true;
                }
                if flip {
                    in_set.iter_mut().for_each(|b| *b = !*b);
                }
                total += w * self.blur_entry(verts[source], verts[target], &in_set);
            }
        }
        T::of(total) * self.slice_scale
    }

    /// Self-excluded lattice filter; `transpose` runs the blur axes in reverse
    /// order, which yields the exact adjoint.
    pub(super) fn apply(&self, values: &[T], channels: usize, transpose: bool) -> Vec<T> {
        let d1 = self.dim + 1;
        let c = channels;
        let m = self.vertex_count;
        let mut grid = vec![T::zero(); m * c];
        for p in 0..self.len {
            let src = &values[p * c..(p + 1) * c];
            for r in 0..d1 {
                let v = self.vertices[p * d1 + r] as usize;
                let w = self.barycentric[p * d1 + r];
                for (g, &x) in grid[v * c..(v + 1) * c].iter_mut().zip(src) {
                    *g += w * x;
                }
            }
        }

        let half = T::of(0.5);
        let mut next = vec![T::zero(); m * c];
        for step in 0..d1 {
            let axis = if transpose { d1 - 1 - step } else { step };
            for v in 0..m {
                let base = (axis * m + v) * 2;
                let lo = self.neighbors[base];
                let hi = self.neighbors[base + 1];
                let out = &mut next[v * c..(v + 1) * c];
                out.copy_from_slice(&grid[v * c..(v + 1) * c]);
                if lo != NONE {
                    let lo = lo as usize;
                    for (o, &x) in out.iter_mut().zip(&grid[lo * c..(lo + 1) * c]) {
                        *o += half * x;
                    }
                }
                if hi != NONE {
                    let hi = hi as usize;
                    for (o, &x) in out.iter_mut().zip(&grid[hi * c..(hi + 1) * c]) {
                        *o += half * x;
                    }
                }
            }
            std::mem::swap(&mut grid, &mut next);
        }

        let mut out = vec![T::zero(); self.len * c];
        for p in 0..self.len {
            let dst = &mut out[p * c..(p + 1) * c];
            for r in 0..d1 {
                let v = self.vertices[p * d1 + r] as usize;
                let w = self.barycentric[p * d1 + r] * self.slice_scale;
                for (o, &g) in dst.iter_mut().zip(&grid[v * c..(v + 1) * c]) {
                    *o += w * g;
                }
            }
            let s = self.self_weights[p];
            for (o, &x) in dst.iter_mut().zip(&values[p * c..(p + 1) * c]) {
                *o -= s * x;
            }
        }
        out
    }
}

fn canonical(d: usize, remainder: usize, rank: usize) -> i32 {
    if rank <= d - remainder {
        remainder as i32
    } else {
        remainder as i32 - (d as i32 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force diagonal: filter a unit impulse at each point without self-exclusion.
    fn impulse_diagonal(lattice: &Lattice<f64>) -> Vec<f64> {
        (0..lattice.len)
            .map(|p| {
                let mut e = vec![0.0; lattice.len];
                e[p] = 1.0;
                let out = lattice.apply(&e, 1, false);
                out[p] + lattice.self_weights[p]
            })
            .collect()
    }

    #[test]
    fn self_weights_match_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [1, 2, 3, 5] {
            let n = 80;
            let features: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(0.0..2.5)).collect();
            let lattice = Lattice::new(&features, dim);
            let brute = impulse_diagonal(&lattice);
            for (a, b) in lattice.self_weights.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12, "dim {dim}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn barycentric_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features: Vec<f64> = (0..50 * 5).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let lattice = Lattice::new(&features, 5);
        for w in lattice.barycentric.chunks(6) {
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x >= -1e-12));
        }
    }
}
