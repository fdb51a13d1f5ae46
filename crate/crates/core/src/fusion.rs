//! Sparse voxel map of label distributions fused by recursive Bayesian update.
//!
//! Each voxel keeps a normalized log-probability vector. A new observation
//! multiplies the posterior by the observed likelihood (floored at `1e-8`)
//! and renormalizes, so the stored state after `k` observations is
//! `P(l | I_1..k) = P(l | I_1..k-1) P(l | I_k) / Z` under a uniform initial prior.

use std::collections::HashMap;

use crate::crf::argmax_of;
use crate::error::{Error, Result};
use crate::projection::SemanticPointCloud;

pub const LIKELIHOOD_FLOOR: f64 = 1e-8;
pub const DEFAULT_RESOLUTION: f64 = 0.01;

pub type VoxelIndex = [i64; 3];

/// `floor(coordinate / resolution)` per axis.
pub fn voxel_index(point: [f64; 3], resolution: f64) -> VoxelIndex {
    point.map(|c| (c / resolution).floor() as i64)
}

fn log_normalize(log_probs: &mut [f64]) {
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    log_probs.iter_mut().for_each(|v| *v -= lse);
}

fn fuse_log(log_posterior: &mut [f64], likelihood: &[f64]) {
    for (lp, &p) in log_posterior.iter_mut().zip(likelihood) {
        *lp += p.max(LIKELIHOOD_FLOOR).ln();
    }
    log_normalize(log_posterior);
}

/// Normalized element-wise product of `prior` and the floored `likelihood`.
pub fn bayes_update(prior: &[f64], likelihood: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != likelihood.len() || prior.is_empty() {
        return Err(Error::mismatch(format!(
            "prior has {} labels, likelihood {}",
            prior.len(),
            likelihood.len()
        )));
    }
    let mut log_post: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    fuse_log(&mut log_post, likelihood);
    Ok(log_post.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    log_posterior: Vec<f64>,
    observations: u64,
    color_sum: [f64; 3],
}

impl Voxel {
    fn uniform(labels: usize) -> Self {
        Voxel {
            log_posterior: vec![-(labels as f64).ln(); labels],
            observations: 0,
            color_sum: [0.0; 3],
        }
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_posterior
    }

    pub fn posterior(&self) -> Vec<f64> {
        self.log_posterior.iter().map(|v| v.exp()).collect()
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    /// Most likely label and its posterior probability; ties to the smallest id.
    pub fn best(&self) -> (u8, f64) {
        let l = argmax_of(&self.log_posterior);
        (l as u8, self.log_posterior[l].exp())
    }

    pub fn mean_color(&self) -> [u8; 3] {
        if self.observations == 0 {
            return [0; 3];
        }
        self.color_sum
            .map(|c| (c / self.observations as f64).round().clamp(0.0, 255.0) as u8)
    }
}

/// One emitted voxel of the fused map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub index: VoxelIndex,
    pub center: [f64; 3],
    pub label: u8,
    pub confidence: f64,
    pub color: [u8; 3],
    pub observations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    resolution: f64,
    labels: usize,
    cells: HashMap<VoxelIndex, Voxel>,
}

impl VoxelMap {
    pub fn new(resolution: f64, labels: usize) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::config(format!(
                "voxel resolution must be positive, got {resolution}"
            )));
        }
        if labels < 1 {
            return Err(Error::config("voxel map needs at least one label"));
        }
        Ok(VoxelMap {
            resolution,
            labels,
            cells: HashMap::new(),
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, index: &VoxelIndex) -> Option<&Voxel> {
        self.cells.get(index)
    }

    /// Voxel containing a world-frame point.
    pub fn voxel_at(&self, point: [f64; 3]) -> Option<&Voxel> {
        self.cells.get(&voxel_index(point, self.resolution))
    }

    /// Voxels sorted by index.
    pub fn voxels(&self) -> Vec<(&VoxelIndex, &Voxel)> {
        let mut all: Vec<_> = self.cells.iter().collect();
        all.sort_unstable_by_key(|(k, _)| **k);
        all
    }

    /// Fuses every point of a world-frame cloud into its voxel, in point order.
    pub fn integrate_cloud(&mut self, cloud: &SemanticPointCloud) -> Result<()> {
        if cloud.labels != self.labels {
            return Err(Error::mismatch(format!(
                "cloud {} has {} labels, map has {}",
                cloud.frame_id, cloud.labels, self.labels
            )));
        }
        let mut likelihood = vec![0.0; self.labels];
        for (i, point) in cloud.points.iter().enumerate() {
            if point.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!(
                    "cloud {} point {i} is not finite",
                    cloud.frame_id
                )));
            }
            cloud.distribution_into(i, &mut likelihood);
            let voxel = self
                .cells
                .entry(voxel_index(*point, self.resolution))
                .or_insert_with(|| Voxel::uniform(self.labels));
            fuse_log(&mut voxel.log_posterior, &likelihood);
            voxel.observations += 1;
            for (s, &c) in voxel.color_sum.iter_mut().zip(&cloud.colors[i]) {
                *s += c as f64;
            }
        }
        Ok(())
    }

    /// Combines a map built from a disjoint set of observations.
    ///
    /// Both posteriors are products of likelihoods over one uniform prior, so
    /// multiplying them and renormalizing divides that shared prior back out.
    pub fn merge(&mut self, other: &VoxelMap) -> Result<()> {
        if other.labels != self.labels || other.resolution != self.resolution {
            return Err(Error::mismatch(
                "maps differ in label count or resolution",
            ));
        }
        for (index, theirs) in &other.cells {
            match self.cells.get_mut(index) {
                Some(mine) => {
                    for (a, b) in mine.log_posterior.iter_mut().zip(&theirs.log_posterior) {
                        *a += b;
                    }
                    log_normalize(&mut mine.log_posterior);
                    mine.observations += theirs.observations;
                    for (a, b) in mine.color_sum.iter_mut().zip(theirs.color_sum) {
                        *a += b;
                    }
                }
                None => {
                    self.cells.insert(*index, theirs.clone());
                }
            }
        }
        Ok(())
    }

    /// Voxels with at least `min_observations` hits and a maximum posterior of
    /// at least `min_confidence`, sorted by voxel index.
    pub fn extract(&self, min_observations: u64, min_confidence: f64) -> Vec<MapPoint> {
        self.voxels()
            .into_iter()
            .filter_map(|(index, voxel)| {
                let (label, confidence) = voxel.best();
                if voxel.observations < min_observations || confidence < min_confidence {
                    return None;
                }
                Some(MapPoint {
                    index: *index,
                    center: index.map(|k| (k as f64 + 0.5) * self.resolution),
                    label,
                    confidence,
                    color: voxel.mean_color(),
                    observations: voxel.observations,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::LabelPayload;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cloud(points: Vec<[f64; 3]>, dists: Vec<f64>, labels: usize) -> SemanticPointCloud {
        let n = points.len();
        SemanticPointCloud {
            frame_id: "t".into(),
            labels,
            points,
            colors: vec![[100, 50, 0]; n],
            payload: LabelPayload::Distributions(dists),
        }
    }

    #[test]
    fn voxel_index_examples() {
        assert_eq!(voxel_index([0.0, 0.0, 0.0], 0.01), [0, 0, 0]);
        assert_eq!(voxel_index([0.015, -0.005, 0.02], 0.01), [1, -1, 2]);
        assert_eq!(voxel_index([0.01, 0.0, 0.0], 0.01), [1, 0, 0]);
    }

    #[test]
    fn bayes_update_examples() {
        let post = bayes_update(&[0.2, 0.3, 0.5], &[1.0 / 3.0; 3]).unwrap();
        for (a, b) in post.iter().zip([0.2, 0.3, 0.5]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let post = bayes_update(&[0.6, 0.4], &[0.6, 0.4]).unwrap();
        assert_relative_eq!(post[0], 9.0 / 13.0, epsilon = 1e-12);
        assert_relative_eq!(post[1], 4.0 / 13.0, epsilon = 1e-12);
        let post = bayes_update(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert_relative_eq!(post[0], 0.9, epsilon = 1e-12);
        assert!(bayes_update(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn zero_likelihood_is_floored() {
        let post = bayes_update(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(post[1] > 0.0);
        let back = bayes_update(&post, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(back[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn integrate_examples() {
        let mut map = VoxelMap::new(0.01, 2).unwrap();
        map.integrate_cloud(&cloud(vec![], vec![], 2)).unwrap();
        assert!(map.is_empty());

        map.integrate_cloud(&cloud(vec![[0.001, 0.002, 0.003]], vec![0.6, 0.4], 2))
            .unwrap();
        let v = map.get(&[0, 0, 0]).unwrap();
        assert_relative_eq!(v.posterior()[0], 0.6, epsilon = 1e-12);
        map.integrate_cloud(&cloud(vec![[0.004, 0.002, 0.003]], vec![0.6, 0.4], 2))
            .unwrap();
        let v = map.get(&[0, 0, 0]).unwrap();
        assert_relative_eq!(v.posterior()[0], 9.0 / 13.0, epsilon = 1e-12);
        assert_eq!(v.observations(), 2);
        assert_eq!(v.mean_color(), [100, 50, 0]);

        assert!(map.integrate_cloud(&cloud(vec![[0.0; 3]], vec![1.0, 0.0, 0.0], 3)).is_err());
    }

    #[test]
    fn extract_thresholds() {
        let map = VoxelMap::new(0.01, 2).unwrap();
        assert!(map.extract(0, 0.0).is_empty());

        let mut map = VoxelMap::new(0.01, 2).unwrap();
        map.integrate_cloud(&cloud(
            vec![[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]],
            vec![0.9, 0.1, 0.52, 0.48],
            2,
        ))
        .unwrap();
        let pts = map.extract(1, 0.5);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].label, 0);
        assert_relative_eq!(pts[0].confidence, 0.9, epsilon = 1e-12);
        assert_relative_eq!(pts[0].center[0], 0.005, epsilon = 1e-15);
        let pts = map.extract(1, 0.6);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].index, [0, 0, 0]);
        assert!(map.extract(2, 0.0).is_empty());
    }

    #[test]
    fn repeated_evidence_converges() {
        let mut post = vec![0.5, 0.3, 0.2];
        let lik = [0.4, 0.35, 0.25];
        let mut last = 0.5;
        for _ in 0..200 {
            post = bayes_update(&post, &lik).unwrap();
            assert!(post[0] >= last);
            last = post[0];
        }
        assert!(last > 0.999);
    }

    fn arb_dist(labels: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01..1.0f64, labels).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fusion_is_order_invariant(
            obs in prop::collection::vec(arb_dist(4), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = obs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let fuse = |list: &[Vec<f64>]| {
                let mut map = VoxelMap::new(0.1, 4).unwrap();
                for d in list {
                    map.integrate_cloud(&cloud(vec![[0.05; 3]], d.clone(), 4)).unwrap();
                }
                map.get(&[0, 0, 0]).unwrap().posterior()
            };
            let a = fuse(&obs);
            let b = fuse(&shuffled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn merge_matches_sequential(
            obs in prop::collection::vec((arb_dist(3), 0usize..3), 2..16),
            split in 1usize..15,
        ) {
            let split = split.min(obs.len() - 1);
            let pt = |k: usize| [k as f64 * 0.1 + 0.01, 0.0, 0.0];
            let build = |list: &[(Vec<f64>, usize)]| {
                let mut map = VoxelMap::new(0.1, 3).unwrap();
                for (d, k) in list {
                    map.integrate_cloud(&cloud(vec![pt(*k)], d.clone(), 3)).unwrap();
                }
                map
            };
            let all = build(&obs);
            let mut merged = build(&obs[..split]);
            merged.merge(&build(&obs[split..])).unwrap();
            prop_assert_eq!(all.len(), merged.len());
            for (index, voxel) in all.voxels() {
                let other = merged.get(index).unwrap();
                prop_assert_eq!(voxel.observations(), other.observations());
                for (x, y) in voxel.posterior().iter().zip(other.posterior()) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }
}
