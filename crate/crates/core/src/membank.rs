//! Cluster-level memory bank.
//!
//! Stores one unit-norm feature per training ground truth, keyed by
//! `(scene_id, box_index)`. Each epoch the features are clustered with
//! DBSCAN, over either cosine distance or the Jaccard distance of
//! k-reciprocal neighbourhoods; clusters are then repaired so that no two
//! boxes of one scene share a cluster, and each surviving cluster contributes
//! a normalized-mean centroid.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{self, Embedding};
use crate::error::{Error, Result};
use crate::model::{Real, SiameseNet};
use crate::synth::DatasetManifest;

/// `(scene_id, box_index)`.
pub type InstanceKey = (u64, usize);

/// Distance DBSCAN runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterDistance {
    Cosine,
    /// Jaccard distance of k-reciprocal neighbourhoods (re-ranking).
    Jaccard { k1: usize, k2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub distance: ClusterDistance,
    pub eps: f64,
    pub min_samples: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub allow_singletons: bool,
    /// Replace clustering with the true identities.
    pub oracle_labels: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            distance: ClusterDistance::Jaccard { k1: 20, k2: 6 },
            eps: 0.4,
            min_samples: 4,
            momentum: 0.2,
            temperature: 0.05,
            allow_singletons: false,
            oracle_labels: false,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0) {
            return Err(Error::config("bank.eps", "must lie in (0, 2]"));
        }
        if let ClusterDistance::Jaccard { k1, k2 } = self.distance {
            if k1 == 0 || k2 == 0 {
                return Err(Error::config("bank.distance", "k1 and k2 must be positive"));
            }
        }
        if self.min_samples == 0 {
            return Err(Error::config("bank.min_samples", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("bank.momentum", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("bank.temperature", "must be positive"));
        }
        Ok(())
    }
}

pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    1.0 - a.cosine(b)
}

/// DBSCAN over cosine distance. A point is its own neighbour; points are
/// visited in index order, so a border point joins the first cluster that
/// reaches it. Returns a cluster id per point, `None` for noise.
pub fn dbscan(features: &[Embedding], eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    dbscan_by(features.len(), eps, min_samples, |i, j| {
        cosine_distance(&features[i], &features[j])
    })
}

/// DBSCAN over an arbitrary symmetric distance with the same visiting order
/// as [`dbscan`].
pub fn dbscan_by(
    n: usize,
    eps: f64,
    min_samples: usize,
    distance: impl Fn(usize, usize) -> f64 + Sync,
) -> Vec<Option<usize>> {
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| i == j || distance(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if label[start].is_some() || !core[start] {
            continue;
        }
        let c = next;
        next += 1;
        label[start] = Some(c);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if label[q].is_none() {
                    label[q] = Some(c);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    label
}

fn k_reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let k = (k + 1).min(rank.len());
    rank[i][..k]
        .iter()
        .copied()
        .filter(|&j| rank[j][..k].contains(&i))
        .collect()
}

/// Jaccard distance between k-reciprocal neighbourhoods, with neighbourhood
/// expansion and `k2`-nearest query expansion. Returns a dense `n x n`
/// matrix with values in `[0, 1]`.
pub fn kreciprocal_jaccard(features: &[Embedding], k1: usize, k2: usize) -> Vec<Vec<f64>> {
    let n = features.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| (2.0 - 2.0 * features[i].dot(&features[j])).max(0.0))
                .collect()
        })
        .collect();
    let rank: Vec<Vec<usize>> = dist
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r: Vec<usize> = (0..n).collect();
            r.sort_by(|&a, &b| {
                let key = |j: usize| (j != i, row[j]);
                let (ka, kb) = (key(a), key(b));
                ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
            });
            r
        })
        .collect();
    let half = (k1 as f64 / 2.0).round() as usize;
    let v: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = k_reciprocal(&rank, i, k1);
            let mut expanded = base.clone();
            for &c in &base {
                let cand = k_reciprocal(&rank, c, half);
                let shared = cand.iter().filter(|j| base.contains(j)).count();
                if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    expanded.extend(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let w: Vec<f64> = expanded.iter().map(|&j| (-dist[i][j]).exp()).collect();
            let total: f64 = w.iter().sum();
            expanded.into_iter().zip(w).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();
    let v: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            let k = k2.max(1).min(n);
            for &q in &rank[i][..k] {
                for &(j, w) in &v[q] {
                    row[j] += w / k as f64;
                }
            }
            row
        })
        .collect();
    let mut inverted: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in v.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                inverted[j].push(i);
            }
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut shared = vec![0.0; n];
            for (j, &w) in v[i].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for &r in &inverted[j] {
                    shared[r] += w.min(v[r][j]);
                }
            }
            shared.into_iter().map(|s| (1.0 - s / (2.0 - s)).clamp(0.0, 1.0)).collect()
        })
        .collect()
}

fn normalized_mean<'a>(members: impl Iterator<Item = &'a Embedding>) -> Embedding {
    let mut acc: Vec<f64> = Vec::new();
    for m in members {
        if acc.is_empty() {
            acc = vec![0.0; m.dim()];
        }
        for (a, v) in acc.iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    Embedding::normalized(acc)
}

/// `normalize((a + b) / 2)`.
pub fn average_feature(a: &Embedding, b: &Embedding) -> Embedding {
    Embedding::normalized(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x + y) / 2.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    keys: Vec<InstanceKey>,
    #[serde(skip)]
    index: HashMap<InstanceKey, usize>,
    features: Vec<Embedding>,
    /// Step at which each feature was last written.
    updated_at: Vec<u64>,
    cluster_of: Vec<Option<usize>>,
    centroids: Vec<Embedding>,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterStats {
    pub clusters: usize,
    pub outliers: usize,
    /// Members detached by the same-scene repair.
    pub detached: usize,
}

impl MemoryBank {
    pub fn new(momentum: f64) -> Self {
        MemoryBank {
            keys: Vec::new(),
            index: HashMap::new(),
            features: Vec::new(),
            updated_at: Vec::new(),
            cluster_of: Vec::new(),
            centroids: Vec::new(),
            momentum,
        }
    }

    /// Adds a new instance; the feature is normalized on entry.
    pub fn insert(&mut self, key: InstanceKey, feature: Embedding, step: u64) -> Result<()> {
        if self.index.contains_key(&key) {
            return Err(Error::Bookkeeping(format!("instance {key:?} inserted twice")));
        }
        self.index.insert(key, self.keys.len());
        self.keys.push(key);
        self.features.push(Embedding::normalized(feature.0));
        self.updated_at.push(step);
        self.cluster_of.push(None);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[InstanceKey] {
        &self.keys
    }

    pub fn features(&self) -> &[Embedding] {
        &self.features
    }

    pub fn centroids(&self) -> &[Embedding] {
        &self.centroids
    }

    pub fn cluster_assignments(&self) -> &[Option<usize>] {
        &self.cluster_of
    }

    fn slot(&self, key: InstanceKey) -> Result<usize> {
        self.index
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Bookkeeping(format!("unknown instance {key:?}")))
    }

    pub fn contains(&self, key: InstanceKey) -> bool {
        self.index.contains_key(&key)
    }

    pub fn feature(&self, key: InstanceKey) -> Result<&Embedding> {
        Ok(&self.features[self.slot(key)?])
    }

    pub fn updated_at(&self, key: InstanceKey) -> Result<u64> {
        Ok(self.updated_at[self.slot(key)?])
    }

    pub fn cluster_of(&self, key: InstanceKey) -> Result<Option<usize>> {
        Ok(self.cluster_of[self.slot(key)?])
    }

    /// `stored <- normalize(m * stored + (1 - m) * new)`.
    pub fn update(&mut self, key: InstanceKey, new_feature: &Embedding, step: u64) -> Result<()> {
        let i = self.slot(key)?;
        let m = self.momentum;
        self.updated_at[i] = step;
        if m == 1.0 {
            return Ok(());
        }
        let mixed: Vec<f64> = self.features[i]
            .as_slice()
            .iter()
            .zip(new_feature.as_slice())
            .map(|(o, n)| m * o + (1.0 - m) * n)
            .collect();
        self.features[i] = Embedding::normalized(mixed);
        Ok(())
    }

    /// Overwrites a feature outright (epoch-level re-extraction).
    pub fn replace(&mut self, key: InstanceKey, feature: Embedding, step: u64) -> Result<()> {
        let i = self.slot(key)?;
        self.features[i] = Embedding::normalized(feature.0);
        self.updated_at[i] = step;
        Ok(())
    }

    /// Clusters the current features, repairs same-scene conflicts and
    /// rebuilds the centroid table.
    pub fn recluster(&mut self, eps: f64, min_samples: usize, allow_singletons: bool) -> ClusterStats {
        let raw = dbscan(&self.features, eps, min_samples);
        self.finish_clusters(raw, allow_singletons)
    }

    /// Clusters with the distance, radius and density of `config`.
    pub fn recluster_with(&mut self, config: &BankConfig) -> ClusterStats {
        let raw = match config.distance {
            ClusterDistance::Cosine => dbscan(&self.features, config.eps, config.min_samples),
            ClusterDistance::Jaccard { k1, k2 } => {
                let d = kreciprocal_jaccard(&self.features, k1, k2);
                dbscan_by(self.len(), config.eps, config.min_samples, |i, j| d[i][j])
            }
        };
        self.finish_clusters(raw, config.allow_singletons)
    }

    /// Uses supplied labels (true identities) instead of clustering. The
    /// same-scene repair still applies.
    pub fn recluster_with_labels(&mut self, labels: &HashMap<InstanceKey, usize>) -> Result<ClusterStats> {
        let mut compact: BTreeMap<usize, usize> = BTreeMap::new();
        let mut raw = Vec::with_capacity(self.len());
        for k in &self.keys {
            let id = *labels
                .get(k)
                .ok_or_else(|| Error::Bookkeeping(format!("no label for instance {k:?}")))?;
            let next = compact.len();
            raw.push(Some(*compact.entry(id).or_insert(next)));
        }
        Ok(self.finish_clusters(raw, true))
    }

    fn finish_clusters(&mut self, mut labels: Vec<Option<usize>>, allow_singletons: bool) -> ClusterStats {
        let mut stats = ClusterStats::default();
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                members.entry(*c).or_default().push(i);
            }
        }
        for ms in members.values() {
            let centroid = normalized_mean(ms.iter().map(|&i| &self.features[i]));
            let mut by_scene: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for &i in ms {
                by_scene.entry(self.keys[i].0).or_default().push(i);
            }
            for group in by_scene.values().filter(|g| g.len() > 1) {
                let keep = *group
                    .iter()
                    .min_by(|&&a, &&b| {
                        let (da, db) = (
                            cosine_distance(&self.features[a], &centroid),
                            cosine_distance(&self.features[b], &centroid),
                        );
                        da.total_cmp(&db).then(self.keys[a].cmp(&self.keys[b]))
                    })
                    .expect("non-empty group");
                for &i in group.iter().filter(|&&i| i != keep) {
                    labels[i] = None;
                    stats.detached += 1;
                }
            }
        }
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for c in labels.iter().flatten() {
            *sizes.entry(*c).or_default() += 1;
        }
        let min_size = if allow_singletons { 1 } else { 2 };
        let mut renumber: HashMap<usize, usize> = HashMap::new();
        for l in labels.iter_mut() {
            *l = match *l {
                Some(c) if sizes[&c] >= min_size => {
                    let next = renumber.len();
                    Some(*renumber.entry(c).or_insert(next))
                }
                _ => None,
            };
        }
        let k = renumber.len();
        self.centroids = (0..k)
            .map(|c| {
                normalized_mean(
                    labels
                        .iter()
                        .zip(&self.features)
                        .filter(|(l, _)| **l == Some(c))
                        .map(|(_, f)| f),
                )
            })
            .collect();
        self.cluster_of = labels;
        stats.clusters = k;
        stats.outliers = self.cluster_of.iter().filter(|l| l.is_none()).count();
        stats
    }

    /// True when no cluster holds two instances of one scene.
    pub fn satisfies_cannot_link(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.keys
            .iter()
            .zip(&self.cluster_of)
            .filter_map(|(k, c)| c.map(|c| (k.0, c)))
            .all(|pair| seen.insert(pair))
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    }

    /// Writes the bank as JSON and the assignments as
    /// `scene_id,box_index,cluster_id` CSV (`-1` for outliers).
    pub fn dump(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(json_path, serde_json::to_string(self)?)?;
        let mut csv = String::from("scene_id,box_index,cluster_id\n");
        for (k, c) in self.keys.iter().zip(&self.cluster_of) {
            let c = c.map_or(-1, |c| c as i64);
            csv.push_str(&format!("{},{},{}\n", k.0, k.1, c));
        }
        fs::write(csv_path, csv)?;
        Ok(())
    }

    /// Restores a bank from its parts (checkpoint loading).
    pub fn from_parts(
        keys: Vec<InstanceKey>,
        features: Vec<Embedding>,
        updated_at: Vec<u64>,
        cluster_of: Vec<Option<usize>>,
        centroids: Vec<Embedding>,
        momentum: f64,
    ) -> Result<Self> {
        let n = keys.len();
        if features.len() != n || updated_at.len() != n || cluster_of.len() != n {
            return Err(Error::Bookkeeping("bank parts differ in length".into()));
        }
        if cluster_of.iter().flatten().any(|&c| c >= centroids.len()) {
            return Err(Error::Bookkeeping("cluster id without a centroid".into()));
        }
        let mut bank = MemoryBank {
            keys,
            index: HashMap::new(),
            features,
            updated_at,
            cluster_of,
            centroids,
            momentum,
        };
        bank.rebuild_index();
        if bank.index.len() != n {
            return Err(Error::Bookkeeping("duplicate instance keys".into()));
        }
        Ok(bank)
    }

    pub fn updated_steps(&self) -> &[u64] {
        &self.updated_at
    }
}

/// Averaged two-branch features of every box in one scene: the search-branch
/// embedding pooled at the box and the instance-branch embedding of its crop.
pub fn two_branch_features<R: Real>(
    model: &SiameseNet<R>,
    image: &crate::image::Image,
    boxes: &[crate::geometry::BBox],
) -> Result<Vec<Embedding>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let feats = model.extract_features(image)?;
    let search = model.embed_regions(&feats, boxes);
    let inst = model.instance_embeddings(image, boxes);
    Ok(search.iter().zip(&inst).map(|(s, g)| average_feature(s, g)).collect())
}

/// Per-scene averaged features for the whole split, in manifest order.
pub fn extract_bank_features<R: Real>(
    model: &SiameseNet<R>,
    manifest: &DatasetManifest,
) -> Result<Vec<(InstanceKey, Embedding)>> {
    let per_scene: Vec<Vec<(InstanceKey, Embedding)>> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let f = two_branch_features(model, &s.image, &s.boxes)?;
            Ok(f.into_iter().enumerate().map(|(b, e)| ((s.scene_id, b), e)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// One averaged feature per ground truth of the split; no clusters yet.
/// Scenes without boxes contribute nothing.
pub fn initialize_bank<R: Real>(
    model: &SiameseNet<R>,
    manifest: &DatasetManifest,
    momentum: f64,
) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(momentum);
    for (k, f) in extract_bank_features(model, manifest)? {
        bank.insert(k, f, 0)?;
    }
    Ok(bank)
}

/// Fraction of clustered instances that carry their cluster's majority
/// identity.
pub fn cluster_purity(bank: &MemoryBank, identity: &HashMap<InstanceKey, usize>) -> f64 {
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, c) in bank.keys.iter().zip(&bank.cluster_of) {
        if let (Some(c), Some(id)) = (c, identity.get(k)) {
            by_cluster.entry(*c).or_default().push(*id);
        }
    }
    let total: usize = by_cluster.values().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let majority: usize = by_cluster
        .values()
        .map(|ids| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for id in ids {
                *counts.entry(*id).or_default() += 1;
            }
            counts.values().copied().max().unwrap_or(0)
        })
        .sum();
    majority as f64 / total as f64
}

pub fn feature_norm_error(bank: &MemoryBank) -> f64 {
    bank.features
        .iter()
        .chain(&bank.centroids)
        .map(|f| (embedding::norm(f.as_slice()) - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Embedding {
        Embedding::normalized(x.to_vec())
    }

    #[test]
    fn momentum_update_reference_values() {
        let mut b = MemoryBank::new(0.2);
        b.insert((0, 0), v(&[1.0, 0.0]), 0).unwrap();
        b.update((0, 0), &v(&[0.0, 1.0]), 3).unwrap();
        let f = b.feature((0, 0)).unwrap();
        assert!((f.0[0] - 0.242535625).abs() < 1e-8);
        assert!((f.0[1] - 0.970142500).abs() < 1e-8);
        assert_eq!(b.updated_at((0, 0)).unwrap(), 3);

        b.momentum = 1.0;
        let before = b.feature((0, 0)).unwrap().clone();
        b.update((0, 0), &v(&[1.0, 0.0]), 4).unwrap();
        assert_eq!(b.feature((0, 0)).unwrap(), &before);
        b.momentum = 0.0;
        b.update((0, 0), &v(&[0.6, 0.8]), 5).unwrap();
        assert!(b.feature((0, 0)).unwrap().distance(&v(&[0.6, 0.8])) < 1e-12);

        assert!(matches!(b.update((9, 9), &v(&[1.0]), 0), Err(Error::Bookkeeping(_))));
    }

    #[test]
    fn two_tight_groups_make_two_clusters() {
        let mut b = MemoryBank::new(0.2);
        let pts = [
            [1.0, 0.01, 0.0],
            [1.0, 0.0, 0.02],
            [1.0, -0.01, 0.01],
            [0.0, 1.0, 0.01],
            [0.02, 1.0, 0.0],
            [0.0, 1.0, -0.02],
        ];
        for (i, p) in pts.iter().enumerate() {
            b.insert((i as u64, 0), v(p), 0).unwrap();
        }
        let s = b.recluster(0.5, 2, false);
        assert_eq!(s.clusters, 2);
        assert_eq!(s.outliers, 0);
        assert!(feature_norm_error(&b) < 1e-9);
    }

    #[test]
    fn same_scene_pair_is_split_and_single_point_is_noise() {
        let mut b = MemoryBank::new(0.2);
        b.insert((7, 0), v(&[1.0, 0.0]), 0).unwrap();
        b.insert((7, 1), v(&[1.0, 0.01]), 0).unwrap();
        b.recluster(0.5, 2, false);
        assert!(b.satisfies_cannot_link());
        assert!(b.cluster_assignments().iter().all(Option::is_none));
        assert!(b.centroids().is_empty());

        let mut one = MemoryBank::new(0.2);
        one.insert((0, 0), v(&[1.0]), 0).unwrap();
        one.recluster(0.5, 2, false);
        assert_eq!(one.cluster_of((0, 0)).unwrap(), None);
    }

    #[test]
    fn average_of_orthogonal_branches_is_at_45_degrees() {
        let a = average_feature(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a.0[0] - h).abs() < 1e-12 && (a.0[1] - h).abs() < 1e-12);
        let same = average_feature(&v(&[0.6, 0.8]), &v(&[0.6, 0.8]));
        assert!(same.distance(&v(&[0.6, 0.8])) < 1e-12);
    }

    #[test]
    fn oracle_labels_follow_identities() {
        let mut b = MemoryBank::new(0.2);
        for s in 0..4u64 {
            b.insert((s, 0), v(&[1.0, s as f64]), 0).unwrap();
        }
        let labels: HashMap<InstanceKey, usize> = [((0, 0), 5), ((1, 0), 5), ((2, 0), 9), ((3, 0), 9)].into();
        let s = b.recluster_with_labels(&labels).unwrap();
        assert_eq!(s.clusters, 2);
        assert_eq!(b.cluster_of((0, 0)).unwrap(), b.cluster_of((1, 0)).unwrap());
        assert_ne!(b.cluster_of((0, 0)).unwrap(), b.cluster_of((2, 0)).unwrap());
    }

    #[test]
    fn dump_writes_csv_with_outliers() {
        let mut b = MemoryBank::new(0.2);
        b.insert((3, 1), v(&[1.0]), 0).unwrap();
        b.recluster(0.5, 2, false);
        let dir = tempfile::tempdir().unwrap();
        let (j, c) = (dir.path().join("bank.json"), dir.path().join("bank.csv"));
        b.dump(&j, &c).unwrap();
        assert_eq!(fs::read_to_string(c).unwrap(), "scene_id,box_index,cluster_id\n3,1,-1\n");
        assert!(fs::read_to_string(j).unwrap().contains("\"momentum\""));
    }
}
