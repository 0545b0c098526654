//! Contrastive, memory and detection losses with analytic gradients.
//!
//! Every contrastive loss takes a [`ContrastBatch`] and returns its value
//! together with gradients with respect to each search and instance
//! embedding. Embeddings are treated as free vectors: cosine similarity and
//! normalization are differentiated in full, so the gradients stay correct
//! off the unit sphere.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::{self, Embedding};
use crate::error::{Error, Result};

/// One search-branch embedding with its assignment metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchEntry {
    pub embedding: Embedding,
    /// Ground truth this prediction was assigned to.
    pub gt_index: Option<usize>,
    /// Instance-branch embedding this prediction is contrasted with, if any.
    pub siamese: Option<usize>,
    /// The prediction's person was grid-masked in the search input.
    pub masked: bool,
}

/// Input to the memory-bank loss for one ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OimEntry {
    /// Search embedding averaged with the instance embedding, if present.
    pub search: Option<usize>,
    pub instance: usize,
    /// Pseudo-label (cluster id); `None` marks an outlier.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastBatch {
    pub search: Vec<SearchEntry>,
    /// Instance-branch embeddings. The first `num_gt` are the ground-truth
    /// crops in ground-truth order.
    pub instances: Vec<Embedding>,
    pub num_gt: usize,
    pub oim: Vec<OimEntry>,
}

impl ContrastBatch {
    pub fn dim(&self) -> usize {
        self.search
            .first()
            .map(|s| s.embedding.dim())
            .or_else(|| self.instances.first().map(Embedding::dim))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.num_gt > self.instances.len() {
            return Err(Error::Input("fewer instance embeddings than ground truths".into()));
        }
        let dims_ok = self.search.iter().all(|s| s.embedding.dim() == d)
            && self.instances.iter().all(|e| e.dim() == d);
        if !dims_ok {
            return Err(Error::Input("embedding dimensions differ".into()));
        }
        for (i, s) in self.search.iter().enumerate() {
            if s.gt_index.is_some_and(|g| g >= self.num_gt) {
                return Err(Error::Input(format!("search entry {i} names an unknown ground truth")));
            }
            if s.siamese.is_some_and(|k| k >= self.instances.len()) {
                return Err(Error::Input(format!("search entry {i} names an unknown instance")));
            }
            if s.siamese.is_some() && s.gt_index.is_none() {
                return Err(Error::Input(format!("search entry {i} is paired but unassigned")));
            }
        }
        for o in &self.oim {
            if o.instance >= self.instances.len() || o.search.is_some_and(|k| k >= self.search.len()) {
                return Err(Error::Input("memory entry out of range".into()));
            }
        }
        Ok(())
    }

    /// `n`: predictions assigned to some ground truth.
    pub fn num_assigned(&self) -> usize {
        self.search.iter().filter(|s| s.gt_index.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFlag {
    NoPositives,
    SingleIdentity,
    ColdStart,
}

/// A loss value plus gradients with respect to each embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub d_search: Array2<f64>,
    pub d_instances: Array2<f64>,
    pub flag: Option<LossFlag>,
}

impl LossTerm {
    fn zero(batch: &ContrastBatch, flag: Option<LossFlag>) -> Self {
        let d = batch.dim();
        LossTerm {
            value: 0.0,
            d_search: Array2::zeros((batch.search.len(), d)),
            d_instances: Array2::zeros((batch.instances.len(), d)),
            flag,
        }
    }

    fn scale(&mut self, s: f64) {
        self.value *= s;
        self.d_search *= s;
        self.d_instances *= s;
    }
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (embedding::norm(a), embedding::norm(b));
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = embedding::dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - c * x / (na * na))
        .collect()
}

fn add_row(m: &mut Array2<f64>, row: usize, v: &[f64], scale: f64) {
    for (t, &x) in m.row_mut(row).iter_mut().zip(v) {
        *t += scale * x;
    }
}

fn siamese_consistency(batch: &ContrastBatch, masked: bool) -> LossTerm {
    let pairs: Vec<(usize, usize)> = batch
        .search
        .iter()
        .enumerate()
        .filter(|(_, s)| s.masked == masked)
        .filter_map(|(i, s)| s.siamese.map(|k| (i, k)))
        .collect();
    if pairs.is_empty() {
        return LossTerm::zero(batch, Some(LossFlag::NoPositives));
    }
    let mut t = LossTerm::zero(batch, None);
    let w = 1.0 / pairs.len() as f64;
    for (i, k) in pairs {
        let f = batch.search[i].embedding.as_slice();
        let g = batch.instances[k].as_slice();
        t.value += w * (1.0 - embedding::cosine(f, g));
        add_row(&mut t.d_search, i, &cosine_grad(f, g), -w);
        add_row(&mut t.d_instances, k, &cosine_grad(g, f), -w);
    }
    t
}

/// Mean `1 - cos` between unmasked paired predictions and their instance
/// embeddings.
pub fn many_to_one_loss(batch: &ContrastBatch) -> LossTerm {
    siamese_consistency(batch, false)
}

/// The same consistency over masked predictions only.
pub fn occlusion_loss(batch: &ContrastBatch) -> LossTerm {
    siamese_consistency(batch, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Search(usize),
    Instance(usize),
}

/// Batch-hard triplet loss over all assigned predictions. Positives of an
/// anchor are the other predictions of its ground truth plus that ground
/// truth's instance embedding; negatives are predictions and instance
/// embeddings of every other ground truth in the image.
pub fn triplet_loss(batch: &ContrastBatch, margin: f64, clamp: bool) -> LossTerm {
    let anchors: Vec<(usize, usize)> = batch
        .search
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.gt_index.map(|g| (i, g)))
        .collect();
    let mut ids: Vec<usize> = anchors.iter().map(|&(_, g)| g).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return LossTerm::zero(batch, Some(LossFlag::SingleIdentity));
    }
    let vec_of = |it: Item| match it {
        Item::Search(i) => batch.search[i].embedding.as_slice(),
        Item::Instance(k) => batch.instances[k].as_slice(),
    };
    let mut items: Vec<(Item, usize)> = anchors.iter().map(|&(i, g)| (Item::Search(i), g)).collect();
    items.extend((0..batch.num_gt).map(|g| (Item::Instance(g), g)));

    let mut t = LossTerm::zero(batch, None);
    let w = 1.0 / anchors.len() as f64;
    for &(i, g) in &anchors {
        let a = batch.search[i].embedding.as_slice();
        let mut hardest_pos: Option<(Item, f64)> = None;
        let mut hardest_neg: Option<(Item, f64)> = None;
        for &(it, label) in &items {
            if it == Item::Search(i) {
                continue;
            }
            let d = embedding::distance(a, vec_of(it));
            if label == g {
                if hardest_pos.map_or(true, |(_, v)| d > v) {
                    hardest_pos = Some((it, d));
                }
            } else if hardest_neg.map_or(true, |(_, v)| d < v) {
                hardest_neg = Some((it, d));
            }
        }
        let (Some((p, dp)), Some((n, dn))) = (hardest_pos, hardest_neg) else {
            continue;
        };
        let raw = margin + dp - dn;
        if clamp && raw <= 0.0 {
            continue;
        }
        t.value += w * raw;
        for (other, dist, sign) in [(p, dp, 1.0), (n, dn, -1.0)] {
            if dist == 0.0 {
                continue;
            }
            let o = vec_of(other);
            let u: Vec<f64> = a.iter().zip(o).map(|(x, y)| (x - y) / dist).collect();
            add_row(&mut t.d_search, i, &u, sign * w);
            match other {
                Item::Search(k) => add_row(&mut t.d_search, k, &u, -sign * w),
                Item::Instance(k) => add_row(&mut t.d_instances, k, &u, -sign * w),
            }
        }
    }
    t
}

/// Cluster-centroid softmax: each ground truth's feature (its search
/// embedding plus instance embedding, normalized) is pushed towards its
/// cluster centroid against all others, at temperature `tau`.
pub fn oim_loss(batch: &ContrastBatch, centroids: &[Embedding], tau: f64) -> LossTerm {
    if centroids.is_empty() {
        return LossTerm::zero(batch, Some(LossFlag::ColdStart));
    }
    let live: Vec<&OimEntry> = batch
        .oim
        .iter()
        .filter(|o| o.label.is_some_and(|l| l < centroids.len()))
        .collect();
    if live.is_empty() {
        return LossTerm::zero(batch, Some(LossFlag::NoPositives));
    }
    let mut t = LossTerm::zero(batch, None);
    let w = 1.0 / live.len() as f64;
    for o in live {
        let label = o.label.expect("filtered");
        let mut u: Vec<f64> = batch.instances[o.instance].0.clone();
        if let Some(s) = o.search {
            for (x, y) in u.iter_mut().zip(batch.search[s].embedding.as_slice()) {
                *x += y;
            }
        }
        let nu = embedding::norm(&u);
        if nu == 0.0 {
            continue;
        }
        let f: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let logits: Vec<f64> = centroids.iter().map(|c| embedding::dot(&f, c.as_slice()) / tau).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        t.value += w * (mx + z.ln() - logits[label]);

        let mut df = vec![0.0; f.len()];
        for (k, c) in centroids.iter().enumerate() {
            let p = (logits[k] - mx).exp() / z - if k == label { 1.0 } else { 0.0 };
            for (d, &cv) in df.iter_mut().zip(c.as_slice()) {
                *d += p * cv / tau;
            }
        }
        let proj = embedding::dot(&f, &df);
        let du: Vec<f64> = df.iter().zip(&f).map(|(d, fv)| (d - fv * proj) / nu).collect();
        add_row(&mut t.d_instances, o.instance, &du, w);
        if let Some(s) = o.search {
            add_row(&mut t.d_search, s, &du, w);
        }
    }
    t
}

/// Inputs to the detection loss for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetInputs {
    /// `(n, 2)` background/person logits.
    pub cls_logits: Array2<f64>,
    /// `(n, 4)` predicted box deltas.
    pub reg: Array2<f64>,
    pub labels: Vec<bool>,
    /// Regression targets for positive proposals.
    pub reg_targets: Vec<Option<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetTerm {
    pub value: f64,
    pub cls: f64,
    pub reg: f64,
    pub d_cls: Array2<f64>,
    pub d_reg: Array2<f64>,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Softmax cross-entropy over all proposals plus smooth-L1 regression on
/// positives, both averaged over the proposal count.
pub fn detection_loss(inp: &DetInputs) -> DetTerm {
    let n = inp.labels.len();
    let mut d_cls = Array2::zeros((n, 2));
    let mut d_reg = Array2::zeros((n, 4));
    if n == 0 {
        return DetTerm {
            value: 0.0,
            cls: 0.0,
            reg: 0.0,
            d_cls,
            d_reg,
        };
    }
    let w = 1.0 / n as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for r in 0..n {
        let (l0, l1) = (inp.cls_logits[[r, 0]], inp.cls_logits[[r, 1]]);
        let mx = l0.max(l1);
        let lse = mx + ((l0 - mx).exp() + (l1 - mx).exp()).ln();
        let y = usize::from(inp.labels[r]);
        cls += w * (lse - inp.cls_logits[[r, y]]);
        for k in 0..2 {
            let p = (inp.cls_logits[[r, k]] - lse).exp();
            d_cls[[r, k]] = w * (p - if k == y { 1.0 } else { 0.0 });
        }
        if let (true, Some(t)) = (inp.labels[r], inp.reg_targets[r]) {
            for k in 0..4 {
                let (v, g) = smooth_l1(inp.reg[[r, k]] - t[k]);
                reg += w * v;
                d_reg[[r, k]] = w * g;
            }
        }
    }
    DetTerm {
        value: cls + reg,
        cls,
        reg,
        d_cls,
        d_reg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mto: f64,
    pub o: f64,
    pub tri: f64,
    pub oim: f64,
    pub det: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mto: 1.0,
            o: 1.0,
            tri: 1.0,
            oim: 1.0,
            det: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub clamp_triplet: bool,
    pub temperature: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            clamp_triplet: true,
            temperature: 0.05,
            weights: LossWeights::default(),
        }
    }
}

/// Weighted loss components of one image or step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mto: f64,
    pub l_o: f64,
    pub l_tri: f64,
    pub l_oim: f64,
    pub l_det: f64,
    pub l_c: f64,
    pub l_all: f64,
}

impl LossReport {
    pub fn from_components(l_mto: f64, l_o: f64, l_tri: f64, l_oim: f64, l_det: f64) -> Self {
        let l_c = l_mto + l_o + l_tri + l_oim;
        LossReport {
            l_mto,
            l_o,
            l_tri,
            l_oim,
            l_det,
            l_c,
            l_all: l_c + l_det,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_mto, self.l_o, self.l_tri, self.l_oim, self.l_det]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport::from_components(s(|r| r.l_mto), s(|r| r.l_o), s(|r| r.l_tri), s(|r| r.l_oim), s(|r| r.l_det))
    }
}

/// Which contrastive terms participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub siamese: bool,
    pub occlusion: bool,
    pub triplet: bool,
    pub oim: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            siamese: true,
            occlusion: true,
            triplet: true,
            oim: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub report: LossReport,
    pub d_search: Array2<f64>,
    pub d_instances: Array2<f64>,
    pub det: DetTerm,
    pub flags: Vec<LossFlag>,
    /// `(n^p, n^o, n)`.
    pub counts: (usize, usize, usize),
}

pub fn combined_loss(
    batch: &ContrastBatch,
    centroids: &[Embedding],
    det: &DetInputs,
    config: &LossConfig,
    switches: LossSwitches,
) -> Result<CombinedLoss> {
    batch.validate()?;
    let wts = &config.weights;
    let mut terms: Vec<(LossTerm, f64)> = Vec::new();
    let mut values = [0.0; 4];
    let parts: [(bool, f64, &dyn Fn() -> LossTerm); 4] = [
        (switches.siamese, wts.mto, &|| many_to_one_loss(batch)),
        (switches.occlusion, wts.o, &|| occlusion_loss(batch)),
        (switches.triplet, wts.tri, &|| triplet_loss(batch, config.margin, config.clamp_triplet)),
        (switches.oim, wts.oim, &|| oim_loss(batch, centroids, config.temperature)),
    ];
    let mut flags = Vec::new();
    for (slot, (on, weight, f)) in parts.into_iter().enumerate() {
        if !on {
            continue;
        }
        let mut t = f();
        t.scale(weight);
        values[slot] = t.value;
        if let Some(fl) = t.flag {
            flags.push(fl);
        }
        terms.push((t, weight));
    }
    let mut det_term = detection_loss(det);
    det_term.value *= wts.det;
    det_term.cls *= wts.det;
    det_term.reg *= wts.det;
    det_term.d_cls *= wts.det;
    det_term.d_reg *= wts.det;

    let d = batch.dim();
    let mut d_search = Array2::zeros((batch.search.len(), d));
    let mut d_instances = Array2::zeros((batch.instances.len(), d));
    for (t, _) in &terms {
        d_search += &t.d_search;
        d_instances += &t.d_instances;
    }
    let report = LossReport::from_components(values[0], values[1], values[2], values[3], det_term.value);
    if !report.is_finite() {
        return Err(Error::Input(format!("non-finite loss components {report:?}")));
    }
    let n_p = batch.search.iter().filter(|s| s.siamese.is_some() && !s.masked).count();
    let n_o = batch.search.iter().filter(|s| s.siamese.is_some() && s.masked).count();
    Ok(CombinedLoss {
        report,
        d_search,
        d_instances,
        det: det_term,
        flags,
        counts: (n_p, n_o, batch.num_assigned()),
    })
}

/// Gradient rows as a plain vector, for callers outside `ndarray`.
pub fn row(m: &Array2<f64>, r: usize) -> Array1<f64> {
    m.row(r).to_owned()
}
