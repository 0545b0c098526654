//! Person-search evaluation: query embedding, gallery construction,
//! IoU-gated matching, average precision and top-1.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::model::{DetectionOutput, ForwardMode, SiameseNet};
use crate::proposals::{eval_proposals, ProposalConfig};
use crate::rng::{rng_for, stream};
use crate::synth::{make_masked_testset, DatasetManifest, QueryRef, Split};
use crate::trainer::{at_resolution, CheckpointInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scenes per gallery; `None` searches every other test scene.
    pub gallery_size: Option<usize>,
    /// A retrieved box is a hit when its IoU with a ground truth of the query
    /// identity reaches this value.
    pub iou_threshold: f64,
    pub seed: u64,
    pub proposals: ProposalConfig,
    /// Resolution `[w, h]` the model runs at; scenes are rescaled when set.
    pub image_size: Option<[usize; 2]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gallery_size: None,
            iou_threshold: 0.5,
            seed: 0,
            proposals: ProposalConfig::default(),
            image_size: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("iou_threshold", "must lie in (0, 1]"));
        }
        if self.gallery_size == Some(0) {
            return Err(Error::config("gallery_size", "must be positive"));
        }
        self.proposals.validate()
    }
}

/// Detections and annotations of one test scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub scene_id: u64,
    pub gt_boxes: Vec<BBox>,
    pub gt_identity: Vec<usize>,
    pub detections: DetectionOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub embedding: Embedding,
    /// IoU of the chosen detection with the query box (0 on fallback).
    pub iou: f64,
    /// The ground-truth box was pooled because no detection overlapped it.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub query: QueryRef,
    pub identity: usize,
    pub embedding: QueryEmbedding,
}

/// Everything retrieval needs; computed once per model and test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEval {
    pub scenes: Vec<SceneDetections>,
    pub queries: Vec<PreparedQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub scene_id: u64,
    pub box_index: usize,
    pub identity: usize,
    pub ap: f64,
    pub top1: bool,
    pub fallback: bool,
    pub num_gt: usize,
    pub num_candidates: usize,
    pub gallery: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub top1: f64,
    pub gallery_size: usize,
    pub num_fallback: usize,
    pub queries: Vec<QueryResult>,
    pub config: EvalConfig,
}

/// Embedding of the detection overlapping `query_box` most; the box itself
/// is pooled when nothing overlaps it.
pub fn extract_query_embedding(
    model: &SiameseNet<f32>,
    image: &Image,
    detections: &DetectionOutput,
    query_box: &BBox,
) -> Result<QueryEmbedding> {
    if let Some((k, iou)) = best_overlap(detections, query_box) {
        return Ok(QueryEmbedding {
            embedding: detections.embeddings[k].clone(),
            iou,
            fallback: false,
        });
    }
    let features = model.extract_features(image)?;
    Ok(QueryEmbedding {
        embedding: model.embed_regions(&features, &[*query_box]).remove(0),
        iou: 0.0,
        fallback: true,
    })
}

fn best_overlap(detections: &DetectionOutput, query_box: &BBox) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, b) in detections.boxes.iter().enumerate() {
        let iou = b.iou(query_box);
        if iou > best.map_or(0.0, |(_, v)| v) {
            best = Some((k, iou));
        }
    }
    best
}

/// Runs detection on every test scene and embeds every query.
pub fn prepare(model: &SiameseNet<f32>, manifest: &DatasetManifest, config: &EvalConfig) -> Result<PreparedEval> {
    config.validate()?;
    if manifest.split != Split::Test {
        return Err(Error::Usage("evaluation needs the test split".into()));
    }
    if manifest.query_list.is_empty() {
        return Err(Error::Input("test manifest has no queries".into()));
    }
    let data = match config.image_size {
        Some(size) => at_resolution(manifest, size),
        None => std::borrow::Cow::Borrowed(manifest),
    };
    let scenes: Vec<SceneDetections> = data
        .samples
        .par_iter()
        .map(|s| {
            let mut rng = rng_for(config.seed, &[stream::PROPOSALS, s.scene_id]);
            let (w, h) = (s.image.width() as f64, s.image.height() as f64);
            let props = eval_proposals(&s.boxes, w, h, &config.proposals, &mut rng);
            let detections = model.search_forward(&s.image, &props.boxes, ForwardMode::Eval)?;
            Ok(SceneDetections {
                scene_id: s.scene_id,
                gt_boxes: s.boxes.clone(),
                gt_identity: s.true_identity.clone(),
                detections,
            })
        })
        .collect::<Result<_>>()?;
    let position: HashMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id, i)).collect();
    let queries = data
        .query_list
        .par_iter()
        .map(|q| {
            let &i = position
                .get(&q.scene_id)
                .ok_or_else(|| Error::Input(format!("query scene {} is not in the manifest", q.scene_id)))?;
            let scene = &scenes[i];
            let gt = scene
                .gt_boxes
                .get(q.box_index)
                .ok_or_else(|| Error::Input(format!("query box {} of scene {} does not exist", q.box_index, q.scene_id)))?;
            Ok(PreparedQuery {
                query: *q,
                identity: scene.gt_identity[q.box_index],
                embedding: extract_query_embedding(model, &data.samples[i].image, &scene.detections, gt)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PreparedEval { scenes, queries })
}

/// Gallery of query `q`: a seeded permutation of the other scenes, cut to
/// `size`. When the prefix misses the query identity its last scene is
/// swapped for the first matching scene of the permutation, which keeps
/// smaller galleries nested in larger ones.
pub fn build_gallery(prepared: &PreparedEval, q: usize, size: usize, seed: u64) -> Vec<usize> {
    let query = &prepared.queries[q];
    let mut order: Vec<usize> = (0..prepared.scenes.len())
        .filter(|&i| prepared.scenes[i].scene_id != query.query.scene_id)
        .collect();
    order.shuffle(&mut rng_for(seed, &[stream::GALLERY, q as u64]));
    let size = size.min(order.len());
    let has_match = |i: usize| prepared.scenes[i].gt_identity.contains(&query.identity);
    let mut gallery = order[..size].to_vec();
    if size > 0 && !gallery.iter().any(|&i| has_match(i)) {
        if let Some(&first) = order[size..].iter().find(|&&i| has_match(i)) {
            gallery[size - 1] = first;
        }
    }
    gallery
}

/// IoU-gated truth labels of every gallery detection plus the number of
/// ground-truth instances of `identity`. Each such instance marks at most one
/// detection: the most similar one overlapping it enough.
pub fn label_candidates(
    scenes: &[&SceneDetections],
    identity: usize,
    similarity: &[Vec<f64>],
    iou_threshold: f64,
) -> (Vec<Vec<bool>>, usize) {
    let mut num_gt = 0;
    let labels = scenes
        .iter()
        .zip(similarity)
        .map(|(s, sims)| {
            let mut labels = vec![false; s.detections.len()];
            for (g, gt) in s.gt_boxes.iter().enumerate() {
                if s.gt_identity[g] != identity {
                    continue;
                }
                num_gt += 1;
                let mut best: Option<usize> = None;
                for (k, b) in s.detections.boxes.iter().enumerate() {
                    if labels[k] || b.iou(gt) < iou_threshold {
                        continue;
                    }
                    if best.map_or(true, |j| sims[k] > sims[j]) {
                        best = Some(k);
                    }
                }
                if let Some(k) = best {
                    labels[k] = true;
                }
            }
            labels
        })
        .collect();
    (labels, num_gt)
}

/// Area under the precision-recall curve with all-points interpolation.
/// `ranked` holds truth labels in rank order; misses beyond the list count
/// towards `num_gt` and contribute nothing.
pub fn average_precision(ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::new();
    let mut hits = 0;
    for (r, &t) in ranked.iter().enumerate() {
        if t {
            hits += 1;
            precisions.push(hits as f64 / (r + 1) as f64);
        }
    }
    let mut envelope = 0.0f64;
    let mut sum = 0.0;
    for p in precisions.iter().rev() {
        envelope = envelope.max(*p);
        sum += envelope;
    }
    sum / num_gt as f64
}

fn query_result(prepared: &PreparedEval, q: usize, gallery: Vec<usize>, config: &EvalConfig) -> QueryResult {
    let query = &prepared.queries[q];
    let scenes: Vec<&SceneDetections> = gallery.iter().map(|&i| &prepared.scenes[i]).collect();
    let sims: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| {
            s.detections
                .embeddings
                .iter()
                .map(|e| e.cosine(&query.embedding.embedding))
                .collect()
        })
        .collect();
    let (labels, num_gt) = label_candidates(&scenes, query.identity, &sims, config.iou_threshold);
    let mut ranked: Vec<(f64, u64, usize, bool)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.detections.len()).map(move |k| (i, s.scene_id, k)))
        .map(|(i, sid, k)| (sims[i][k], sid, k, labels[i][k]))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let truth: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    QueryResult {
        scene_id: query.query.scene_id,
        box_index: query.query.box_index,
        identity: query.identity,
        ap: average_precision(&truth, num_gt),
        top1: truth.first().copied().unwrap_or(false),
        fallback: query.embedding.fallback,
        num_gt,
        num_candidates: truth.len(),
        gallery: scenes.iter().map(|s| s.scene_id).collect(),
    }
}

/// Largest gallery any query can have.
pub fn max_gallery_size(prepared: &PreparedEval) -> usize {
    prepared.scenes.len().saturating_sub(1)
}

/// Retrieval over precomputed detections.
pub fn evaluate_prepared(prepared: &PreparedEval, config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    if prepared.queries.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    let full = max_gallery_size(prepared);
    let size = config.gallery_size.unwrap_or(full).min(full);
    let queries: Vec<QueryResult> = (0..prepared.queries.len())
        .into_par_iter()
        .map(|q| query_result(prepared, q, build_gallery(prepared, q, size, config.seed), config))
        .collect();
    let n = queries.len() as f64;
    Ok(EvalResult {
        map: queries.iter().map(|r| r.ap).sum::<f64>() / n,
        top1: queries.iter().filter(|r| r.top1).count() as f64 / n,
        gallery_size: size,
        num_fallback: queries.iter().filter(|r| r.fallback).count(),
        queries,
        config: config.clone(),
    })
}

pub fn evaluate(model: &SiameseNet<f32>, manifest: &DatasetManifest, config: &EvalConfig) -> Result<EvalResult> {
    evaluate_prepared(&prepare(model, manifest, config)?, config)
}

/// One result per gallery size over shared detections and queries. Sizes
/// beyond the number of other scenes are clipped.
pub fn gallery_sweep(
    model: &SiameseNet<f32>,
    manifest: &DatasetManifest,
    sizes: &[usize],
    config: &EvalConfig,
) -> Result<Vec<EvalResult>> {
    let prepared = prepare(model, manifest, config)?;
    sweep_prepared(&prepared, sizes, config)
}

pub fn sweep_prepared(prepared: &PreparedEval, sizes: &[usize], config: &EvalConfig) -> Result<Vec<EvalResult>> {
    let full = max_gallery_size(prepared);
    let results: Vec<EvalResult> = sizes
        .iter()
        .map(|&s| {
            if s == 0 {
                return Err(Error::config("gallery_size", "sizes must be positive"));
            }
            if s > full {
                log::warn!("gallery size {s} exceeds the {full} available scenes; clipped");
            }
            evaluate_prepared(
                prepared,
                &EvalConfig {
                    gallery_size: Some(s.min(full)),
                    ..config.clone()
                },
            )
        })
        .collect::<Result<_>>()?;
    for pair in results.windows(2) {
        if pair[1].map > pair[0].map {
            log::info!(
                "mAP rose from {:.4} to {:.4} as the gallery grew from {} to {}",
                pair[0].map,
                pair[1].map,
                pair[0].gallery_size,
                pair[1].gallery_size
            );
        }
    }
    Ok(results)
}

/// Random-embedding baseline on the same detections and galleries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

impl NullModel {
    /// Upper edge of the mean + 3 sigma band.
    pub fn band(&self) -> f64 {
        self.mean + 3.0 * self.std
    }
}

fn random_unit(dim: usize, rng: &mut crate::rng::Rng) -> Embedding {
    Embedding::normalized((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}

pub fn null_model(prepared: &PreparedEval, config: &EvalConfig, trials: usize) -> Result<NullModel> {
    if trials < 2 {
        return Err(Error::config("trials", "need at least two trials"));
    }
    let dim = prepared
        .queries
        .first()
        .map(|q| q.embedding.embedding.dim())
        .ok_or_else(|| Error::Input("no queries to evaluate".into()))?;
    let maps: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(config.seed, &[stream::NULL_MODEL, t as u64]);
            let mut p = prepared.clone();
            for s in &mut p.scenes {
                for e in &mut s.detections.embeddings {
                    *e = random_unit(dim, &mut rng);
                }
            }
            for q in &mut p.queries {
                q.embedding.embedding = random_unit(dim, &mut rng);
            }
            evaluate_prepared(&p, config).map(|r| r.map)
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let mean = maps.iter().sum::<f64>() / n;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NullModel {
        trials,
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    pub original_map: f64,
    pub original_top1: f64,
    pub masked_map: f64,
    pub masked_top1: f64,
}

impl RobustnessRow {
    pub fn drop_map(&self) -> f64 {
        self.original_map - self.masked_map
    }

    pub fn drop_top1(&self) -> f64 {
        self.original_top1 - self.masked_top1
    }
}

/// Original versus masked test set for a model with and one without
/// occlusion contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub pixel_fraction: f64,
    pub with_oic: RobustnessRow,
    pub without_oic: RobustnessRow,
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| 100.0 * v;
        writeln!(f, "{:<12} {:>14} {:>14} {:>14} {:>14}", "", "orig mAP", "orig top-1", "masked mAP", "masked top-1")?;
        for r in [&self.without_oic, &self.with_oic] {
            writeln!(
                f,
                "{:<12} {:>14.1} {:>14.1} {:>14.1} {:>14.1}",
                r.model,
                pct(r.original_map),
                pct(r.original_top1),
                pct(r.masked_map),
                pct(r.masked_top1)
            )?;
        }
        for r in [&self.without_oic, &self.with_oic] {
            writeln!(
                f,
                "{:<12} {:>14.1} {:>14.1}",
                format!("drop {}", r.model),
                pct(r.drop_map()),
                pct(r.drop_top1())
            )?;
        }
        Ok(())
    }
}

fn robustness_row(
    name: &str,
    model: &SiameseNet<f32>,
    original: &DatasetManifest,
    masked: &DatasetManifest,
    config: &EvalConfig,
) -> Result<RobustnessRow> {
    let a = evaluate(model, original, config)?;
    let b = evaluate(model, masked, config)?;
    Ok(RobustnessRow {
        model: name.to_string(),
        original_map: a.map,
        original_top1: a.top1,
        masked_map: b.map,
        masked_top1: b.top1,
    })
}

pub fn robustness_report(
    with_oic: (&SiameseNet<f32>, &CheckpointInfo),
    without_oic: (&SiameseNet<f32>, &CheckpointInfo),
    manifest: &DatasetManifest,
    pixel_fraction: f64,
    config: &EvalConfig,
) -> Result<RobustnessReport> {
    if with_oic.1.data_fingerprint != without_oic.1.data_fingerprint {
        return Err(Error::config(
            "checkpoints",
            "the two checkpoints were trained on different data",
        ));
    }
    let masked = make_masked_testset(manifest, pixel_fraction, config.seed)?;
    Ok(RobustnessReport {
        pixel_fraction,
        with_oic: robustness_row("w/ OIC", with_oic.0, manifest, &masked, config)?,
        without_oic: robustness_row("w/o OIC", without_oic.0, manifest, &masked, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: u64, gt: Vec<(BBox, usize)>, dets: Vec<(BBox, Vec<f64>)>) -> SceneDetections {
        SceneDetections {
            scene_id: id,
            gt_boxes: gt.iter().map(|g| g.0).collect(),
            gt_identity: gt.iter().map(|g| g.1).collect(),
            detections: DetectionOutput {
                boxes: dets.iter().map(|d| d.0).collect(),
                scores: vec![1.0; dets.len()],
                embeddings: dets.iter().map(|d| Embedding::normalized(d.1.clone())).collect(),
                proposal_index: (0..dets.len()).collect(),
            },
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert!((average_precision(&[true, false, true], 2) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 1), 0.0);
        assert!((average_precision(&[false, true], 2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn only_match_ranked_first() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let prepared = PreparedEval {
            scenes: vec![
                scene(0, vec![(b, 1)], vec![(b, vec![1.0, 0.0])]),
                scene(1, vec![(b, 1), (BBox::new(20.0, 0.0, 30.0, 20.0), 2)], vec![
                    (b, vec![0.9, 0.1]),
                    (BBox::new(20.0, 0.0, 30.0, 20.0), vec![0.0, 1.0]),
                ]),
            ],
            queries: vec![PreparedQuery {
                query: QueryRef { scene_id: 0, box_index: 0 },
                identity: 1,
                embedding: QueryEmbedding {
                    embedding: Embedding::normalized(vec![1.0, 0.0]),
                    iou: 1.0,
                    fallback: false,
                },
            }],
        };
        let r = evaluate_prepared(&prepared, &EvalConfig::default()).unwrap();
        assert_eq!((r.map, r.top1), (1.0, 1.0));
        assert_eq!(r.queries[0].gallery, vec![1]);
    }

    #[test]
    fn best_overlap_prefers_highest_iou() {
        let q = BBox::new(0.0, 0.0, 10.0, 10.0);
        let det = DetectionOutput {
            boxes: vec![BBox::new(5.0, 0.0, 15.0, 10.0), BBox::new(1.0, 0.0, 11.0, 10.0)],
            ..DetectionOutput::default()
        };
        assert_eq!(best_overlap(&det, &q).unwrap().0, 1);
        let far = DetectionOutput {
            boxes: vec![BBox::new(50.0, 50.0, 60.0, 60.0)],
            ..DetectionOutput::default()
        };
        assert!(best_overlap(&far, &q).is_none());
    }
}
