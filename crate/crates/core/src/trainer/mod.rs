//! The training loop.
//!
//! Each epoch re-extracts every bank feature with the current weights and
//! reclusters. The scenes are then visited in a seeded order in batches; per
//! scene the ground truths get a mask plan, the search branch sees the whole
//! (possibly masked) image with jittered and background proposals, the
//! instance branch sees the ground-truth crops, and the combined loss is
//! backpropagated through both. After the optimizer step the bank receives
//! momentum updates for the scene's ground truths.

mod ablation;
pub(crate) mod config;
mod metrics;
mod optim;
mod state;

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::assign::{apply_masks, assign, plan_masks, MaskPlan};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, BBox};
use crate::losses::{combined_loss, ContrastBatch, DetInputs, LossFlag, LossReport, LossSwitches, OimEntry, SearchEntry};
use crate::membank::{average_feature, extract_bank_features, initialize_bank, ClusterStats, InstanceKey, MemoryBank};
use crate::model::{NetParams, SiameseNet};
use crate::proposals::{train_proposals, ProposalSource};
use crate::rng::{derive_seed, rng_for, stream};
use crate::synth::{DatasetManifest, SceneSample, Split};

pub use ablation::{ablation_matrix, ablation_table, NamedConfig, TABLES};
pub use config::{MaskConfig, MaskMode, SicMode, TrainConfig, SEED_ENV};
pub use metrics::{read_metrics, EpochRecord, MetricRecord, MetricsLog, StepRecord};
pub use optim::{clip_grad_norm, grad_norm, sgd_step};
pub use state::{load_model, manifest_fingerprint, CheckpointInfo, CHECKPOINT_FILE};

/// Model, optimizer, bank and counters of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: SiameseNet<f32>,
    pub velocity: NetParams<f32>,
    pub bank: MemoryBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub data_fingerprint: String,
}

/// What one scene contributes to a step.
struct SceneOutcome {
    grads: NetParams<f32>,
    report: LossReport,
    counts: (usize, usize, usize),
    flags: Vec<LossFlag>,
    bank_updates: Vec<(InstanceKey, Embedding)>,
    masked_persons: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean: LossReport,
    pub clusters: Option<ClusterStats>,
}

/// Returns the manifest with every scene at `[width, height]`, borrowing when
/// nothing needs resizing.
pub fn at_resolution(manifest: &DatasetManifest, size: [usize; 2]) -> Cow<'_, DatasetManifest> {
    let [w, h] = size;
    if manifest
        .samples
        .iter()
        .all(|s| s.image.width() == w && s.image.height() == h)
    {
        return Cow::Borrowed(manifest);
    }
    let mut out = manifest.clone();
    out.samples.par_iter_mut().for_each(|s| rescale_scene(s, w, h));
    Cow::Owned(out)
}

fn rescale_scene(s: &mut SceneSample, w: usize, h: usize) {
    let (sx, sy) = (w as f64 / s.image.width() as f64, h as f64 / s.image.height() as f64);
    let scale = |b: &BBox| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy);
    s.image = s.image.resize(h, w);
    s.boxes = s.boxes.iter().map(scale).collect();
    s.occluders = s.occluders.iter().map(scale).collect();
}

fn true_labels(manifest: &DatasetManifest) -> HashMap<InstanceKey, usize> {
    manifest
        .samples
        .iter()
        .flat_map(|s| {
            s.true_identity
                .iter()
                .enumerate()
                .map(move |(b, id)| ((s.scene_id, b), *id))
        })
        .collect()
}

impl TrainState {
    /// Fresh model, zero optimizer state and a bank initialized from the
    /// averaged two-branch features of every training ground truth.
    pub fn new(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        if manifest.split != Split::Train {
            return Err(Error::Usage("training needs the train split".into()));
        }
        let model = SiameseNet::new(config.model.clone(), derive_seed(config.seed, &[stream::INIT]))?;
        let velocity = model.params.zeros_like();
        let data = at_resolution(manifest, config.image_size);
        let bank = initialize_bank(&model, &data, config.bank.momentum)?;
        Ok(TrainState {
            data_fingerprint: manifest_fingerprint(manifest),
            config,
            model,
            velocity,
            bank,
            epoch: 0,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch, self.step)
    }

    fn refresh_bank(&mut self, manifest: &DatasetManifest) -> Result<ClusterStats> {
        for (k, f) in extract_bank_features(&self.model, manifest)? {
            self.bank.replace(k, f, self.step)?;
        }
        let b = &self.config.bank;
        if b.oracle_labels {
            self.bank.recluster_with_labels(&true_labels(manifest))
        } else {
            Ok(self.bank.recluster_with(b))
        }
    }

    fn scene_step(&self, sample: &SceneSample, batch_len: usize) -> Result<SceneOutcome> {
        let cfg = &self.config;
        let model = &self.model;
        let epoch = self.epoch as u64;
        let scene = sample.scene_id;
        let image = &sample.image;
        let gt = &sample.boxes;
        let (w, h) = (image.width() as f64, image.height() as f64);

        let plan = if cfg.mask.mode != MaskMode::None && !gt.is_empty() {
            let seed = derive_seed(cfg.seed, &[stream::MASK_PLAN, epoch, scene]);
            plan_masks(gt, cfg.mask.prob, cfg.mask.max_cells, seed)
        } else {
            MaskPlan::default()
        };
        let masked = (plan.num_applied() > 0).then(|| apply_masks(image, gt, &plan));
        let search_img = match (&masked, cfg.mask.mode.masks_search()) {
            (Some(m), true) => m,
            _ => image,
        };
        let inst_img = match (&masked, cfg.mask.mode.masks_instance()) {
            (Some(m), true) => m,
            _ => image,
        };
        let search_masked = |g: usize| cfg.mask.mode.masks_search() && plan.is_applied(g);
        let inst_masked = |g: usize| cfg.mask.mode.masks_instance() && plan.is_applied(g);

        let mut rng = rng_for(cfg.seed, &[stream::PROPOSALS, epoch, scene]);
        let props = train_proposals(gt, w, h, &cfg.proposals, &mut rng);
        let assigned = assign(&props.boxes, gt, cfg.assignment_threshold);
        let pass = model.search_pass(search_img, &props.boxes)?;

        let mut crop_boxes: Vec<BBox> = gt.clone();
        let mut own_crop: Vec<Option<usize>> = vec![None; props.len()];
        if cfg.siamese && cfg.sic_mode == SicMode::PosToPos {
            for a in &assigned {
                if let Some(g) = a.gt_index {
                    own_crop[a.pred_index] = if props.sources[a.pred_index] == ProposalSource::GroundTruth(g) {
                        Some(g)
                    } else {
                        crop_boxes.push(props.boxes[a.pred_index]);
                        Some(crop_boxes.len() - 1)
                    };
                }
            }
        }
        let ipass = (!crop_boxes.is_empty()).then(|| model.instance_pass(model.crop_tensor(inst_img, &crop_boxes)));

        let rows: Vec<usize> = assigned
            .iter()
            .filter(|a| a.gt_index.is_some())
            .map(|a| a.pred_index)
            .collect();
        let search: Vec<SearchEntry> = rows
            .iter()
            .map(|&p| {
                let g = assigned[p].gt_index.expect("assigned");
                let siamese = if !cfg.siamese {
                    None
                } else {
                    match cfg.sic_mode {
                        SicMode::GtToGt => (props.sources[p] == ProposalSource::GroundTruth(g)).then_some(g),
                        SicMode::ManyToOne => Some(g),
                        SicMode::PosToPos => own_crop[p],
                    }
                };
                SearchEntry {
                    embedding: pass.out.embedding(p),
                    gt_index: Some(g),
                    siamese,
                    masked: search_masked(g),
                }
            })
            .collect();
        let instances: Vec<Embedding> = match &ipass {
            Some(ip) => (0..crop_boxes.len()).map(|k| ip.out.embedding(k)).collect(),
            None => Vec::new(),
        };
        let gt_row = |g: usize| {
            rows.iter()
                .position(|&p| props.sources[p] == ProposalSource::GroundTruth(g))
        };
        let oim = (0..gt.len())
            .map(|g| {
                Ok(OimEntry {
                    search: gt_row(g),
                    instance: g,
                    label: self.bank.cluster_of((scene, g))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = ContrastBatch {
            search,
            instances,
            num_gt: gt.len(),
            oim,
        };

        let n = props.len();
        let det = DetInputs {
            cls_logits: pass.out.cls_logits.mapv(f64::from),
            reg: pass.out.reg.mapv(f64::from),
            labels: assigned.iter().map(|a| a.gt_index.is_some()).collect(),
            reg_targets: assigned
                .iter()
                .map(|a| a.gt_index.map(|g| encode_deltas(&props.boxes[a.pred_index], &gt[g])))
                .collect(),
        };
        let switches = LossSwitches {
            siamese: cfg.siamese,
            occlusion: cfg.siamese,
            triplet: cfg.dense_triplet,
            oim: cfg.oim,
        };
        let loss = combined_loss(&batch, self.bank.centroids(), &det, &cfg.loss_config(), switches).map_err(|e| {
            Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                scenes: vec![scene],
                seed: cfg.seed,
                detail: e.to_string(),
            }
        })?;

        let s = 1.0 / batch_len as f32;
        let dim = model.config.embedding_dim;
        let mut d_emb = Array2::<f32>::zeros((n, dim));
        for (k, &p) in rows.iter().enumerate() {
            d_emb
                .row_mut(p)
                .zip_mut_with(&loss.d_search.row(k), |d, &v| *d = v as f32 * s);
        }
        let d_cls = loss.det.d_cls.mapv(|v| v as f32 * s);
        let d_reg = loss.det.d_reg.mapv(|v| v as f32 * s);
        let mut grads = model.params.zeros_like();
        model.search_backward(&pass, &d_cls, &d_reg, &d_emb, &mut grads);
        if let Some(ip) = &ipass {
            let d_inst = loss.d_instances.mapv(|v| v as f32 * s);
            model.instance_backward(ip, &d_inst, &mut grads);
        }

        let mut bank_updates = Vec::new();
        for g in 0..gt.len() {
            let inst = &batch.instances[g];
            let srch = gt_row(g).map(|k| &batch.search[k].embedding);
            let feature = match (srch, search_masked(g), inst_masked(g)) {
                (Some(sv), false, false) => average_feature(sv, inst),
                (None, _, false) | (Some(_), true, false) => inst.clone(),
                (Some(sv), false, true) => sv.clone(),
                _ => continue,
            };
            bank_updates.push(((scene, g), feature));
        }

        Ok(SceneOutcome {
            grads,
            report: loss.report,
            counts: loss.counts,
            flags: loss.flags,
            bank_updates,
            masked_persons: plan.num_applied(),
        })
    }

    /// One optimizer step over `scenes`.
    fn train_step(&mut self, scenes: &[&SceneSample], log: &mut MetricsLog) -> Result<LossReport> {
        let outcomes: Vec<SceneOutcome> = scenes
            .par_iter()
            .map(|s| self.scene_step(s, scenes.len()))
            .collect::<Result<_>>()?;
        let scene_ids: Vec<u64> = scenes.iter().map(|s| s.scene_id).collect();
        let mut grads = self.model.params.zeros_like();
        for o in &outcomes {
            grads.add_scaled(&o.grads, 1.0);
        }
        let reports: Vec<LossReport> = outcomes.iter().map(|o| o.report).collect();
        let mean = LossReport::mean(&reports);
        let norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !mean.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                scenes: scene_ids,
                seed: self.config.seed,
                detail: format!("losses {mean:?}, gradient norm {norm}"),
            });
        }
        let lr = self.lr();
        sgd_step(
            &mut self.model.params,
            &mut self.velocity,
            &grads,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        if !self.model.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                scenes: scene_ids,
                seed: self.config.seed,
                detail: "parameters became non-finite".into(),
            });
        }
        self.step += 1;
        for o in &outcomes {
            for (k, f) in &o.bank_updates {
                self.bank.update(*k, f, self.step)?;
            }
        }
        let sum = |f: fn(&(usize, usize, usize)) -> usize| outcomes.iter().map(|o| f(&o.counts)).sum();
        let mut flags: Vec<LossFlag> = outcomes.iter().flat_map(|o| o.flags.iter().copied()).collect();
        flags.sort_by_key(|f| *f as u8);
        flags.dedup();
        log.push(MetricRecord::Step(StepRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            scenes: scene_ids,
            losses: mean,
            n_p: sum(|c| c.0),
            n_o: sum(|c| c.1),
            n: sum(|c| c.2),
            masked_persons: outcomes.iter().map(|o| o.masked_persons).sum(),
            grad_norm: norm,
            flags,
        }))?;
        Ok(mean)
    }
}

/// Runs one epoch: bank refresh and reclustering, then one pass over the
/// split in seeded batch order.
pub fn train_epoch(state: &mut TrainState, manifest: &DatasetManifest, log: &mut MetricsLog) -> Result<EpochSummary> {
    if manifest.split != Split::Train {
        return Err(Error::Usage("training needs the train split".into()));
    }
    let data = at_resolution(manifest, state.config.image_size);
    let clusters = if state.epoch % state.config.recluster_every == 0 {
        Some(state.refresh_bank(&data)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut rng_for(state.config.seed, &[stream::ORDER, state.epoch as u64]));
    let start_step = state.step;
    let mut reports = Vec::new();
    for chunk in order.chunks(state.config.batch_size) {
        let scenes: Vec<&SceneSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        reports.push(state.train_step(&scenes, log)?);
    }
    let summary = EpochSummary {
        epoch: state.epoch,
        steps: state.step - start_step,
        mean: LossReport::mean(&reports),
        clusters,
    };
    log.push(MetricRecord::Epoch(EpochRecord {
        epoch: state.epoch,
        lr: state.config.lr_at_epoch(state.epoch),
        steps: summary.steps,
        losses: summary.mean,
        clusters: clusters.map(|c| c.clusters),
        outliers: clusters.map(|c| c.outliers),
        detached: clusters.map(|c| c.detached),
        bank_size: state.bank.len(),
    }))?;
    state.epoch += 1;
    Ok(summary)
}

/// Trains until `config.epochs` epochs are complete, calling `on_epoch` after
/// each one (checkpointing, progress).
pub fn train(
    state: &mut TrainState,
    manifest: &DatasetManifest,
    log: &mut MetricsLog,
    mut on_epoch: impl FnMut(&TrainState, &EpochSummary) -> Result<()>,
) -> Result<()> {
    while state.epoch < state.config.epochs {
        let summary = train_epoch(state, manifest, log)?;
        on_epoch(state, &summary)?;
    }
    log.flush()
}
