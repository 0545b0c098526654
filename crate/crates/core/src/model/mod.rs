//! The Siamese person-search network.
//!
//! Both branches share one parameter set. The search branch runs the backbone
//! over a whole scene, pools every proposal to a 14x6 grid with RoIAlign and
//! feeds the shared head (three 3x3 convs, then parallel classification,
//! box-regression and re-id projections). The instance branch runs the same
//! backbone over a ground-truth crop resized to the instance size and feeds
//! the crop's full extent through the same pooling and head.

mod checkpoint;
mod layers;
mod real;
mod roi_align;

use ndarray::{Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, nms, BBox};
use crate::image::Image;
use crate::rng::{rng_for, stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorData};
pub use layers::{conv_out_len, Conv, Linear};
pub use real::Real;
pub use roi_align::{roi_align, roi_align_backward, Roi};

/// Total downsampling of the backbone.
pub const FEATURE_STRIDE: usize = 16;
pub const POOL_HEIGHT: usize = 14;
pub const POOL_WIDTH: usize = 6;
const HEAD_CONVS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the four stride-2 backbone stages.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    pub embedding_dim: usize,
    /// Instance-branch crop size as `[height, width]`.
    pub instance_size: [usize; 2],
    pub sampling_ratio: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 32, 64, 64],
            head_channels: 64,
            embedding_dim: EMBEDDING_DIM,
            instance_size: [224, 96],
            sampling_ratio: 1,
            score_threshold: 0.3,
            nms_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and 112x48 crops for single-core training runs.
    pub fn desk() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 32, 32, 32],
            head_channels: 32,
            instance_size: [112, 48],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            return Err(Error::config(
                "model.backbone_channels",
                "need four non-zero stage widths (stride 16)",
            ));
        }
        if self.head_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::config("model.head_channels", "must be non-zero"));
        }
        let [h, w] = self.instance_size;
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h < 32 || w < 32 {
            return Err(Error::config(
                "model.instance_size",
                "crop sides must be multiples of 16 and at least 32",
            ));
        }
        if h * POOL_WIDTH != w * POOL_HEIGHT {
            return Err(Error::config(
                "model.instance_size",
                "crop aspect must match the 14x6 head grid",
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::config("model.nms_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }
}

/// All learnable tensors. Gradients and optimizer state use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<R: Real> {
    pub backbone: Vec<Conv<R>>,
    pub head: Vec<Conv<R>>,
    pub cls: Linear<R>,
    pub reg: Linear<R>,
    pub reid: Linear<R>,
}

impl<R: Real> NetParams<R> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut c_in = 3;
        let backbone = config
            .backbone_channels
            .iter()
            .map(|&c| {
                let conv = Conv::new(c_in, c, 2, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let hc = config.head_channels;
        let head = (0..HEAD_CONVS)
            .map(|i| Conv::new(if i == 0 { c_in } else { hc }, hc, 1, &mut rng))
            .collect();
        let flat = hc * (POOL_HEIGHT / 2) * (POOL_WIDTH / 2);
        NetParams {
            backbone,
            head,
            cls: Linear::new(flat, 2, 0.01, &mut rng),
            reg: Linear::new(flat, 4, 0.001, &mut rng),
            reid: Linear::new(flat, config.embedding_dim, (1.0 / flat as f64).sqrt(), &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            backbone: self.backbone.iter().map(Conv::zeros_like).collect(),
            head: self.head.iter().map(Conv::zeros_like).collect(),
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
            reid: self.reid.zeros_like(),
        }
    }

    /// Tensors keyed by stable hierarchical names.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, R>)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.stage{i}.weight"), c.weight.view().into_dyn()));
            out.push((format!("backbone.stage{i}.bias"), c.bias.view().into_dyn()));
        }
        for (i, c) in self.head.iter().enumerate() {
            out.push((format!("head.conv{i}.weight"), c.weight.view().into_dyn()));
            out.push((format!("head.conv{i}.bias"), c.bias.view().into_dyn()));
        }
        for (name, l) in [("cls", &self.cls), ("reg", &self.reg), ("reid", &self.reid)] {
            out.push((format!("head.{name}.weight"), l.weight.view().into_dyn()));
            out.push((format!("head.{name}.bias"), l.bias.view().into_dyn()));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, R>)> {
        let NetParams {
            backbone,
            head,
            cls,
            reg,
            reid,
        } = self;
        let mut out = Vec::new();
        for (i, c) in backbone.iter_mut().enumerate() {
            out.push((format!("backbone.stage{i}.weight"), c.weight.view_mut().into_dyn()));
            out.push((format!("backbone.stage{i}.bias"), c.bias.view_mut().into_dyn()));
        }
        for (i, c) in head.iter_mut().enumerate() {
            out.push((format!("head.conv{i}.weight"), c.weight.view_mut().into_dyn()));
            out.push((format!("head.conv{i}.bias"), c.bias.view_mut().into_dyn()));
        }
        for (name, l) in [("cls", cls), ("reg", reg), ("reid", reid)] {
            out.push((format!("head.{name}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("head.{name}.bias"), l.bias.view_mut().into_dyn()));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &NetParams<R>, scale: R) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.zip_mut_with(&b, |x, &y| *x += scale * y);
        }
    }

    pub fn cast<S: Real>(&self) -> NetParams<S> {
        let conv = |c: &Conv<R>| Conv {
            weight: c.weight.mapv(|v| S::lit(v.as_f64())),
            bias: c.bias.mapv(|v| S::lit(v.as_f64())),
            stride: c.stride,
        };
        let lin = |l: &Linear<R>| Linear {
            weight: l.weight.mapv(|v| S::lit(v.as_f64())),
            bias: l.bias.mapv(|v| S::lit(v.as_f64())),
        };
        NetParams {
            backbone: self.backbone.iter().map(conv).collect(),
            head: self.head.iter().map(conv).collect(),
            cls: lin(&self.cls),
            reg: lin(&self.reg),
            reid: lin(&self.reid),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Backbone output for one image: `(C, 1, H/16, W/16)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures<R: Real> {
    pub map: Array4<R>,
}

impl<R: Real> BackboneFeatures<R> {
    pub fn height(&self) -> usize {
        self.map.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.map.shape()[3]
    }
    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }
}

/// A pooled `(C, 14, 6)` region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature<R: Real> {
    pub pooled: Array3<R>,
}

/// Head outputs for a batch of regions.
#[derive(Debug, Clone)]
pub struct HeadOutput<R: Real> {
    pub cls_logits: Array2<R>,
    pub reg: Array2<R>,
    /// Unit-norm rows.
    pub embeddings: Array2<R>,
}

impl<R: Real> HeadOutput<R> {
    pub fn embedding(&self, row: usize) -> Embedding {
        Embedding::new(self.embeddings.row(row).iter().map(|v| v.as_f64()).collect())
    }

    /// Softmax probability of the person class.
    pub fn score(&self, row: usize) -> f64 {
        let d = self.cls_logits[[row, 1]].as_f64() - self.cls_logits[[row, 0]].as_f64();
        1.0 / (1.0 + (-d).exp())
    }

    pub fn deltas(&self, row: usize) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| self.reg[[row, k]].as_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Every proposal survives.
    Train,
    /// Score threshold and NMS applied.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionOutput {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub embeddings: Vec<Embedding>,
    /// Which input proposal produced each detection.
    pub proposal_index: Vec<usize>,
}

impl DetectionOutput {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

struct BackboneTrace<R: Real> {
    caches: Vec<layers::ConvCache<R>>,
    outputs: Vec<Array4<R>>,
}

struct HeadTrace<R: Real> {
    caches: Vec<layers::ConvCache<R>>,
    outputs: Vec<Array4<R>>,
    flat: Array2<R>,
    norms: ndarray::Array1<R>,
}

/// Everything the search branch needs to backpropagate one image.
pub struct SearchPass<R: Real> {
    rois: Vec<Roi>,
    feat_shape: [usize; 4],
    backbone: BackboneTrace<R>,
    head: HeadTrace<R>,
    pub out: HeadOutput<R>,
}

pub struct InstancePass<R: Real> {
    rois: Vec<Roi>,
    feat_shape: [usize; 4],
    backbone: BackboneTrace<R>,
    head: HeadTrace<R>,
    pub out: HeadOutput<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet<R: Real> {
    pub config: ModelConfig,
    pub params: NetParams<R>,
}

impl<R: Real> SiameseNet<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(&config, seed);
        Ok(SiameseNet { config, params })
    }

    pub fn cast<S: Real>(&self) -> SiameseNet<S> {
        SiameseNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn instance_hw(&self) -> (usize, usize) {
        (self.config.instance_size[0], self.config.instance_size[1])
    }

    /// Scene image as a centered `(3, 1, H', W')` tensor, zero-padded so both
    /// sides are multiples of 16.
    pub fn image_tensor(image: &Image) -> Result<Array4<R>> {
        let (h, w) = (image.height(), image.width());
        if h < 32 || w < 32 {
            return Err(Error::Input(format!(
                "image {w}x{h} is smaller than the 32x32 minimum"
            )));
        }
        let (hp, wp) = (h.next_multiple_of(FEATURE_STRIDE), w.next_multiple_of(FEATURE_STRIDE));
        let mut t = Array4::<R>::zeros((3, 1, hp, wp));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t[[c, 0, y, x]] = R::lit(image.data[[c, y, x]] - 0.5);
                }
            }
        }
        Ok(t)
    }

    /// Crops `boxes` from `image`, resized to the instance size, as `(3, N, h, w)`.
    pub fn crop_tensor(&self, image: &Image, boxes: &[BBox]) -> Array4<R> {
        let (ih, iw) = self.instance_hw();
        let mut t = Array4::<R>::zeros((3, boxes.len(), ih, iw));
        for (n, b) in boxes.iter().enumerate() {
            let crop = image.crop_resize(b, ih, iw);
            for c in 0..3 {
                for y in 0..ih {
                    for x in 0..iw {
                        t[[c, n, y, x]] = R::lit(crop.data[[c, y, x]] - 0.5);
                    }
                }
            }
        }
        t
    }

    fn backbone_forward(&self, x: &Array4<R>) -> (Array4<R>, BackboneTrace<R>) {
        let mut caches = Vec::with_capacity(self.params.backbone.len());
        let mut outputs = Vec::with_capacity(self.params.backbone.len());
        let mut cur = x.clone();
        for conv in &self.params.backbone {
            let (mut y, cache) = conv.forward(&cur);
            layers::relu_inplace(&mut y);
            caches.push(cache);
            outputs.push(y.clone());
            cur = y;
        }
        (cur, BackboneTrace { caches, outputs })
    }

    fn backbone_backward(&self, d_feat: Array4<R>, trace: &BackboneTrace<R>, grads: &mut NetParams<R>) {
        let mut d = d_feat;
        for i in (0..self.params.backbone.len()).rev() {
            layers::relu_backward(&mut d, &trace.outputs[i]);
            let dx = self.params.backbone[i].backward(&d, &trace.caches[i], &mut grads.backbone[i], i > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn head_forward(&self, pooled: Array4<R>) -> (HeadOutput<R>, HeadTrace<R>) {
        let mut caches = Vec::with_capacity(HEAD_CONVS);
        let mut outputs = Vec::with_capacity(HEAD_CONVS);
        let mut cur = pooled;
        for conv in &self.params.head {
            let (mut y, cache) = conv.forward(&cur);
            layers::relu_inplace(&mut y);
            caches.push(cache);
            outputs.push(y.clone());
            cur = y;
        }
        let flat = layers::avgpool2_flatten(&cur);
        let cls_logits = self.params.cls.forward(&flat);
        let reg = self.params.reg.forward(&flat);
        let raw = self.params.reid.forward(&flat);
        let (embeddings, norms) = layers::l2_normalize_rows(&raw);
        (
            HeadOutput {
                cls_logits,
                reg,
                embeddings,
            },
            HeadTrace {
                caches,
                outputs,
                flat,
                norms,
            },
        )
    }

    fn head_backward(
        &self,
        trace: &HeadTrace<R>,
        out: &HeadOutput<R>,
        d_cls: &Array2<R>,
        d_reg: &Array2<R>,
        d_emb: &Array2<R>,
        grads: &mut NetParams<R>,
    ) -> Array4<R> {
        let d_raw = layers::l2_normalize_rows_backward(d_emb, &out.embeddings, &trace.norms);
        let mut d_flat = self.params.reid.backward(&d_raw, &trace.flat, &mut grads.reid);
        d_flat += &self.params.cls.backward(d_cls, &trace.flat, &mut grads.cls);
        d_flat += &self.params.reg.backward(d_reg, &trace.flat, &mut grads.reg);
        let last = trace.outputs.last().expect("head convs");
        let s = last.shape();
        let mut d = layers::avgpool2_flatten_backward(&d_flat, [s[0], s[1], s[2], s[3]]);
        for i in (0..HEAD_CONVS).rev() {
            layers::relu_backward(&mut d, &trace.outputs[i]);
            d = self.params.head[i]
                .backward(&d, &trace.caches[i], &mut grads.head[i], true)
                .expect("input gradient requested");
        }
        d
    }

    fn pool(&self, map: &Array4<R>, rois: &[Roi]) -> Array4<R> {
        roi_align(
            map,
            rois,
            1.0 / FEATURE_STRIDE as f64,
            (POOL_HEIGHT, POOL_WIDTH),
            self.config.sampling_ratio,
        )
    }

    pub fn extract_features(&self, image: &Image) -> Result<BackboneFeatures<R>> {
        let x = Self::image_tensor(image)?;
        Ok(BackboneFeatures {
            map: self.backbone_forward(&x).0,
        })
    }

    pub fn pool_region(&self, features: &BackboneFeatures<R>, bbox: &BBox) -> RegionFeature<R> {
        let rois = [Roi {
            batch_index: 0,
            bbox: *bbox,
        }];
        let pooled = self.pool(&features.map, &rois).index_axis_move(Axis(1), 0);
        RegionFeature { pooled }
    }

    /// Runs the shared head over pooled regions.
    pub fn head(&self, pooled: Array4<R>) -> HeadOutput<R> {
        self.head_forward(pooled).0
    }

    pub fn embed_regions(&self, features: &BackboneFeatures<R>, boxes: &[BBox]) -> Vec<Embedding> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let rois: Vec<Roi> = boxes
            .iter()
            .map(|&bbox| Roi {
                batch_index: 0,
                bbox,
            })
            .collect();
        let out = self.head(self.pool(&features.map, &rois));
        (0..boxes.len()).map(|r| out.embedding(r)).collect()
    }

    /// Instance branch on one crop that already has the instance size.
    pub fn instance_forward(&self, crop: &Image) -> Result<Embedding> {
        let (ih, iw) = self.instance_hw();
        if crop.height() != ih || crop.width() != iw {
            return Err(Error::Input(format!(
                "instance crop must be {iw}x{ih}, got {}x{}",
                crop.width(),
                crop.height()
            )));
        }
        let full = BBox::new(0.0, 0.0, iw as f64, ih as f64);
        let t = self.crop_tensor(crop, &[full]);
        Ok(self.instance_pass(t).out.embedding(0))
    }

    /// Instance-branch embeddings of `boxes` cropped from `image`.
    pub fn instance_embeddings(&self, image: &Image, boxes: &[BBox]) -> Vec<Embedding> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let pass = self.instance_pass(self.crop_tensor(image, boxes));
        (0..boxes.len()).map(|r| pass.out.embedding(r)).collect()
    }

    pub fn search_forward(
        &self,
        image: &Image,
        proposals: &[BBox],
        mode: ForwardMode,
    ) -> Result<DetectionOutput> {
        if proposals.is_empty() {
            return Ok(DetectionOutput::default());
        }
        let features = self.extract_features(image)?;
        let rois: Vec<Roi> = proposals
            .iter()
            .map(|&bbox| Roi {
                batch_index: 0,
                bbox,
            })
            .collect();
        let out = self.head(self.pool(&features.map, &rois));
        Ok(self.postprocess(image, proposals, &out, mode))
    }

    fn postprocess(
        &self,
        image: &Image,
        proposals: &[BBox],
        out: &HeadOutput<R>,
        mode: ForwardMode,
    ) -> DetectionOutput {
        let (w, h) = (image.width() as f64, image.height() as f64);
        let boxes: Vec<BBox> = proposals
            .iter()
            .enumerate()
            .map(|(r, p)| decode_deltas(p, out.deltas(r)).clip(w, h))
            .collect();
        let scores: Vec<f64> = (0..proposals.len()).map(|r| out.score(r)).collect();
        let keep: Vec<usize> = match mode {
            ForwardMode::Train => (0..proposals.len()).collect(),
            ForwardMode::Eval => {
                let candidates: Vec<usize> = (0..proposals.len())
                    .filter(|&r| scores[r] >= self.config.score_threshold && boxes[r].is_valid())
                    .collect();
                let cb: Vec<BBox> = candidates.iter().map(|&r| boxes[r]).collect();
                let cs: Vec<f64> = candidates.iter().map(|&r| scores[r]).collect();
                nms(&cb, &cs, self.config.nms_threshold)
                    .into_iter()
                    .map(|k| candidates[k])
                    .collect()
            }
        };
        DetectionOutput {
            boxes: keep.iter().map(|&r| boxes[r]).collect(),
            scores: keep.iter().map(|&r| scores[r]).collect(),
            embeddings: keep.iter().map(|&r| out.embedding(r)).collect(),
            proposal_index: keep,
        }
    }

    /// Search-branch forward that keeps what backpropagation needs.
    pub fn search_pass(&self, image: &Image, proposals: &[BBox]) -> Result<SearchPass<R>> {
        let x = Self::image_tensor(image)?;
        let (map, backbone) = self.backbone_forward(&x);
        let rois: Vec<Roi> = proposals
            .iter()
            .map(|&bbox| Roi {
                batch_index: 0,
                bbox,
            })
            .collect();
        let (out, head) = self.head_forward(self.pool(&map, &rois));
        let s = map.shape();
        Ok(SearchPass {
            rois,
            feat_shape: [s[0], s[1], s[2], s[3]],
            backbone,
            head,
            out,
        })
    }

    pub fn search_backward(
        &self,
        pass: &SearchPass<R>,
        d_cls: &Array2<R>,
        d_reg: &Array2<R>,
        d_emb: &Array2<R>,
        grads: &mut NetParams<R>,
    ) {
        let d_pooled = self.head_backward(&pass.head, &pass.out, d_cls, d_reg, d_emb, grads);
        let d_feat = roi_align_backward(
            &d_pooled,
            &pass.rois,
            1.0 / FEATURE_STRIDE as f64,
            pass.feat_shape,
            self.config.sampling_ratio,
        );
        self.backbone_backward(d_feat, &pass.backbone, grads);
    }

    /// Instance-branch forward over a `(3, N, h, w)` crop batch.
    pub fn instance_pass(&self, crops: Array4<R>) -> InstancePass<R> {
        let (_, n, ih, iw) = crops.dim();
        let (map, backbone) = self.backbone_forward(&crops);
        let full = BBox::new(0.0, 0.0, iw as f64, ih as f64);
        let rois: Vec<Roi> = (0..n)
            .map(|batch_index| Roi {
                batch_index,
                bbox: full,
            })
            .collect();
        let (out, head) = self.head_forward(self.pool(&map, &rois));
        let s = map.shape();
        InstancePass {
            rois,
            feat_shape: [s[0], s[1], s[2], s[3]],
            backbone,
            head,
            out,
        }
    }

    pub fn instance_backward(&self, pass: &InstancePass<R>, d_emb: &Array2<R>, grads: &mut NetParams<R>) {
        let n = pass.rois.len();
        let d_cls = Array2::zeros((n, 2));
        let d_reg = Array2::zeros((n, 4));
        let d_pooled = self.head_backward(&pass.head, &pass.out, &d_cls, &d_reg, d_emb, grads);
        let d_feat = roi_align_backward(
            &d_pooled,
            &pass.rois,
            1.0 / FEATURE_STRIDE as f64,
            pass.feat_shape,
            self.config.sampling_ratio,
        );
        self.backbone_backward(d_feat, &pass.backbone, grads);
    }
}
