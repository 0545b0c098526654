//! Proposal generation standing in for a region proposal network: every
//! ground-truth box plus jittered copies, and random background boxes.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub jitter_copies: usize,
    /// Standard deviation of the center/size jitter as a fraction of box size.
    pub jitter_sigma: f64,
    pub background_boxes: usize,
    /// Background boxes overlap every ground truth below this IoU.
    pub background_max_iou: f64,
    /// Keep the exact ground-truth boxes in the evaluation proposal set.
    pub eval_include_gt: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            jitter_copies: 3,
            jitter_sigma: 0.1,
            background_boxes: 4,
            background_max_iou: 0.1,
            eval_include_gt: true,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma < 1.0) {
            return Err(Error::config("proposals.jitter_sigma", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.background_max_iou) {
            return Err(Error::config("proposals.background_max_iou", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalSource {
    GroundTruth(usize),
    Jitter(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub sources: Vec<ProposalSource>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn push(&mut self, b: BBox, s: ProposalSource) {
        self.boxes.push(b);
        self.sources.push(s);
    }

    /// Index of the proposal that is exactly ground truth `gt`.
    pub fn gt_proposal(&self, gt: usize) -> Option<usize> {
        self.sources
            .iter()
            .position(|s| *s == ProposalSource::GroundTruth(gt))
    }
}

const MIN_SIDE: f64 = 4.0;
const MAX_TRIES: usize = 50;

/// A jittered copy of `b`, clipped into the image. Falls back to `b` itself
/// if repeated draws leave a degenerate box.
pub fn jitter_box(b: &BBox, sigma: f64, width: f64, height: f64, rng: &mut Rng) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    for _ in 0..MAX_TRIES {
        let ncx = cx + n.sample(rng) * w;
        let ncy = cy + n.sample(rng) * h;
        let nw = w * (1.0 + n.sample(rng)).max(0.1);
        let nh = h * (1.0 + n.sample(rng)).max(0.1);
        let j = BBox::new(ncx - nw / 2.0, ncy - nh / 2.0, ncx + nw / 2.0, ncy + nh / 2.0)
            .clip(width, height);
        if j.width() >= MIN_SIDE && j.height() >= MIN_SIDE {
            return j;
        }
    }
    *b
}

/// Person-shaped boxes overlapping every ground truth below `max_iou`. May
/// return fewer than `count` boxes in crowded scenes.
pub fn background_boxes(
    gt: &[BBox],
    count: usize,
    max_iou: f64,
    width: f64,
    height: f64,
    rng: &mut Rng,
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(count);
    let (h_lo, h_hi) = ((height / 6.0).max(MIN_SIDE), (height * 0.6).max(MIN_SIDE + 1.0));
    for _ in 0..count {
        for _ in 0..MAX_TRIES {
            let bh = rng.gen_range(h_lo..h_hi).min(height);
            let bw = (bh * rng.gen_range(0.3..0.7)).min(width);
            let x1 = rng.gen_range(0.0..=(width - bw));
            let y1 = rng.gen_range(0.0..=(height - bh));
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if gt.iter().all(|g| g.iou(&b) < max_iou) {
                out.push(b);
                break;
            }
        }
    }
    out
}

/// Training proposals: each ground truth, its jittered copies, then background.
pub fn train_proposals(
    gt: &[BBox],
    width: f64,
    height: f64,
    config: &ProposalConfig,
    rng: &mut Rng,
) -> ProposalSet {
    let mut set = ProposalSet::default();
    for (g, b) in gt.iter().enumerate() {
        set.push(*b, ProposalSource::GroundTruth(g));
        for _ in 0..config.jitter_copies {
            set.push(
                jitter_box(b, config.jitter_sigma, width, height, rng),
                ProposalSource::Jitter(g),
            );
        }
    }
    for b in background_boxes(gt, config.background_boxes, config.background_max_iou, width, height, rng) {
        set.push(b, ProposalSource::Background);
    }
    set
}

/// Evaluation proposals use the same scheme; the classification head decides
/// what survives.
pub fn eval_proposals(
    gt: &[BBox],
    width: f64,
    height: f64,
    config: &ProposalConfig,
    rng: &mut Rng,
) -> ProposalSet {
    let mut set = train_proposals(gt, width, height, config, rng);
    if !config.eval_include_gt {
        let keep: Vec<usize> = (0..set.len())
            .filter(|&i| !matches!(set.sources[i], ProposalSource::GroundTruth(_)))
            .collect();
        set = ProposalSet {
            boxes: keep.iter().map(|&i| set.boxes[i]).collect(),
            sources: keep.iter().map(|&i| set.sources[i]).collect(),
        };
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn counts_bounds_and_background_overlap() {
        let gt = vec![BBox::new(10.0, 20.0, 50.0, 120.0), BBox::new(100.0, 30.0, 140.0, 150.0)];
        let cfg = ProposalConfig::default();
        let mut rng = rng_for(1, &[]);
        let set = train_proposals(&gt, 320.0, 192.0, &cfg, &mut rng);
        assert_eq!(set.len(), 2 * 4 + 4);
        assert_eq!(set.gt_proposal(1), Some(4));
        for (b, s) in set.boxes.iter().zip(&set.sources) {
            assert!(b.within(320.0, 192.0) && b.is_valid());
            if *s == ProposalSource::Background {
                assert!(gt.iter().all(|g| g.iou(b) < 0.1));
            }
        }
    }

    #[test]
    fn jitter_is_mostly_near_the_source() {
        let b = BBox::new(100.0, 40.0, 140.0, 140.0);
        let mut rng = rng_for(2, &[]);
        let ious: Vec<f64> = (0..500)
            .map(|_| jitter_box(&b, 0.1, 320.0, 192.0, &mut rng).iou(&b))
            .collect();
        let above = ious.iter().filter(|&&v| v >= 0.5).count();
        assert!(above > 400, "{above}");
        assert!(ious.iter().any(|&v| v < 0.95));
    }

    #[test]
    fn same_rng_same_proposals() {
        let gt = vec![BBox::new(10.0, 20.0, 50.0, 120.0)];
        let cfg = ProposalConfig::default();
        let a = train_proposals(&gt, 320.0, 192.0, &cfg, &mut rng_for(5, &[]));
        let b = train_proposals(&gt, 320.0, 192.0, &cfg, &mut rng_for(5, &[]));
        assert_eq!(a, b);
    }
}
