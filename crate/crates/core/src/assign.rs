//! IoU assignment of predictions to ground truths, and grid masking of
//! person boxes.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::image::Image;
use crate::rng::{rng_for, stream};

pub const GRID_ROWS: usize = 14;
pub const GRID_COLS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignedPrediction {
    pub pred_index: usize,
    pub gt_index: Option<usize>,
    pub iou: f64,
    pub masked: bool,
}

/// Assigns each prediction to its highest-IoU ground truth when that IoU
/// reaches `threshold`. Ties go to the lower ground-truth index.
pub fn assign(predicted: &[BBox], gt: &[BBox], threshold: f64) -> Vec<AssignedPrediction> {
    predicted
        .iter()
        .enumerate()
        .map(|(pred_index, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in gt.iter().enumerate() {
                let iou = p.iou(b);
                if best.map_or(true, |(_, v)| iou > v) {
                    best = Some((g, iou));
                }
            }
            let (gt_index, iou) = match best {
                Some((g, v)) if v >= threshold => (Some(g), v),
                Some((_, v)) => (None, v),
                None => (None, 0.0),
            };
            AssignedPrediction {
                pred_index,
                gt_index,
                iou,
                masked: false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub gt_index: usize,
    pub apply: bool,
    /// `(row, col)` cells of the 14x6 grid.
    pub grid_cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskPlan {
    pub entries: Vec<MaskEntry>,
}

impl MaskPlan {
    pub fn is_applied(&self, gt_index: usize) -> bool {
        self.entries
            .iter()
            .any(|e| e.gt_index == gt_index && e.apply && !e.grid_cells.is_empty())
    }

    pub fn num_applied(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.apply && !e.grid_cells.is_empty())
            .count()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// Per person: apply with probability `prob`, then pick `k ~ U{1..max_cells}`
/// distinct grid cells. With `max_cells == 0` nothing is ever applied.
pub fn plan_masks(gt_boxes: &[BBox], prob: f64, max_cells: usize, seed: u64) -> MaskPlan {
    let mut rng = rng_for(seed, &[stream::MASK_PLAN]);
    let entries = (0..gt_boxes.len())
        .map(|gt_index| {
            let apply = rng.gen_bool(prob.clamp(0.0, 1.0)) && max_cells > 0;
            let grid_cells = if apply {
                let k = rng.gen_range(1..=max_cells.min(GRID_ROWS * GRID_COLS));
                sample(&mut rng, GRID_ROWS * GRID_COLS, k)
                    .into_iter()
                    .map(|c| (c / GRID_COLS, c % GRID_COLS))
                    .collect()
            } else {
                Vec::new()
            };
            MaskEntry {
                gt_index,
                apply,
                grid_cells,
            }
        })
        .collect();
    MaskPlan { entries }
}

/// Integer pixel extent of a box: `[start, end)` on each axis, inside the image.
pub fn pixel_extent(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let c = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    (c(b.x1, width), c(b.y1, height), c(b.x2, width), c(b.y2, height))
}

/// Pixel rectangle `(x0, y0, x1, y1)` (half-open) of one grid cell. The box
/// is split into 14 rows and 6 columns of equal integer size; leftover pixels
/// go to the last row and column.
pub fn cell_rect(b: &BBox, row: usize, col: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (bx0, by0, bx1, by1) = pixel_extent(b, width, height);
    let (cw, ch) = ((bx1 - bx0) / GRID_COLS, (by1 - by0) / GRID_ROWS);
    let x0 = bx0 + col * cw;
    let y0 = by0 + row * ch;
    let x1 = if col + 1 == GRID_COLS { bx1 } else { x0 + cw };
    let y1 = if row + 1 == GRID_ROWS { by1 } else { y0 + ch };
    (x0, y0, x1, y1)
}

/// Fills every planned cell with the whole image's per-channel mean.
pub fn apply_masks(image: &Image, gt_boxes: &[BBox], plan: &MaskPlan) -> Image {
    let mut out = image.clone();
    if plan.num_applied() == 0 {
        return out;
    }
    let mean = image.channel_mean();
    let (w, h) = (image.width(), image.height());
    for e in plan.entries.iter().filter(|e| e.apply) {
        let b = &gt_boxes[e.gt_index];
        for &(row, col) in &e.grid_cells {
            let (x0, y0, x1, y1) = cell_rect(b, row, col, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set_pixel(y, x, mean);
                }
            }
        }
    }
    out
}
