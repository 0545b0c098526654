//! Independent reference implementations shared by the integration tests and
//! the acceptance harness. Nothing here calls into the code it checks.
#![allow(dead_code)]

use dicl_core::assign::MaskPlan;
use dicl_core::embedding::Embedding;
use dicl_core::eval::{PreparedEval, PreparedQuery, QueryEmbedding, SceneDetections};
use dicl_core::geometry::BBox;
use dicl_core::image::Image;
use dicl_core::losses::{ContrastBatch, OimEntry, SearchEntry};
use dicl_core::membank::MemoryBank;
use dicl_core::model::DetectionOutput;
use dicl_core::rng::{rng_for, Rng};
use dicl_core::synth::QueryRef;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    rng_for(seed, &[0xace])
}

pub fn gaussian(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(dim: usize, rng: &mut Rng) -> Embedding {
    Embedding::normalized(gaussian(dim, rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// A batch of at most 12 embeddings (search plus instance) over 2 to 4
/// ground truths, with random assignment, pairing and mask flags, and
/// `num_centroids` random centroids for the memory term.
pub fn random_batch(rng: &mut Rng, dim: usize, num_centroids: usize) -> (ContrastBatch, Vec<Embedding>) {
    let num_gt = rng.gen_range(2..=4);
    let num_search = rng.gen_range(2..=12 - num_gt);
    let instances: Vec<Embedding> = (0..num_gt).map(|_| unit(dim, rng)).collect();
    let mut search: Vec<SearchEntry> = (0..num_search)
        .map(|_| {
            let gt_index = rng.gen_bool(0.85).then(|| rng.gen_range(0..num_gt));
            SearchEntry {
                embedding: unit(dim, rng),
                gt_index,
                siamese: gt_index,
                masked: gt_index.is_some() && rng.gen_bool(0.3),
            }
        })
        .collect();
    search[0].gt_index = Some(0);
    search[0].siamese = Some(0);
    search[1].gt_index = Some(1);
    search[1].siamese = Some(1);
    let oim = (0..num_gt)
        .map(|g| {
            let own: Vec<usize> = (0..num_search).filter(|&i| search[i].gt_index == Some(g)).collect();
            OimEntry {
                search: (!own.is_empty() && rng.gen_bool(0.8)).then(|| own[rng.gen_range(0..own.len())]),
                instance: g,
                label: rng.gen_bool(0.9).then(|| rng.gen_range(0..num_centroids.max(1))),
            }
        })
        .collect();
    let centroids = (0..num_centroids).map(|_| unit(dim, rng)).collect();
    (
        ContrastBatch {
            search,
            instances,
            num_gt,
            oim,
        },
        centroids,
    )
}

/// Mean `1 - cos` over paired predictions whose mask flag equals `masked`.
pub fn consistency_oracle(batch: &ContrastBatch, masked: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for s in &batch.search {
        if let (Some(k), true) = (s.siamese, s.masked == masked) {
            total += 1.0 - cos(s.embedding.as_slice(), batch.instances[k].as_slice());
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Triplet loss by enumerating every (anchor, positive, negative) triple.
pub fn triplet_oracle(batch: &ContrastBatch, margin: f64, clamp: bool) -> f64 {
    let mut labelled: Vec<(Vec<f64>, usize, Option<usize>)> = Vec::new();
    for (i, s) in batch.search.iter().enumerate() {
        if let Some(g) = s.gt_index {
            labelled.push((s.embedding.0.clone(), g, Some(i)));
        }
    }
    let anchors = labelled.len();
    let mut identities: Vec<usize> = labelled.iter().map(|l| l.1).collect();
    identities.sort();
    identities.dedup();
    if identities.len() < 2 {
        return 0.0;
    }
    for g in 0..batch.num_gt {
        labelled.push((batch.instances[g].0.clone(), g, None));
    }
    let mut total = 0.0;
    for a in 0..anchors {
        let (va, ga, _) = &labelled[a];
        let mut worst: Option<f64> = None;
        for p in 0..labelled.len() {
            if p == a || labelled[p].1 != *ga {
                continue;
            }
            for n in 0..labelled.len() {
                if labelled[n].1 == *ga {
                    continue;
                }
                let v = margin + euclid(va, &labelled[p].0) - euclid(va, &labelled[n].0);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            total += if clamp { w.max(0.0) } else { w };
        }
    }
    total / anchors as f64
}

/// Centroid softmax cross-entropy over ground truths with a live label.
pub fn oim_oracle(batch: &ContrastBatch, centroids: &[Embedding], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for o in &batch.oim {
        let Some(label) = o.label.filter(|&l| l < centroids.len()) else {
            continue;
        };
        let mut u = batch.instances[o.instance].0.clone();
        if let Some(s) = o.search {
            for (x, y) in u.iter_mut().zip(&batch.search[s].embedding.0) {
                *x += y;
            }
        }
        let norm = dot(&u, &u).sqrt();
        let f: Vec<f64> = u.iter().map(|x| x / norm).collect();
        let z: f64 = centroids.iter().map(|c| (dot(&f, &c.0) / tau).exp()).sum();
        total += -((dot(&f, &centroids[label].0) / tau).exp() / z).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `f` over every coordinate of every embedding in `batch`.
/// With `h = 1e-5` and losses of order one the differences carry about
/// `1e-11` of rounding error, so coordinates where both sides are below
/// `1e-6` are compared against that floor instead of their own size.
pub fn fd_max_rel_error(
    batch: &ContrastBatch,
    f: impl Fn(&ContrastBatch) -> f64,
    d_search: &ndarray::Array2<f64>,
    d_instances: &ndarray::Array2<f64>,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    };
    for i in 0..batch.search.len() {
        for d in 0..batch.dim() {
            let mut plus = batch.clone();
            plus.search[i].embedding.0[d] += h;
            let mut minus = batch.clone();
            minus.search[i].embedding.0[d] -= h;
            check(d_search[[i, d]], (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    for k in 0..batch.instances.len() {
        for d in 0..batch.dim() {
            let mut plus = batch.clone();
            plus.instances[k].0[d] += h;
            let mut minus = batch.clone();
            minus.instances[k].0[d] -= h;
            check(d_instances[[k, d]], (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    worst
}

/// Average precision by walking the precision-recall curve: at every recall
/// level reached, take the best precision at that recall or beyond, and sum
/// it times the recall increment.
pub fn ap_oracle(ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (k, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in curve.iter().enumerate() {
        if recall > prev_recall {
            let best = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
            area += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    area
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// DBSCAN via union-find over core points. Components are numbered by their
/// lowest core index; a border point takes the lowest-numbered component
/// among its core neighbours.
pub fn dbscan_oracle(dist: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    let n = dist.len();
    let near = |i: usize, j: usize| i == j || dist[i][j] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut number = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            if number[r].is_none() {
                number[r] = Some(next);
                next += 1;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                number[find(&mut parent, i)]
            } else {
                (0..n)
                    .filter(|&j| core[j] && near(i, j))
                    .filter_map(|j| number[find(&mut parent, j)])
                    .min()
            }
        })
        .collect()
}

pub fn cosine_distances(features: &[Embedding]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|a| features.iter().map(|b| 1.0 - cos(&a.0, &b.0)).collect())
        .collect()
}

/// Features scattered around a few random centres, so clusters, borders and
/// noise all occur.
pub fn clustered_features(rng: &mut Rng, n: usize, dim: usize) -> Vec<Embedding> {
    let centres: Vec<Vec<f64>> = (0..rng.gen_range(1..=4)).map(|_| unit(dim, rng).0).collect();
    (0..n)
        .map(|_| {
            let c = &centres[rng.gen_range(0..centres.len())];
            let spread = rng.gen_range(0.05..0.6);
            let v: Vec<f64> = c.iter().zip(gaussian(dim, rng)).map(|(a, g)| a + spread * g / (dim as f64).sqrt()).collect();
            Embedding::normalized(v)
        })
        .collect()
}

/// A bank over `scenes` scenes holding 1 to 4 instances each. Instances of
/// one scene are drawn near a shared centre half of the time, which forces
/// the same-scene repair to act.
pub fn random_bank(rng: &mut Rng, scenes: u64, dim: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(0.2);
    let centres: Vec<Vec<f64>> = (0..4).map(|_| unit(dim, rng).0).collect();
    for scene in 0..scenes {
        let tight = rng.gen_bool(0.5);
        let centre = centres[rng.gen_range(0..centres.len())].clone();
        for b in 0..rng.gen_range(1..=4usize) {
            let spread = if tight { 0.02 } else { 0.4 };
            let v: Vec<f64> = centre
                .iter()
                .zip(gaussian(dim, rng))
                .map(|(a, g)| a + spread * g / (dim as f64).sqrt())
                .collect();
            bank.insert((scene, b), Embedding::normalized(v), 0).unwrap();
        }
    }
    bank
}

/// Bilinear sample of `map[y][x]` as a sum of tent weights, after clamping
/// the point onto the grid; points more than one cell outside read zero.
pub fn bilinear_oracle(map: &[Vec<f64>], y: f64, x: f64) -> f64 {
    let (h, w) = (map.len() as f64, map[0].len() as f64);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return 0.0;
    }
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let mut v = 0.0;
    for (i, row) in map.iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            v += f * (1.0 - (y - i as f64).abs()).max(0.0) * (1.0 - (x - j as f64).abs()).max(0.0);
        }
    }
    v
}

/// Region pooling computed sample by sample: a box edge at pixel `p` lies at
/// grid coordinate `p * scale - 0.5`, and each of the `out_h x out_w` bins
/// averages a `ratio x ratio` lattice of samples at sub-bin centres.
pub fn roi_oracle(
    map: &[Vec<f64>],
    b: [f64; 4],
    scale: f64,
    out_h: usize,
    out_w: usize,
    ratio: usize,
) -> Vec<Vec<f64>> {
    let [x1, y1, x2, y2] = b.map(|v| v * scale - 0.5);
    let (bh, bw) = ((y2 - y1) / out_h as f64, (x2 - x1) / out_w as f64);
    (0..out_h)
        .map(|i| {
            (0..out_w)
                .map(|j| {
                    let mut acc = 0.0;
                    for a in 0..ratio {
                        for c in 0..ratio {
                            let y = y1 + bh * (i as f64 + (a as f64 + 0.5) / ratio as f64);
                            let x = x1 + bw * (j as f64 + (c as f64 + 0.5) / ratio as f64);
                            acc += bilinear_oracle(map, y, x);
                        }
                    }
                    acc / (ratio * ratio) as f64
                })
                .collect()
        })
        .collect()
}

/// Unit vector whose cosine with `[1, 0]` is `sim`.
pub fn at(sim: f64) -> Embedding {
    Embedding::new(vec![sim, (1.0 - sim * sim).max(0.0).sqrt()])
}

pub fn person(slot: usize) -> BBox {
    let x = 40.0 * slot as f64;
    BBox::new(x, 0.0, x + 30.0, 80.0)
}

/// `gts` are `(slot, identity)`; `dets` are `(box, similarity to the query)`.
pub fn scene(scene_id: u64, gts: &[(usize, usize)], dets: &[(BBox, f64)]) -> SceneDetections {
    SceneDetections {
        scene_id,
        gt_boxes: gts.iter().map(|&(s, _)| person(s)).collect(),
        gt_identity: gts.iter().map(|&(_, id)| id).collect(),
        detections: DetectionOutput {
            boxes: dets.iter().map(|d| d.0).collect(),
            scores: vec![0.9; dets.len()],
            embeddings: dets.iter().map(|d| at(d.1)).collect(),
            proposal_index: (0..dets.len()).collect(),
        },
    }
}

/// Query identity 7 sits in scene 0, which also holds a perfect decoy
/// detection that must never be searched.
pub fn single_query(gallery: Vec<SceneDetections>) -> PreparedEval {
    let mut scenes = vec![scene(0, &[(0, 7)], &[(person(0), 1.0)])];
    scenes.extend(gallery);
    PreparedEval {
        scenes,
        queries: vec![PreparedQuery {
            query: QueryRef {
                scene_id: 0,
                box_index: 0,
            },
            identity: 7,
            embedding: QueryEmbedding {
                embedding: at(1.0),
                iou: 1.0,
                fallback: false,
            },
        }],
    }
}

pub struct HandGallery {
    pub name: &'static str,
    pub prepared: PreparedEval,
    pub ap: f64,
    pub top1: bool,
    pub num_gt: usize,
}

/// Galleries small enough to rank by hand, with their AP worked out.
pub fn hand_galleries() -> Vec<HandGallery> {
    let shifted = BBox::new(2.0, 2.0, 32.0, 82.0);
    let loose = BBox::new(0.0, 0.0, 30.0, 30.0);
    assert!(shifted.iou(&person(0)) >= 0.5 && loose.iou(&person(0)) < 0.5);
    let g = |name, gallery, ap, top1, num_gt| HandGallery {
        name,
        prepared: single_query(gallery),
        ap,
        top1,
        num_gt,
    };
    vec![
        // Ranks 1 and 3 are true: (1/1 + 2/3) / 2.
        g(
            "truth at ranks 1 and 3",
            vec![
                scene(1, &[(0, 7)], &[(person(0), 0.9)]),
                scene(2, &[(0, 3)], &[(person(0), 0.8)]),
                scene(3, &[(1, 7)], &[(person(1), 0.7)]),
            ],
            5.0 / 6.0,
            true,
            2,
        ),
        g(
            "single match first",
            vec![
                scene(1, &[(0, 7), (1, 2)], &[(person(0), 0.6), (person(1), 0.1)]),
                scene(2, &[(0, 3)], &[(person(0), -0.4)]),
            ],
            1.0,
            true,
            1,
        ),
        g(
            "single match second",
            vec![scene(1, &[(0, 7), (1, 2)], &[(person(0), 0.2), (person(1), 0.3)])],
            0.5,
            false,
            1,
        ),
        // The weaker duplicate of a matched person is a false positive at rank 2.
        g(
            "duplicate detection",
            vec![
                scene(1, &[(0, 7)], &[(person(0), 0.9), (shifted, 0.85)]),
                scene(2, &[(2, 7)], &[(person(2), 0.8)]),
            ],
            5.0 / 6.0,
            true,
            2,
        ),
        g(
            "poorly localized match",
            vec![scene(1, &[(0, 7)], &[(loose, 0.95), (person(0), 0.6)])],
            0.5,
            false,
            1,
        ),
        g(
            "missed instance",
            vec![
                scene(1, &[(0, 7)], &[(person(0), 0.9)]),
                scene(2, &[(0, 7), (1, 1)], &[(person(1), 0.5)]),
            ],
            0.5,
            true,
            2,
        ),
        // Equal similarity: scene 1 ranks before scene 2.
        g(
            "tie on similarity",
            vec![
                scene(2, &[(0, 7)], &[(person(0), 0.5)]),
                scene(1, &[(0, 4)], &[(person(0), 0.5)]),
            ],
            0.5,
            false,
            1,
        ),
    ]
}

/// Cell `(row, col)` of a box: integer extent by rounding, 14 x 6 equal
/// parts, the remainder in the last row and column.
pub fn cell_oracle(b: &BBox, row: usize, col: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let snap = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    let (x0, y0, x1, y1) = (snap(b.x1, w), snap(b.y1, h), snap(b.x2, w), snap(b.y2, h));
    let (cw, ch) = ((x1 - x0) / 6, (y1 - y0) / 14);
    let left = x0 + col * cw;
    let top = y0 + row * ch;
    let right = if col == 5 { x1 } else { left + cw };
    let bottom = if row == 13 { y1 } else { top + ch };
    (left, top, right, bottom)
}

/// The masked image an independent reading of the plan predicts, and the
/// number of distinct pixels it covers.
pub fn masked_oracle(image: &Image, boxes: &[BBox], plan: &MaskPlan) -> (Image, usize) {
    let (w, h) = (image.width(), image.height());
    let mean = image.channel_mean();
    let mut out = image.clone();
    let mut marked = vec![false; w * h];
    for e in plan.entries.iter().filter(|e| e.apply) {
        for &(row, col) in &e.grid_cells {
            let (x0, y0, x1, y1) = cell_oracle(&boxes[e.gt_index], row, col, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set_pixel(y, x, mean);
                    marked[y * w + x] = true;
                }
            }
        }
    }
    (out, marked.iter().filter(|&&m| m).count())
}
