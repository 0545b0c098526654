//! Deterministic synthetic person-search scenes.
//!
//! Each identity owns a color/texture signature; persons are rendered as
//! clothed-figure rectangles (head, striped torso, two legs) over cluttered
//! backgrounds, at varying scales and with optional occluder bands. Every
//! scene is a pure function of `(seed, scene_id)`, so generation can run in
//! parallel without changing a single pixel.

mod annotations;
mod masked;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::rng::{rng_for, stream};

pub use annotations::{read_annotations, write_annotations, write_dataset};
pub use masked::{make_masked_testset, make_masked_testset_with, PixelMaskPattern};

/// Length of an identity's appearance signature:
/// torso RGB, legs RGB, stripe frequency, stripe contrast.
pub const APPEARANCE_DIM: usize = 8;

/// An occluder counts as occluding a person once it covers this share of the box.
pub const OCCLUSION_AREA_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Inclusive range of persons per scene (clipped to `num_identities`).
    pub persons_per_scene: [usize; 2],
    /// Person box height range in pixels.
    pub person_height: [f64; 2],
    /// Box width as a fraction of its height.
    pub aspect_ratio: [f64; 2],
    pub occluder_prob: f64,
    /// Fraction of the box covered by an occluder band.
    pub occluder_coverage: [f64; 2],
    pub min_box_height: f64,
    pub min_box_width: f64,
    pub min_identity_separation: f64,
    pub clutter_shapes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 40,
            train_scenes: 300,
            test_scenes: 100,
            image_width: 320,
            image_height: 192,
            persons_per_scene: [2, 4],
            person_height: [64.0, 160.0],
            aspect_ratio: [0.35, 0.45],
            occluder_prob: 0.3,
            occluder_coverage: [0.2, 0.4],
            min_box_height: 16.0,
            min_box_width: 8.0,
            min_identity_separation: 0.35,
            clutter_shapes: 10,
            noise_std: 0.03,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_identities < 2 {
            return Err(Error::config("num_identities", "must be at least 2"));
        }
        if self.train_scenes < 1 {
            return Err(Error::config("train_scenes", "must be at least 1"));
        }
        if self.test_scenes < 1 {
            return Err(Error::config("test_scenes", "must be at least 1"));
        }
        if self.image_width < 32 || self.image_height < 32 {
            return Err(Error::config("image_width", "images must be at least 32x32"));
        }
        let [pmin, pmax] = self.persons_per_scene;
        if pmin < 1 || pmin > pmax {
            return Err(Error::config("persons_per_scene", "need 1 <= min <= max"));
        }
        let [hmin, hmax] = self.person_height;
        let [amin, amax] = self.aspect_ratio;
        if !(hmin > 0.0 && hmin <= hmax) {
            return Err(Error::config("person_height", "need 0 < min <= max"));
        }
        if !(amin > 0.0 && amin <= amax) {
            return Err(Error::config("aspect_ratio", "need 0 < min <= max"));
        }
        if hmin < self.min_box_height {
            return Err(Error::config(
                "person_height",
                format!(
                    "minimum height {hmin} is below the minimum box height {}",
                    self.min_box_height
                ),
            ));
        }
        if (hmin * amin).round() < self.min_box_width {
            return Err(Error::config(
                "person_height",
                format!(
                    "smallest box width {} is below the minimum box width {}",
                    (hmin * amin).round(),
                    self.min_box_width
                ),
            ));
        }
        if hmax > self.image_height as f64 {
            return Err(Error::config("person_height", "maximum exceeds image height"));
        }
        let widest = (hmax * amax).round() as usize;
        if pmax.min(self.num_identities) * widest > self.image_width {
            return Err(Error::config(
                "persons_per_scene",
                "the widest persons cannot fit side by side in the image",
            ));
        }
        if !in_unit(self.occluder_prob) {
            return Err(Error::config("occluder_prob", "must lie in [0, 1]"));
        }
        let [cmin, cmax] = self.occluder_coverage;
        if !(cmin >= OCCLUSION_AREA_FRACTION && cmin <= cmax && cmax < 1.0) {
            return Err(Error::config(
                "occluder_coverage",
                "need 0.1 <= min <= max < 1 so occluders are always flagged",
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        if !(self.min_identity_separation >= 0.0) {
            return Err(Error::config("min_identity_separation", "must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text)
            .map_err(|e| Error::config(crate::trainer::config::toml_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Tiny dataset for smoke runs.
    pub fn smoke() -> Self {
        SynthConfig {
            num_identities: 8,
            train_scenes: 40,
            test_scenes: 20,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: usize,
    pub appearance_params: [f64; APPEARANCE_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One scene image with its person annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub image: Image,
    pub boxes: Vec<BBox>,
    /// Hidden identities; only the synthesizer and the evaluator read these.
    pub true_identity: Vec<usize>,
    /// Whether occluders cover at least 10% of each box.
    pub occluded: Vec<bool>,
    pub occluders: Vec<BBox>,
}

impl SceneSample {
    /// Recomputes the occlusion flags from occluder geometry.
    pub fn recompute_occlusion(&self) -> Vec<bool> {
        occlusion_flags(&self.boxes, &self.occluders)
    }
}

pub(crate) fn occlusion_flags(boxes: &[BBox], occluders: &[BBox]) -> Vec<bool> {
    boxes
        .iter()
        .map(|b| {
            let covered: f64 = occluders.iter().map(|o| o.intersection(b)).sum();
            covered >= OCCLUSION_AREA_FRACTION * b.area()
        })
        .collect()
}

/// `(scene_id, box_index)` designating a query person; serialized as a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(u64, usize)", into = "(u64, usize)")]
pub struct QueryRef {
    pub scene_id: u64,
    pub box_index: usize,
}

impl From<(u64, usize)> for QueryRef {
    fn from((scene_id, box_index): (u64, usize)) -> Self {
        QueryRef { scene_id, box_index }
    }
}

impl From<QueryRef> for (u64, usize) {
    fn from(q: QueryRef) -> Self {
        (q.scene_id, q.box_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<SceneSample>,
    pub query_list: Vec<QueryRef>,
}

impl DatasetManifest {
    pub fn sample(&self, scene_id: u64) -> Option<&SceneSample> {
        self.samples.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn position(&self, scene_id: u64) -> Option<usize> {
        self.samples.iter().position(|s| s.scene_id == scene_id)
    }

    pub fn num_instances(&self) -> usize {
        self.samples.iter().map(|s| s.boxes.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub identities: Vec<IdentitySpec>,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

pub fn synthesize_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let identities = generate_identities(config)?;
    let train = generate_split(config, &identities, Split::Train, 0, config.train_scenes);
    let test_samples = generate_split(
        config,
        &identities,
        Split::Test,
        config.train_scenes as u64,
        config.test_scenes,
    );
    let query_list = select_queries(&test_samples);
    if query_list.is_empty() {
        return Err(Error::config(
            "test_scenes",
            "no identity appears in two test scenes, so there is no valid query",
        ));
    }
    Ok(SynthDataset {
        identities,
        train: DatasetManifest {
            split: Split::Train,
            seed: config.seed,
            samples: train,
            query_list: Vec::new(),
        },
        test: DatasetManifest {
            split: Split::Test,
            seed: config.seed,
            samples: test_samples,
            query_list,
        },
    })
}

/// Rejection-samples appearance signatures with a minimum pairwise distance.
pub fn generate_identities(config: &SynthConfig) -> Result<Vec<IdentitySpec>> {
    const MAX_ATTEMPTS: usize = 100_000;
    let mut rng = rng_for(config.seed, &[stream::IDENTITY]);
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(config.num_identities);
    let mut attempts = 0;
    while out.len() < config.num_identities {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::config(
                "min_identity_separation",
                "could not place enough identities at this separation",
            ));
        }
        let mut p = [0.0; APPEARANCE_DIM];
        p.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.95));
        let far_enough = out.iter().all(|other| {
            let d: f64 = other
                .appearance_params
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d >= config.min_identity_separation
        });
        if far_enough {
            out.push(IdentitySpec {
                identity_id: out.len(),
                appearance_params: p,
            });
        }
    }
    Ok(out)
}

fn generate_split(
    config: &SynthConfig,
    identities: &[IdentitySpec],
    split: Split,
    first_id: u64,
    count: usize,
) -> Vec<SceneSample> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_scene(config, identities, split, first_id + k))
        .collect()
}

fn generate_scene(
    config: &SynthConfig,
    identities: &[IdentitySpec],
    split: Split,
    scene_id: u64,
) -> SceneSample {
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = rng_for(config.seed, &[stream::SCENE, split_tag, scene_id]);
    let (w, h) = (config.image_width, config.image_height);

    let [pmin, pmax] = config.persons_per_scene;
    let pmax = pmax.min(identities.len());
    let pmin = pmin.min(pmax);
    let count = rng.gen_range(pmin..=pmax);
    let ids: Vec<usize> = sample(&mut rng, identities.len(), count).into_vec();

    // Sizes first, then a left-to-right layout with random gaps.
    let sizes: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let ph = rng
                .gen_range(config.person_height[0]..=config.person_height[1])
                .round();
            let aspect = rng.gen_range(config.aspect_ratio[0]..=config.aspect_ratio[1]);
            let pw = (ph * aspect).round().max(config.min_box_width);
            (ph as usize, pw as usize)
        })
        .collect();
    let used: usize = sizes.iter().map(|s| s.1).sum();
    let slack = w - used;
    let weights: Vec<f64> = (0..=count).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut x = 0usize;
    let mut boxes = Vec::with_capacity(count);
    for (k, &(ph, pw)) in sizes.iter().enumerate() {
        x += (slack as f64 * weights[k] / total).floor() as usize;
        let y2 = rng.gen_range(ph..=h);
        boxes.push(BBox::new(x as f64, (y2 - ph) as f64, (x + pw) as f64, y2 as f64));
        x += pw;
    }

    let mut image = Image::zeros(h, w);
    render::paint_background(&mut image, config.clutter_shapes, &mut rng);
    for (b, &id) in boxes.iter().zip(&ids) {
        let brightness = rng.gen_range(0.85..1.15);
        render::paint_person(&mut image, b, &identities[id].appearance_params, brightness);
    }
    let mut occluders = Vec::new();
    for b in &boxes {
        if rng.gen_bool(config.occluder_prob) {
            let coverage = rng.gen_range(config.occluder_coverage[0]..=config.occluder_coverage[1]);
            let o = render::occluder_band(b, coverage, &mut rng);
            let color = [rng.gen(), rng.gen(), rng.gen()];
            render::fill_rect(&mut image, &o, color);
            occluders.push(o);
        }
    }
    render::add_noise(&mut image, config.noise_std, &mut rng);
    image.quantize();

    let occluded = occlusion_flags(&boxes, &occluders);
    SceneSample {
        scene_id,
        image,
        boxes,
        true_identity: ids,
        occluded,
        occluders,
    }
}

/// One query per identity: its first appearance, provided the identity shows
/// up in at least one other test scene.
fn select_queries(samples: &[SceneSample]) -> Vec<QueryRef> {
    let mut scenes_of: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for s in samples {
        for &id in &s.true_identity {
            scenes_of.entry(id).or_default().insert(s.scene_id);
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in samples {
        for (k, &id) in s.true_identity.iter().enumerate() {
            if scenes_of[&id].len() >= 2 && seen.insert(id) {
                out.push(QueryRef {
                    scene_id: s.scene_id,
                    box_index: k,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            num_identities: 2,
            train_scenes: 1,
            test_scenes: 2,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    fn check_scene(cfg: &SynthConfig, s: &SceneSample) {
        let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
        assert_eq!(s.boxes.len(), s.true_identity.len());
        for b in &s.boxes {
            assert!(b.is_valid() && b.within(w, h), "{b:?}");
            assert!(b.height() >= cfg.min_box_height && b.width() >= cfg.min_box_width);
        }
        let uniq: BTreeSet<_> = s.true_identity.iter().collect();
        assert_eq!(uniq.len(), s.true_identity.len());
        assert_eq!(s.occluded, s.recompute_occlusion());
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn smallest_legal_dataset() {
        let cfg = tiny();
        let ds = synthesize_dataset(&cfg).unwrap();
        assert_eq!(ds.train.samples.len(), 1);
        assert_eq!(ds.test.samples.len(), 2);
        for s in ds.train.samples.iter().chain(&ds.test.samples) {
            check_scene(&cfg, s);
        }
        assert!(!ds.test.query_list.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synthesize_dataset(&tiny()).unwrap();
        let b = synthesize_dataset(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&SynthConfig { seed: 8, ..tiny() }).unwrap();
        assert_ne!(a.train.samples[0].image, c.train.samples[0].image);
    }

    #[test]
    fn identities_are_separated_and_reproducible() {
        let cfg = SynthConfig::default();
        let ids = generate_identities(&cfg).unwrap();
        assert_eq!(ids, generate_identities(&cfg).unwrap());
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let d: f64 = a
                    .appearance_params
                    .iter()
                    .zip(&b.appearance_params)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= cfg.min_identity_separation);
            }
        }
        // nearest-centroid on the raw signatures is perfect
        for a in &ids {
            let best = ids
                .iter()
                .min_by(|x, y| {
                    let dx: f64 = x.appearance_params.iter().zip(&a.appearance_params).map(|(p, q)| (p - q).powi(2)).sum();
                    let dy: f64 = y.appearance_params.iter().zip(&a.appearance_params).map(|(p, q)| (p - q).powi(2)).sum();
                    dx.total_cmp(&dy)
                })
                .unwrap();
            assert_eq!(best.identity_id, a.identity_id);
        }
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let cfg = SynthConfig {
            person_height: [10.0, 40.0],
            ..SynthConfig::default()
        };
        match synthesize_dataset(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "person_height"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = SynthConfig {
            num_identities: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synthesize_dataset(&cfg),
            Err(Error::Config { field, .. }) if field == "num_identities"
        ));
        let cfg = SynthConfig {
            occluder_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synthesize_dataset(&cfg),
            Err(Error::Config { field, .. }) if field == "occluder_prob"
        ));
    }

    #[test]
    fn occluded_fraction_tracks_probability() {
        let cfg = SynthConfig {
            num_identities: 40,
            train_scenes: 300,
            test_scenes: 4,
            occluder_prob: 0.3,
            seed: 1,
            ..SynthConfig::default()
        };
        let ds = synthesize_dataset(&cfg).unwrap();
        let flags: Vec<bool> = ds
            .train
            .samples
            .iter()
            .flat_map(|s| s.occluded.iter().copied())
            .collect();
        assert!(flags.len() >= 600);
        let frac = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        assert!((0.25..=0.35).contains(&frac), "occluded fraction {frac}");
        for s in &ds.train.samples {
            check_scene(&cfg, s);
        }
        // every identity seen more than once appears at two or more scales
        let mut heights: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        for s in &ds.train.samples {
            for (b, &id) in s.boxes.iter().zip(&s.true_identity) {
                heights.entry(id).or_default().insert(b.height() as u64);
            }
        }
        assert_eq!(heights.len(), 40);
        assert!(heights.values().all(|h| h.len() >= 2));
    }

    #[test]
    fn queries_have_another_test_scene() {
        let ds = synthesize_dataset(&SynthConfig::smoke()).unwrap();
        for q in &ds.test.query_list {
            let s = ds.test.sample(q.scene_id).unwrap();
            let id = s.true_identity[q.box_index];
            let others = ds
                .test
                .samples
                .iter()
                .filter(|o| o.scene_id != q.scene_id && o.true_identity.contains(&id))
                .count();
            assert!(others >= 1);
        }
    }
}
