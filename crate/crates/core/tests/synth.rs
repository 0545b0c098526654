mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use common::*;
use dicl_core::error::Error;
use dicl_core::synth::*;
use rand::Rng as _;
use sha2::{Digest, Sha256};

fn default_dataset() -> &'static SynthDataset {
    static DATA: OnceLock<SynthDataset> = OnceLock::new();
    DATA.get_or_init(|| synthesize_dataset(&SynthConfig::default()).unwrap())
}

fn sha256(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn three_hundred_scenes_round_trip_byte_for_byte() {
    let data = default_dataset();
    assert_eq!(data.train.samples.len(), 300);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (train, _) = write_dataset(data, a.path()).unwrap();
    let loaded = read_annotations(&train).unwrap();
    assert_eq!(&loaded, &data.train);

    let rewritten = b.path().join("train.json");
    write_annotations(&loaded, &rewritten).unwrap();
    assert_eq!(sha256(&train), sha256(&rewritten));
    for s in data.train.samples.iter().step_by(37) {
        let rel = format!("images/train_{:06}.png", s.scene_id);
        assert_eq!(sha256(&a.path().join(&rel)), sha256(&b.path().join(&rel)), "{rel}");
    }
}

#[test]
fn smallest_dataset_round_trips() {
    let cfg = SynthConfig {
        num_identities: 2,
        train_scenes: 1,
        test_scenes: 2,
        persons_per_scene: [2, 2],
        seed: 7,
        ..SynthConfig::default()
    };
    let data = synthesize_dataset(&cfg).unwrap();
    assert_eq!((data.train.samples.len(), data.test.samples.len()), (1, 2));
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_dataset(&data, dir.path()).unwrap();
    assert_eq!(read_annotations(&train).unwrap(), data.train);
    assert_eq!(read_annotations(&test).unwrap(), data.test);
}

#[test]
fn inverted_box_is_a_load_error_naming_its_scene() {
    let data = synthesize_dataset(&SynthConfig::smoke()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = write_dataset(&data, dir.path()).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&test).unwrap()).unwrap();
    let victim = &mut doc["samples"][3];
    let scene_id = victim["scene_id"].as_u64().unwrap();
    let x1 = victim["boxes"][0][0].as_f64().unwrap();
    victim["boxes"][0][2] = serde_json::json!(x1 - 1.0);
    fs::write(&test, serde_json::to_string(&doc).unwrap()).unwrap();
    match read_annotations(&test) {
        Err(Error::SceneLoad { scene_id: got, .. }) => assert_eq!(got, scene_id),
        other => panic!("expected a scene load error, got {other:?}"),
    }
}

#[test]
fn occluded_share_tracks_the_occluder_probability() {
    let train = &default_dataset().train;
    let n = train.num_instances();
    let occluded = train.samples.iter().flat_map(|s| &s.occluded).filter(|&&o| o).count();
    let share = occluded as f64 / n as f64;
    assert!(n >= 600, "{n}");
    assert!((0.25..=0.35).contains(&share), "{share} over {n}");
}

#[test]
fn occlusion_flags_match_occluder_geometry() {
    let data = default_dataset();
    for s in data.train.samples.iter().chain(&data.test.samples) {
        assert_eq!(s.recompute_occlusion(), s.occluded);
        for (b, &flag) in s.boxes.iter().zip(&s.occluded) {
            let covered: f64 = s
                .occluders
                .iter()
                .map(|o| {
                    let w = (b.x2.min(o.x2) - b.x1.max(o.x1)).max(0.0);
                    let h = (b.y2.min(o.y2) - b.y1.max(o.y1)).max(0.0);
                    w * h
                })
                .sum();
            let area = (b.x2 - b.x1) * (b.y2 - b.y1);
            assert_eq!(covered >= 0.1 * area, flag, "scene {}", s.scene_id);
        }
    }
}

#[test]
fn scenes_satisfy_their_invariants() {
    let cfg = SynthConfig::default();
    let data = default_dataset();
    let mut ids = HashSet::new();
    let mut heights: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for s in data.train.samples.iter().chain(&data.test.samples) {
        assert!(ids.insert(s.scene_id));
        let (w, h) = (s.image.width() as f64, s.image.height() as f64);
        assert_eq!((s.image.width(), s.image.height()), (cfg.image_width, cfg.image_height));
        assert_eq!(s.boxes.len(), s.true_identity.len());
        let unique: HashSet<_> = s.true_identity.iter().collect();
        assert_eq!(unique.len(), s.true_identity.len(), "scene {}", s.scene_id);
        for (b, &id) in s.boxes.iter().zip(&s.true_identity) {
            assert!(b.x1 < b.x2 && b.y1 < b.y2);
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h);
            assert!(b.width() >= 8.0 && b.height() >= 16.0);
            heights.entry(id).or_default().insert(b.height() as u64);
        }
        for y in 0..s.image.height() {
            for x in 0..s.image.width() {
                assert!(s.image.pixel(y, x).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
    assert_eq!(heights.len(), cfg.num_identities);
    assert!(heights.values().all(|h| h.len() >= 2));
}

#[test]
fn every_query_identity_recurs_in_another_test_scene() {
    let test = &default_dataset().test;
    assert!(!test.query_list.is_empty());
    for q in &test.query_list {
        let id = test.sample(q.scene_id).unwrap().true_identity[q.box_index];
        let elsewhere = test
            .samples
            .iter()
            .any(|s| s.scene_id != q.scene_id && s.true_identity.contains(&id));
        assert!(elsewhere, "query {q:?}");
    }
}

#[test]
fn identities_are_separated_and_nearest_centroid_separable() {
    let cfg = SynthConfig::default();
    let ids = &default_dataset().identities;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    for (i, a) in ids.iter().enumerate() {
        assert_eq!(a.identity_id, i);
        for b in &ids[i + 1..] {
            assert!(dist(&a.appearance_params, &b.appearance_params) >= cfg.min_identity_separation);
        }
    }
    // Points within half the separation of a centre stay nearest to it.
    let mut r = rng(3);
    for a in ids {
        for _ in 0..25 {
            let dir = unit(APPEARANCE_DIM, &mut r);
            let radius = r.gen_range(0.0..0.49) * cfg.min_identity_separation;
            let p: Vec<f64> = a.appearance_params.iter().zip(&dir.0).map(|(c, d)| c + radius * d).collect();
            let nearest = ids
                .iter()
                .min_by(|x, y| dist(&x.appearance_params, &p).total_cmp(&dist(&y.appearance_params, &p)))
                .unwrap();
            assert_eq!(nearest.identity_id, a.identity_id);
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let cfg = SynthConfig::smoke();
    let a = synthesize_dataset(&cfg).unwrap();
    assert_eq!(a, synthesize_dataset(&cfg).unwrap());
    let b = synthesize_dataset(&SynthConfig { seed: cfg.seed + 1, ..cfg }).unwrap();
    assert_ne!(a.identities, b.identities);
    assert_ne!(a.train.samples[0].image, b.train.samples[0].image);
}

#[test]
fn masked_test_images_alter_exactly_the_requested_pixels() {
    let cfg = SynthConfig {
        image_width: 100,
        image_height: 100,
        person_height: [40.0, 60.0],
        persons_per_scene: [2, 3],
        ..SynthConfig::smoke()
    };
    let data = synthesize_dataset(&cfg).unwrap();
    let masked = make_masked_testset(&data.test, 0.2, 5).unwrap();
    assert_eq!(masked, make_masked_testset(&data.test, 0.2, 5).unwrap());
    for (orig, m) in data.test.samples.iter().zip(&masked.samples) {
        assert_eq!((&orig.boxes, &orig.true_identity), (&m.boxes, &m.true_identity));
        let mean = orig.image.channel_mean();
        let mut altered = 0;
        for y in 0..100 {
            for x in 0..100 {
                let (p, q) = (orig.image.pixel(y, x), m.image.pixel(y, x));
                if p != q {
                    altered += 1;
                }
                if q == mean {
                    continue;
                }
                assert_eq!(p, q, "scene {} pixel ({y}, {x}) changed to a non-mean value", orig.scene_id);
            }
        }
        // The mean is off the 8-bit grid, so no stored pixel already equals it.
        assert!((0..100 * 100).all(|k| orig.image.pixel(k / 100, k % 100) != mean));
        assert_eq!(altered, 2000, "scene {}", orig.scene_id);
    }
    assert_eq!(make_masked_testset(&data.test, 1e-5, 5).unwrap(), data.test);
    assert!(matches!(make_masked_testset(&data.train, 0.2, 5), Err(Error::Usage(_))));
}
