use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

use super::{DatasetManifest, Split};

/// How the pixels of a masked test image are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelMaskPattern {
    /// Pixels drawn uniformly without replacement.
    #[default]
    Uniform,
    /// Whole 8x8 tiles in random order; the last tile may be partial.
    Block,
}

const BLOCK: usize = 8;

/// Replaces exactly `round(pixel_fraction * H * W)` pixels of every test
/// image by that image's per-channel mean.
pub fn make_masked_testset(
    manifest: &DatasetManifest,
    pixel_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    make_masked_testset_with(manifest, pixel_fraction, seed, PixelMaskPattern::Uniform)
}

pub fn make_masked_testset_with(
    manifest: &DatasetManifest,
    pixel_fraction: f64,
    seed: u64,
    pattern: PixelMaskPattern,
) -> Result<DatasetManifest> {
    if manifest.split != Split::Test {
        return Err(Error::Usage(
            "masked sets are evaluation artifacts; refusing to mask the train split".into(),
        ));
    }
    if !(pixel_fraction > 0.0 && pixel_fraction < 1.0) {
        return Err(Error::Input(format!(
            "pixel_fraction must lie in (0, 1), got {pixel_fraction}"
        )));
    }
    let mut out = manifest.clone();
    for s in &mut out.samples {
        let (h, w) = (s.image.height(), s.image.width());
        let count = (pixel_fraction * (h * w) as f64).round() as usize;
        if count == 0 {
            continue;
        }
        let mut rng = rng_for(seed, &[stream::TEST_MASK, s.scene_id]);
        let mean = s.image.channel_mean();
        let pixels: Vec<usize> = match pattern {
            PixelMaskPattern::Uniform => sample(&mut rng, h * w, count).into_vec(),
            PixelMaskPattern::Block => {
                let (th, tw) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
                let mut tiles: Vec<usize> = (0..th * tw).collect();
                tiles.shuffle(&mut rng);
                tiles
                    .into_iter()
                    .flat_map(|t| {
                        let (ty, tx) = (t / tw, t % tw);
                        (ty * BLOCK..((ty + 1) * BLOCK).min(h)).flat_map(move |y| {
                            (tx * BLOCK..((tx + 1) * BLOCK).min(w)).map(move |x| y * w + x)
                        })
                    })
                    .take(count)
                    .collect()
            }
        };
        for p in pixels {
            s.image.set_pixel(p / w, p % w, mean);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::image::Image;
    use crate::synth::SceneSample;

    fn manifest(split: Split) -> DatasetManifest {
        let mut image = Image::zeros(100, 100);
        image
            .data
            .indexed_iter_mut()
            .for_each(|((c, y, x), v)| *v = ((c * 13 + y * 7 + x * 29) % 251) as f64 / 250.0);
        DatasetManifest {
            split,
            seed: 0,
            samples: vec![SceneSample {
                scene_id: 3,
                image,
                boxes: vec![BBox::new(10.0, 10.0, 30.0, 60.0)],
                true_identity: vec![0],
                occluded: vec![false],
                occluders: vec![],
            }],
            query_list: vec![],
        }
    }

    #[test]
    fn twenty_percent_of_a_100x100_image() {
        let m = manifest(Split::Test);
        for pattern in [PixelMaskPattern::Uniform, PixelMaskPattern::Block] {
            let masked = make_masked_testset_with(&m, 0.2, 5, pattern).unwrap();
            let changed = masked.samples[0]
                .image
                .count_changed_pixels(&m.samples[0].image);
            assert_eq!(changed, 2000);
            assert_eq!(masked.samples[0].boxes, m.samples[0].boxes);
            assert_eq!(masked.samples[0].true_identity, m.samples[0].true_identity);
        }
    }

    #[test]
    fn vanishing_fraction_leaves_images_unchanged() {
        let m = manifest(Split::Test);
        let masked = make_masked_testset(&m, 1e-6, 5).unwrap();
        assert_eq!(masked, m);
    }

    #[test]
    fn same_seed_same_mask() {
        let m = manifest(Split::Test);
        let a = make_masked_testset(&m, 0.2, 9).unwrap();
        let b = make_masked_testset(&m, 0.2, 9).unwrap();
        let c = make_masked_testset(&m, 0.2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn train_split_and_bad_fraction_are_rejected() {
        assert!(matches!(
            make_masked_testset(&manifest(Split::Train), 0.2, 0),
            Err(Error::Usage(_))
        ));
        assert!(make_masked_testset(&manifest(Split::Test), 0.0, 0).is_err());
        assert!(make_masked_testset(&manifest(Split::Test), 1.0, 0).is_err());
    }
}
