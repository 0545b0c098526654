use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::geometry::BBox;
use crate::image::Image;
use crate::rng::Rng;

use super::APPEARANCE_DIM;

const SKIN: [f64; 3] = [0.87, 0.72, 0.58];

pub(super) fn fill_rect(image: &mut Image, b: &BBox, color: [f64; 3]) {
    let (y0, y1, x0, x1) = pixel_span(image, b);
    for y in y0..y1 {
        for x in x0..x1 {
            image.set_pixel(y, x, color);
        }
    }
}

fn pixel_span(image: &Image, b: &BBox) -> (usize, usize, usize, usize) {
    let clampi = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    (
        clampi(b.y1, image.height()),
        clampi(b.y2, image.height()),
        clampi(b.x1, image.width()),
        clampi(b.x2, image.width()),
    )
}

pub(super) fn paint_background(image: &mut Image, clutter: usize, rng: &mut Rng) {
    let (h, w) = (image.height(), image.width());
    let top: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let bottom: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        let c = [0, 1, 2].map(|k| 0.6 * ((1.0 - t) * top[k] + t * bottom[k]) + 0.2);
        for x in 0..w {
            image.set_pixel(y, x, c);
        }
    }
    for _ in 0..clutter {
        let bw = rng.gen_range(8.0..(w as f64 / 3.0));
        let bh = rng.gen_range(8.0..(h as f64 / 2.0));
        let x1 = rng.gen_range(0.0..(w as f64 - bw));
        let y1 = rng.gen_range(0.0..(h as f64 - bh));
        let color = [rng.gen(), rng.gen(), rng.gen()];
        fill_rect(image, &BBox::new(x1, y1, x1 + bw, y1 + bh), color);
    }
}

/// Head ellipse, striped torso and two legs inside `b`.
pub(super) fn paint_person(
    image: &mut Image,
    b: &BBox,
    appearance: &[f64; APPEARANCE_DIM],
    brightness: f64,
) {
    let (y0, y1, x0, x1) = pixel_span(image, b);
    let (bh, bw) = ((y1 - y0) as f64, (x1 - x0) as f64);
    let torso = [appearance[0], appearance[1], appearance[2]];
    let legs = [appearance[3], appearance[4], appearance[5]];
    let cycles = 1.0 + 5.0 * appearance[6];
    let contrast = appearance[7];
    let shade = |c: [f64; 3], f: f64| c.map(|v| (v * f * brightness).clamp(0.0, 1.0));

    for y in y0..y1 {
        let ry = (y - y0) as f64 / bh;
        for x in x0..x1 {
            let rx = (x - x0) as f64 / bw;
            let color = if ry < 0.16 {
                let dx = (rx - 0.5) / 0.22;
                let dy = (ry - 0.08) / 0.08;
                (dx * dx + dy * dy <= 1.0).then(|| shade(SKIN, 1.0))
            } else if ry < 0.55 {
                (0.1..0.9).contains(&rx).then(|| {
                    let t = (ry - 0.16) / 0.39;
                    let stripe =
                        0.5 + 0.5 * (2.0 * std::f64::consts::PI * cycles * t).sin();
                    shade(torso, 1.0 - 0.6 * contrast * stripe)
                })
            } else {
                ((0.15..0.47).contains(&rx) || (0.53..0.85).contains(&rx))
                    .then(|| shade(legs, 1.0))
            };
            if let Some(c) = color {
                image.set_pixel(y, x, c);
            }
        }
    }
}

/// A band covering `coverage` of the box: bottom, left or right side.
pub(super) fn occluder_band(b: &BBox, coverage: f64, rng: &mut Rng) -> BBox {
    match rng.gen_range(0..3) {
        0 => {
            let bh = (b.height() * coverage).round().max(1.0);
            BBox::new(b.x1, b.y2 - bh, b.x2, b.y2)
        }
        1 => {
            let bw = (b.width() * coverage).round().max(1.0);
            BBox::new(b.x1, b.y1, b.x1 + bw, b.y2)
        }
        _ => {
            let bw = (b.width() * coverage).round().max(1.0);
            BBox::new(b.x2 - bw, b.y1, b.x2, b.y2)
        }
    }
}

pub(super) fn add_noise(image: &mut Image, std: f64, rng: &mut Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    image
        .data
        .iter_mut()
        .for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
}
