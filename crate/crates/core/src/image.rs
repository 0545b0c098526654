use std::path::Path;

use ndarray::Array3;

use crate::error::Result;
use crate::geometry::BBox;

/// RGB image with values in `[0, 1]`, stored channel-major as `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        assert_eq!(data.shape()[0], 3, "image must have 3 channels");
        Image { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.data[[0, y, x]],
            self.data[[1, y, x]],
            self.data[[2, y, x]],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[[c, y, x]] = v;
        }
    }

    /// Per-channel mean over the whole image.
    pub fn channel_mean(&self) -> [f64; 3] {
        let n = (self.height() * self.width()) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data.index_axis(ndarray::Axis(0), c).sum() / n;
        }
        out
    }

    /// Snaps every value to the nearest 8-bit level so PNG storage is exact.
    pub fn quantize(&mut self) {
        self.data
            .mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    /// Number of pixels whose RGB value differs between two equally sized images.
    pub fn count_changed_pixels(&self, other: &Image) -> usize {
        assert_eq!(self.data.shape(), other.data.shape());
        let mut n = 0;
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.pixel(y, x) != other.pixel(y, x) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Bilinear crop of `bbox` resampled to `out_h x out_w`.
    pub fn crop_resize(&self, bbox: &BBox, out_h: usize, out_w: usize) -> Image {
        let (h, w) = (self.height(), self.width());
        let sy = bbox.height() / out_h as f64;
        let sx = bbox.width() / out_w as f64;
        let mut out = Array3::zeros((3, out_h, out_w));
        for oy in 0..out_h {
            let fy = (bbox.y1 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ly = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = (bbox.x1 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let lx = fx - x0 as f64;
                for c in 0..3 {
                    let d = &self.data;
                    out[[c, oy, ox]] = (1.0 - ly) * ((1.0 - lx) * d[[c, y0, x0]] + lx * d[[c, y0, x1]])
                        + ly * ((1.0 - lx) * d[[c, y1, x0]] + lx * d[[c, y1, x1]]);
                }
            }
        }
        Image { data: out }
    }

    /// Whole-image bilinear resize.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        let full = BBox::new(0.0, 0.0, self.width() as f64, self.height() as f64);
        self.crop_resize(&full, out_h, out_w)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = ::image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let rgb = self.pixel(y as usize, x as usize);
            *px = ::image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        buf.save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_pixel(y as usize, x as usize, px.0.map(|v| v as f64 / 255.0));
        }
        Ok(out)
    }
}
