//! Color conversion and resolution changes ahead of cost-volume construction.

use crate::autodiff::{ops, Tensor};
use crate::imageio::RawImage;

/// Planar f32 image with one or three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert!(channels == 1 || channels == 3, "channel count must be 1 or 3");
        assert!(width >= 1 && height >= 1, "empty image");
        assert_eq!(data.len(), width * height * channels, "plane size");
        Self { width, height, channels, data }
    }

    pub fn from_plane(width: usize, height: usize, plane: Vec<f32>) -> Self {
        Self::new(width, height, 1, plane)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// A single-channel image holding channel `c`.
    pub fn channel(&self, c: usize) -> PlanarImage {
        Self::from_plane(self.width, self.height, self.plane(c).to_vec())
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Full-range analog BT.601 conversion on values in `[0, 255]`.
pub fn rgb_to_yuv(img: &RawImage) -> PlanarImage {
    let n = img.width() * img.height();
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let [r, g, b] = [px[0] as f32, px[1] as f32, px[2] as f32];
        data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        data[n + i] = -0.169 * r - 0.331 * g + 0.5 * b;
        data[2 * n + i] = 0.5 * r - 0.419 * g - 0.081 * b;
    }
    PlanarImage::new(img.width(), img.height(), 3, data)
}

/// 2×2 box average. Odd trailing rows/columns are edge-replicated first, so
/// the output is `ceil(w/2) × ceil(h/2)`.
pub fn downsample2x(img: &PlanarImage) -> PlanarImage {
    let (w, h) = (img.width, img.height);
    let (wo, ho) = (w.div_ceil(2), h.div_ceil(2));
    let mut data = Vec::with_capacity(wo * ho * img.channels);
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in 0..ho {
            let (y0, y1) = (2 * y, (2 * y + 1).min(h - 1));
            for x in 0..wo {
                let (x0, x1) = (2 * x, (2 * x + 1).min(w - 1));
                let s = p[y0 * w + x0] + p[y0 * w + x1] + p[y1 * w + x0] + p[y1 * w + x1];
                data.push(s * 0.25);
            }
        }
    }
    PlanarImage::new(wo, ho, img.channels, data)
}

/// Records the spatial dims before padding so the inverse crop is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn for_dims(height: usize, width: usize, multiple: usize) -> Self {
        assert!(multiple >= 1);
        Self {
            height,
            width,
            pad_bottom: height.next_multiple_of(multiple) - height,
            pad_right: width.next_multiple_of(multiple) - width,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.height + self.pad_bottom, self.width + self.pad_right)
    }
}

/// Pads the spatial dims of a 4-D tensor up to the next multiple of `m` by
/// replicating the bottom row and right column.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> (Tensor, CropRecord) {
    let [_, _, h, w] = t.shape4().expect("4-D tensor");
    let rec = CropRecord::for_dims(h, w, m);
    let padded = ops::pad_replicate(t, rec.pad_bottom, rec.pad_right).expect("4-D tensor");
    (padded, rec)
}

pub fn crop_to_record(t: &Tensor, rec: &CropRecord) -> Tensor {
    ops::crop(t, rec.height, rec.width).expect("padded tensor is at least the recorded size")
}
