use std::path::Path;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored channel-planar (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Nonnegative additive rain layer with the layout of [`Image`].
#[derive(Clone, Debug, PartialEq)]
pub struct RainField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

fn check_len(h: usize, w: usize, len: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    if h * w * CHANNELS != len {
        return Err(invalid(format!(
            "{}x{}x3 image needs {} values, got {}",
            h,
            w,
            h * w * CHANNELS,
            len
        )));
    }
    Ok(())
}

fn crop_planes(
    data: &[f64],
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    ph: usize,
    pw: usize,
) -> Result<Vec<f64>> {
    if ph == 0 || pw == 0 || top + ph > h || left + pw > w {
        return Err(invalid(format!(
            "window {}x{} at ({}, {}) does not fit a {}x{} image",
            ph, pw, top, left, h, w
        )));
    }
    let mut out = Vec::with_capacity(ph * pw * CHANNELS);
    for c in 0..CHANNELS {
        for y in top..top + ph {
            let row = (c * h + y) * w;
            out.extend_from_slice(&data[row + left..row + left + pw]);
        }
    }
    Ok(out)
}

macro_rules! planar_common {
    ($t:ty) => {
        impl $t {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            #[inline]
            pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
                self.data[(c * self.height + y) * self.width + x]
            }

            pub fn same_size<U: HasSize>(&self, other: &U) -> bool {
                (self.height, self.width) == other.size()
            }

            /// `[1, 3, H, W]` tensor view.
            pub fn to_tensor(&self) -> Tensor {
                Tensor::from_vec([1, CHANNELS, self.height, self.width], self.data.clone())
                    .expect("planar layout matches tensor layout")
            }

            /// Exact square sub-window, no resampling.
            pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
                self.crop_rect(top, left, size, size)
            }

            pub fn crop_rect(&self, top: usize, left: usize, ph: usize, pw: usize) -> Result<Self> {
                Ok(Self {
                    height: ph,
                    width: pw,
                    data: crop_planes(&self.data, self.height, self.width, top, left, ph, pw)?,
                })
            }
        }

        impl HasSize for $t {
            fn size(&self) -> (usize, usize) {
                (self.height, self.width)
            }
        }
    };
}

pub trait HasSize {
    fn size(&self) -> (usize, usize);
}

planar_common!(Image);
planar_common!(RainField);

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image::new(height, width, data)
    }

    /// Element `n` of a `[N, 3, H, W]` tensor, clamped into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_tensor_clamped(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != CHANNELS {
            return Err(invalid(format!("expected 3 channels, got {c}")));
        }
        let item = t.item(n);
        if item.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite pixel value"));
        }
        Ok(Image {
            height: h,
            width: w,
            data: item.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// 8-bit quantization as used at the PNG boundary: `round(v * 255) / 255`.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; h * w * CHANNELS];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        Image::new(h, w, data)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..CHANNELS {
                let v = self.get(c, y as usize, x as usize);
                px.0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

impl RainField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("rain value {v} is negative or non-finite")));
        }
        Ok(RainField {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RainField {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    /// Element `n` of a predicted rain tensor, with negative values clipped
    /// to zero and stored at single precision.
    pub fn from_prediction(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != CHANNELS {
            return Err(invalid(format!("expected 3 channels, got {c}")));
        }
        let item = t.item(n);
        if item.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite rain prediction"));
        }
        Ok(RainField {
            height: h,
            width: w,
            data: item.iter().map(|v| v.max(0.0) as f32 as f64).collect(),
        })
    }

    /// Resize to `h x w` by center-cropping larger dimensions and tiling
    /// (wrapping) smaller ones.
    pub fn fit_to(&self, h: usize, w: usize) -> RainField {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let map = |i: usize, src: usize, dst: usize| {
            if src >= dst {
                (src - dst) / 2 + i
            } else {
                i % src
            }
        };
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..h {
                let sy = map(y, self.height, h);
                for x in 0..w {
                    data.push(self.get(c, sy, map(x, self.width, w)));
                }
            }
        }
        RainField {
            height: h,
            width: w,
            data,
        }
    }
}

/// `clamp(clean + streaks, 0, 1)` elementwise.
pub fn composite(clean: &Image, streaks: &RainField) -> Result<Image> {
    if !clean.same_size(streaks) {
        return Err(invalid(format!(
            "composite: image {:?} vs rain layer {:?}",
            clean.size(),
            streaks.size()
        )));
    }
    Ok(Image {
        height: clean.height,
        width: clean.width,
        data: clean
            .data
            .iter()
            .zip(&streaks.data)
            .map(|(b, r)| (b + r).clamp(0.0, 1.0))
            .collect(),
    })
}

/// Exact square sub-window of `img`.
pub fn crop_patch(img: &Image, top: usize, left: usize, size: usize) -> Result<Image> {
    img.crop(top, left, size)
}

/// `max(rainy - clean, 0)`, the ground-truth rain layer of a pair.
pub fn residual_streaks(rainy: &Image, clean: &Image) -> Result<RainField> {
    if !rainy.same_size(clean) {
        return Err(invalid("rainy and clean images differ in size"));
    }
    Ok(RainField {
        height: rainy.height,
        width: rainy.width,
        data: rainy
            .data
            .iter()
            .zip(&clean.data)
            .map(|(o, b)| (o - b).max(0.0))
            .collect(),
    })
}

/// Stack images into a `[N, 3, H, W]` tensor.
pub fn stack_images<'a, I: IntoIterator<Item = &'a Image>>(images: I) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.into_iter().map(Image::to_tensor).collect();
    Tensor::stack(&ts)
}

pub fn stack_fields<'a, I: IntoIterator<Item = &'a RainField>>(fields: I) -> Result<Tensor> {
    let ts: Vec<Tensor> = fields.into_iter().map(RainField::to_tensor).collect();
    Tensor::stack(&ts)
}
