//! Planar float RGB images and the pixel utilities shared by both stages.

use std::path::Path;

use mitodet_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`.
    pub data: Vec<f32>,
}

/// Anything that can be sampled per pixel.
pub trait PixelSource {
    fn dims(&self) -> (usize, usize);
    fn pixel(&self, c: usize, y: usize, x: usize) -> f32;
}

impl PixelSource for RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

impl PixelSource for image::RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width() as usize, self.height() as usize)
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    }
}

/// Mirror index without repeating the edge (period `2(n-1)`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn from_source(src: &impl PixelSource) -> Self {
        let (w, h) = src.dims();
        Self::from_fn(w, h, |c, y, x| src.pixel(c, y, x))
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| quantize(self.get(c, y as usize, x as usize))))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_source(&load_rgb8(path)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.to_rgb8(), path)
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        resize_bilinear(self, width, height)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb8(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `w × h` window with top-left `(x0, y0)`, reflect-padded outside the source.
pub fn crop_reflect(src: &impl PixelSource, x0: isize, y0: isize, w: usize, h: usize) -> RgbImage {
    let (sw, sh) = src.dims();
    let xs: Vec<usize> = (0..w).map(|x| reflect_index(x0 + x as isize, sw)).collect();
    let ys: Vec<usize> = (0..h).map(|y| reflect_index(y0 + y as isize, sh)).collect();
    RgbImage::from_fn(w, h, |c, y, x| src.pixel(c, ys[y], xs[x]))
}

/// Square crop of `side` centered on `(cx, cy)`; origin `round(c − side/2)`.
pub fn crop_centered(src: &impl PixelSource, cx: f64, cy: f64, side: usize) -> RgbImage {
    let half = side as f64 / 2.0;
    crop_reflect(
        src,
        (cx - half).round() as isize,
        (cy - half).round() as isize,
        side,
        side,
    )
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(src: &RgbImage, width: usize, height: usize) -> RgbImage {
    if src.width == width && src.height == height {
        return src.clone();
    }
    let sx = src.width as f64 / width as f64;
    let sy = src.height as f64 / height as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (f - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sx, src.width)).collect();
    let ys: Vec<_> = (0..height).map(|y| axis(y, sy, src.height)).collect();
    RgbImage::from_fn(width, height, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
        let bot = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Per-channel input normalization applied before every network.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Stacks equally sized images into a normalized `N × 3 × H × W` tensor.
pub fn batch_tensor<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("empty image batch"));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        data.extend(
            img.data
                .iter()
                .map(|&v| T::from_f64_lossy(((v - PIXEL_MEAN) / PIXEL_STD) as f64)),
        );
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}

/// Draws a rectangle outline of `thickness` pixels, clipped to the image.
pub fn draw_rect(
    img: &mut image::RgbImage,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    color: [u8; 3],
    thickness: u32,
) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let clampx = |v: f64| (v.round() as i64).clamp(0, w - 1);
    let clampy = |v: f64| (v.round() as i64).clamp(0, h - 1);
    let (x1, x2, y1, y2) = (clampx(x1), clampx(x2), clampy(y1), clampy(y2));
    let t = thickness as i64;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };
    for k in 0..t {
        for x in x1..=x2 {
            put(x, y1 + k);
            put(x, y2 - k);
        }
        for y in y1..=y2 {
            put(x1 + k, y);
            put(x2 - k, y);
        }
    }
}

/// One of the eight symmetries of the square: bit 0 transposes, bit 1
/// mirrors x, bit 2 mirrors y (applied in that order).
pub fn dihedral_point(t: u8, x: f64, y: f64, side: f64) -> (f64, f64) {
    let (mut x, mut y) = if t & 1 != 0 { (y, x) } else { (x, y) };
    if t & 2 != 0 {
        x = side - x;
    }
    if t & 4 != 0 {
        y = side - y;
    }
    (x, y)
}

/// Applies [`dihedral_point`] to the pixel grid of a square image.
pub fn dihedral_image(img: &RgbImage, t: u8) -> RgbImage {
    assert_eq!(
        img.width, img.height,
        "dihedral transforms need a square image"
    );
    let n = img.width;
    let mut out = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (mut ox, mut oy) = if t & 1 != 0 { (y, x) } else { (x, y) };
            if t & 2 != 0 {
                ox = n - 1 - ox;
            }
            if t & 4 != 0 {
                oy = n - 1 - oy;
            }
            for c in 0..3 {
                out.set(c, oy, ox, img.get(c, y, x));
            }
        }
    }
    out
}
