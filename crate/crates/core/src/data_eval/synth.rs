//! Seeded synthetic fields: pink-noise tissue with dark irregular "mitoses"
//! and round, smooth look-alikes of similar intensity.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::annotations::{
    AnnotationRecord, DatasetManifest, ManifestEntry, PixelBox, Provenance, Split,
};
use crate::error::{Error, Result};
use crate::imaging::{quantize, save_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    /// Share of images placed in the test split (rounded).
    pub test_fraction: f64,
    /// Inclusive count range of mitoses per image.
    pub mitoses: [usize; 2],
    pub distractors: [usize; 2],
    /// Blob diameter range in pixels.
    pub diameter: [f64; 2],
    pub min_separation: f64,
    /// Minimum distance between any blob pixel and the border.
    pub border: f64,
    pub spacing_um: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 512,
            test_fraction: 0.2,
            mitoses: [3, 8],
            distractors: [3, 8],
            diameter: [8.0, 24.0],
            min_separation: 48.0,
            border: 16.0,
            spacing_um: 0.25,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.size >= 64
            && (0.0..=1.0).contains(&self.test_fraction)
            && self.mitoses[0] <= self.mitoses[1]
            && self.distractors[0] <= self.distractors[1]
            && self.diameter[0] > 0.0
            && self.diameter[0] <= self.diameter[1]
            && self.border >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("inconsistent synthetic dataset spec"))
        }
    }
}

pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<image::RgbImage>,
}

impl SynthDataset {
    /// Writes images and tables in the native layout.
    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root.join("images"))?;
        for (e, img) in self.manifest.entries.iter().zip(&self.images) {
            save_png(img, &root.join(&e.path))?;
        }
        let mut m = self.manifest.clone();
        m.root = root.to_path_buf();
        m.write(root)
    }
}

/// Zero-mean, unit-variance 1/f noise field of `n × n`.
pub fn pink_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let fft2 = |buf: &mut Vec<Complex<f64>>, plan: &std::sync::Arc<dyn rustfft::Fft<f64>>| {
        for row in buf.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            plan.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
    };
    fft2(&mut buf, &fwd);
    for y in 0..n {
        for x in 0..n {
            let fy = y.min(n - y) as f64;
            let fx = x.min(n - x) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            buf[y * n + x] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft2(&mut buf, &inv);
    let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let sd = var.sqrt().max(1e-12);
    vals.into_iter().map(|v| (v - mean) / sd).collect()
}

/// Star-shaped outline `r(θ) = R (1 + Σ a_k cos(kθ + φ_k))`.
#[derive(Clone, Debug)]
pub struct BlobShape {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub harmonics: Vec<(f64, f64)>,
}

impl BlobShape {
    pub fn radius_at(&self, theta: f64) -> f64 {
        let mut s = 1.0;
        for (k, &(a, phi)) in self.harmonics.iter().enumerate() {
            s += a * ((k as f64 + 2.0) * theta + phi).cos();
        }
        self.radius * s
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let d = dx.hypot(dy);
        d < self.radius_at(dy.atan2(dx))
    }

    /// Largest possible extent from the center.
    pub fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>())
    }
}

pub const SUPERSAMPLE: usize = 4;

/// Per-pixel coverage on a `SUPERSAMPLE²` grid plus the sub-sample centroid.
pub struct Rasterized {
    /// `(x, y, coverage)` for pixels with non-zero coverage.
    pub pixels: Vec<(usize, usize, f64)>,
    pub centroid: (f64, f64),
}

pub fn rasterize(shape: &BlobShape, width: usize, height: usize) -> Rasterized {
    let r = shape.max_radius().ceil() as isize + 1;
    let (cx, cy) = (shape.cx.floor() as isize, shape.cy.floor() as isize);
    let mut pixels = Vec::new();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in (cy - r).max(0)..=(cy + r).min(height as isize - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(width as isize - 1) {
            let mut inside = 0;
            for sj in 0..SUPERSAMPLE {
                for si in 0..SUPERSAMPLE {
                    let px = x as f64 + (si as f64 + 0.5) * step;
                    let py = y as f64 + (sj as f64 + 0.5) * step;
                    if shape.contains(px, py) {
                        inside += 1;
                        // Pixel-index convention: pixel (x, y) spans [x, x+1).
                        sx += px - 0.5;
                        sy += py - 0.5;
                        n += 1;
                    }
                }
            }
            if inside > 0 {
                pixels.push((
                    x as usize,
                    y as usize,
                    inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64,
                ));
            }
        }
    }
    let centroid = if n == 0 {
        (shape.cx - 0.5, shape.cy - 0.5)
    } else {
        (sx / n as f64, sy / n as f64)
    };
    Rasterized { pixels, centroid }
}

const MITOSIS_RGB: [f64; 3] = [0.30, 0.13, 0.42];
const DISTRACTOR_RGB: [f64; 3] = [0.33, 0.15, 0.44];
const TISSUE_RGB: [f64; 3] = [0.91, 0.74, 0.85];
const TISSUE_VAR: [f64; 3] = [0.035, 0.055, 0.035];

fn sample_shape<R: Rng>(rng: &mut R, mitosis: bool, cx: f64, cy: f64, d: f64) -> BlobShape {
    let harmonics = (0..4)
        .map(|_| {
            let a = if mitosis {
                rng.random_range(0.06..0.18)
            } else {
                rng.random_range(0.0..0.03)
            };
            (a, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    BlobShape {
        cx,
        cy,
        radius: d / 2.0,
        harmonics,
    }
}

struct Placed {
    shape: BlobShape,
    mitosis: bool,
}

fn place<R: Rng>(rng: &mut R, spec: &SynthSpec, n_mit: usize, n_dis: usize) -> Result<Vec<Placed>> {
    let size = spec.size as f64;
    let mut placed: Vec<Placed> = Vec::new();
    for k in 0..n_mit + n_dis {
        let mitosis = k < n_mit;
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > 20_000 {
                return Err(Error::invalid(
                    "could not place blobs; lower counts or separation",
                ));
            }
            let d = rng.random_range(spec.diameter[0]..=spec.diameter[1]);
            let probe = sample_shape(rng, mitosis, 0.0, 0.0, d);
            let margin = spec.border + probe.max_radius() + 1.0;
            if 2.0 * margin >= size {
                return Err(Error::invalid(
                    "image too small for the blob size and border",
                ));
            }
            let cx = rng.random_range(margin..size - margin);
            let cy = rng.random_range(margin..size - margin);
            if placed
                .iter()
                .any(|p| (p.shape.cx - cx).hypot(p.shape.cy - cy) < spec.min_separation)
            {
                continue;
            }
            placed.push(Placed {
                shape: BlobShape { cx, cy, ..probe },
                mitosis,
            });
            break;
        }
    }
    Ok(placed)
}

/// Renders one field; returns the image and `(mitoses, distractors)` records.
pub fn render_field<R: Rng>(
    rng: &mut R,
    spec: &SynthSpec,
    image_id: &str,
) -> Result<(
    image::RgbImage,
    Vec<AnnotationRecord>,
    Vec<AnnotationRecord>,
)> {
    let n = spec.size;
    let n_mit = rng.random_range(spec.mitoses[0]..=spec.mitoses[1]);
    let n_dis = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
    let noise = [pink_noise(n, rng), pink_noise(n, rng)];
    let mut px: Vec<[f64; 3]> = (0..n * n)
        .map(|i| {
            let (a, b) = (noise[0][i], noise[1][i]);
            [
                TISSUE_RGB[0] + TISSUE_VAR[0] * a,
                TISSUE_RGB[1] + TISSUE_VAR[1] * (0.7 * a + 0.3 * b),
                TISSUE_RGB[2] + TISSUE_VAR[2] * b,
            ]
        })
        .collect();
    let mut mitoses = Vec::new();
    let mut distractors = Vec::new();
    for p in place(rng, spec, n_mit, n_dis)? {
        let raster = rasterize(&p.shape, n, n);
        let base = if p.mitosis {
            MITOSIS_RGB
        } else {
            DISTRACTOR_RGB
        };
        let shade = rng.random_range(0.9..1.1);
        for &(x, y, cov) in &raster.pixels {
            let tex = if p.mitosis {
                // Clumped chromatin: strong per-pixel speckle.
                1.0 + 0.45 * rng.random_range(-1.0..1.0f64)
            } else {
                let r = (x as f64 + 0.5 - p.shape.cx).hypot(y as f64 + 0.5 - p.shape.cy)
                    / p.shape.radius;
                1.0 + 0.08 * r.min(1.0)
            };
            let alpha = 0.95 * cov;
            let v = &mut px[y * n + x];
            for c in 0..3 {
                v[c] = v[c] * (1.0 - alpha) + (base[c] * shade * tex) * alpha;
            }
        }
        let mask: Vec<(usize, usize)> = raster
            .pixels
            .iter()
            .filter(|p| p.2 >= 0.5)
            .map(|p| (p.0, p.1))
            .collect();
        let (cx, cy) = raster.centroid;
        let bbox = if mask.is_empty() {
            PixelBox::new(cx.round(), cy.round(), cx.round(), cy.round())
        } else {
            let xs = mask.iter().map(|p| p.0 as f64);
            let ys = mask.iter().map(|p| p.1 as f64);
            PixelBox::new(
                xs.clone().fold(f64::INFINITY, f64::min),
                ys.clone().fold(f64::INFINITY, f64::min),
                xs.fold(f64::NEG_INFINITY, f64::max),
                ys.fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let rec = AnnotationRecord {
            image_id: image_id.to_string(),
            centroid: (round4(cx), round4(cy)),
            bbox: Some(bbox),
            mask: None,
        };
        if p.mitosis {
            mitoses.push(rec);
        } else {
            distractors.push(rec);
        }
    }
    let img = image::RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let v = px[y as usize * n + x as usize];
        image::Rgb([
            quantize(v[0] as f32),
            quantize(v[1] as f32),
            quantize(v[2] as f32),
        ])
    });
    Ok((img, mitoses, distractors))
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Deterministic dataset; image `i` draws from its own stream of `seed`.
pub fn synthesize_dataset(seed: u64, n_images: usize, spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let n_test = (n_images as f64 * spec.test_fraction).round() as usize;
    let mut manifest = DatasetManifest::default();
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let id = format!("syn_{i:04}");
        let (img, mit, dis) = render_field(&mut rng, spec, &id)?;
        manifest.entries.push(ManifestEntry {
            image_id: id.clone(),
            path: PathBuf::from("images").join(format!("{id}.png")),
            split: if i < n_images - n_test {
                Split::Train
            } else {
                Split::Test
            },
            spacing_um: spec.spacing_um,
            patient: None,
            provenance: Provenance::Synthetic,
        });
        manifest.annotations.extend(mit);
        manifest.distractors.extend(dis);
        images.push(img);
    }
    Ok(SynthDataset { manifest, images })
}
