//! PNG in/out, preprocessing into network input space, renders of optimized
//! inputs and feature maps, and the synthetic color probe.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, Normalization};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("ImageBuffer::new", "width and height must be at least 1"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(
                "ImageBuffer::new",
                format!("{} pixels for a {width}x{height} image", pixels.len()),
            ));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0).collect();
        ImageBuffer::new(w as usize, h as usize, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Channel-major `[3, H, W]` values scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor<f64> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("shape matches")
    }
}

/// Bilinear resample of a `[C, H, W]` tensor using pixel-center alignment
/// (source coordinate `(dst + 0.5) * src/dst - 0.5`, clamped to the edge).
pub fn resize_bilinear(src: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = src.dims3("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "target size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let data = src.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &data[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Applies `(v - mean) / std` per channel to a `[3, H, W]` tensor of `[0, 1]` values.
pub fn normalize<T: Real>(unit: &Tensor<f64>, norm: &Normalization) -> Tensor<T> {
    let plane = unit.shape()[1] * unit.shape()[2];
    let data = unit
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::of((v - norm.mean[c]) / norm.std[c])
        })
        .collect();
    Tensor::new(unit.shape().to_vec(), data).expect("shape preserved")
}

/// Resizes to the network input size, scales to `[0, 1]` and normalizes.
pub fn preprocess<T: Real>(img: &ImageBuffer, net: &NetworkSpec<T>) -> Result<Tensor<T>> {
    let [c, h, w] = net.input_shape();
    if c != 3 {
        return Err(Error::shape(
            "preprocess",
            format!("channel axis: images are RGB but network expects {c} channels"),
        ));
    }
    let unit = resize_bilinear(&img.to_unit_tensor(), h, w)?;
    Ok(normalize(&unit, net.normalization()))
}

pub fn load_and_preprocess<T: Real>(path: &Path, net: &NetworkSpec<T>) -> Result<Tensor<T>> {
    preprocess(&ImageBuffer::load(path)?, net)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps a network-space tensor back to pixels. With `contrast_stretch`, the
/// tensor's own `[min, max]` is first mapped linearly onto `[0, 1]` (a
/// constant tensor becomes mid-gray); otherwise values are de-normalized
/// with the network's mean/std. Results are clamped to `[0, 1]` and
/// quantized to 8 bits.
pub fn to_image<T: Real>(x: &Tensor<T>, norm: &Normalization, contrast_stretch: bool) -> Result<ImageBuffer> {
    let (c, h, w) = x.dims3("to_image")?;
    if c != 3 {
        return Err(Error::shape("to_image", format!("channel axis: expected 3, got {c}")));
    }
    let plane = h * w;
    let d = x.data();
    let (lo, hi) = (x.min().as_f64(), x.max().as_f64());
    let value = |i: usize| -> f64 {
        let v = d[i].as_f64();
        if contrast_stretch {
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        } else {
            let ch = i / plane;
            v * norm.std[ch] + norm.mean[ch]
        }
    };
    let pixels = (0..plane)
        .map(|i| [quantize(value(i)), quantize(value(plane + i)), quantize(value(2 * plane + i))])
        .collect();
    ImageBuffer::new(w, h, pixels)
}

pub fn denormalize_and_save<T: Real>(
    x: &Tensor<T>,
    net: &NetworkSpec<T>,
    path: &Path,
    contrast_stretch: bool,
) -> Result<()> {
    if x.shape() != net.input_shape() {
        return Err(Error::shape(
            "denormalize_and_save",
            format!("tensor {:?} vs network input {:?}", x.shape(), net.input_shape()),
        ));
    }
    to_image(x, net.normalization(), contrast_stretch)?.save(path)
}

/// Grayscale bytes for an `[H, W]` map: `[0, max(f, eps)]` → `[0, 255]`.
pub fn feature_map_gray<T: Real>(f: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match f.shape()[..] {
        [h, w] if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::shape(
                "render_feature_map",
                format!("expected a nonempty [H,W] map, got {:?}", f.shape()),
            ))
        }
    };
    let top = f.max().as_f64().max(1e-12);
    let bytes = f.data().iter().map(|v| quantize(v.as_f64() / top)).collect();
    Ok((h, w, bytes))
}

pub fn render_feature_map<T: Real>(f: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w, bytes) = feature_map_gray(f)?;
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("length matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// HSV → RGB with `h` in degrees `[0, 360)`, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Square all-color probe: hue `360·x/size` along x, value from 1.0 (top)
/// down to 0.2 (bottom), saturation 1.
pub fn generate_color_probe(size: usize) -> Result<ImageBuffer> {
    if size < 16 {
        return Err(Error::Config(format!("probe size {size} is below the minimum of 16")));
    }
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        let v = 1.0 - 0.8 * y as f64 / (size - 1) as f64;
        for x in 0..size {
            let h = 360.0 * x as f64 / size as f64;
            let rgb = hsv_to_rgb(h, 1.0, v);
            pixels.push([quantize(rgb[0]), quantize(rgb[1]), quantize(rgb[2])]);
        }
    }
    ImageBuffer::new(size, size, pixels)
}

/// The color probe blended half and half with seeded uniform pixel noise.
pub fn generate_noise_probe(size: usize, seed: u64) -> Result<ImageBuffer> {
    let probe = generate_color_probe(size)?;
    let mut rng = SplitMix64::new(seed);
    let pixels = probe
        .pixels()
        .iter()
        .map(|px| px.map(|v| quantize(0.5 * v as f64 / 255.0 + 0.5 * rng.next_f64())))
        .collect();
    ImageBuffer::new(size, size, pixels)
}
