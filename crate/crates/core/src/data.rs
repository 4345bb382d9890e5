//! Image I/O, luma conversion, the bicubic reference downsampler and patch
//! sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub mod synth;

/// An RGB image with channel values in `[0, 1]`, stored planar (R, G, B).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// A single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Invalid(format!(
                "plane of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Drops `border` pixels from every side.
    pub fn crop(&self, border: usize) -> Result<Plane> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::Invalid(format!(
                "cannot crop {border} pixels from a {}x{} plane",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        let mut data = Vec::with_capacity(w * h);
        for y in border..border + h {
            data.extend_from_slice(&self.data[y * self.width + border..][..w]);
        }
        Ok(Plane {
            width: w,
            height: h,
            data,
        })
    }

    pub fn scaled(&self, factor: f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

impl ImageRGB {
    /// Values are clipped into `[0, 1]`.
    pub fn from_planar(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Invalid(format!(
                "RGB image of {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ImageRGB { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::from_planar(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> Plane {
        let n = self.width * self.height;
        Plane {
            width: self.width,
            height: self.height,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageRGB> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        ImageRGB::from_fn(width, height, |c, x, y| self.at(c, x0 + x, y0 + y))
    }

    /// Largest centered crop whose sides are multiples of `multiple`.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<ImageRGB> {
        let w = self.width - self.width % multiple;
        let h = self.height - self.height % multiple;
        if w == 0 || h == 0 {
            return Err(Error::Invalid(format!(
                "{}x{} image is smaller than {multiple}",
                self.width, self.height
            )));
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageRGB {
        ImageRGB {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let shape = Shape::new(1, 3, self.height, self.width).expect("nonempty image");
        Tensor::from_fn(shape, |i| T::from_f64(self.data[i]))
    }

    /// Image `b` of a `[B, 3, H, W]` tensor, clipped into `[0, 1]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, b: usize) -> Result<ImageRGB> {
        let s = t.shape();
        if s.channels() != 3 || b >= s.batch() {
            return Err(Error::shape(
                "image from tensor",
                format!("batch > {b} with 3 channels"),
                s,
            ));
        }
        let n = 3 * s.plane();
        let data = t.data()[b * n..(b + 1) * n].iter().map(|v| v.to_f64()).collect();
        ImageRGB::from_planar(s.width(), s.height(), data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let png_err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "unsupported bit depth {}: only 8-bit images are accepted",
            depth as u8
        )));
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(png_err(format!(
                "unsupported color type {other:?}: expected RGB or gray"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        let row = &buf[y * stride..][..w * channels];
        for x in 0..w {
            for c in 0..3 {
                let byte = if channels == 3 { row[3 * x + c] } else { row[x] };
                data[(c * h + y) * w + x] = byte as f64 / 255.0;
            }
        }
    }
    ImageRGB::from_planar(w, h, data)
}

/// Writes an 8-bit RGB PNG. Values are rounded to the nearest 8-bit level.
pub fn save_png(path: impl AsRef<Path>, img: &ImageRGB) -> Result<()> {
    let path = path.as_ref();
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let (w, h) = (img.width, img.height);
    let mut bytes = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(to_u8(img.at(c, x, y)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// A named image set, sorted by file name.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub names: Vec<String>,
    pub images: Vec<ImageRGB>,
}

impl Corpus {
    pub fn from_images(names: Vec<String>, images: Vec<ImageRGB>) -> Self {
        Corpus { names, images }
    }

    /// Loads every `.png` in `dir`, ordered by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let mut corpus = Corpus::default();
        for p in paths {
            corpus.images.push(load_png(&p)?);
            corpus
                .names
                .push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// BT.601 studio-range luma on the `[0, 1]` scale:
/// `Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(img: &ImageRGB) -> Plane {
    let n = img.width * img.height;
    let (r, g, b) = (&img.data[..n], &img.data[n..2 * n], &img.data[2 * n..]);
    let data = (0..n)
        .map(|i| (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0)
        .collect();
    Plane {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for each output sample of a 1-D
/// antialiased bicubic reduction by an integer factor.
///
/// Output `d` is centered at source coordinate `(d + 0.5) s - 0.5`; the kernel
/// is stretched by `s` and source indices are clamped to the valid range.
pub fn downsample_taps(len: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let s = factor as f64;
    let support = 2.0 * s;
    (0..len / factor)
        .map(|d| {
            let center = (d as f64 + 0.5) * s - 0.5;
            let first = (center - support).floor() as isize + 1;
            let last = (center + support).ceil() as isize - 1;
            let mut taps: Vec<(usize, f64)> = (first..=last)
                .map(|j| {
                    let w = cubic_kernel((j as f64 - center) / s);
                    (j.clamp(0, len as isize - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn resample_plane(src: &[f64], width: usize, height: usize, factor: usize) -> Vec<f64> {
    let cols = downsample_taps(width, factor);
    let rows = downsample_taps(height, factor);
    let (wo, ho) = (width / factor, height / factor);
    // Horizontal pass, then vertical.
    let mut tmp = vec![0.0; wo * height];
    for y in 0..height {
        let line = &src[y * width..][..width];
        for (xo, taps) in cols.iter().enumerate() {
            tmp[y * wo + xo] = taps.iter().map(|&(j, w)| w * line[j]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for (yo, taps) in rows.iter().enumerate() {
        for xo in 0..wo {
            out[yo * wo + xo] = taps.iter().map(|&(j, w)| w * tmp[j * wo + xo]).sum();
        }
    }
    out
}

pub fn bicubic_downsample(img: &ImageRGB, factor: usize) -> Result<ImageRGB> {
    if factor == 0 || !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::Invalid(format!(
            "bicubic_downsample: {}x{} is not divisible by {factor}",
            img.width, img.height
        )));
    }
    let n = img.width * img.height;
    let mut data = Vec::with_capacity(3 * n / (factor * factor));
    for c in 0..3 {
        data.extend(resample_plane(
            &img.data[c * n..(c + 1) * n],
            img.width,
            img.height,
            factor,
        ));
    }
    ImageRGB::from_planar(img.width / factor, img.height / factor, data)
}

/// Plane-wise bicubic reduction of a `[B, C, H, W]` tensor (no clipping).
pub fn bicubic_downsample_tensor<T: Element>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if !s.height().is_multiple_of(factor) || !s.width().is_multiple_of(factor) {
        return Err(Error::shape(
            "bicubic_downsample",
            format!("height and width divisible by {factor}"),
            s,
        ));
    }
    let out_shape = Shape::new(s.batch(), s.channels(), s.height() / factor, s.width() / factor)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in t.data().chunks_exact(s.plane()) {
        let src: Vec<f64> = plane.iter().map(|v| v.to_f64()).collect();
        out.extend(
            resample_plane(&src, s.width(), s.height(), factor)
                .into_iter()
                .map(T::from_f64),
        );
    }
    Tensor::new(out_shape, out)
}

/// HR training crops.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub patches: Tensor<T>,
    pub image_ids: Vec<usize>,
    /// `(x, y)` of each crop's top-left corner.
    pub offsets: Vec<(usize, usize)>,
}

/// Draws `batch` crops of `patch x patch` pixels, each from a uniformly chosen
/// image at a uniformly chosen offset that is a multiple of `scale`. Images
/// smaller than the patch are skipped with a warning.
pub fn random_crop_batch<T: Element, R: Rng + ?Sized>(
    corpus: &[ImageRGB],
    batch: usize,
    patch: usize,
    scale: usize,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("random_crop_batch: empty corpus".into()));
    }
    if patch == 0 || !patch.is_multiple_of(scale) {
        return Err(Error::Invalid(format!(
            "patch size {patch} must be a positive multiple of {scale}"
        )));
    }
    let eligible: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(i, img)| {
            let ok = img.width >= patch && img.height >= patch;
            if !ok {
                log::warn!(
                    "skipping image {i}: {}x{} is smaller than the {patch}x{patch} patch",
                    img.width,
                    img.height
                );
            }
            ok
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Invalid(format!(
            "random_crop_batch: no image is at least {patch}x{patch}"
        )));
    }
    let shape = Shape::new(batch, 3, patch, patch)?;
    let mut data = Vec::with_capacity(shape.numel());
    let mut image_ids = Vec::with_capacity(batch);
    let mut offsets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let id = eligible[rng.random_range(0..eligible.len())];
        let img = &corpus[id];
        let ox = scale * rng.random_range(0..=(img.width - patch) / scale);
        let oy = scale * rng.random_range(0..=(img.height - patch) / scale);
        for c in 0..3 {
            for y in oy..oy + patch {
                let row = &img.data[(c * img.height + y) * img.width + ox..][..patch];
                data.extend(row.iter().map(|&v| T::from_f64(v)));
            }
        }
        image_ids.push(id);
        offsets.push((ox, oy));
    }
    Ok(PatchBatch {
        patches: Tensor::new(shape, data)?,
        image_ids,
        offsets,
    })
}
