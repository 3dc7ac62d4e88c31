use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;
use crate::atomic::write_atomic;

/// Decodes an 8/16-bit grayscale or RGB PNG (alpha dropped) into `[C, H, W]`
/// with pixels scaled from `[0, 255]` to `[−1, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let fail = |m: String| Error::file(path, m);
    let file = File::open(path).map_err(|e| fail(e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| fail(format!("cannot decode PNG: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(format!("cannot decode PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(fail("unexpanded palette image".into())),
    };
    let line = info.line_size;
    let data = Tensor::from_fn([channels, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (y, x) = (p / w, p % w);
        buf[y * line + x * stride + c] as f32 / 127.5 - 1.0
    });
    Ok(data)
}

/// Quantizes `[C, H, W]` values in `[−1, 1]` to 8-bit PNG bytes (C ∈ {1, 3}).
pub fn image_tensor_to_png(t: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("PNG export expects [C, H, W], got {:?}", t.shape())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Shape(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    let mut pixels = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = t.data()[ch * h * w + p];
            let v = if v.is_finite() { v } else { 0.0 };
            pixels[p * c + ch] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(out)
}

/// Atomically writes `[C, H, W]` in `[−1, 1]` as an 8-bit PNG.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &image_tensor_to_png(t)?)
}

/// Tiles `[C, H, W]` images into a near-square grid and saves it.
pub fn save_png_grid(images: &[Tensor], path: impl AsRef<Path>) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::Data("no images to tile".into()))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::Shape(format!("grid expects [C, H, W] tiles, got {:?}", first.shape())));
    };
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![-1.0f32; c * gh * gw];
    for (k, img) in images.iter().enumerate() {
        img.expect_same_shape(first)?;
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * gh * gw + (r0 + y) * gw + c0 + x] = img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    save_png(&Tensor::from_fn([c, gh, gw], |i| data[i]), path)
}

/// Bilinear resize of `[C, H, W]` to `[C, size, size]`.
pub fn resize_image(t: &Tensor, size: usize) -> Result<Tensor> {
    resize_image_to(t, size, size)
}

/// Bilinear resize of `[C, H, W]` to `[C, height, width]`.
pub fn resize_image_to(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("resize expects [C, H, W], got {:?}", t.shape())));
    };
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let out = kernels::resize_bilinear(t.data(), c, (h, w), (height, width));
    Tensor::new([c, height, width], out)
}

/// Grayscale ↔ RGB: replicate the single channel or average the three.
pub fn convert_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", t.shape())));
    };
    let plane = h * w;
    match (c, channels) {
        (a, b) if a == b => Ok(t.clone()),
        (1, 3) => Ok(Tensor::from_fn([3, h, w], |i| t.data()[i % plane])),
        (3, 1) => Ok(Tensor::from_fn([1, h, w], |p| {
            (t.data()[p] + t.data()[plane + p] + t.data()[2 * plane + p]) / 3.0
        })),
        _ => Err(Error::Shape(format!("cannot convert {c} channels to {channels}"))),
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_resized(path: &Path, resize: usize) -> Result<Tensor> {
    resize_image(&load_png(path)?, resize).map_err(|e| Error::file(path, e.to_string()))
}

/// Loads `<root>/train/good/*.png` and `<root>/test/<class>/*.png`; test
/// images are anomalous unless `<class>` is `good`.
pub fn load_image_dir(root: impl AsRef<Path>, resize: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let root = root.as_ref();
    if resize == 0 {
        return Err(Error::InvalidArgument("resize must be positive".into()));
    }
    let good = root.join("train").join("good");
    if !good.is_dir() {
        return Err(Error::file(&good, "missing train/good directory"));
    }
    let train = png_files(&good)?
        .iter()
        .map(|p| Ok(Sample::image(format!("train/good/{}", file_name(p)), load_resized(p, resize)?, 0)))
        .collect::<Result<Vec<_>>>()?;

    let mut test = Vec::new();
    let test_dir = root.join("test");
    if test_dir.is_dir() {
        let mut classes: Vec<PathBuf> = fs::read_dir(&test_dir)
            .map_err(|e| Error::file(&test_dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        for class in classes {
            let name = file_name(&class);
            let label = u8::from(name != "good");
            for p in png_files(&class)? {
                test.push(Sample::image(format!("test/{name}/{}", file_name(&p)), load_resized(&p, resize)?, label));
            }
        }
    }
    if test.is_empty() {
        log::warn!("no test images under {}", test_dir.display());
    }
    Ok((train, test))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
