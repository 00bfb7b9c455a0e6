//! Image directories: `<root>/real/*` and `<root>/fake/*`, PNG or PNM.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forgenas_core::data::{Dataset, Region, Sample, FAKE, REAL};
use forgenas_core::Tensor;
use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

pub const EXTENSIONS: [&str; 6] = ["png", "ppm", "pgm", "pbm", "pam", "pnm"];
/// Optional region annotations next to `real/` and `fake/`.
pub const REGIONS_FILE: &str = "regions.jsonl";

/// One line of `regions.jsonl`; `file` is relative to the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub file: String,
    pub label: usize,
    pub region: Option<Region>,
    pub width: usize,
    pub height: usize,
}

pub fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sorted image files of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Decode to `[3, size, size]` in `[0, 1]`, resizing with a triangle filter
/// when needed. Returns the original width and height too.
pub fn load_image(path: &Path, size: usize) -> Result<(Tensor, usize, usize)> {
    let img = image::open(path).with_context(|| format!("cannot decode {}", path.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let img = if (w, h) == (size, size) { img } else { imageops::resize(&img, size as u32, size as u32, FilterType::Triangle) };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * size + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok((Tensor::new(vec![3, size, size], data)?, w, h))
}

/// Quantize a `[3, H, W]` image in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = *image.shape() else { bail!("image shape {:?} is not [3, H, W]", image.shape()) };
    if c != 3 {
        bail!("image has {c} channels, expected 3");
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(image)?.save_with_format(path, ImageFormat::Png).with_context(|| format!("cannot write {}", path.display()))
}

fn scale_region(r: Region, w: usize, h: usize, size: usize) -> Option<Region> {
    let sx = |v: usize, up: bool| {
        let t = v * size;
        (if up { t.div_ceil(w) } else { t / w }).min(size)
    };
    let sy = |v: usize, up: bool| {
        let t = v * size;
        (if up { t.div_ceil(h) } else { t / h }).min(size)
    };
    let out = Region { x0: sx(r.x0, false), y0: sy(r.y0, false), x1: sx(r.x1, true), y1: sy(r.y1, true) };
    (out.x0 < out.x1 && out.y0 < out.y1).then_some(out)
}

/// Load every image under `root/real` and `root/fake` in sorted path order.
/// Regions listed in `root/regions.jsonl` are attached to their samples.
pub fn load_directory(root: &Path, size: usize) -> Result<Dataset> {
    let regions: Vec<RegionRecord> =
        if root.join(REGIONS_FILE).is_file() { crate::formats::read_jsonl(&root.join(REGIONS_FILE))? } else { Vec::new() };
    let tag = root.file_name().and_then(|n| n.to_str()).unwrap_or("data").to_string();
    let mut samples = Vec::new();
    for (label, sub) in [(REAL, "real"), (FAKE, "fake")] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            bail!("{} has no `{sub}` subdirectory", root.display());
        }
        for path in list_images(&dir)? {
            let (image, w, h) = load_image(&path, size)?;
            let rel = format!("{sub}/{}", path.file_name().and_then(|n| n.to_str()).unwrap_or_default());
            let region = regions
                .iter()
                .find(|r| r.file == rel && r.label == label)
                .and_then(|r| r.region)
                .and_then(|r| scale_region(r, w, h, size));
            samples.push(Sample::new(image, label, region, tag.clone()).with_context(|| path.display().to_string())?);
        }
    }
    if samples.is_empty() {
        bail!("{} contains no images", root.display());
    }
    Ok(Dataset::new(samples)?)
}

/// Write a dataset in the directory layout `load_directory` reads.
pub fn save_directory(data: &Dataset, root: &Path) -> Result<Vec<RegionRecord>> {
    let mut records = Vec::new();
    let mut counters = [0usize; 2];
    for s in &data.samples {
        let sub = if s.label == FAKE { "fake" } else { "real" };
        let dir = root.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let name = format!("{:05}.png", counters[s.label]);
        counters[s.label] += 1;
        save_png(&s.image, &dir.join(&name))?;
        records.push(RegionRecord { file: format!("{sub}/{name}"), label: s.label, region: s.region, width: s.width(), height: s.height() });
    }
    crate::formats::write_jsonl(&records, &root.join(REGIONS_FILE))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_scale_outward() {
        let r = Region { x0: 3, y0: 0, x1: 5, y1: 8 };
        assert_eq!(scale_region(r, 8, 8, 16), Some(Region { x0: 6, y0: 0, x1: 10, y1: 16 }));
        assert_eq!(scale_region(r, 16, 16, 8), Some(Region { x0: 1, y0: 0, x1: 3, y1: 4 }));
    }

    #[test]
    fn quantization_round_trips_8_bit_values() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| (i * 20) as f64 / 255.0);
        let img = to_rgb8(&t).unwrap();
        assert_eq!(img.get_pixel(1, 0)[0], 20);
        assert_eq!(img.get_pixel(0, 1)[2], 200);
    }
}
