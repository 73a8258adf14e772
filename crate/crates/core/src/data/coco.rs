//! COCO-format annotation files: reading (polygons, uncompressed and
//! compressed RLE) and writing (uncompressed RLE plus PNG images).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::rle::{rle_decode, rle_encode, Rle};
use super::{BBox, ImageSample, InstanceAnnotation, Mask};
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub samples: Vec<ImageSample>,
    pub categories: Vec<(u32, String)>,
    /// Annotations dropped because their box or decoded mask had zero area.
    pub dropped_zero_area: usize,
    /// `iscrowd = 1` annotations, which are not supported.
    pub skipped_crowd: usize,
}

impl CocoDataset {
    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn max_category(&self) -> u32 {
        self.categories.iter().map(|c| c.0).max().unwrap_or(0)
    }
}

#[derive(Debug, Deserialize)]
struct RawImage {
    id: Value,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    id: Option<Value>,
    image_id: Value,
    category_id: u32,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    segmentation: Option<Value>,
    #[serde(default)]
    iscrowd: Option<u8>,
}

#[derive(Debug, Deserialize)]
struct RawCategory {
    id: u32,
    name: String,
}

fn id_key(v: &Value) -> Result<String> {
    match v {
        Value::Number(n) => Ok(n.to_string()),
        Value::String(s) => Ok(s.clone()),
        other => Err(Error::parse(format!("unsupported id value {other}"))),
    }
}

fn required_array<'a>(root: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    root.get(key)
        .ok_or_else(|| Error::parse(format!("missing required key `{key}`")))?
        .as_array()
        .ok_or_else(|| Error::parse(format!("key `{key}` must be an array")))
}

fn parse_entries<T: for<'de> Deserialize<'de>>(items: &[Value], key: &str) -> Result<Vec<T>> {
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            T::deserialize(v).map_err(|e| Error::parse(format!("`{key}[{i}]`: {e}")))
        })
        .collect()
}

/// Loads `annotation_path`; image files are resolved relative to the
/// annotation file's directory, falling back to its `images/` subdirectory.
pub fn load_coco_dataset(annotation_path: &Path) -> Result<CocoDataset> {
    let dir = annotation_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    load_coco_dataset_with(annotation_path, &dir)
}

pub fn load_coco_dataset_with(annotation_path: &Path, image_dir: &Path) -> Result<CocoDataset> {
    let annotation_path = if annotation_path.is_dir() {
        annotation_path.join(ANNOTATION_FILE)
    } else {
        annotation_path.to_path_buf()
    };
    let text = fs::read_to_string(&annotation_path).map_err(|source| Error::Load {
        path: annotation_path.clone(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::parse(format!("malformed JSON: {e}")))?;
    if !root.is_object() {
        return Err(Error::parse("annotation file must contain a JSON object"));
    }
    let images: Vec<RawImage> = parse_entries(required_array(&root, "images")?, "images")?;
    let annotations: Vec<RawAnnotation> = parse_entries(required_array(&root, "annotations")?, "annotations")?;
    let categories: Vec<RawCategory> = parse_entries(required_array(&root, "categories")?, "categories")?;

    let mut index = std::collections::HashMap::new();
    for (i, img) in images.iter().enumerate() {
        if img.height == 0 || img.width == 0 {
            return Err(Error::parse(format!("image {} has zero size", img.file_name)));
        }
        if index.insert(id_key(&img.id)?, i).is_some() {
            return Err(Error::parse(format!("duplicate image id {}", img.id)));
        }
    }
    for c in &categories {
        if c.id == 0 {
            return Err(Error::parse("category ids must be >= 1"));
        }
    }

    let mut per_image: Vec<Vec<InstanceAnnotation>> = vec![Vec::new(); images.len()];
    let mut dropped_zero_area = 0;
    let mut skipped_crowd = 0;
    for (ai, ann) in annotations.iter().enumerate() {
        let key = id_key(&ann.image_id)?;
        let &img_idx = index.get(&key).ok_or_else(|| {
            let aid = ann.id.as_ref().map_or(ai.to_string(), |v| v.to_string());
            Error::parse(format!("annotation {aid} references unknown image_id {key}"))
        })?;
        if ann.iscrowd.unwrap_or(0) == 1 {
            skipped_crowd += 1;
            continue;
        }
        let img = &images[img_idx];
        let (h, w) = (img.height, img.width);
        if let Some([_, _, bw, bh]) = ann.bbox {
            if bw <= 0.0 || bh <= 0.0 {
                dropped_zero_area += 1;
                continue;
            }
        }
        let mask = match &ann.segmentation {
            Some(seg) => decode_segmentation(seg, h, w).map_err(|e| Error::parse(format!("annotation {ai}: {e}")))?,
            None => {
                let [x, y, bw, bh] = ann.bbox.ok_or_else(|| Error::parse(format!("annotation {ai} has neither bbox nor segmentation")))?;
                box_mask(BBox::new(x, y, bw, bh), h, w)
            }
        };
        if mask.area() == 0 {
            dropped_zero_area += 1;
            continue;
        }
        let bbox = match ann.bbox {
            Some([x, y, bw, bh]) => BBox::new(x, y, bw, bh).clip(w as f64, h as f64),
            None => mask.tight_box().expect("nonempty mask"),
        };
        if bbox.area() <= 0.0 {
            dropped_zero_area += 1;
            continue;
        }
        per_image[img_idx].push(InstanceAnnotation {
            category: ann.category_id,
            bbox,
            mask,
        });
    }
    if dropped_zero_area > 0 {
        log::warn!("dropped {dropped_zero_area} zero-area annotations from {}", annotation_path.display());
    }
    if skipped_crowd > 0 {
        log::warn!("skipped {skipped_crowd} crowd annotations from {}", annotation_path.display());
    }

    let samples = images
        .par_iter()
        .zip(per_image.into_par_iter())
        .map(|(img, anns)| {
            let path = resolve_image(image_dir, &img.file_name);
            let (channels, pixels) = read_png(&path, img.height, img.width)?;
            Ok(ImageSample {
                id: id_key(&img.id)?,
                height: img.height,
                width: img.width,
                channels,
                pixels,
                annotations: anns,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CocoDataset {
        samples,
        categories: categories.into_iter().map(|c| (c.id, c.name)).collect(),
        dropped_zero_area,
        skipped_crowd,
    })
}

fn resolve_image(dir: &Path, file_name: &str) -> PathBuf {
    let direct = dir.join(file_name);
    if direct.exists() {
        return direct;
    }
    let nested = dir.join(IMAGE_DIR).join(file_name);
    if nested.exists() {
        nested
    } else {
        direct
    }
}

fn read_png(path: &Path, height: usize, width: usize) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.height() as usize != height || img.width() as usize != width {
        return Err(Error::parse(format!(
            "{} is {}x{}, annotation file says {}x{}",
            path.display(),
            img.height(),
            img.width(),
            height,
            width
        )));
    }
    let n = height * width;
    let is_gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16);
    if is_gray {
        let luma = img.to_luma16();
        Ok((1, luma.as_raw().iter().map(|&v| f32::from(v) / 65535.0).collect()))
    } else {
        let rgb = img.to_rgb16();
        let raw = rgb.as_raw();
        let mut planes = vec![0.0f32; 3 * n];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c * n + i] = f32::from(px[c]) / 65535.0;
            }
        }
        Ok((3, planes))
    }
}

fn box_mask(b: BBox, h: usize, w: usize) -> Mask {
    let mut m = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn decode_segmentation(seg: &Value, h: usize, w: usize) -> Result<Mask> {
    match seg {
        Value::Array(polys) => {
            let polys: Vec<Vec<f64>> =
                serde_json::from_value(Value::Array(polys.clone())).map_err(|e| Error::parse(format!("bad polygon list: {e}")))?;
            Ok(rasterize_polygons(&polys, h, w))
        }
        Value::Object(obj) => {
            let size: [usize; 2] = obj
                .get("size")
                .ok_or_else(|| Error::parse("RLE segmentation missing `size`"))
                .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| Error::parse(format!("bad RLE size: {e}"))))?;
            if size != [h, w] {
                return Err(Error::parse(format!("RLE size {size:?} does not match image {h}x{w}")));
            }
            let counts = match obj.get("counts") {
                Some(Value::String(s)) => decode_compressed_counts(s)?,
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::parse(format!("bad RLE counts: {e}")))?,
                None => return Err(Error::parse("RLE segmentation missing `counts`")),
            };
            rle_decode(&Rle { size, counts })
        }
        other => Err(Error::parse(format!("unsupported segmentation {other}"))),
    }
}

/// Even-odd fill of one or more polygons sampled at pixel centers.
pub fn rasterize_polygons(polys: &[Vec<f64>], h: usize, w: usize) -> Mask {
    let mut m = Mask::zeros(h, w);
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let ys = (y0.floor().max(0.0) as usize)..((y1.ceil().max(0.0) as usize).min(h));
        for y in ys {
            let py = y as f64 + 0.5;
            for x in (x0.floor().max(0.0) as usize)..((x1.ceil().max(0.0) as usize).min(w)) {
                let px = x as f64 + 0.5;
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                if inside {
                    m.set(y, x, true);
                }
            }
        }
    }
    m
}

/// Decodes the pycocotools compressed counts string (6 bits per char,
/// continuation bit 0x20, sign bit 0x10, delta-coded from index 3).
pub fn decode_compressed_counts(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(*bytes.get(p).ok_or_else(|| Error::parse("truncated compressed RLE"))?) - 48;
            if !(0..64).contains(&c) {
                return Err(Error::parse("invalid character in compressed RLE"));
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| Error::parse("negative run in compressed RLE")))
        .collect()
}

#[derive(Serialize)]
struct OutImage<'a> {
    id: usize,
    file_name: String,
    height: usize,
    width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_id: Option<&'a str>,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: usize,
    image_id: usize,
    category_id: u32,
    bbox: [f64; 4],
    segmentation: Rle,
    area: u64,
    iscrowd: u8,
}

#[derive(Serialize)]
struct OutCategory<'a> {
    id: u32,
    name: &'a str,
}

#[derive(Serialize)]
struct OutFile<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory<'a>>,
}

/// Writes `dir/annotations.json` and `dir/images/<n>.png`. Image ids are
/// assigned 1..=N in input order; the original id is kept as `source_id`.
pub fn write_coco_dataset(dir: &Path, samples: &[ImageSample], categories: &[(u32, &str)]) -> Result<PathBuf> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let image_id = i + 1;
        let file_name = format!("{image_id:06}.png");
        write_png(&img_dir.join(&file_name), s)?;
        images.push(OutImage {
            id: image_id,
            file_name,
            height: s.height,
            width: s.width,
            source_id: Some(&s.id),
        });
        for a in &s.annotations {
            let rle = rle_encode(&a.mask)?;
            annotations.push(OutAnnotation {
                id: annotations.len() + 1,
                image_id,
                category_id: a.category,
                bbox: a.bbox.to_array(),
                area: rle.area(),
                segmentation: rle,
                iscrowd: 0,
            });
        }
    }
    let file = OutFile {
        images,
        annotations,
        categories: categories.iter().map(|&(id, name)| OutCategory { id, name }).collect(),
    };
    let path = dir.join(ANNOTATION_FILE);
    fs::write(&path, serde_json::to_vec(&file)?)?;
    Ok(path)
}

fn write_png(path: &Path, s: &ImageSample) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let n = s.height * s.width;
    let err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if s.channels == 3 {
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(to_u8(s.pixels[c * n + i]));
            }
        }
        let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, raw).expect("buffer size");
        img.save(path).map_err(err)
    } else {
        let gray = s.gray();
        let raw = gray.iter().map(|&v| to_u8(v as f32)).collect();
        let img = image::GrayImage::from_raw(s.width as u32, s.height as u32, raw).expect("buffer size");
        img.save(path).map_err(err)
    }
}
