//! Annotation ingestion: COCO JSON and the tab-separated simple manifest.
//!
//! Simple manifest lines are `image_path<TAB>class1,class2<TAB>[mask_path]`.
//! Blank lines and lines starting with `#` are ignored. Relative paths resolve
//! against the manifest's directory. A mask applies to every class on its line
//! and counts as present wherever the mask image is non-zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use spurlens_core::dataset::{ContentHash, Dataset, ImageRecord, Segmentation};
use spurlens_core::mask::{decode_rle, decode_rle_string, PixelMask};

use crate::error::{json_parse_error, Error, Result};

pub fn sha256(bytes: &[u8]) -> ContentHash {
    ContentHash(Sha256::digest(bytes).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    CocoJson,
    SimpleManifest,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco_json" | "coco" => Ok(Format::CocoJson),
            "simple_manifest" | "manifest" => Ok(Format::SimpleManifest),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::CocoJson => "coco_json",
            Format::SimpleManifest => "simple_manifest",
        })
    }
}

/// A parsed dataset plus the locations of its image and mask files.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Digest of the annotation file bytes.
    pub source_digest: ContentHash,
    paths: BTreeMap<String, PathBuf>,
}

impl LoadedDataset {
    pub fn image_path(&self, image_id: &str) -> Result<&Path> {
        self.paths.get(image_id).map(PathBuf::as_path).ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    /// Raw image bytes, checked against the hash recorded at load time.
    pub fn image_bytes(&self, image_id: &str) -> Result<Vec<u8>> {
        let path = self.image_path(image_id)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rec = self.dataset.get(image_id).ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        if sha256(&bytes) != rec.content_hash {
            return Err(Error::Field {
                path: path.to_path_buf(),
                field: "content_hash".into(),
                message: format!("bytes of `{image_id}` changed since load"),
            });
        }
        Ok(bytes)
    }

    /// Union of every segmentation of `class` in the image, including mask
    /// files. `None` when the image has no segmentation for the class.
    pub fn target_mask(&self, image_id: &str, class: &str) -> Result<Option<PixelMask>> {
        let rec = self.dataset.get(image_id).ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let mut out = rec.rasterize_class(class)?;
        for seg in rec.segments.get(class).into_iter().flatten() {
            if let Segmentation::External(p) = seg {
                let m = load_mask_file(Path::new(p), rec.width, rec.height)?;
                match out.as_mut() {
                    Some(acc) => acc.union_with(&m)?,
                    None => out = Some(m),
                }
            }
        }
        Ok(out)
    }
}

/// Non-zero luma pixels are inside the mask.
pub fn load_mask_file(path: &Path, width: usize, height: usize) -> Result<PixelMask> {
    let img = image::open(path)
        .map_err(|e| Error::Field { path: path.into(), field: "mask".into(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (width, height) {
        return Err(Error::Field {
            path: path.into(),
            field: "mask".into(),
            message: format!("mask is {w}x{h}, image is {width}x{height}"),
        });
    }
    let bits = img.pixels().map(|p| p.0[0] != 0).collect();
    Ok(PixelMask::from_bits(w, h, bits)?)
}

pub fn load_annotations(path: &Path, format: Format, images_dir: Option<&Path>) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = images_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let (records, categories, paths) = match format {
        Format::CocoJson => parse_coco(path, &text, &base)?,
        Format::SimpleManifest => parse_manifest(path, &text, &base)?,
    };
    let dataset = Dataset::new(records, categories)?;
    Ok(LoadedDataset { dataset, source_digest: sha256(text.as_bytes()), paths })
}

type Parsed = (Vec<ImageRecord>, Vec<(String, Option<String>)>, BTreeMap<String, PathBuf>);

fn read_image(image_id: &str, path: &Path) -> Result<(Vec<u8>, ContentHash)> {
    let bytes = fs::read(path).map_err(|_| Error::MissingImage { image_id: image_id.into(), path: path.into() })?;
    let hash = sha256(&bytes);
    Ok((bytes, hash))
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: Value,
    category_id: Value,
    #[serde(default)]
    segmentation: Option<Value>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: Value,
    name: String,
    #[serde(default)]
    supercategory: Option<String>,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_coco(path: &Path, text: &str, base: &Path) -> Result<Parsed> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| json_parse_error(path, text, &e))?;
    let field_err = |field: &str, message: String| Error::Field { path: path.into(), field: field.into(), message };

    let mut cat_names = BTreeMap::new();
    let mut categories = Vec::new();
    for c in &file.categories {
        let id = id_string(&c.id).ok_or_else(|| field_err("categories.id", format!("bad id {}", c.id)))?;
        cat_names.insert(id, c.name.clone());
        categories.push((c.name.clone(), c.supercategory.clone().filter(|s| !s.is_empty())));
    }

    let mut records = Vec::with_capacity(file.images.len());
    let mut index = BTreeMap::new();
    let mut paths = BTreeMap::new();
    for img in &file.images {
        let id = id_string(&img.id).ok_or_else(|| field_err("images.id", format!("bad id {}", img.id)))?;
        let p = base.join(&img.file_name);
        let (_, hash) = read_image(&id, &p)?;
        index.insert(id.clone(), records.len());
        paths.insert(id.clone(), p);
        records.push(ImageRecord {
            image_id: id,
            content_ref: img.file_name.clone(),
            content_hash: hash,
            width: img.width,
            height: img.height,
            classes_present: BTreeSet::new(),
            segments: BTreeMap::new(),
        });
    }

    for (i, ann) in file.annotations.iter().enumerate() {
        let img_id = id_string(&ann.image_id)
            .ok_or_else(|| field_err(&format!("annotations[{i}].image_id"), "bad id".into()))?;
        let cat_id = id_string(&ann.category_id)
            .ok_or_else(|| field_err(&format!("annotations[{i}].category_id"), "bad id".into()))?;
        let &ri = index
            .get(&img_id)
            .ok_or_else(|| field_err(&format!("annotations[{i}].image_id"), format!("unknown image `{img_id}`")))?;
        let class = cat_names
            .get(&cat_id)
            .ok_or_else(|| field_err(&format!("annotations[{i}].category_id"), format!("unknown category `{cat_id}`")))?
            .clone();
        let rec = &mut records[ri];
        rec.classes_present.insert(class.clone());
        if let Some(seg) = &ann.segmentation {
            let seg = parse_segmentation(seg, rec.width, rec.height)
                .map_err(|m| field_err(&format!("annotations[{i}].segmentation"), m))?;
            if let Some(seg) = seg {
                rec.segments.entry(class).or_default().push(seg);
            }
        }
    }
    Ok((records, categories, paths))
}

fn parse_segmentation(v: &Value, width: usize, height: usize) -> std::result::Result<Option<Segmentation>, String> {
    match v {
        Value::Null => Ok(None),
        Value::Array(polys) if polys.is_empty() => Ok(None),
        Value::Array(polys) => {
            let mut out = Vec::with_capacity(polys.len());
            for p in polys {
                let coords = p
                    .as_array()
                    .ok_or("polygon is not an array")?
                    .iter()
                    .map(|c| c.as_f64().ok_or("polygon coordinate is not a number"))
                    .collect::<std::result::Result<Vec<f64>, _>>()?;
                out.push(coords);
            }
            Ok(Some(Segmentation::Polygons(out)))
        }
        Value::Object(obj) => {
            if let Some(size) = obj.get("size").and_then(Value::as_array) {
                let dims: Vec<u64> = size.iter().filter_map(Value::as_u64).collect();
                if dims != [height as u64, width as u64] {
                    return Err(format!("RLE size {dims:?} does not match image {height}x{width}"));
                }
            }
            let counts = match obj.get("counts") {
                Some(Value::Array(c)) => c
                    .iter()
                    .map(|n| n.as_u64().ok_or("RLE count is not a non-negative integer"))
                    .collect::<std::result::Result<Vec<u64>, _>>()?,
                Some(Value::String(s)) => decode_rle_string(s).map_err(|e| e.to_string())?,
                _ => return Err("RLE without counts".into()),
            };
            // validate now so that later rasterization cannot fail
            decode_rle(&counts, width, height).map_err(|e| e.to_string())?;
            Ok(Some(Segmentation::Rle(counts)))
        }
        other => Err(format!("unsupported segmentation {other}")),
    }
}

fn parse_manifest(path: &Path, text: &str, base: &Path) -> Result<Parsed> {
    let mut records = Vec::new();
    let mut classes = BTreeSet::new();
    let mut paths = BTreeMap::new();
    let mut offset = 0;
    for (lineno, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            offset: line_start,
            line: lineno + 1,
            column: 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let image_id = fields[0].trim().to_string();
        if image_id.is_empty() {
            return Err(parse_err("empty image path".into()));
        }
        if paths.contains_key(&image_id) {
            return Err(parse_err(format!("duplicate image `{image_id}`")));
        }
        let present: BTreeSet<String> =
            fields[1].split(',').map(str::trim).filter(|c| !c.is_empty()).map(str::to_string).collect();
        let p = base.join(&image_id);
        let (bytes, hash) = read_image(&image_id, &p)?;
        let (width, height) = image::ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| Error::io(&p, e))?
            .into_dimensions()
            .map_err(|e| Error::Field { path: p.clone(), field: "image".into(), message: e.to_string() })?;
        let mut segments = BTreeMap::new();
        if let Some(mask) = fields.get(2).map(|m| m.trim()).filter(|m| !m.is_empty()) {
            let mp = base.join(mask);
            for c in &present {
                segments.insert(c.clone(), vec![Segmentation::External(mp.to_string_lossy().into_owned())]);
            }
        }
        classes.extend(present.iter().cloned());
        paths.insert(image_id.clone(), p);
        records.push(ImageRecord {
            image_id: image_id.clone(),
            content_ref: image_id,
            content_hash: hash,
            width: width as usize,
            height: height as usize,
            classes_present: present,
            segments,
        });
    }
    let categories = classes.into_iter().map(|c| (c, None)).collect();
    Ok((records, categories, paths))
}
