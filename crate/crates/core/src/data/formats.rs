use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::category::Category;
use crate::data::image::read_ppm_size;
use crate::data::{check_region, AnnotationRecord, LabeledBox};
use crate::error::DataError;
use crate::geometry::BoxXyxy;

/// Slack allowed when a YOLO box edge lands just outside `[0, 1]` after
/// center/size arithmetic.
const YOLO_EDGE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    Voc,
    Yolo,
    /// Plain txt annotations; same layout as YOLO.
    Txt,
}

impl AnnotationFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationFormat::Voc => "voc",
            AnnotationFormat::Yolo => "yolo",
            AnnotationFormat::Txt => "txt",
        }
    }
}

impl fmt::Display for AnnotationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnotationFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "voc" | "xml" => Ok(AnnotationFormat::Voc),
            "yolo" => Ok(AnnotationFormat::Yolo),
            "txt" => Ok(AnnotationFormat::Txt),
            _ => Err(format!("unknown annotation format {s:?} (expected voc, yolo or txt)")),
        }
    }
}

fn category_from_name(name: &str) -> Result<Category, DataError> {
    match name.trim().to_ascii_lowercase().as_str() {
        "bleeding" => Ok(Category::Bleed),
        "nonbleeding" | "non-bleeding" => Ok(Category::NonBleed),
        _ => Err(DataError::UnknownCategory(name.to_string())),
    }
}

fn voc_name(c: Category) -> &'static str {
    match c {
        Category::Bleed => "bleeding",
        _ => "non-bleeding",
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &'static str) -> Result<roxmltree::Node<'a, 'i>, DataError> {
    node.children()
        .find(|n| n.has_tag_name(tag))
        .ok_or(DataError::MissingElement(tag))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, tag: &'static str) -> Result<&'a str, DataError> {
    Ok(child(node, tag)?.text().unwrap_or("").trim())
}

fn number<T: FromStr>(node: roxmltree::Node<'_, '_>, tag: &'static str) -> Result<T, DataError> {
    let text = child_text(node, tag)?;
    text.parse().map_err(|_| DataError::BadNumber {
        field: tag.to_string(),
        value: text.to_string(),
    })
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses the Pascal-VOC subset: `size/{width,height}` and
/// `object/{name, bndbox/{xmin,ymin,xmax,ymax}}`. The image id is the stem of
/// `filename` and the image path is `path` (or `filename`) when present.
pub fn parse_voc_xml(text: &str) -> Result<AnnotationRecord, DataError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| DataError::Xml(e.to_string()))?;
    let root = doc.root_element();
    let size = child(root, "size")?;
    let width: usize = number(size, "width")?;
    let height: usize = number(size, "height")?;
    let filename = child_text(root, "filename").unwrap_or("");
    let path = child_text(root, "path").unwrap_or(filename);
    let mut regions = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let category = category_from_name(child_text(obj, "name")?)?;
        let bb = child(obj, "bndbox")?;
        let (x_min, y_min, x_max, y_max): (f64, f64, f64, f64) = (
            number(bb, "xmin")?,
            number(bb, "ymin")?,
            number(bb, "xmax")?,
            number(bb, "ymax")?,
        );
        let region = LabeledBox {
            category,
            bbox: BoxXyxy {
                x_min,
                y_min,
                x_max,
                y_max,
                coords: crate::geometry::CoordSystem::Pixels,
            },
        };
        check_region(&region, width, height)?;
        regions.push(region);
    }
    AnnotationRecord::from_regions(file_stem(filename), path, regions, (width, height))
}

/// Writes the VOC subset read by [`parse_voc_xml`]. Coordinates are rounded
/// to whole pixels, keeping every box at least one pixel wide.
pub fn write_voc_xml(rec: &AnnotationRecord) -> String {
    let (w, h) = rec.image_size;
    let file = Path::new(&rec.image_path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| rec.image_id.clone());
    let mut out = String::new();
    out.push_str("<annotation>\n");
    let _ = writeln!(out, "  <filename>{}</filename>", xml_escape(&file));
    let _ = writeln!(out, "  <path>{}</path>", xml_escape(&rec.image_path));
    let _ = writeln!(
        out,
        "  <size>\n    <width>{w}</width>\n    <height>{h}</height>\n    <depth>3</depth>\n  </size>"
    );
    for r in &rec.regions {
        let (x0, x1) = round_span(r.bbox.x_min, r.bbox.x_max, w);
        let (y0, y1) = round_span(r.bbox.y_min, r.bbox.y_max, h);
        let _ = writeln!(
            out,
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{x0}</xmin>\n      <ymin>{y0}</ymin>\n      <xmax>{x1}</xmax>\n      <ymax>{y1}</ymax>\n    </bndbox>\n  </object>",
            voc_name(r.category)
        );
    }
    out.push_str("</annotation>\n");
    out
}

fn round_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let limit = limit as f64;
    let mut a = lo.round().clamp(0.0, limit);
    let mut b = hi.round().clamp(0.0, limit);
    if b <= a {
        if a + 1.0 <= limit {
            b = a + 1.0;
        } else {
            a = b - 1.0;
        }
    }
    (a as usize, b as usize)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parses `class_id cx cy w h` lines (normalized) into pixel boxes for an
/// image of `(width, height)`. Class 0 is bleed, 1 is non-bleed.
pub fn parse_yolo_txt(text: &str, image_size: (usize, usize)) -> Result<Vec<LabeledBox>, DataError> {
    let (width, height) = image_size;
    let mut regions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(DataError::Yolo {
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let category = match fields[0] {
            "0" => Category::Bleed,
            "1" => Category::NonBleed,
            other => return Err(DataError::UnknownClassId(other.to_string())),
        };
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| DataError::Yolo {
                line: line_no,
                msg: format!("invalid number {f:?}"),
            })?;
            if !(0.0..=1.0).contains(slot) {
                return Err(DataError::Yolo {
                    line: line_no,
                    msg: format!("coordinate {f} outside [0, 1]"),
                });
            }
        }
        let [cx, cy, w, h] = v;
        let edges = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
        if edges
            .iter()
            .any(|&e| !(-YOLO_EDGE_SLACK..=1.0 + YOLO_EDGE_SLACK).contains(&e))
        {
            return Err(DataError::Yolo {
                line: line_no,
                msg: format!("box {cx} {cy} {w} {h} extends outside the image"),
            });
        }
        let [x0, y0, x1, y1] = edges.map(|e| e.clamp(0.0, 1.0));
        let region = LabeledBox {
            category,
            bbox: BoxXyxy {
                x_min: x0 * width as f64,
                y_min: y0 * height as f64,
                x_max: x1 * width as f64,
                y_max: y1 * height as f64,
                coords: crate::geometry::CoordSystem::Pixels,
            },
        };
        check_region(&region, width, height)?;
        regions.push(region);
    }
    Ok(regions)
}

pub fn write_yolo_txt(rec: &AnnotationRecord) -> String {
    let (w, h) = (rec.image_size.0 as f64, rec.image_size.1 as f64);
    let mut out = String::new();
    for r in &rec.regions {
        let b = &r.bbox;
        let cx = (b.x_min + b.x_max) / 2.0 / w;
        let cy = (b.y_min + b.y_max) / 2.0 / h;
        let bw = (b.x_max - b.x_min) / w;
        let bh = (b.y_max - b.y_min) / h;
        let id = if r.category == Category::Bleed { 0 } else { 1 };
        let _ = writeln!(out, "{id} {cx:.9} {cy:.9} {bw:.9} {bh:.9}");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub format: AnnotationFormat,
}

/// Reads `image_path<TAB>annotation_path<TAB>format` lines. Relative paths
/// are resolved against the manifest's directory; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| DataError::Manifest { line: i + 1, msg };
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let format = fields[2].trim().parse().map_err(bad)?;
        entries.push(ManifestEntry {
            image_path: base.join(fields[0]),
            annotation_path: base.join(fields[1]),
            format,
        });
    }
    Ok(entries)
}

/// Writes entries as given; paths are typically relative to the manifest.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        let _ = writeln!(
            text,
            "{}\t{}\t{}",
            e.image_path.display(),
            e.annotation_path.display(),
            e.format
        );
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the annotation of a manifest entry. YOLO/txt records take their
/// image size from the PPM header and their id from the image file stem.
pub fn load_record(entry: &ManifestEntry) -> Result<AnnotationRecord, DataError> {
    let io = |source| DataError::Io {
        path: entry.annotation_path.clone(),
        source,
    };
    let text = fs::read_to_string(&entry.annotation_path).map_err(io)?;
    let image_path = entry.image_path.to_string_lossy().into_owned();
    match entry.format {
        AnnotationFormat::Voc => {
            let mut rec = parse_voc_xml(&text)?;
            rec.image_path = image_path;
            if rec.image_id.is_empty() {
                rec.image_id = file_stem(&rec.image_path);
            }
            Ok(rec)
        }
        AnnotationFormat::Yolo | AnnotationFormat::Txt => {
            let size = read_ppm_size(&entry.image_path)?;
            let regions = parse_yolo_txt(&text, size)?;
            AnnotationRecord::from_regions(file_stem(&image_path), image_path, regions, size)
        }
    }
}
