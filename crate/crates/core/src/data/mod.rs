//! Annotations, raster I/O, augmentation, splitting, and synthetic scenes.

mod augment;
mod formats;
mod image;
mod split;
mod synthetic;

pub use augment::{
    augment, brightness_contrast, color_jitter, gamma, grayscale, motion_blur, normalize, AugmentationConfig,
    BlurDirection, Normalization,
};
pub use formats::{
    load_record, parse_voc_xml, parse_yolo_txt, read_manifest, write_manifest, write_voc_xml, write_yolo_txt,
    AnnotationFormat, ManifestEntry,
};
pub use image::{decode_ppm, encode_ppm, image_size, load_ppm, read_ppm_size, resize_bilinear, save_ppm};
pub use split::{one_hot, stratified_split, stratified_split_indices};
pub use synthetic::{generate_scene, generate_synthetic, synthetic_corpus, SyntheticSceneSpec};

use crate::category::{Category, FrameLabel};
use crate::error::DataError;
use crate::geometry::BoxXyxy;
use crate::loss::Target;

/// One annotated object: an object category and a pixel-space box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub category: Category,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: String,
    pub frame_label: FrameLabel,
    pub regions: Vec<LabeledBox>,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl AnnotationRecord {
    /// Builds a record whose frame label follows from its regions.
    pub fn from_regions(
        image_id: impl Into<String>,
        image_path: impl Into<String>,
        regions: Vec<LabeledBox>,
        image_size: (usize, usize),
    ) -> Result<Self, DataError> {
        let frame_label = if regions.iter().any(|r| r.category == Category::Bleed) {
            FrameLabel::Bleeding
        } else {
            FrameLabel::NonBleeding
        };
        let rec = Self {
            image_id: image_id.into(),
            image_path: image_path.into(),
            frame_label,
            regions,
            image_size,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (w, h) = self.image_size;
        for r in &self.regions {
            check_region(r, w, h)?;
        }
        if self.frame_label == FrameLabel::Bleeding && !self.regions.iter().any(|r| r.category == Category::Bleed) {
            return Err(DataError::MissingBleedRegion(self.image_id.clone()));
        }
        Ok(())
    }

    /// Regions as normalized center-format loss targets.
    pub fn targets(&self) -> Vec<Target> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        self.regions
            .iter()
            .map(|r| Target {
                category: r.category,
                bbox: r
                    .bbox
                    .normalize(w, h)
                    .to_cxcywh()
                    .expect("validated boxes are non-degenerate"),
            })
            .collect()
    }
}

pub(crate) fn check_region(r: &LabeledBox, width: usize, height: usize) -> Result<(), DataError> {
    let b = &r.bbox;
    if r.category == Category::Background {
        return Err(DataError::UnknownCategory("background".into()));
    }
    if !(b.x_max > b.x_min && b.y_max > b.y_min) {
        return Err(DataError::DegenerateBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        });
    }
    if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > width as f64 || b.y_max > height as f64 {
        return Err(DataError::OutOfBounds {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            width,
            height,
        });
    }
    Ok(())
}
