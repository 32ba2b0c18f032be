//! Instance-segmentation dataset ingestion.
//!
//! File layout:
//!
//! ```json
//! {"images":[{"id":1,"file_name":"a.png","width":64,"height":48}],
//!  "instances":[{"id":7,"image_id":1,"category":"cat","bbox":[x,y,w,h],
//!                "segmentation":{"polygons":[[x1,y1,x2,y2,...]]}}]}
//! ```
//!
//! `segmentation` may instead be `{"rle":{"counts":[...],"size":[h,w]}}`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{bbox_from_mask, rasterize_polygon, rle_decode, rle_encode, Bitmask, BoundingBox, Rle};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BboxSource {
    /// Taken from the dataset file.
    Given,
    /// Tight box of the mask foreground.
    DerivedFromMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: u64,
    pub image_id: u64,
    pub category: String,
    pub bbox: BoundingBox,
    pub bbox_source: BboxSource,
    /// Image-aligned ground truth.
    pub mask: Bitmask,
}

impl InstanceRecord {
    /// Copy with the box replaced by the tight box of the mask.
    pub fn with_derived_bbox(&self) -> Result<Self> {
        Ok(Self {
            bbox: bbox_from_mask(&self.mask)?,
            bbox_source: BboxSource::DerivedFromMask,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub images: Vec<ImageInfo>,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u64,
    pub image_id: u64,
    pub category: String,
    pub bbox: [f64; 4],
    pub segmentation: Segmentation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub images: Vec<ImageInfo>,
    pub instances: Vec<InstanceEntry>,
}

impl Dataset {
    pub fn from_file_repr(file: DatasetFile, default_id: &str) -> Result<Self> {
        let by_id: HashMap<u64, &ImageInfo> = file.images.iter().map(|i| (i.id, i)).collect();
        if by_id.len() != file.images.len() {
            return Err(Error::Dataset("duplicate image id".into()));
        }
        let mut instances = Vec::with_capacity(file.instances.len());
        for entry in &file.instances {
            let image = by_id.get(&entry.image_id).ok_or_else(|| {
                Error::Dataset(format!("instance {} references unknown image {}", entry.id, entry.image_id))
            })?;
            let mask = match &entry.segmentation {
                Segmentation::Polygons(polys) => {
                    let rings: Vec<Vec<[f64; 2]>> = polys
                        .iter()
                        .map(|flat| {
                            if flat.len() % 2 != 0 {
                                return Err(Error::Dataset(format!(
                                    "instance {}: polygon has odd coordinate count",
                                    entry.id
                                )));
                            }
                            Ok(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
                        })
                        .collect::<Result<_>>()?;
                    rasterize_polygon(&rings, image.width, image.height)
                        .map_err(|e| Error::Dataset(format!("instance {}: {e}", entry.id)))?
                        .mask
                }
                Segmentation::Rle(rle) => {
                    if rle.size != [image.height, image.width] {
                        return Err(Error::Dataset(format!(
                            "instance {}: rle size {:?} does not match image {}x{}",
                            entry.id, rle.size, image.height, image.width
                        )));
                    }
                    rle_decode(rle)?
                }
            };
            instances.push(InstanceRecord {
                instance_id: entry.id,
                image_id: entry.image_id,
                category: entry.category.clone(),
                bbox: BoundingBox::from_array(entry.bbox)
                    .map_err(|e| Error::Dataset(format!("instance {}: {e}", entry.id)))?,
                bbox_source: BboxSource::Given,
                mask,
            });
        }
        Ok(Self {
            id: file.id.unwrap_or_else(|| default_id.to_string()),
            images: file.images,
            instances,
        })
    }

    /// Serializable form; masks are written as RLE.
    pub fn to_file_repr(&self) -> DatasetFile {
        DatasetFile {
            id: Some(self.id.clone()),
            images: self.images.clone(),
            instances: self
                .instances
                .iter()
                .map(|i| InstanceEntry {
                    id: i.instance_id,
                    image_id: i.image_id,
                    category: i.category.clone(),
                    bbox: i.bbox.to_array(),
                    segmentation: Segmentation::Rle(rle_encode(&i.mask)),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str, default_id: &str) -> Result<Self> {
        Self::from_file_repr(serde_json::from_str(text)?, default_id)
    }

    /// Loads a dataset file; the id defaults to the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::from_json(&text, stem)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file_repr())?)?;
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn instance(&self, id: u64) -> Option<&InstanceRecord> {
        self.instances.iter().find(|i| i.instance_id == id)
    }
}
