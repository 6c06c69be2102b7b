//! Synthetic data, augmentation and the VTB1 tensor container.

pub mod augment;
pub mod synth;
pub mod vtb;

use std::path::Path;

use serde_json::{json, Value};

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use synth::{generate_dataset, generate_image, rasterize, Shape, ShapeKind, SyntheticImage, SyntheticSpec};
pub use vtb::{read_vtb, write_vtb, VtbContainer, VtbData, VtbTensor};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with one label mask per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub masks: Vec<LabelMask>,
}

impl Dataset {
    pub fn new(images: Tensor, masks: Vec<LabelMask>) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 || d[0] != masks.len() || masks.iter().any(|m| m.height != d[2] || m.width != d[3]) {
            return Err(Error::ShapeMismatch(format!(
                "images {d:?} with {} masks",
                masks.len()
            )));
        }
        Ok(Dataset { images, masks })
    }

    pub fn from_synthetic(items: &[SyntheticImage]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidSpec("empty dataset".into()))?;
        let d = first.image.dims();
        let mut data = Vec::with_capacity(items.len() * first.image.numel());
        for it in items {
            data.extend_from_slice(it.image.data());
        }
        let images = Tensor::new(vec![items.len(), d[0], d[1], d[2]], data)?;
        Dataset::new(images, items.iter().map(|i| i.mask.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Image `i` as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        let d = self.images.dims();
        let n = d[1] * d[2] * d[3];
        Tensor::new(d[1..].to_vec(), self.images.data()[i * n..(i + 1) * n].to_vec()).expect("slice of images")
    }

    pub fn to_container(&self, meta: Value) -> Result<VtbContainer> {
        let d = self.images.dims();
        let mut c = VtbContainer::new(json!({ "kind": "dataset", "info": meta }));
        c.push("images", VtbTensor::from_tensor(&self.images));
        let labels: Vec<u8> = self.masks.iter().flat_map(|m| m.labels.iter().copied()).collect();
        c.push("masks", VtbTensor::new(vec![d[0], d[2], d[3]], VtbData::U8(labels))?);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> Result<()> {
        self.to_container(meta)?.write(path)
    }

    pub fn from_container(c: &VtbContainer) -> Result<Self> {
        let missing = |n: &str| Error::CorruptFile(format!("dataset lacks `{n}`"));
        let images = c.get("images").ok_or_else(|| missing("images"))?.to_tensor()?;
        let masks = c.get("masks").ok_or_else(|| missing("masks"))?;
        let labels = masks.as_u8().ok_or_else(|| Error::CorruptFile("masks must be u8".into()))?;
        if masks.dims.len() != 3 {
            return Err(Error::CorruptFile(format!("mask extents {:?}", masks.dims)));
        }
        let (n, h, w) = (masks.dims[0], masks.dims[1], masks.dims[2]);
        let masks = (0..n)
            .map(|i| LabelMask::new(h, w, labels[i * h * w..(i + 1) * h * w].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(images, masks)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&VtbContainer::read(path)?)
    }
}
