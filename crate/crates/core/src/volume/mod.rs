//! Voxel volumes, segmentation masks and the dataset layout on disk.

mod io;
mod preprocess;
mod synthetic;

pub use io::{
    decode_volume, encode_volume, read_manifest, read_volume, write_manifest, write_volume,
    ManifestEntry, VolumeDataset,
    HEADER_LEN, MAGIC,
};
pub use preprocess::{
    background_intensity, centroid, crop_to_bbox, preprocess_volume, rescale_intensity,
    stack_modalities,
};
pub use synthetic::{generate_synthetic, synthesize, SyntheticConfig, SyntheticRecord};

use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// `C×D×H×W` voxel grid stored channel-major, then `d`, `h`, `w` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f64> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub voxels: Vec<T>,
    /// Voxel size in millimetres.
    pub spacing: [f32; 3],
    pub label: Option<u32>,
    pub id: String,
    pub provenance: String,
}

impl<T: Real> Volume<T> {
    pub fn new(channels: usize, dims: [usize; 3], voxels: Vec<T>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Shape(format!(
                "channels and dims must be positive, got {channels} x {dims:?}"
            )));
        }
        if voxels.len() != n {
            return Err(VolumeError::Shape(format!(
                "{channels} x {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            voxels,
            spacing: [1.0; 3],
            label: None,
            id: String::new(),
            provenance: String::new(),
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, vec![T::zero(); n]).expect("positive dims")
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> T {
        self.voxels[self.index(c, d, h, w)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels_per_channel();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels_per_channel();
        &mut self.voxels[c * n..(c + 1) * n]
    }

    /// Same metadata, new voxel buffer of identical size.
    pub fn map_voxels(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            channels: self.channels,
            dims: self.dims,
            voxels: self.voxels.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
            spacing: self.spacing,
            label: self.label,
            id: self.id.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn same_shape(&self, other: &Volume<T>) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}

/// Binary foreground mask over a `D×H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub dims: [usize; 3],
    pub voxels: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::Shape(format!(
                "mask dims {dims:?} do not match {} voxels",
                voxels.len()
            )));
        }
        Ok(Self { dims, voxels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            voxels: vec![false; dims.iter().product()],
        }
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, on: bool) {
        let i = (d * self.dims[1] + h) * self.dims[2] + w;
        self.voxels[i] = on;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    /// One-channel 0/1 volume, the on-disk form of a mask.
    pub fn to_volume<T: Real>(&self) -> Volume<T> {
        let vox = self.voxels.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Volume::new(1, self.dims, vox).expect("mask dims are positive")
    }

    pub fn from_volume<T: Real>(v: &Volume<T>) -> Result<Self> {
        if v.channels != 1 {
            return Err(VolumeError::Shape(format!(
                "mask volume must have one channel, got {}",
                v.channels
            )));
        }
        Self::new(v.dims, v.voxels.iter().map(|&x| x > T::from_f64c(0.5)).collect())
    }
}
