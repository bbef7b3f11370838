//! In-memory volume types shared by every other module.
//!
//! All volumes are dense, axis-aligned grids with anisotropic voxel spacing
//! in millimetres. Storage order is x-fastest: the linear index of voxel
//! `(x, y, z)` is `(z * ny + y) * nx + x`. Multi-channel scalar volumes are
//! channel-major, so channel `c` occupies one contiguous x-fastest block
//! starting at `c * nx * ny * nz`.

use crate::error::{Error, Result};

/// Voxel counts along x, y, z.
pub type Dims = [usize; 3];

/// Physical voxel spacing along x, y, z in millimetres.
pub type Spacing = [f64; 3];

fn check_dims(dims: Dims) -> Result<usize> {
    if dims.iter().any(|&n| n == 0) {
        return Err(Error::validation(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::size(format!("dims {dims:?} overflow the addressable size")))
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::validation(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Largest number of classes a [`LabelVolume`] can hold; labels are stored
/// as `u8`, so class ids run from 0 to 255.
pub const MAX_CLASSES: usize = 256;

/// Dense semantic segmentation volume. Label 0 is background; labels
/// 1..num_classes-1 are foreground classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    /// Builds a label volume, checking that dims and spacing are valid,
    /// that `labels` has one entry per voxel, and that every label is
    /// below `num_classes`.
    pub fn new(dims: Dims, spacing: Spacing, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::validation(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        if labels.len() != n {
            return Err(Error::validation(format!(
                "label buffer has {} entries for {n} voxels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            num_classes,
            labels,
        })
    }

    /// All-background volume of the given shape.
    pub fn background(dims: Dims, spacing: Spacing) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self {
            dims,
            spacing,
            num_classes: 1,
            labels: vec![0; n],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_voxels(&self) -> usize {
        self.labels.len()
    }

    /// Linear index of voxel `(x, y, z)` in x-fastest order.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    /// Binary mask of the voxels carrying `class_id`. The channel a mask
    /// came from is what gives it meaning, so callers keep `class_id`
    /// alongside the result.
    pub fn one_hot(&self, class_id: usize) -> Result<BinaryMask> {
        if class_id >= self.num_classes {
            return Err(Error::range(format!(
                "class id {class_id} out of range for {} classes",
                self.num_classes
            )));
        }
        let bits = self.labels.iter().map(|&l| l as usize == class_id).collect();
        BinaryMask::new(self.dims, self.spacing, bits)
    }

    /// Extracts z-slice `z` as a volume with `nz = 1`, keeping spacing and
    /// class count.
    pub fn slice_z(&self, z: usize) -> Result<LabelVolume> {
        if z >= self.dims[2] {
            return Err(Error::range(format!(
                "slice index {z} out of range for nz = {}",
                self.dims[2]
            )));
        }
        let plane = self.dims[0] * self.dims[1];
        let labels = self.labels[z * plane..(z + 1) * plane].to_vec();
        Ok(Self {
            dims: [self.dims[0], self.dims[1], 1],
            spacing: self.spacing,
            num_classes: self.num_classes,
            labels,
        })
    }
}

/// Dense real-valued volume with one or more channels.
///
/// Public constructors and operations keep every value finite; NaN and
/// infinity are rejected at the API boundary. [`ScalarVolume::values_mut`]
/// exists for in-place fills and trusts the caller, and the file writer
/// re-validates before serializing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: Spacing,
    channels: usize,
    values: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, channels: usize, values: Vec<f64>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if channels == 0 {
            return Err(Error::validation("channel count must be positive".to_string()));
        }
        let expect = n
            .checked_mul(channels)
            .ok_or_else(|| Error::size("channel count overflows the addressable size".to_string()))?;
        if values.len() != expect {
            return Err(Error::validation(format!(
                "value buffer has {} entries for {n} voxels x {channels} channels",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "scalar volumes must hold finite values only".to_string(),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            channels,
            values,
        })
    }

    /// All-zero volume of the given shape.
    pub fn zeros(dims: Dims, spacing: Spacing, channels: usize) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if channels == 0 {
            return Err(Error::validation("channel count must be positive".to_string()));
        }
        Ok(Self {
            dims,
            spacing,
            channels,
            values: vec![0.0; n * channels],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place fills. Callers are responsible for
    /// leaving only finite values behind.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of `(x, y, z)` within channel `c`.
    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(c < self.channels);
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn value_at(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(c, x, y, z)]
    }

    /// One contiguous channel as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.values[c * n..(c + 1) * n]
    }
}

/// One boolean per voxel; `true` marks foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: Spacing,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, bits: Vec<bool>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if bits.len() != n {
            return Err(Error::validation(format!(
                "mask buffer has {} entries for {n} voxels",
                bits.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            bits,
        })
    }

    /// Mask with every voxel set to `value`.
    pub fn filled(dims: Dims, spacing: Spacing, value: bool) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self {
            dims,
            spacing,
            bits: vec![value; n],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn num_voxels(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

/// Either kind of volume a container file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Labels(LabelVolume),
    Scalars(ScalarVolume),
}

impl Volume {
    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels(v) => Ok(v),
            Volume::Scalars(_) => Err(Error::validation(
                "expected a label volume, found a scalar volume".to_string(),
            )),
        }
    }

    pub fn into_scalars(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalars(v) => Ok(v),
            Volume::Labels(_) => Err(Error::validation(
                "expected a scalar volume, found a label volume".to_string(),
            )),
        }
    }
}
