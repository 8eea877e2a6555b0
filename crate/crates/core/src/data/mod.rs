//! Sample construction: LR synthesis, patches, augmentation, image I/O.

pub mod bicubic;
pub mod dataset;
pub mod degrade;
pub mod image_io;
pub mod patches;
pub mod synthetic;

pub use bicubic::bicubic_resample;
pub use dataset::{scan_dataset, DatasetEntry};
pub use degrade::{degrade, DegradationSpec, MissingMask};
pub use image_io::{load_image, save_gray8, save_image};
pub use patches::{augment8, crop_patches, Dihedral, PatchSet};
pub use synthetic::synthesize_pair;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A training/evaluation sample: aligned HR depth and RGB guidance plus the
/// synthesized LR depth, with enough provenance to re-derive it.
#[derive(Clone)]
pub struct RgbdSample<S> {
    pub depth_hr: Tensor<S>,
    pub rgb: Tensor<S>,
    pub depth_lr: Tensor<S>,
    pub scale: u32,
    pub provenance: String,
    pub degradation: DegradationSpec,
    pub seed: u64,
}

impl<S: Scalar> RgbdSample<S> {
    /// Build a sample by applying `spec` to the HR depth.
    pub fn synthesize(
        depth_hr: Tensor<S>,
        rgb: Tensor<S>,
        spec: DegradationSpec,
        seed: u64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (ds, rs) = (depth_hr.shape(), rgb.shape());
        if ds.c != 1 {
            return Err(Error::DimMismatch {
                dim: "depth channels",
                expected: 1,
                got: ds.c,
            });
        }
        if rs.c != 3 {
            return Err(Error::DimMismatch {
                dim: "rgb channels",
                expected: 3,
                got: rs.c,
            });
        }
        if ds.h != rs.h || ds.w != rs.w {
            return Err(Error::Ratio {
                context: "depth and rgb must be aligned",
                expected: format!("{}x{}", ds.h, ds.w),
                got: format!("{}x{}", rs.h, rs.w),
            });
        }
        let depth_lr = degrade(&depth_hr, &spec, seed)?;
        Ok(RgbdSample {
            depth_hr,
            rgb,
            depth_lr,
            scale: spec.factor,
            provenance: provenance.into(),
            degradation: spec,
            seed,
        })
    }

    /// Re-run the recorded degradation; must reproduce `depth_lr` bitwise.
    pub fn re_derive_lr(&self) -> Result<Tensor<S>> {
        degrade(&self.depth_hr, &self.degradation, self.seed)
    }
}
