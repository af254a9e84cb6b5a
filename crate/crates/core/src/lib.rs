//! Glioma MRI toolkit: volume I/O, a batch-normalized hypercolumn segmentation
//! network, segmentation metrics, radiomic feature extraction and survival
//! regression.

pub mod cohort;
pub mod net;
pub mod nifti;
pub mod phantom;
pub mod radiomics;
pub mod segmetrics;
pub mod survival;
pub mod volume;
