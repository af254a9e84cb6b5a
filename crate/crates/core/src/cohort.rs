//! BraTS-style cohort directories: one folder per subject holding
//! `<id>_flair.nii.gz`, `<id>_t1.nii.gz`, `<id>_t1ce.nii.gz`, `<id>_t2.nii.gz`
//! and optionally `<id>_seg.nii.gz`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nifti::{self, NiftiError};
use crate::volume::{LabelVolume, Modality, ModalityStack, VolumeError};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("subject {subject}: missing {what} ({path})")]
    Missing {
        subject: String,
        what: String,
        path: PathBuf,
    },
    #[error("subject {subject}: {source}")]
    Nifti {
        subject: String,
        #[source]
        source: NiftiError,
    },
    #[error("subject {subject}: {source}")]
    Volume {
        subject: String,
        #[source]
        source: VolumeError,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub fn modality_path(subject_dir: &Path, id: &str, modality: Modality) -> PathBuf {
    subject_dir.join(format!("{id}_{}.nii.gz", modality.file_suffix()))
}

pub fn seg_path(subject_dir: &Path, id: &str) -> PathBuf {
    subject_dir.join(format!("{id}_seg.nii.gz"))
}

/// Subject ids (directory names) under a cohort root, sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<String>, CohortError> {
    let io_err = |source| CohortError::Io {
        path: root.to_path_buf(),
        source,
    };
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        if entry.file_type().map_err(io_err)?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// One loaded subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub stack: ModalityStack,
    pub labels: Option<LabelVolume>,
}

/// Loads the requested modalities (all four when `modalities` is empty) and the
/// segmentation if present.
pub fn load_subject(root: &Path, id: &str, modalities: &[Modality]) -> Result<Subject, CohortError> {
    let dir = root.join(id);
    let wanted: &[Modality] = if modalities.is_empty() {
        &Modality::ALL
    } else {
        modalities
    };
    let mut volumes = BTreeMap::new();
    for &m in wanted {
        let path = modality_path(&dir, id, m);
        if !path.exists() {
            return Err(CohortError::Missing {
                subject: id.to_string(),
                what: format!("modality {m}"),
                path,
            });
        }
        let vol = nifti::read_volume(&path).map_err(|source| CohortError::Nifti {
            subject: id.to_string(),
            source,
        })?;
        volumes.insert(m, vol);
    }
    let stack = ModalityStack::new(id, volumes).map_err(|source| CohortError::Volume {
        subject: id.to_string(),
        source,
    })?;
    let seg = seg_path(&dir, id);
    let labels = if seg.exists() {
        let l = nifti::read_labels(&seg).map_err(|source| CohortError::Nifti {
            subject: id.to_string(),
            source,
        })?;
        if l.grid() != stack.grid() {
            return Err(CohortError::Volume {
                subject: id.to_string(),
                source: VolumeError::GeometryMismatch("segmentation grid differs from modalities".into()),
            });
        }
        Some(l)
    } else {
        None
    };
    Ok(Subject { stack, labels })
}

/// Writes a subject in cohort layout under `root/<id>/`.
pub fn write_subject(root: &Path, stack: &ModalityStack, labels: Option<&LabelVolume>) -> Result<(), CohortError> {
    let id = stack.subject_id();
    let dir = root.join(id);
    fs::create_dir_all(&dir).map_err(|source| CohortError::Io {
        path: dir.clone(),
        source,
    })?;
    let wrap = |source| CohortError::Nifti {
        subject: id.to_string(),
        source,
    };
    for (m, vol) in stack.volumes() {
        nifti::write_volume(vol, modality_path(&dir, id, *m)).map_err(wrap)?;
    }
    if let Some(l) = labels {
        nifti::write_labels(l, seg_path(&dir, id)).map_err(wrap)?;
    }
    Ok(())
}
