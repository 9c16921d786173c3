//! Dataset manifests: a CSV mapping case ids to image/label files, domain,
//! and split. Paths are stored as written and resolved relative to the
//! manifest's directory when loading volumes, so a dataset directory can be
//! moved wholesale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DomainSet;
use crate::error::{Error, Result};
use crate::volume::{rescale_unit, VolumeSample};
use crate::{nifti, volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub domain: String,
    pub split: Split,
}

/// All cases of a dataset plus the directory paths are relative to.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest { entries, root: root.into() }
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::format(path, format!("cannot open manifest: {e}")))?;
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let entry: ManifestEntry = row?;
            entries.push(entry);
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(DatasetManifest { entries, root })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Check that every entry's domain is known and that each domain has
    /// enough training cases to fill its share of a balanced batch.
    pub fn validate(&self, domains: &DomainSet, batch_size: usize) -> Result<()> {
        for e in &self.entries {
            if domains.index_of(&e.domain).is_none() {
                return Err(Error::UnknownDomain(e.domain.clone()));
            }
        }
        let per = batch_size / domains.len();
        for d in domains.names() {
            let n = self.split(Split::Train).filter(|e| &e.domain == d).count();
            if n < per.max(1) {
                return Err(Error::DomainTooSmall {
                    domain: d.clone(),
                    split: "train",
                    n,
                    need: per.max(1),
                });
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Load one entry: image rescaled to `[0, 1]`, label as-is.
    pub fn load_sample(&self, entry: &ManifestEntry, domains: &DomainSet) -> Result<VolumeSample> {
        let domain = domains
            .index_of(&entry.domain)
            .ok_or_else(|| Error::UnknownDomain(entry.domain.clone()))?;
        let image = rescale_unit(&nifti::read_image(&self.resolve(&entry.image))?)?;
        let label = nifti::read_mask(&self.resolve(&entry.label))?;
        let sample = VolumeSample { case_id: entry.case_id.clone(), image, label, domain };
        sample.validate()?;
        Ok(sample)
    }

    /// Load every entry of `split`, erroring if the split is empty.
    pub fn load_split(&self, split: Split, domains: &DomainSet) -> Result<Vec<VolumeSample>> {
        let entries: Vec<_> = self.split(split).cloned().collect();
        if entries.is_empty() {
            return Err(Error::EmptySplit(match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            }));
        }
        entries.iter().map(|e| self.load_sample(e, domains)).collect()
    }
}

/// Group the indices of `samples` by domain, preserving order. Used by the
/// balanced batch sampler.
pub fn indices_by_domain(samples: &[VolumeSample], n_domains: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); n_domains];
    for (i, s) in samples.iter().enumerate() {
        by[s.domain].push(i);
    }
    by
}

/// Convenience used by tests and the synthetic generator: write one sample to
/// `<dir>/images/<id>.nii` + `<dir>/labels/<id>.nii` and return its entry.
pub fn write_sample(
    dir: &Path,
    sample: &VolumeSample,
    domain: &str,
    split: Split,
) -> Result<ManifestEntry> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| Error::file(&labels, e))?;
    let image_rel = PathBuf::from("images").join(format!("{}.nii", sample.case_id));
    let label_rel = PathBuf::from("labels").join(format!("{}.nii", sample.case_id));
    nifti::write_image(&dir.join(&image_rel), &sample.image)?;
    nifti::write_mask(&dir.join(&label_rel), &sample.label)?;
    Ok(ManifestEntry {
        case_id: sample.case_id.clone(),
        image: image_rel,
        label: label_rel,
        domain: domain.to_string(),
        split,
    })
}

// Re-exported here so manifest loading and preprocessing stay in one import.
pub use volume::preprocess_minimal;
