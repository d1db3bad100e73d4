//! On-disk layout of a generated dataset directory:
//!
//! ```text
//! plan.toml              experiment plan the data was generated from
//! manifest.csv           volume_id,site,dataset,split
//! labels.csv             volume_id,dataset,path   (test and held-out volumes)
//! volumes/<id>.image.dwcv
//! volumes/<id>.labels.dwcv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwc_core::io_util::atomic_write_str;
use dwc_core::meshnet::Example;
use dwc_core::sites::{volume_examples, Datasets, ExperimentPlan, LabeledVolume};
use dwc_core::tensor::{read_raw_volume, write_raw_volume, Volume};

pub const PLAN_FILE: &str = "plan.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LABELS_FILE: &str = "labels.csv";

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("volumes").join(format!("{id}.image.dwcv"))
}

fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("volumes").join(format!("{id}.labels.dwcv"))
}

pub fn write_dataset_dir(plan: &ExperimentPlan, data: &Datasets, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir.join("volumes")).with_context(|| format!("creating {}", dir.display()))?;
    atomic_write_str(&dir.join(PLAN_FILE), &plan.to_toml())?;
    atomic_write_str(&dir.join(MANIFEST_FILE), &data.manifest_csv())?;
    let mut count = 0;
    let mut labels = String::from("volume_id,dataset,path\n");
    for s in data.sites.iter().chain(&data.heldout) {
        for (i, v) in s.volumes.iter().enumerate() {
            let id = s.volume_id(i);
            write_raw_volume(&v.image, &image_path(dir, &id))?;
            write_raw_volume(&v.labels, &labels_path(dir, &id))?;
            count += 1;
        }
    }
    for (dataset, id, _) in data.evaluation_volumes() {
        let _ = writeln!(labels, "{id},{dataset},volumes/{id}.labels.dwcv");
    }
    atomic_write_str(&dir.join(LABELS_FILE), &labels)?;
    Ok(count)
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub volume_id: String,
    pub site: String,
    pub dataset: String,
    pub split: String,
}

/// A generated dataset directory opened for reading.
pub struct DatasetDir {
    pub dir: PathBuf,
    pub plan: ExperimentPlan,
    pub rows: Vec<ManifestRow>,
}

impl DatasetDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let plan = ExperimentPlan::load(&dir.join(PLAN_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        if lines.next() != Some("volume_id,site,dataset,split") {
            bail!("{} does not start with the manifest header", path.display());
        }
        let rows = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    bail!("malformed manifest line `{l}`");
                }
                Ok(ManifestRow {
                    volume_id: f[0].into(),
                    site: f[1].into(),
                    dataset: f[2].into(),
                    split: f[3].into(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            plan,
            rows,
        })
    }

    pub fn load(&self, id: &str) -> Result<LabeledVolume> {
        Ok(LabeledVolume {
            image: read_raw_volume(&image_path(&self.dir, id))?,
            labels: read_raw_volume(&labels_path(&self.dir, id))?,
        })
    }

    /// Training sub-volumes of `sites`, in the order the experiment runner
    /// uses, and the number of volumes they came from.
    pub fn train_examples(&self, sites: &[String], tile: usize) -> Result<(Vec<Example>, usize)> {
        let mut out = Vec::new();
        let mut volumes = 0;
        for site in sites {
            let rows: Vec<&ManifestRow> = self
                .rows
                .iter()
                .filter(|r| &r.site == site && r.split == "train")
                .collect();
            if rows.is_empty() {
                bail!("no training volumes for site `{site}` in {}", self.dir.display());
            }
            for r in rows {
                out.extend(volume_examples(&self.load(&r.volume_id)?, tile)?);
                volumes += 1;
            }
        }
        Ok((out, volumes))
    }

    /// `(dataset, volume id, volume)` of every test and held-out volume.
    pub fn evaluation_volumes(&self) -> Result<Vec<(String, String, LabeledVolume)>> {
        self.rows
            .iter()
            .filter(|r| r.split != "train")
            .map(|r| Ok((r.dataset.clone(), r.volume_id.clone(), self.load(&r.volume_id)?)))
            .collect()
    }
}

/// A `volume_id,dataset,path` label manifest, paths relative to its file.
pub fn read_label_manifest(path: &Path) -> Result<BTreeMap<String, (String, Volume)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next() != Some("volume_id,dataset,path") {
        bail!("{} is not a label manifest (volume_id,dataset,path)", path.display());
    }
    let mut out = BTreeMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 3 {
            bail!("malformed label manifest line `{l}`");
        }
        let v = read_raw_volume(&base.join(f[2]))?;
        if out.insert(f[0].to_string(), (f[1].to_string(), v)).is_some() {
            bail!("volume `{}` listed twice in {}", f[0], path.display());
        }
    }
    Ok(out)
}

/// Writes predicted label volumes and their manifest.
pub fn write_label_manifest(dir: &Path, items: &[(String, String, Volume)]) -> Result<()> {
    std::fs::create_dir_all(dir.join("volumes")).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = String::from("volume_id,dataset,path\n");
    for (dataset, id, v) in items {
        write_raw_volume(v, &labels_path(dir, id))?;
        let _ = writeln!(text, "{id},{dataset},volumes/{id}.labels.dwcv");
    }
    atomic_write_str(&dir.join(LABELS_FILE), &text)?;
    Ok(())
}
