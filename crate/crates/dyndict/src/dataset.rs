//! On-disk dataset layout: `<root>/<split>/<index>.ppm` and `<index>.pgm`
//! with zero-padded five-digit indices.

use std::fs;
use std::path::{Path, PathBuf};

use dyndict_core::data::{LabeledSample, Split, SyntheticDataset};

use crate::error::{Error, Result};
use crate::{fsutil, pnm};

pub fn sample_paths(root: &Path, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let dir = root.join(split.name());
    (dir.join(format!("{index:05}.ppm")), dir.join(format!("{index:05}.pgm")))
}

pub fn write_split(root: &Path, split: Split, samples: &[LabeledSample]) -> Result<()> {
    fsutil::create_dir_all(&root.join(split.name()))?;
    for (i, s) in samples.iter().enumerate() {
        let (img, lbl) = sample_paths(root, split, i);
        pnm::write_ppm(&img, &s.image)?;
        pnm::write_pgm(&lbl, &s.label)?;
    }
    Ok(())
}

pub fn write_dataset(root: &Path, dataset: &SyntheticDataset) -> Result<()> {
    for split in Split::ALL {
        write_split(root, split, dataset.split(split))?;
    }
    Ok(())
}

/// Loads every indexed pair of a split in index order. Indices must run
/// contiguously from zero and every image needs its label map.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<LabeledSample>> {
    let dir = root.join(split.name());
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            match stem.parse::<usize>() {
                Ok(i) if stem.len() == 5 => indices.push(i),
                _ => return Err(data_error(format!("{}: not a five-digit sample index", path.display()))),
            }
        }
    }
    indices.sort_unstable();
    if let Some((pos, &i)) = indices.iter().enumerate().find(|(pos, &i)| *pos != i) {
        return Err(data_error(format!("{}: sample {pos:05} is missing (next is {i:05})", dir.display())));
    }
    indices
        .iter()
        .map(|&i| {
            let (img, lbl) = sample_paths(root, split, i);
            let image = pnm::read_ppm(&img)?;
            let label = pnm::read_pgm(&lbl)?;
            LabeledSample::new(image, label).map_err(|e| data_error(format!("{}: {e}", img.display())))
        })
        .collect()
}

fn data_error(message: String) -> Error {
    Error::Core(dyndict_core::Error::Data(message))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dyndict_core::data::{generate, SyntheticConfig};

    #[test]
    fn round_trip_is_exact() {
        let ds = generate(&SyntheticConfig { image_size: 32, train: 3, val: 2, test: 1, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert!(dir.path().join("train/00002.pgm").exists());
        for split in Split::ALL {
            assert_eq!(read_split(dir.path(), split).unwrap(), ds.split(split));
        }
        fs::remove_file(dir.path().join("train/00001.pgm")).unwrap();
        let err = read_split(dir.path(), Split::Train).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::exit::DATA);
        fs::remove_file(dir.path().join("val/00000.ppm")).unwrap();
        assert!(read_split(dir.path(), Split::Val).unwrap_err().to_string().contains("00000 is missing"));
    }
}
