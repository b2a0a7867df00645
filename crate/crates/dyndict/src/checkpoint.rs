//! Checkpoints: a directory holding `config.txt` and one DSTN file per
//! parameter, named after the parameter.

use std::path::Path;

use dyndict_core::model::Model;
use dyndict_core::numerics::{ParamStore, Rng};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::{dstn, fsutil};

pub const CONFIG_FILE: &str = "config.txt";

pub fn param_file(name: &str) -> String {
    format!("{name}.dstn")
}

pub fn save(dir: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    fsutil::create_dir_all(dir)?;
    config.save(&dir.join(CONFIG_FILE))?;
    for (_, p) in store.iter() {
        dstn::save_tensor(&dir.join(param_file(&p.name)), &p.value)?;
    }
    Ok(())
}

/// Rebuilds the model from the stored configuration and replaces every
/// parameter with its saved value; shapes must match.
pub fn load(dir: &Path) -> Result<(RunConfig, Model, ParamStore)> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut store = ParamStore::new();
    let model = Model::new(config.train.model.clone(), &mut store, &mut Rng::new(0))?;
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let path = dir.join(param_file(&name));
        let value = dstn::load_tensor(&path)?;
        let slot = store.get_mut(id);
        if value.shape() != slot.value.shape() {
            return Err(Error::Core(dyndict_core::Error::Data(format!(
                "{}: shape {:?} does not match the configured {:?}",
                path.display(),
                value.shape(),
                slot.value.shape()
            ))));
        }
        slot.value = value;
    }
    Ok((config, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_parameter() {
        let config = RunConfig::tiny();
        let mut store = ParamStore::new();
        Model::new(config.train.model.clone(), &mut store, &mut Rng::new(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &config, &store).unwrap();
        let (back_cfg, _, back) = load(dir.path()).unwrap();
        assert_eq!(back_cfg, config);
        for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let mut other = config.clone();
        other.train.model.embed_dim = 16;
        other.save(&dir.path().join(CONFIG_FILE)).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
