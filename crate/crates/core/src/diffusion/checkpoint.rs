//! Checkpoint: parameter blob at `<path>` (little-endian `f32`, parameters
//! concatenated in declaration order) and TOML metadata at `<path>.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NoiseSchedule, TrainConfig, UNet};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::tomo::io::{decode_f32, encode_f32, sidecar_path};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const FORMAT: &str = "pwd-lact-checkpoint/1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub steps_done: usize,
    pub model: UNet,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    code_version: String,
    steps_done: usize,
    config: TrainConfig,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, steps_done: usize, model: UNet) -> Self {
        Self {
            config,
            steps_done,
            model,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(self.config.schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let params = self.model.params();
        let mut bytes = Vec::with_capacity(params.numel() * 4);
        for t in params.iter() {
            encode_f32(t.data().iter().copied(), &mut bytes);
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let meta = Meta {
            format: FORMAT.into(),
            code_version: CODE_VERSION.into(),
            steps_done: self.steps_done,
            config: self.config,
            params: params
                .names()
                .iter()
                .zip(params.iter())
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let side = sidecar_path(path);
        let text = toml::to_string(&meta).map_err(|e| Error::format(&side, e.to_string()))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Meta = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.format != FORMAT {
            return Err(Error::format(&side, format!("unsupported format {:?}", meta.format)));
        }
        meta.config.validate().map_err(|e| Error::format(&side, e.to_string()))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if bytes.len() != expected * 4 {
            return Err(Error::format(
                path,
                format!("blob has {} bytes, metadata declares {} parameters", bytes.len(), expected),
            ));
        }
        let values = decode_f32(&bytes);
        let mut store = ParamStore::new();
        let mut offset = 0;
        for p in &meta.params {
            let len: usize = p.shape.iter().product();
            store.add(p.name.clone(), Tensor::from_vec(p.shape, values[offset..offset + len].to_vec()));
            offset += len;
        }
        let mut model = UNet::new(meta.config.model, meta.config.seed).map_err(|e| Error::format(&side, e.to_string()))?;
        model.load_params(store).map_err(|e| Error::format(&side, e.to_string()))?;
        Ok(Self {
            config: meta.config,
            steps_done: meta.steps_done,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Denoiser, UNetConfig};

    #[test]
    fn round_trip_reproduces_outputs() {
        let cfg = TrainConfig {
            model: UNetConfig { base_width: 8, wtconv: true },
            ..TrainConfig::default()
        };
        let mut model = UNet::new(cfg.model, 3).unwrap();
        for (k, v) in model.params_mut().iter_mut().flat_map(|t| t.data_mut()).enumerate() {
            *v += (k as f32 * 0.37).sin() * 0.01;
        }
        let ckpt = Checkpoint::new(cfg, 17, model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.steps_done, 17);
        assert_eq!(back.config, cfg);
        let x = Tensor::from_vec([1, 1, 16, 16], (0..256).map(|i| (i as f32 / 50.0).cos()).collect());
        let c = Tensor::from_vec([1, 1, 16, 16], (0..256).map(|i| (i as f32 / 30.0).sin()).collect());
        assert_eq!(back.model.predict(&x, &c, &[40]).unwrap(), ckpt.model.predict(&x, &c, &[40]).unwrap());
    }

    #[test]
    fn load_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.ckpt");
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("missing.ckpt"));
        let cfg = TrainConfig {
            model: UNetConfig { base_width: 8, wtconv: false },
            ..TrainConfig::default()
        };
        let ckpt = Checkpoint::new(cfg, 0, UNet::new(cfg.model, 0).unwrap());
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[4..]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("m.ckpt") && err.contains("bytes"), "{err}");
    }
}
