//! Single JSON run configuration with every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MfccConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::ingest::{load_manifest, VideoSample};
use crate::sentiment::{parse_skg, SentimentTriple};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub skg: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Parameter snapshot used by `eval` when scoring a manifest.
    pub params: Option<PathBuf>,
    /// JSON Lines of `{"id", "pred", "label"}` scored directly by `eval`.
    pub predictions: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub mfcc: MfccConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: Paths,
    /// Generates the dataset in memory when no manifest is given.
    pub synthetic: Option<SyntheticConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.manifest, &mut p.skg, &mut p.vocab, &mut p.params, &mut p.predictions, &mut p.out_dir] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }

    /// The synthetic preset: corpus settings plus matching model and schedule.
    pub fn synthetic_preset() -> Self {
        let synthetic = SyntheticConfig::default();
        let model = crate::synthetic::model_config(&synthetic);
        Self {
            train: crate::synthetic::train_config(),
            mfcc: crate::synthetic::mfcc_config(&synthetic, model.n_mfcc),
            model,
            synthetic: Some(synthetic),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.mfcc.validate()?;
        if self.mfcc.n_mfcc != self.model.n_mfcc {
            return Err(Error::InvalidArgument(format!(
                "mfcc.n_mfcc ({}) must equal model.n_mfcc ({})",
                self.mfcc.n_mfcc, self.model.n_mfcc
            )));
        }
        if let Some(s) = &self.synthetic {
            if s.d != self.model.d {
                return Err(Error::InvalidArgument("synthetic.d must equal model.d".into()));
            }
        }
        Ok(())
    }

    /// Samples and knowledge triples: from the manifest and SKG file when
    /// configured, otherwise from the synthetic generator.
    pub fn load_data(&self) -> Result<(Vec<VideoSample>, Vec<SentimentTriple>)> {
        if let Some(manifest) = &self.paths.manifest {
            let samples = load_manifest(manifest)?
                .iter()
                .map(|d| d.resolve(&self.mfcc))
                .collect::<Result<Vec<_>>>()?;
            let triples = match &self.paths.skg {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    parse_skg(&text, p)?
                }
                None => Vec::new(),
            };
            return Ok((samples, triples));
        }
        match &self.synthetic {
            Some(s) => {
                let corpus = crate::synthetic::generate(s, self.model.n_mfcc)?;
                Ok((corpus.samples, corpus.triples))
            }
            None => Err(Error::InvalidArgument("config names neither paths.manifest nor synthetic".into())),
        }
    }

    /// Checks that every configured input path exists.
    pub fn check_inputs(&self) -> Result<()> {
        let p = &self.paths;
        for path in [&p.manifest, &p.skg, &p.vocab, &p.params, &p.predictions].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(())
    }
}
