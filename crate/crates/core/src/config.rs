//! Run configuration: backend selection, thresholds, budgets and prices in a
//! single TOML or JSON document.
//!
//! ```toml
//! [vlm]
//! kind = "scripted"
//! path = "script.json"
//!
//! [ocr]
//! kind = "scripted"
//! path = "ocr.json"
//!
//! [device]
//! sim = "app.json"
//!
//! [budget]
//! max_explore_per_scene = 5
//! ```
//!
//! Relative paths are resolved against the directory of the config file. The
//! only value taken from the environment is the API key for HTTP backends.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::comparison::CompareOptions;
use crate::device::{load_sim_app, AdbDevice, DeviceAdapter, SimDevice};
use crate::error::{Error, Result};
use crate::perception::{DetectionParams, HttpDetector, RegionDetector, ScriptedDetector};
use crate::recording::{EmbeddingBackend, HttpEmbedding, StubEmbedding, STUB_EMBEDDING_DIM, STUB_EMBEDDING_SEED};
use crate::replay::{ReplayBudget, ReplayOptions};
use crate::segmentation::{HttpOcr, OcrBackend, ScriptedOcr, SegmentationParams};
use crate::vlm::{HttpVlm, PriceTable, RetryPolicy, ScriptedVlm, VlmBackend, VlmClient};

pub const API_KEY_ENV: &str = "SCENEREPLAY_API_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Fixture-driven; needs `path`.
    Scripted,
    /// Remote service; needs `endpoint`.
    Http,
    /// Built-in stand-in (stub embedding, OCR that sees no text, no detections).
    #[default]
    Builtin,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl BackendConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            path: Some(path.into()),
            ..BackendConfig::default()
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        match self.kind {
            BackendKind::Scripted if self.path.is_none() => {
                Err(Error::Config(format!("{name}: scripted backend needs \"path\"")))
            }
            BackendKind::Http if self.endpoint.is_none() => {
                Err(Error::Config(format!("{name}: http backend needs \"endpoint\"")))
            }
            _ => Ok(()),
        }
    }

    fn path(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| Error::Config("scripted backend needs \"path\"".into()))
    }

    fn endpoint(&self) -> Result<String> {
        self.endpoint
            .clone()
            .ok_or_else(|| Error::Config("http backend needs \"endpoint\"".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdbConfig {
    pub binary: String,
    pub serial: Option<String>,
}

impl Default for AdbConfig {
    fn default() -> Self {
        AdbConfig {
            binary: "adb".into(),
            serial: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    /// Simulator app definition.
    pub sim: Option<PathBuf>,
    /// Real device over the debug bridge.
    pub adb: Option<AdbConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vlm: BackendConfig,
    pub ocr: BackendConfig,
    pub detector: BackendConfig,
    pub embedding: BackendConfig,
    pub segmentation: SegmentationParams,
    pub detection: DetectionParams,
    pub compare: CompareOptions,
    pub budget: ReplayBudget,
    pub retry: RetryPolicy,
    pub prices: PriceTable,
    pub device: DeviceConfig,
    pub output_dir: Option<PathBuf>,
    /// Resample recordings to this rate before analysis.
    pub sample_fps: Option<f64>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut config: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for backend in [&mut self.vlm, &mut self.ocr, &mut self.detector, &mut self.embedding] {
            resolve(base, &mut backend.path);
        }
        resolve(base, &mut self.device.sim);
        resolve(base, &mut self.output_dir);
    }

    /// Full check, for commands that call the model.
    pub fn validate(&self) -> Result<()> {
        self.vlm.check("vlm")?;
        if self.vlm.kind == BackendKind::Builtin {
            return Err(Error::Config("vlm: choose \"scripted\" or \"http\"".into()));
        }
        self.validate_offline()
    }

    /// Everything except the model backend; enough for segmentation.
    pub fn validate_offline(&self) -> Result<()> {
        self.ocr.check("ocr")?;
        self.detector.check("detector")?;
        self.embedding.check("embedding")?;
        if self.embedding.kind == BackendKind::Scripted {
            return Err(Error::Config("embedding: no scripted backend; use \"builtin\" or \"http\"".into()));
        }
        if self.device.sim.is_some() && self.device.adb.is_some() {
            return Err(Error::Config("device: set either \"sim\" or \"adb\", not both".into()));
        }
        if let Some(fps) = self.sample_fps {
            if !(fps.is_finite() && fps > 0.0) {
                return Err(Error::Config(format!("sample_fps must be positive, got {fps}")));
            }
        }
        Ok(())
    }

    pub fn replay_options(&self, deterministic: bool) -> ReplayOptions {
        ReplayOptions {
            budget: self.budget,
            segmentation: self.segmentation.clone(),
            detection: self.detection.clone(),
            compare: self.compare.clone(),
            deterministic,
        }
    }

    pub fn build_embedding(&self, api_key: Option<String>) -> Result<Box<dyn EmbeddingBackend>> {
        Ok(match self.embedding.kind {
            BackendKind::Builtin => Box::new(StubEmbedding::new(STUB_EMBEDDING_DIM, STUB_EMBEDDING_SEED)),
            BackendKind::Http => Box::new(HttpEmbedding {
                endpoint: self.embedding.endpoint()?,
                input_size: (224, 224),
                api_key,
            }),
            BackendKind::Scripted => {
                return Err(Error::Config("embedding: no scripted backend".into()));
            }
        })
    }

    pub fn build_ocr(&self, api_key: Option<String>) -> Result<Box<dyn OcrBackend>> {
        Ok(match self.ocr.kind {
            BackendKind::Builtin => Box::new(ScriptedOcr::default()),
            BackendKind::Scripted => Box::new(ScriptedOcr::load(self.ocr.path()?)?),
            BackendKind::Http => Box::new(HttpOcr {
                endpoint: self.ocr.endpoint()?,
                api_key,
            }),
        })
    }

    pub fn build_detector(&self, api_key: Option<String>) -> Result<Box<dyn RegionDetector>> {
        Ok(match self.detector.kind {
            BackendKind::Builtin => Box::new(ScriptedDetector::with_default(Vec::new())),
            BackendKind::Scripted => Box::new(ScriptedDetector::load(self.detector.path()?)?),
            BackendKind::Http => Box::new(HttpDetector {
                endpoint: self.detector.endpoint()?,
                api_key,
            }),
        })
    }

    pub fn build_vlm(&self, api_key: Option<String>) -> Result<VlmClient> {
        let backend: Arc<dyn VlmBackend> = match self.vlm.kind {
            BackendKind::Scripted => Arc::new(ScriptedVlm::load(self.vlm.path()?)?),
            BackendKind::Http => Arc::new(HttpVlm::new(
                self.vlm.endpoint()?,
                self.vlm.model.clone().unwrap_or_else(|| "gpt-4o".into()),
                api_key,
            )),
            BackendKind::Builtin => return Err(Error::Config("vlm: choose \"scripted\" or \"http\"".into())),
        };
        Ok(VlmClient::new(backend, self.retry.clone(), self.prices.clone()))
    }

    pub fn build_device(&self) -> Result<Box<dyn DeviceAdapter>> {
        match (&self.device.sim, &self.device.adb) {
            (Some(path), None) => Ok(Box::new(SimDevice::new(load_sim_app(path)?)?)),
            (None, Some(adb)) => Ok(Box::new(AdbDevice::new(adb.binary.clone(), adb.serial.clone()))),
            (None, None) => Err(Error::Config("no device configured: set device.sim or device.adb".into())),
            (Some(_), Some(_)) => Err(Error::Config("device: set either \"sim\" or \"adb\", not both".into())),
        }
    }
}
