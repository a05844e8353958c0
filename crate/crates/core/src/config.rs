//! Run configuration: line-oriented `key = value` text with namespaced keys.
//!
//! Every key has a documented default (see [`KEYS`]); a config file only
//! overrides what it names, and unknown or repeated keys are rejected. The
//! fully resolved map is what goes into a run's provenance record.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::contrastive::{CLConfig, Strategy};
use crate::datagen::{ModalitySpec, WorldSpec};
use crate::error::{Error, Result};
use crate::evalsuite::NmiNorm;
use crate::toymodel::{ModelSpec, PretrainConfig};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("world.K", "64", "number of latent classes"),
    ("world.d_z", "8", "latent dimension"),
    ("world.modalities", "image:16:0.1,audio:16:0.1", "non-text modalities as name:obs_dim:noise_sigma"),
    ("world.V", "32", "text vocabulary size"),
    ("world.L", "4", "tokens per text sequence"),
    ("world.pages", "2", "token renderings (paraphrases) per class"),
    ("world.token_zipf", "1.0", "Zipf exponent of token frequencies; 0 is uniform"),
    ("model.enc_hidden", "64", "hidden width of each modality encoder"),
    ("model.trunk", "128,128,64", "trunk layer widths; the last is the embedding width"),
    ("pretrain.steps", "3000", "generative pretraining steps"),
    ("pretrain.lr", "0.001", "Adam learning rate for pretraining"),
    ("pretrain.batch", "64", "samples per pretraining step"),
    ("pretrain.sources", "image,audio,text", "modalities whose inputs predict the text"),
    ("cl.strategy", "lora", "lora | full_finetune | linear_projection"),
    ("cl.tau", "0.05", "InfoNCE temperature"),
    ("cl.steps", "1000", "contrastive training steps"),
    ("cl.lr", "0.001", "Adam learning rate for contrastive training"),
    ("cl.batch", "16", "triplets per contrastive batch"),
    ("cl.hard_negatives", "true", "add one hard negative per triplet"),
    ("lora.r", "8", "LoRA rank"),
    ("lora.alpha", "16", "LoRA scaling numerator (scale = alpha / r)"),
    ("eval.heldout", "1024", "held-out samples per modality for anisotropy"),
    ("eval.align_k", "10", "neighbours in mutual-kNN alignment"),
    ("eval.align_batch", "512", "paired samples for alignment"),
    ("eval.align_modality", "image", "modality aligned against text"),
    ("eval.queries", "256", "held-out queries per modality for retrieval"),
    ("eval.ndcg_k", "10", "cutoff for nDCG"),
    ("eval.probe_shots", "16", "training examples per class for the linear probe"),
    ("eval.nmi_norm", "sqrt", "NMI normalization: sqrt | arithmetic"),
    ("replicate.seeds", "5", "seeds per replication (seed, seed+1, ...)"),
    ("grsl.steps", "250,500,1000,2000,4000", "pretraining budgets of the scaling models"),
    ("seadoc.modality", "image", "modality given a high-noise variant"),
    ("seadoc.sigma", "0.5", "noise sigma of the high-noise variant"),
    ("seadoc.extra_steps", "1000", "extra generative pretraining steps on the variant"),
    ("bound.seeds", "40", "seeds in the bound sweep"),
    ("bound.delta", "0.05", "confidence parameter"),
    ("bound.sigma_q", "0.01", "posterior std of the Gaussian over the weight delta"),
    ("bound.sigma_p", "0.1", "prior std of the Gaussian over the weight delta"),
    ("bound.pool_batches", "32", "fixed training batches seen by contrastive training"),
    ("bound.cl_steps", "200", "contrastive steps per bound seed"),
    ("bound.heldout_batches", "32", "fresh batches estimating the population risk"),
    ("bound.eval_batch", "0", "held-out batch size; 0 uses cl.batch"),
    ("info.K", "8", "classes of the mutual-information check world"),
    ("info.sigma", "0.1", "noise sigma of the mutual-information check modality"),
    ("info.n_mc", "100000", "Monte Carlo samples for the true mutual information"),
    ("info.heldout", "4096", "held-out samples for the generative loss"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overridden by `text`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(Error::Config(format!("line {}: `{key}` already set on line {prev}", i + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Overrides one key and revalidates; unknown keys and bad values are rejected
    /// and leave the config unchanged.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(v) = self.values.get_mut(key) else {
            return Err(Error::Config(format!("unknown key `{key}`")));
        };
        let old = std::mem::replace(v, value.to_string());
        if let Err(e) = self.check() {
            self.values.insert(key.to_string(), old);
            return Err(Error::Config(format!("`{key} = {value}`: {e}")));
        }
        Ok(())
    }

    /// Fully resolved `key = value` text, one key per line in sorted order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`{key}` item `{s}`: {e}"))))
            .collect()
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(Error::Config(format!("`{key}` must be at least 1")));
        }
        Ok(v)
    }

    fn positive_f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("`{key}` must be positive and finite, got {v}")));
        }
        Ok(v)
    }

    /// Builds every typed view once so that bad values fail at load time.
    fn check(&self) -> Result<()> {
        let world = self.world_spec(0)?;
        self.model_spec(&world, 0)?;
        self.pretrain_config()?;
        self.cl_config(0)?;
        self.get::<bool>("cl.hard_negatives")?;
        for key in [
            "eval.heldout",
            "eval.align_k",
            "eval.align_batch",
            "eval.queries",
            "eval.ndcg_k",
            "eval.probe_shots",
            "replicate.seeds",
            "bound.seeds",
            "bound.pool_batches",
            "bound.heldout_batches",
            "info.K",
            "info.n_mc",
            "info.heldout",
        ] {
            self.positive(key)?;
        }
        for key in ["seadoc.extra_steps", "bound.cl_steps", "bound.eval_batch"] {
            self.get::<usize>(key)?;
        }
        for key in ["bound.sigma_q", "bound.sigma_p", "seadoc.sigma", "info.sigma"] {
            self.positive_f64(key)?;
        }
        let delta: f64 = self.get("bound.delta")?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("`bound.delta` must lie in (0, 1), got {delta}")));
        }
        self.nmi_norm()?;
        let align = self.raw("eval.align_modality")?;
        world.modality(align).map_err(|_| Error::Config(format!("`eval.align_modality`: no modality `{align}`")))?;
        let hard = self.raw("seadoc.modality")?;
        world.modality(hard).map_err(|_| Error::Config(format!("`seadoc.modality`: no modality `{hard}`")))?;
        let steps: Vec<usize> = self.get_list("grsl.steps")?;
        if steps.len() < 3 {
            return Err(Error::Config("`grsl.steps` needs at least 3 budgets".into()));
        }
        Ok(())
    }

    pub fn modalities(&self) -> Result<Vec<ModalitySpec>> {
        let raw = self.raw("world.modalities")?;
        raw.split(',')
            .map(|item| {
                let parts: Vec<&str> = item.trim().split(':').collect();
                let bad = || Error::Config(format!("`world.modalities` item `{item}` is not name:obs_dim:sigma"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                let dim = parts[1].parse().map_err(|_| bad())?;
                let sigma = parts[2].parse().map_err(|_| bad())?;
                Ok(ModalitySpec::new(parts[0], dim, sigma))
            })
            .collect()
    }

    pub fn world_spec(&self, seed: u64) -> Result<WorldSpec> {
        let spec = WorldSpec {
            classes: self.get("world.K")?,
            latent_dim: self.get("world.d_z")?,
            modalities: self.modalities()?,
            vocab_size: self.get("world.V")?,
            text_len: self.get("world.L")?,
            pages: self.get("world.pages")?,
            token_zipf: self.get("world.token_zipf")?,
            seed,
        };
        spec.validate().map_err(|e| Error::Config(format!("world: {e}")))?;
        Ok(spec)
    }

    pub fn model_spec(&self, world: &WorldSpec, seed: u64) -> Result<ModelSpec> {
        let spec = ModelSpec::for_world(world, self.get("model.enc_hidden")?, self.get_list("model.trunk")?, seed);
        spec.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(spec)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let sources: Vec<String> = self.get_list("pretrain.sources")?;
        if sources.iter().any(String::is_empty) {
            return Err(Error::Config("`pretrain.sources` has an empty item".into()));
        }
        Ok(PretrainConfig {
            steps: self.get("pretrain.steps")?,
            lr: self.positive_f64("pretrain.lr")?,
            batch: self.positive("pretrain.batch")?,
            sources,
        })
    }

    pub fn cl_config(&self, seed: u64) -> Result<CLConfig> {
        let strategy = Strategy::parse(self.raw("cl.strategy")?, self.positive("lora.r")?, self.positive_f64("lora.alpha")?)?;
        let cfg = CLConfig {
            strategy,
            tau: self.get("cl.tau")?,
            steps: self.get("cl.steps")?,
            lr: self.get("cl.lr")?,
            batch: self.get("cl.batch")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nmi_norm(&self) -> Result<NmiNorm> {
        NmiNorm::parse(self.raw("eval.nmi_norm")?)
    }
}
