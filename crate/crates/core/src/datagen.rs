//! Synthetic multimodal world.
//!
//! `K` discrete classes each own a unit-norm latent vector. Every non-text
//! modality renders a class as `tanh(W z + b) + noise`; the text modality is a
//! fixed token sequence per class (several "pages", i.e. paraphrases, per
//! class). Because classes are discrete and text is a bijection of the class,
//! `H(Y) = ln K` and `I(X;Y)` can be estimated against the true likelihood.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, log_sum_exp, Matrix, Rng};

/// Name reserved for the token modality.
pub const TEXT: &str = "text";

const TOKEN_RETRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub obs_dim: usize,
    pub noise_sigma: f64,
}

impl ModalitySpec {
    pub fn new(name: &str, obs_dim: usize, noise_sigma: f64) -> Self {
        Self { name: name.to_string(), obs_dim, noise_sigma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub classes: usize,
    pub latent_dim: usize,
    pub modalities: Vec<ModalitySpec>,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Token renderings per class. Page 0 is the generative target.
    pub pages: usize,
    /// Zipf exponent of token frequencies (token id 0 most frequent); 0 is uniform.
    pub token_zipf: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            classes: 64,
            latent_dim: 8,
            modalities: vec![ModalitySpec::new("image", 16, 0.1), ModalitySpec::new("audio", 16, 0.1)],
            vocab_size: 32,
            text_len: 4,
            pages: 2,
            token_zipf: 1.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("world needs at least 2 classes"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.text_len < 1 || self.latent_dim < 1 || self.pages < 1 {
            return Err(invalid("text_len, latent_dim and pages must be at least 1"));
        }
        if !self.token_zipf.is_finite() || self.token_zipf < 0.0 {
            return Err(invalid("token_zipf must be finite and >= 0"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if m.name == TEXT || m.name.is_empty() {
                return Err(invalid(format!("modality name `{}` is reserved or empty", m.name)));
            }
            if !seen.insert(&m.name) {
                return Err(invalid(format!("duplicate modality `{}`", m.name)));
            }
            if m.obs_dim < 1 {
                return Err(invalid(format!("modality `{}` has obs_dim 0", m.name)));
            }
            if !m.noise_sigma.is_finite() || m.noise_sigma < 0.0 {
                return Err(invalid(format!("modality `{}` noise_sigma must be finite and >= 0", m.name)));
            }
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Renderer {
    weight: Matrix,
    bias: Vec<f64>,
}

/// Frozen world state built from a [`WorldSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    spec: WorldSpec,
    latents: Matrix,
    renderers: BTreeMap<String, Renderer>,
    /// `pages × K` rows of `L` token ids, page-major.
    tokens: Vec<Vec<u32>>,
    decode: HashMap<Vec<u32>, (usize, usize)>,
}

/// One draw: a class, its rendering in every non-text modality, and its
/// page-0 token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class_id: usize,
    pub observations: BTreeMap<String, Vec<f64>>,
    pub tokens: Vec<u32>,
}

/// Information quantities in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InfoEstimate {
    pub h_y: f64,
    pub h_y_given_x: f64,
    pub i_xy: f64,
    /// Monte Carlo standard error of `h_y_given_x`.
    pub std_err: f64,
}

pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let rows_needed = spec.pages * spec.classes;
    let capacity = (spec.vocab_size as f64).powi(spec.text_len as i32);
    if capacity < rows_needed as f64 {
        return Err(invalid(format!(
            "V^L = {capacity} cannot hold {rows_needed} distinct token rows"
        )));
    }
    let mut rng = Rng::new(spec.seed);

    let mut latents = rng.normal_matrix(spec.classes, spec.latent_dim, 1.0);
    for i in 0..spec.classes {
        let row = latents.row_mut(i);
        let n = dot(row, row).sqrt();
        if n == 0.0 {
            row[0] = 1.0;
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    let mut renderers = BTreeMap::new();
    for m in &spec.modalities {
        let weight = rng.normal_matrix(m.obs_dim, spec.latent_dim, 1.0);
        let bias = (0..m.obs_dim).map(|_| 0.1 * rng.normal()).collect();
        renderers.insert(m.name.clone(), Renderer { weight, bias });
    }

    let mut tokens = Vec::with_capacity(rows_needed);
    let mut decode = HashMap::with_capacity(rows_needed);
    for page in 0..spec.pages {
        for class in 0..spec.classes {
            let mut attempt = 0;
            let row = loop {
                let row: Vec<u32> =
                    (0..spec.text_len).map(|_| rng.zipf_index(spec.vocab_size, spec.token_zipf) as u32).collect();
                if !decode.contains_key(&row) {
                    break row;
                }
                attempt += 1;
                if attempt >= TOKEN_RETRIES {
                    return Err(invalid(format!(
                        "could not draw a distinct token row for class {class} page {page}"
                    )));
                }
            };
            decode.insert(row.clone(), (class, page));
            tokens.push(row);
        }
    }

    Ok(World { spec: spec.clone(), latents, renderers, tokens, decode })
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.spec.modalities.iter().map(|m| m.name.clone()).collect()
    }

    /// Token sequence of `class` on `page`.
    pub fn tokens(&self, class: usize, page: usize) -> &[u32] {
        &self.tokens[page * self.spec.classes + class]
    }

    /// Inverse of the token table: `(class, page)`.
    pub fn decode_tokens(&self, tokens: &[u32]) -> Option<(usize, usize)> {
        self.decode.get(tokens).copied()
    }

    /// Noise-free rendering `tanh(W z_c + b)`.
    pub fn render_mean(&self, modality: &str, class: usize) -> Result<Vec<f64>> {
        let r = self
            .renderers
            .get(modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))?;
        let z = self.latents.row(class);
        Ok(r.weight.row_iter().zip(&r.bias).map(|(w, b)| (dot(w, z) + b).tanh()).collect())
    }

    pub fn observe(&self, modality: &str, class: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let sigma = self.spec.modality(modality)?.noise_sigma;
        let mut x = self.render_mean(modality, class)?;
        if sigma > 0.0 {
            x.iter_mut().for_each(|v| *v += sigma * rng.normal());
        }
        Ok(x)
    }

    /// Same world with one modality's noise level replaced.
    pub fn with_noise(&self, modality: &str, sigma: f64) -> Result<World> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(invalid("noise_sigma must be finite and >= 0"));
        }
        let mut out = self.clone();
        let m = out
            .spec
            .modalities
            .iter_mut()
            .find(|m| m.name == modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))?;
        m.noise_sigma = sigma;
        Ok(out)
    }

    /// Class whose latent is closest to `class`'s (highest cosine, lowest id on ties).
    pub fn nearest_other_class(&self, class: usize) -> usize {
        let z = self.latents.row(class);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for c in 0..self.spec.classes {
            if c == class {
                continue;
            }
            let s = dot(z, self.latents.row(c));
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    pub fn sample(&self, class: usize, rng: &mut Rng) -> Result<Sample> {
        let mut observations = BTreeMap::new();
        for m in &self.spec.modalities {
            observations.insert(m.name.clone(), self.observe(&m.name, class, rng)?);
        }
        Ok(Sample { class_id: class, observations, tokens: self.tokens(class, 0).to_vec() })
    }
}

/// `n` samples with classes drawn uniformly.
pub fn sample_batch(world: &World, n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    (0..n)
        .map(|_| {
            let c = rng.below(world.classes());
            world.sample(c, rng)
        })
        .collect()
}

/// Ground-truth `H(Y)`, `H(Y|X)` and `I(X;Y)` for one modality.
///
/// `H(Y|X)` is a Monte Carlo average of `-ln p(y|x)` under the true Gaussian
/// rendering likelihood with a uniform class prior.
pub fn true_info(world: &World, modality: &str, n_mc: usize, rng: &mut Rng) -> Result<InfoEstimate> {
    let sigma = world.spec.modality(modality)?.noise_sigma;
    if n_mc == 0 {
        return Err(invalid("n_mc must be at least 1"));
    }
    let k = world.classes();
    let h_y = (k as f64).ln();
    let means: Vec<Vec<f64>> =
        (0..k).map(|c| world.render_mean(modality, c)).collect::<Result<_>>()?;

    if sigma == 0.0 {
        // Deterministic rendering: y is recoverable unless two means coincide.
        let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
        for m in &means {
            *groups.entry(m.iter().map(|v| v.to_bits()).collect()).or_default() += 1;
        }
        let h_y_given_x = groups.values().map(|&g| g as f64 / k as f64 * (g as f64).ln()).sum::<f64>();
        let i_xy = (h_y - h_y_given_x).clamp(0.0, h_y);
        return Ok(InfoEstimate { h_y, h_y_given_x, i_xy, std_err: 0.0 });
    }

    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut log_lik = vec![0.0; k];
    let mut x = vec![0.0; means[0].len()];
    for _ in 0..n_mc {
        let c = rng.below(k);
        for (xi, mi) in x.iter_mut().zip(&means[c]) {
            *xi = mi + sigma * rng.normal();
        }
        for (ll, m) in log_lik.iter_mut().zip(&means) {
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            *ll = -d2 * inv_two_var;
        }
        let nll = log_sum_exp(&log_lik) - log_lik[c];
        sum += nll;
        sum_sq += nll * nll;
    }
    let n = n_mc as f64;
    let h_y_given_x = sum / n;
    let var = (sum_sq / n - h_y_given_x * h_y_given_x).max(0.0);
    let i_xy = (h_y - h_y_given_x).clamp(0.0, h_y);
    Ok(InfoEstimate { h_y, h_y_given_x, i_xy, std_err: (var / n).sqrt() })
}

/// One line of a dataset export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub cls: usize,
    #[serde(rename = "mod")]
    pub modality: String,
    pub obs: Vec<f64>,
    pub tok: Vec<u32>,
}

/// Writes one JSON line per (sample, modality) pair.
pub fn export_dataset<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    let mut id = 0u64;
    for s in samples {
        for (name, obs) in &s.observations {
            let rec = DatasetRecord {
                id,
                cls: s.class_id,
                modality: name.clone(),
                obs: obs.clone(),
                tok: s.tokens.clone(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n")?;
            id += 1;
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
