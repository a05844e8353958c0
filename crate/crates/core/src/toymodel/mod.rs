//! Desk-scale multimodal model.
//!
//! Non-text inputs go through a per-modality encoder (`tanh` hidden layer then
//! a linear projector) into the shared trunk input space; text is the mean of
//! its token embeddings. The trunk is a stack of `tanh` layers followed by a
//! linear output layer whose output is the embedding. A zero-initialized linear head predicts all
//! `L` target tokens from the embedding at once.
//!
//! Gradients are written out by hand; `tests` check them against central
//! differences.

mod checkpoint;
mod lora;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, soup, Checkpoint, CHECKPOINT_MAGIC};
pub use lora::{merge_lora, LoraAdapter, LoraLayer};
pub use train::{pretrain, pretrain_with_snapshots, Adam, AdamConfig, PretrainConfig, PretrainOutcome};

use crate::datagen::{Sample, WorldSpec, TEXT};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{log_sum_exp, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Non-text modalities and their observation widths.
    pub modalities: Vec<(String, usize)>,
    pub enc_hidden: usize,
    /// Output width of each trunk layer; the last one equals `embed_dim`.
    pub trunk_dims: Vec<usize>,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    /// Spec matching a world's modalities and token shape.
    pub fn for_world(world: &WorldSpec, enc_hidden: usize, trunk_dims: Vec<usize>, init_seed: u64) -> Self {
        let embed_dim = trunk_dims.last().copied().unwrap_or(0);
        Self {
            modalities: world.modalities.iter().map(|m| (m.name.clone(), m.obs_dim)).collect(),
            enc_hidden,
            trunk_dims,
            embed_dim,
            vocab_size: world.vocab_size,
            text_len: world.text_len,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_dims.len() < 2 {
            return Err(invalid("trunk needs at least 2 layers"));
        }
        if self.trunk_dims.iter().any(|&d| d == 0)
            || self.enc_hidden == 0
            || self.embed_dim == 0
            || self.vocab_size == 0
            || self.text_len == 0
        {
            return Err(invalid("all model dimensions must be at least 1"));
        }
        if self.trunk_dims.last() != Some(&self.embed_dim) {
            return Err(invalid("last trunk width must equal embed_dim"));
        }
        for (name, dim) in &self.modalities {
            if name == TEXT || *dim == 0 {
                return Err(invalid(format!("bad modality `{name}` of width {dim}")));
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self, modality: &str) -> Result<usize> {
        self.modalities
            .iter()
            .find(|(n, _)| n == modality)
            .map(|(_, d)| *d)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    /// `(in, out)` widths of trunk layer `i`.
    pub fn trunk_layer_dims(&self, i: usize) -> (usize, usize) {
        let input = if i == 0 { self.embed_dim } else { self.trunk_dims[i - 1] };
        (input, self.trunk_dims[i])
    }

    /// Canonical `key=value` text, one key per line, fixed order.
    pub fn to_canonical(&self) -> String {
        let mods: Vec<String> = self.modalities.iter().map(|(n, d)| format!("{n}:{d}")).collect();
        let trunk: Vec<String> = self.trunk_dims.iter().map(usize::to_string).collect();
        format!(
            "modalities={}\nenc_hidden={}\ntrunk_dims={}\nembed_dim={}\nvocab_size={}\ntext_len={}\ninit_seed={}\n",
            mods.join(","),
            self.enc_hidden,
            trunk.join(","),
            self.embed_dim,
            self.vocab_size,
            self.text_len,
            self.init_seed
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("spec line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("spec missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("spec key `{k}` is not a count")))
        };
        let modalities = if get("modalities")?.is_empty() {
            Vec::new()
        } else {
            get("modalities")?
                .split(',')
                .map(|m| {
                    let (n, d) = m
                        .split_once(':')
                        .ok_or_else(|| Error::Format(format!("bad modality entry `{m}`")))?;
                    let d = d.parse().map_err(|_| Error::Format(format!("bad modality width `{d}`")))?;
                    Ok((n.to_string(), d))
                })
                .collect::<Result<_>>()?
        };
        let trunk_dims = get("trunk_dims")?
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad trunk width `{d}`"))))
            .collect::<Result<_>>()?;
        let init_seed =
            get("init_seed")?.parse().map_err(|_| Error::Format("bad init_seed".into()))?;
        let spec = Self {
            modalities,
            enc_hidden: num("enc_hidden")?,
            trunk_dims,
            embed_dim: num("embed_dim")?,
            vocab_size: num("vocab_size")?,
            text_len: num("text_len")?,
            init_seed,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(spec)
    }
}

/// Affine layer `y = x Wᵀ + b` with `W: out × in` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn xavier(out: usize, input: usize, rng: &mut Rng) -> Self {
        Self { weight: rng.xavier_uniform(out, input), bias: Matrix::zeros(1, out) }
    }

    fn zeros(out: usize, input: usize) -> Self {
        Self { weight: Matrix::zeros(out, input), bias: Matrix::zeros(1, out) }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row_broadcast(self.bias.as_slice())?;
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream `dy` and input `x`.
    fn accumulate(&self, grads: &mut Dense, x: &Matrix, dy: &Matrix) -> Result<()> {
        grads.weight.add_scaled(&dy.t_matmul(x)?, 1.0)?;
        for (g, s) in grads.bias.as_mut_slice().iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub hidden: Dense,
    pub proj: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    spec: ModelSpec,
    pub encoders: BTreeMap<String, Encoder>,
    /// `V × d_e`.
    pub token_emb: Matrix,
    pub trunk: Vec<Dense>,
    /// `L·V × d_e`, zero at init.
    pub head: Dense,
}

/// Batched model input for one modality.
#[derive(Clone, Copy, Debug)]
pub enum Inputs<'a> {
    Obs(&'a Matrix),
    Tokens(&'a [Vec<u32>]),
}

/// Single model input.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Obs(&'a [f64]),
    Tokens(&'a [u32]),
}

/// Output of [`ToyModel::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub embedding: Vec<f64>,
    /// Trunk input followed by every trunk layer output (empty unless captured).
    pub layers: Vec<Vec<f64>>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    modality: String,
    obs: Option<Matrix>,
    tokens: Option<Vec<Vec<u32>>>,
    enc_hidden: Option<Matrix>,
    /// `layers[0]` is the trunk input, `layers[t + 1]` the output of trunk layer `t`.
    layers: Vec<Matrix>,
    /// `layers[t] · Aₜᵀ` for adapted layers.
    lora_mid: Vec<Option<Matrix>>,
}

impl Forward {
    pub fn embedding(&self) -> &Matrix {
        self.layers.last().expect("trunk has layers")
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn into_embedding(mut self) -> Matrix {
        self.layers.pop().expect("trunk has layers")
    }
}

/// Which parameter groups a backward pass should fill in.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardScope {
    /// Encoders and the token table.
    pub inputs: bool,
    pub trunk: bool,
    pub adapter: bool,
}

impl BackwardScope {
    pub const ALL: BackwardScope = BackwardScope { inputs: true, trunk: true, adapter: true };
}

pub fn init_model(spec: &ModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let mut rng = Rng::new(spec.init_seed);
    let mut encoders = BTreeMap::new();
    for (name, dim) in &spec.modalities {
        let hidden = Dense::xavier(spec.enc_hidden, *dim, &mut rng);
        let proj = Dense::xavier(spec.embed_dim, spec.enc_hidden, &mut rng);
        encoders.insert(name.clone(), Encoder { hidden, proj });
    }
    let token_emb = rng.xavier_uniform(spec.vocab_size, spec.embed_dim);
    let trunk = (0..spec.trunk_dims.len())
        .map(|i| {
            let (input, out) = spec.trunk_layer_dims(i);
            Dense::xavier(out, input, &mut rng)
        })
        .collect();
    let head = Dense::zeros(spec.text_len * spec.vocab_size, spec.embed_dim);
    Ok(ToyModel { spec: spec.clone(), encoders, token_emb, trunk, head })
}

impl ToyModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> ToyModel {
        let encoders = self
            .encoders
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    Encoder {
                        hidden: Dense::zeros(e.hidden.weight.rows(), e.hidden.weight.cols()),
                        proj: Dense::zeros(e.proj.weight.rows(), e.proj.weight.cols()),
                    },
                )
            })
            .collect();
        ToyModel {
            spec: self.spec.clone(),
            encoders,
            token_emb: Matrix::zeros(self.token_emb.rows(), self.token_emb.cols()),
            trunk: self.trunk.iter().map(|d| Dense::zeros(d.weight.rows(), d.weight.cols())).collect(),
            head: Dense::zeros(self.head.weight.rows(), self.head.weight.cols()),
        }
    }

    /// Every parameter tensor with its stable name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (name, e) in &self.encoders {
            out.push((format!("enc.{name}.hidden.w"), &e.hidden.weight));
            out.push((format!("enc.{name}.hidden.b"), &e.hidden.bias));
            out.push((format!("enc.{name}.proj.w"), &e.proj.weight));
            out.push((format!("enc.{name}.proj.b"), &e.proj.bias));
        }
        out.push(("tok_emb".to_string(), &self.token_emb));
        for (i, d) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.w"), &d.weight));
            out.push((format!("trunk.{i}.b"), &d.bias));
        }
        out.push(("head.w".to_string(), &self.head.weight));
        out.push(("head.b".to_string(), &self.head.bias));
        out
    }

    /// Mutable tensors in the same order as [`ToyModel::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for e in self.encoders.values_mut() {
            out.push(&mut e.hidden.weight);
            out.push(&mut e.hidden.bias);
            out.push(&mut e.proj.weight);
            out.push(&mut e.proj.bias);
        }
        out.push(&mut self.token_emb);
        for d in &mut self.trunk {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Trunk weights and biases only.
    pub fn trunk_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.trunk.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]).collect()
    }

    pub fn trunk_tensors(&self) -> Vec<&Matrix> {
        self.trunk.iter().flat_map(|d| [&d.weight, &d.bias]).collect()
    }

    /// Rebuilds a model from named tensors (as stored in a checkpoint).
    pub fn from_named_tensors(spec: &ModelSpec, tensors: &[(String, Matrix)]) -> Result<ToyModel> {
        let mut model = init_model(spec)?;
        let expected: Vec<(String, (usize, usize))> =
            model.named_tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape_), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || *shape_ != got.shape() {
                return Err(Error::Format(format!(
                    "tensor `{got_name}` {:?} does not match expected `{name}` {shape_:?}",
                    got.shape()
                )));
            }
        }
        for (dst, (_, src)) in model.tensors_mut().into_iter().zip(tensors) {
            *dst = src.clone();
        }
        Ok(model)
    }

    /// Batched forward pass up to the embedding.
    pub fn forward(&self, modality: &str, inputs: Inputs<'_>, adapter: Option<&LoraAdapter>) -> Result<Forward> {
        if let Some(a) = adapter {
            a.check_compatible(&self.spec)?;
        }
        let (z0, obs, tokens, enc_hidden) = match inputs {
            Inputs::Tokens(seqs) => {
                if modality != TEXT {
                    return Err(invalid(format!("token input given for modality `{modality}`")));
                }
                (self.embed_tokens(seqs)?, None, Some(seqs.to_vec()), None)
            }
            Inputs::Obs(x) => {
                let enc = self
                    .encoders
                    .get(modality)
                    .ok_or_else(|| Error::UnknownModality(modality.to_string()))?;
                if x.cols() != self.spec.obs_dim(modality)? {
                    return Err(shape(format!(
                        "modality `{modality}` expects width {}, got {}",
                        self.spec.obs_dim(modality)?,
                        x.cols()
                    )));
                }
                let h = enc.hidden.apply(x)?.map(f64::tanh);
                let z0 = enc.proj.apply(&h)?;
                (z0, Some(x.clone()), None, Some(h))
            }
        };
        if z0.rows() == 0 {
            return Err(invalid("empty batch"));
        }
        let mut layers = Vec::with_capacity(self.trunk.len() + 1);
        let mut lora_mid = Vec::with_capacity(self.trunk.len());
        layers.push(z0);
        for (t, dense) in self.trunk.iter().enumerate() {
            let x = &layers[t];
            let mut pre = dense.apply(x)?;
            let mid = match adapter {
                Some(a) => {
                    let l = &a.layers[t];
                    let mid = x.matmul_t(&l.a)?;
                    pre.add_scaled(&mid.matmul_t(&l.b)?, a.scale())?;
                    Some(mid)
                }
                None => None,
            };
            lora_mid.push(mid);
            let last = t + 1 == self.trunk.len();
            layers.push(if last { pre } else { pre.map(f64::tanh) });
        }
        Ok(Forward { modality: modality.to_string(), obs, tokens, enc_hidden, layers, lora_mid })
    }

    /// Batched embeddings (final trunk activations).
    pub fn embed(&self, modality: &str, inputs: Inputs<'_>, adapter: Option<&LoraAdapter>) -> Result<Matrix> {
        Ok(self.forward(modality, inputs, adapter)?.into_embedding())
    }

    /// Single-input encode, optionally returning every trunk activation.
    pub fn encode(
        &self,
        modality: &str,
        input: Input<'_>,
        adapter: Option<&LoraAdapter>,
        capture_layers: bool,
    ) -> Result<Encoding> {
        let fwd = match input {
            Input::Obs(x) => {
                let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
                self.forward(modality, Inputs::Obs(&m), adapter)?
            }
            Input::Tokens(t) => self.forward(modality, Inputs::Tokens(&[t.to_vec()]), adapter)?,
        };
        let layers = if capture_layers {
            fwd.layers.iter().map(|l| l.row(0).to_vec()).collect()
        } else {
            Vec::new()
        };
        Ok(Encoding { embedding: fwd.embedding().row(0).to_vec(), layers })
    }

    fn embed_tokens(&self, seqs: &[Vec<u32>]) -> Result<Matrix> {
        let d = self.spec.embed_dim;
        let mut z = Matrix::zeros(seqs.len(), d);
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(invalid("empty token sequence"));
            }
            let row = z.row_mut(i);
            for &tok in seq {
                if tok as usize >= self.spec.vocab_size {
                    return Err(invalid(format!("token id {tok} >= vocab size {}", self.spec.vocab_size)));
                }
                for (r, e) in row.iter_mut().zip(self.token_emb.row(tok as usize)) {
                    *r += e;
                }
            }
            let inv = 1.0 / seq.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(z)
    }

    /// Generative head logits, `n × (L·V)`.
    pub fn head_logits(&self, emb: &Matrix) -> Result<Matrix> {
        self.head.apply(emb)
    }

    /// Backpropagates `d_emb` (gradient of the loss w.r.t. the embeddings of
    /// `fwd`) into the requested parameter groups.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_emb: &Matrix,
        adapter: Option<&LoraAdapter>,
        scope: BackwardScope,
        grads: &mut ToyModel,
        adapter_grads: Option<&mut LoraAdapter>,
    ) -> Result<()> {
        if d_emb.shape() != fwd.embedding().shape() {
            return Err(shape("embedding gradient does not match forward batch"));
        }
        let mut adapter_grads = adapter_grads;
        let mut dz = d_emb.clone();
        for t in (0..self.trunk.len()).rev() {
            let out = &fwd.layers[t + 1];
            let x = &fwd.layers[t];
            // through tanh (the output layer is linear)
            let mut da = dz;
            if t + 1 != self.trunk.len() {
                for (g, y) in da.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *g *= 1.0 - y * y;
                }
            }
            if scope.trunk {
                self.trunk[t].accumulate(&mut grads.trunk[t], x, &da)?;
            }
            let need_dx = t > 0 || scope.inputs;
            let mut dx = if need_dx { Some(da.matmul(&self.trunk[t].weight)?) } else { None };
            if let (Some(a), Some(mid)) = (adapter, &fwd.lora_mid[t]) {
                let l = &a.layers[t];
                let s = a.scale();
                let da_b = da.matmul(&l.b)?; // n × r
                if scope.adapter {
                    if let Some(ag) = adapter_grads.as_deref_mut() {
                        let gl = &mut ag.layers[t];
                        gl.b.add_scaled(&da.t_matmul(mid)?, s)?;
                        gl.a.add_scaled(&da_b.t_matmul(x)?, s)?;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    dx.add_scaled(&da_b.matmul(&l.a)?, s)?;
                }
            }
            match dx {
                Some(dx) => dz = dx,
                None => return Ok(()),
            }
        }
        if !scope.inputs {
            return Ok(());
        }
        let dz0 = dz;
        if let Some(seqs) = &fwd.tokens {
            for (i, seq) in seqs.iter().enumerate() {
                let inv = 1.0 / seq.len() as f64;
                for &tok in seq {
                    for (g, d) in grads.token_emb.row_mut(tok as usize).iter_mut().zip(dz0.row(i)) {
                        *g += d * inv;
                    }
                }
            }
        } else {
            let enc = &self.encoders[&fwd.modality];
            let genc = grads.encoders.get_mut(&fwd.modality).expect("same shape");
            let h = fwd.enc_hidden.as_ref().expect("encoder activations");
            let x = fwd.obs.as_ref().expect("observations");
            enc.proj.accumulate(&mut genc.proj, h, &dz0)?;
            let mut dh = dz0.matmul(&enc.proj.weight)?;
            for (g, y) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *g *= 1.0 - y * y;
            }
            enc.hidden.accumulate(&mut genc.hidden, x, &dh)?;
        }
        Ok(())
    }

    /// Adds Gaussian noise of std `scale` to every trunk weight.
    pub fn perturb_trunk(&mut self, scale: f64, rng: &mut Rng) {
        for d in &mut self.trunk {
            for w in d.weight.as_mut_slice() {
                *w += scale * rng.normal();
            }
        }
    }
}

/// Mean per-token cross-entropy of position-factorized logits and its
/// gradient w.r.t. the logits.
pub fn token_cross_entropy(
    logits: &Matrix,
    targets: &[Vec<u32>],
    vocab: usize,
    text_len: usize,
) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() || logits.cols() != vocab * text_len {
        return Err(shape("logits do not match targets"));
    }
    let n = targets.len();
    let norm = 1.0 / (n * text_len) as f64;
    // running mean: exact when every term is equal (e.g. ln V at a zero head)
    let mut loss = 0.0;
    let mut count = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, target) in targets.iter().enumerate() {
        if target.len() != text_len {
            return Err(shape(format!("target of length {} != {text_len}", target.len())));
        }
        for (pos, &tok) in target.iter().enumerate() {
            if tok as usize >= vocab {
                return Err(invalid(format!("token id {tok} >= vocab size {vocab}")));
            }
            let seg = &logits.row(i)[pos * vocab..(pos + 1) * vocab];
            let lse = log_sum_exp(seg);
            count += 1.0;
            loss += (lse - seg[tok as usize] - loss) / count;
            let g = &mut grad.row_mut(i)[pos * vocab..(pos + 1) * vocab];
            for (gv, &l) in g.iter_mut().zip(seg) {
                *gv = (l - lse).exp() * norm;
            }
            g[tok as usize] -= norm;
        }
    }
    Ok((loss, grad))
}

fn source_inputs(batch: &[Sample], modality: &str) -> Result<(Option<Matrix>, Vec<Vec<u32>>)> {
    let targets: Vec<Vec<u32>> = batch.iter().map(|s| s.tokens.clone()).collect();
    if modality == TEXT {
        return Ok((None, targets));
    }
    let rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| {
            s.observations
                .get(modality)
                .cloned()
                .ok_or_else(|| Error::UnknownModality(modality.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok((Some(Matrix::from_rows(&rows)?), targets))
}

/// Mean cross-entropy (nats per token) of predicting each sample's tokens
/// from its `source_modality` input. For the text source the input is the
/// sample's own token sequence.
pub fn generative_loss(model: &ToyModel, batch: &[Sample], source_modality: &str) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (obs, targets) = source_inputs(batch, source_modality)?;
    let inputs = match &obs {
        Some(x) => Inputs::Obs(x),
        None => Inputs::Tokens(&targets),
    };
    generative_loss_for(model, source_modality, inputs, &targets, None)
}

/// Loss and full-model gradient for explicit inputs and targets.
pub fn generative_loss_for(
    model: &ToyModel,
    modality: &str,
    inputs: Inputs<'_>,
    targets: &[Vec<u32>],
    grads: Option<&mut ToyModel>,
) -> Result<f64> {
    let spec = model.spec();
    let fwd = model.forward(modality, inputs, None)?;
    let logits = model.head_logits(fwd.embedding())?;
    let (loss, dlogits) = token_cross_entropy(&logits, targets, spec.vocab_size, spec.text_len)?;
    if let Some(g) = grads {
        model.head.accumulate(&mut g.head, fwd.embedding(), &dlogits)?;
        let d_emb = dlogits.matmul(&model.head.weight)?;
        model.backward(&fwd, &d_emb, None, BackwardScope { inputs: true, trunk: true, adapter: false }, g, None)?;
    }
    Ok(loss)
}

/// Loss and gradient of [`generative_loss`].
pub fn generative_loss_and_grad(model: &ToyModel, batch: &[Sample], source_modality: &str) -> Result<(f64, ToyModel)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (obs, targets) = source_inputs(batch, source_modality)?;
    let inputs = match &obs {
        Some(x) => Inputs::Obs(x),
        None => Inputs::Tokens(&targets),
    };
    let mut grads = model.zeros_like();
    let loss = generative_loss_for(model, source_modality, inputs, &targets, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Flattens tensors into one vector (canonical order).
pub fn flatten(tensors: &[&Matrix]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

/// Writes a flat vector back into tensors (inverse of [`flatten`]).
pub fn unflatten(tensors: Vec<&mut Matrix>, flat: &[f64]) {
    let mut off = 0;
    for t in tensors {
        let n = t.len();
        t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len(), "flat vector length");
}
