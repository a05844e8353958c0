//! InfoNCE and contrastive refinement of a pretrained model on text triplets.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::datagen::{World, TEXT};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, softmax, Matrix, Rng};
use crate::toymodel::{merge_lora, Adam, AdamConfig, BackwardScope, Forward, Inputs, LoraAdapter, ToyModel};

/// Gradient of [`infonce`] w.r.t. the raw (unnormalized) embeddings.
#[derive(Clone, Debug)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_anchors: Matrix,
    pub d_positives: Matrix,
    pub d_negatives: Option<Matrix>,
}

fn check_roles(anchors: &Matrix, positives: &Matrix, negatives: Option<&Matrix>, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if anchors.rows() == 0 {
        return Err(invalid("InfoNCE needs at least one pair"));
    }
    if anchors.shape() != positives.shape() {
        return Err(shape(format!("anchors {:?} vs positives {:?}", anchors.shape(), positives.shape())));
    }
    if let Some(h) = negatives {
        if h.shape() != anchors.shape() {
            return Err(shape(format!("anchors {:?} vs hard negatives {:?}", anchors.shape(), h.shape())));
        }
    }
    Ok(())
}

fn unit(m: &Matrix, role: &str) -> Result<(Matrix, Vec<f64>)> {
    let norms: Vec<f64> = m.row_iter().map(norm).collect();
    let u = m.normalize_rows().map_err(|e| match e {
        Error::ZeroNorm(r) => Error::ZeroNorm(format!("{role}: {r}")),
        other => other,
    })?;
    Ok((u, norms))
}

/// Candidates for anchor `i` are every positive and, if given, every hard
/// negative. Single direction (anchor to candidates).
pub fn infonce(anchors: &Matrix, positives: &Matrix, hard_negatives: Option<&Matrix>, tau: f64) -> Result<f64> {
    Ok(infonce_with_grad(anchors, positives, hard_negatives, tau)?.loss)
}

pub fn infonce_with_grad(
    anchors: &Matrix,
    positives: &Matrix,
    hard_negatives: Option<&Matrix>,
    tau: f64,
) -> Result<InfoNceGrad> {
    check_roles(anchors, positives, hard_negatives, tau)?;
    let n = anchors.rows();
    let (ua, na) = unit(anchors, "anchors")?;
    let (up, np) = unit(positives, "positives")?;
    let neg = hard_negatives.map(|h| unit(h, "hard negatives")).transpose()?;

    let mut cand_rows: Vec<&[f64]> = up.row_iter().collect();
    if let Some((uh, _)) = &neg {
        cand_rows.extend(uh.row_iter());
    }
    let m = cand_rows.len();
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut d_ua = Matrix::zeros(n, anchors.cols());
    let mut d_uc = Matrix::zeros(m, anchors.cols());
    let mut s = vec![0.0; m];
    for i in 0..n {
        let a = ua.row(i);
        for (sj, c) in s.iter_mut().zip(&cand_rows) {
            *sj = dot(a, c) / tau;
        }
        // shifted by the positive logit: exactly ln m when all logits agree
        let pos = s[i];
        s.iter_mut().for_each(|v| *v -= pos);
        let li = log_sum_exp(&s);
        loss += (li - loss) / (i + 1) as f64;
        let mut p = softmax(&s);
        p[i] -= 1.0;
        let coef = inv_n / tau;
        for (j, pj) in p.iter().enumerate() {
            let g = pj * coef;
            for (da, c) in d_ua.row_mut(i).iter_mut().zip(cand_rows[j]) {
                *da += g * c;
            }
            for (dc, av) in d_uc.row_mut(j).iter_mut().zip(a) {
                *dc += g * av;
            }
        }
    }

    let through_norm = |u: &Matrix, du: &Matrix, norms: &[f64], offset: usize| -> Matrix {
        let mut out = Matrix::zeros(u.rows(), u.cols());
        for i in 0..u.rows() {
            let (ui, gi) = (u.row(i), du.row(i + offset));
            let proj = dot(ui, gi);
            for ((o, uv), gv) in out.row_mut(i).iter_mut().zip(ui).zip(gi) {
                *o = (gv - uv * proj) / norms[i];
            }
        }
        out
    };
    let d_anchors = through_norm(&ua, &d_ua, &na, 0);
    let d_positives = through_norm(&up, &d_uc, &np, 0);
    let d_negatives = neg.as_ref().map(|(uh, nh)| through_norm(uh, &d_uc, nh, n));
    Ok(InfoNceGrad { loss, d_anchors, d_positives, d_negatives })
}

/// Token sequences for each role, one row per training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<Vec<u32>>,
    pub positives: Vec<Vec<u32>>,
    pub hard_negatives: Option<Vec<Vec<u32>>>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        if n < 2 {
            return Err(invalid(format!("triplet batch needs at least 2 rows, got {n}")));
        }
        let neg_ok = self.hard_negatives.as_ref().is_none_or(|h| h.len() == n);
        if self.positives.len() != n || !neg_ok {
            return Err(shape("triplet roles have different lengths"));
        }
        Ok(())
    }

    pub fn without_hard_negatives(mut self) -> Self {
        self.hard_negatives = None;
        self
    }
}

/// One line of a triplet file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub anchor: Vec<u32>,
    pub pos: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg: Option<Vec<u32>>,
}

pub fn read_triplets<R: BufRead>(input: R) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("triplet line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Supplies training batches to [`cl_train`].
pub trait TripletSource {
    fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Result<TripletBatch>;
}

/// Fresh toy triplets from a world. Classes within a batch are distinct,
/// anchor and positive are different pages of the same class, and the hard
/// negative is a random page of the nearest other class. Classes are drawn
/// so that no hard negative belongs to another anchor's class, which would
/// make it a false negative among the shared candidates.
pub fn make_toy_triplets(world: &World, n: usize, rng: &mut Rng) -> Result<TripletBatch> {
    let spec = world.spec();
    if spec.pages < 2 {
        return Err(invalid("toy triplets need at least 2 token pages per class"));
    }
    if n < 2 || n > world.classes() / 2 {
        return Err(invalid(format!("triplet batch size {n} must be in 2..={}", world.classes() / 2)));
    }
    let classes = collision_free_classes(world, n, rng)?;
    let mut batch = TripletBatch { anchors: Vec::new(), positives: Vec::new(), hard_negatives: Some(Vec::new()) };
    for c in classes {
        let pages = rng.sample_distinct(spec.pages, 2);
        batch.anchors.push(world.tokens(c, pages[0]).to_vec());
        batch.positives.push(world.tokens(c, pages[1]).to_vec());
        let other = world.nearest_other_class(c);
        let page = rng.below(spec.pages);
        batch.hard_negatives.as_mut().unwrap().push(world.tokens(other, page).to_vec());
    }
    Ok(batch)
}

const CLASS_DRAW_RETRIES: usize = 64;

/// `n` distinct classes such that no class's hard negative (its nearest
/// other class) is also an anchor class of the batch.
fn collision_free_classes(world: &World, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let k = world.classes();
    let nearest: Vec<usize> = (0..k).map(|c| world.nearest_other_class(c)).collect();
    for _ in 0..CLASS_DRAW_RETRIES {
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let mut blocked = vec![false; k];
        let mut out = Vec::with_capacity(n);
        for c in order {
            if blocked[c] {
                continue;
            }
            out.push(c);
            blocked[c] = true;
            blocked[nearest[c]] = true;
            for (d, &nd) in nearest.iter().enumerate() {
                if nd == c {
                    blocked[d] = true;
                }
            }
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(invalid(format!(
        "could not draw {n} classes of {k} whose hard negatives avoid the batch"
    )))
}

pub struct WorldTriplets<'a> {
    pub world: &'a World,
    pub hard_negatives: bool,
}

impl TripletSource for WorldTriplets<'_> {
    fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Result<TripletBatch> {
        let b = make_toy_triplets(self.world, n, rng)?;
        Ok(if self.hard_negatives { b } else { b.without_hard_negatives() })
    }
}

/// A fixed set of batches visited in a fresh random order every epoch.
#[derive(Clone, Debug)]
pub struct BatchPool {
    batches: Vec<TripletBatch>,
    order: Vec<usize>,
    pos: usize,
}

impl BatchPool {
    pub fn new(batches: Vec<TripletBatch>) -> Result<Self> {
        if batches.is_empty() {
            return Err(invalid("empty batch pool"));
        }
        for b in &batches {
            b.validate()?;
        }
        Ok(Self { batches, order: Vec::new(), pos: 0 })
    }

    /// Chunks file records into batches of `size` in file order; a short
    /// tail is dropped.
    pub fn from_records(records: &[TripletRecord], size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        let with_neg = records.first().is_some_and(|r| r.neg.is_some());
        if records.iter().any(|r| r.neg.is_some() != with_neg) {
            return Err(invalid("either every triplet has `neg` or none does"));
        }
        let batches = records
            .chunks_exact(size)
            .map(|chunk| TripletBatch {
                anchors: chunk.iter().map(|r| r.anchor.clone()).collect(),
                positives: chunk.iter().map(|r| r.pos.clone()).collect(),
                hard_negatives: with_neg.then(|| chunk.iter().map(|r| r.neg.clone().unwrap()).collect()),
            })
            .collect();
        Self::new(batches)
    }

    pub fn batches(&self) -> &[TripletBatch] {
        &self.batches
    }

    pub fn samples(&self) -> usize {
        self.batches.iter().map(TripletBatch::len).sum()
    }
}

impl TripletSource for BatchPool {
    fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Result<TripletBatch> {
        if self.pos == self.order.len() {
            self.order = (0..self.batches.len()).collect();
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = &self.batches[self.order[self.pos]];
        if b.len() != n {
            return Err(invalid(format!("pool batch has {} rows, {n} requested", b.len())));
        }
        self.pos += 1;
        Ok(b.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Lora { rank: usize, alpha: f64 },
    FullFinetune,
    LinearProjection,
}

impl Strategy {
    pub fn parse(name: &str, rank: usize, alpha: f64) -> Result<Self> {
        match name {
            "lora" => Ok(Strategy::Lora { rank, alpha }),
            "full_finetune" => Ok(Strategy::FullFinetune),
            "linear_projection" => Ok(Strategy::LinearProjection),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected lora, full_finetune or linear_projection)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Lora { .. } => "lora",
            Strategy::FullFinetune => "full_finetune",
            Strategy::LinearProjection => "linear_projection",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CLConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CLConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Lora { rank: 8, alpha: 16.0 }, tau: 0.05, steps: 1000, lr: 1e-3, batch: 16, seed: 0 }
    }
}

impl CLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch < 2 {
            return Err(Error::Config("contrastive batch must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A base model plus whatever the contrastive stage produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub base: ToyModel,
    pub adapter: Option<LoraAdapter>,
    /// `d_e × d_e` map applied after the trunk.
    pub projection: Option<Matrix>,
}

impl Refined {
    pub fn plain(model: ToyModel) -> Self {
        Self { base: model, adapter: None, projection: None }
    }

    pub fn embed(&self, modality: &str, inputs: Inputs<'_>) -> Result<Matrix> {
        let e = self.base.embed(modality, inputs, self.adapter.as_ref())?;
        match &self.projection {
            Some(p) => e.matmul_t(p),
            None => Ok(e),
        }
    }

    /// Folds an adapter into the trunk weights.
    pub fn merged(&self) -> Result<Refined> {
        let base = match &self.adapter {
            Some(a) => merge_lora(&self.base, a)?,
            None => self.base.clone(),
        };
        Ok(Refined { base, adapter: None, projection: self.projection.clone() })
    }

    /// A plain model with the same embeddings: the adapter is merged and a
    /// projection is folded into the last (linear) trunk layer.
    pub fn to_model(&self) -> Result<ToyModel> {
        let mut model = self.merged()?.base;
        if let Some(p) = &self.projection {
            let last = model.trunk.last_mut().ok_or_else(|| invalid("model has no trunk layers"))?;
            last.weight = p.matmul(&last.weight)?;
            last.bias = last.bias.matmul_t(p)?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug)]
pub struct CLOutcome {
    pub refined: Refined,
    /// InfoNCE of each training batch before its update.
    pub trace: Vec<f64>,
}

/// Embeds the three roles of a batch in one pass and returns the loss and
/// the gradient w.r.t. the stacked embeddings.
fn batch_loss(refined: &Refined, batch: &TripletBatch, tau: f64) -> Result<(f64, Matrix, Matrix, Forward)> {
    let n = batch.len();
    let mut seqs = batch.anchors.clone();
    seqs.extend(batch.positives.iter().cloned());
    if let Some(h) = &batch.hard_negatives {
        seqs.extend(h.iter().cloned());
    }
    let fwd = refined.base.forward(TEXT, Inputs::Tokens(&seqs), refined.adapter.as_ref())?;
    let emb = fwd.embedding();
    let out = match &refined.projection {
        Some(p) => emb.matmul_t(p)?,
        None => emb.clone(),
    };
    let idx = |start: usize| (start..start + n).collect::<Vec<_>>();
    let a = out.select_rows(&idx(0));
    let p = out.select_rows(&idx(n));
    let h = batch.hard_negatives.as_ref().map(|_| out.select_rows(&idx(2 * n)));
    let g = infonce_with_grad(&a, &p, h.as_ref(), tau)?;
    let mut d_out = Matrix::zeros(out.rows(), out.cols());
    let blocks = [Some(&g.d_anchors), Some(&g.d_positives), g.d_negatives.as_ref()];
    for (b, block) in blocks.iter().enumerate() {
        if let Some(m) = block {
            for i in 0..n {
                d_out.row_mut(b * n + i).copy_from_slice(m.row(i));
            }
        }
    }
    Ok((g.loss, d_out, out, fwd))
}

/// Mean InfoNCE of `refined` over the given batches.
pub fn mean_infonce(refined: &Refined, batches: &[TripletBatch], tau: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(invalid("no batches to evaluate"));
    }
    let mut mean = 0.0;
    for (i, b) in batches.iter().enumerate() {
        b.validate()?;
        let (l, ..) = batch_loss(refined, b, tau)?;
        mean += (l - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// Contrastive refinement on text triplets with Adam.
///
/// `lora` trains only a fresh adapter (returned unmerged), `full_finetune`
/// updates the trunk, `linear_projection` trains a new identity-initialized
/// output map. Encoders and the token table are never touched.
pub fn cl_train(model: &ToyModel, source: &mut dyn TripletSource, cfg: &CLConfig) -> Result<CLOutcome> {
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.seed, 0xC1);
    let d = model.spec().embed_dim;
    let mut refined = Refined::plain(model.clone());
    match cfg.strategy {
        Strategy::Lora { rank, alpha } => {
            refined.adapter = Some(LoraAdapter::new(model.spec(), rank, alpha, &mut rng)?);
        }
        Strategy::LinearProjection => refined.projection = Some(Matrix::identity(d)),
        Strategy::FullFinetune => {}
    }
    let trainable = |r: &Refined| -> Vec<Matrix> {
        match cfg.strategy {
            Strategy::Lora { .. } => r.adapter.as_ref().unwrap().tensors().into_iter().cloned().collect(),
            Strategy::FullFinetune => r.base.trunk_tensors().into_iter().cloned().collect(),
            Strategy::LinearProjection => vec![r.projection.clone().unwrap()],
        }
    };
    let init = trainable(&refined);
    let mut adam = Adam::new(&init.iter().collect::<Vec<_>>(), AdamConfig::default());
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let batch = source.next_batch(cfg.batch, &mut rng)?;
        batch.validate()?;
        let (loss, d_out, _, fwd) = batch_loss(&refined, &batch, cfg.tau)?;
        trace.push(loss);
        match cfg.strategy {
            Strategy::Lora { .. } => {
                let adapter = refined.adapter.as_ref().unwrap();
                let mut ag = adapter.zeros_like();
                let mut unused = refined.base.zeros_like();
                let scope = BackwardScope { inputs: false, trunk: false, adapter: true };
                refined.base.backward(&fwd, &d_out, Some(adapter), scope, &mut unused, Some(&mut ag))?;
                let adapter = refined.adapter.as_mut().unwrap();
                adam.step(adapter.tensors_mut(), &ag.tensors(), cfg.lr)?;
            }
            Strategy::FullFinetune => {
                let mut g = refined.base.zeros_like();
                let scope = BackwardScope { inputs: false, trunk: true, adapter: false };
                refined.base.backward(&fwd, &d_out, None, scope, &mut g, None)?;
                adam.step(refined.base.trunk_tensors_mut(), &g.trunk_tensors(), cfg.lr)?;
            }
            Strategy::LinearProjection => {
                // out = emb · Pᵀ, so dP = d_outᵀ · emb
                let dp = d_out.t_matmul(fwd.embedding())?;
                adam.step(vec![refined.projection.as_mut().unwrap()], &[&dp], cfg.lr)?;
            }
        }
    }
    Ok(CLOutcome { refined, trace })
}

/// Trailing moving average with window `w`.
pub fn smooth(trace: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
