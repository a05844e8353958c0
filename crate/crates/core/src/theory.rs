//! The generative-prior PAC-Bayes bound and generation/representation
//! scaling fits.
//!
//! All information quantities are in nats. Generative losses compared
//! against an entropy are per sequence (per-token loss times text length).

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::contrastive::{make_toy_triplets, mean_infonce, Refined, TripletBatch};
use crate::datagen::{World, TEXT};
use crate::error::{invalid, Error, Result};
use crate::evalsuite::{pearson, spearman};
use crate::numerics::{Matrix, Rng};
use crate::toymodel::{generative_loss_for, Inputs, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundInputs {
    /// Candidates per anchor in the contrastive loss.
    pub batch_size_n: usize,
    pub i_p: f64,
    pub eps_p: f64,
    pub kl: f64,
    pub n_samples: usize,
    pub delta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.i_p, self.eps_p, self.kl, self.delta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bound input".into()));
        }
        if self.batch_size_n < 1 || self.n_samples < 1 {
            return Err(invalid("batch size and sample count must be at least 1"));
        }
        if self.eps_p < 0.0 || self.kl < 0.0 {
            return Err(invalid("eps_P and KL must be non-negative"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta {} must lie strictly inside (0, 1)", self.delta)));
        }
        Ok(())
    }
}

/// `ln N − I_P + ε_P + sqrt((KL + ln(1/δ)) / 2n)`
pub fn pac_bayes_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let penalty = ((b.kl + (1.0 / b.delta).ln()) / (2.0 * b.n_samples as f64)).sqrt();
    Ok((b.batch_size_n as f64).ln() - b.i_p + b.eps_p + penalty)
}

/// `I_P ≈ H(Y) − L_g`, clamped to `[0, H(Y)]`. `lg` is per sequence.
pub fn mi_from_generative(h_y: f64, lg: f64) -> f64 {
    (h_y - lg).clamp(0.0, h_y.max(0.0))
}

/// Default posterior and prior widths for [`kl_lora_gaussian`].
pub const SIGMA_Q: f64 = 0.01;
pub const SIGMA_P: f64 = 0.1;

/// `KL(N(μ, σ_q²I) ‖ N(0, σ_p²I))` over a flattened weight delta.
pub fn kl_lora_gaussian(mu: &[f64], sigma_q: f64, sigma_p: f64) -> Result<f64> {
    if !(sigma_q > 0.0 && sigma_p > 0.0) || !sigma_q.is_finite() || !sigma_p.is_finite() {
        return Err(invalid(format!("sigmas must be positive, got q={sigma_q} p={sigma_p}")));
    }
    let per_dim = |m: f64| (sigma_q * sigma_q + m * m) / (2.0 * sigma_p * sigma_p) - 0.5 + (sigma_p / sigma_q).ln();
    Ok(mu.iter().map(|&m| per_dim(m)).sum::<f64>().max(0.0))
}

/// Flattened change the contrastive stage made to the pretrained model:
/// the adapter's effective delta, the trunk difference after full
/// fine-tuning, or `P − I` for a projection.
pub fn effective_delta(pre_cl: &ToyModel, refined: &Refined) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    if let Some(a) = &refined.adapter {
        out.extend(a.flat_delta()?);
    }
    for (new, old) in refined.base.trunk_tensors().into_iter().zip(pre_cl.trunk_tensors()) {
        out.extend(new.sub(old)?.as_slice());
    }
    if let Some(p) = &refined.projection {
        out.extend(p.sub(&Matrix::identity(p.rows()))?.as_slice());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Higher,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lower" => Ok(Direction::Lower),
            "higher" => Ok(Direction::Higher),
            other => Err(Error::Format(format!("gen_direction `{other}` (lower | higher)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Lower => "lower",
            Direction::Higher => "higher",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub model_id: String,
    pub gen_score: f64,
    /// Whether a lower or a higher `gen_score` is better.
    pub gen_direction: Direction,
    pub rep_score: f64,
}

pub const SCALING_HEADER: &str = "model_id,gen_score,gen_direction,rep_score";

pub fn read_scaling_points<R: BufRead>(input: R) -> Result<Vec<ScalingPoint>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != SCALING_HEADER {
        return Err(Error::Format(format!("expected header `{SCALING_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |what: &str| Error::Format(format!("line {}: {what}", i + 2));
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| bad("not a number"))?;
            if v.is_finite() { Ok(v) } else { Err(bad("non-finite score")) }
        };
        out.push(ScalingPoint {
            model_id: fields[0].to_string(),
            gen_score: num(fields[1])?,
            gen_direction: Direction::parse(fields[2])?,
            rep_score: num(fields[3])?,
        });
    }
    Ok(out)
}

pub fn write_scaling_points<W: Write>(points: &[ScalingPoint], mut out: W) -> Result<()> {
    writeln!(out, "{SCALING_HEADER}")?;
    for p in points {
        if p.model_id.contains(',') {
            return Err(invalid(format!("model id `{}` contains a comma", p.model_id)));
        }
        writeln!(out, "{},{},{},{}", p.model_id, p.gen_score, p.gen_direction.name(), p.rep_score)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrslFit {
    pub pearson: f64,
    pub spearman: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// OLS of `rep_score` on generative quality (sign-flipped when lower is
/// better) plus both correlations.
pub fn grsl_fit(points: &[ScalingPoint]) -> Result<GrslFit> {
    if points.len() < 3 {
        return Err(invalid(format!("scaling fit needs at least 3 points, got {}", points.len())));
    }
    let x: Vec<f64> = points
        .iter()
        .map(|p| match p.gen_direction {
            Direction::Lower => -p.gen_score,
            Direction::Higher => p.gen_score,
        })
        .collect();
    let y: Vec<f64> = points.iter().map(|p| p.rep_score).collect();
    let pearson = pearson(&x, &y)?;
    let spearman = spearman(&x, &y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    Ok(GrslFit { pearson, spearman, slope, intercept: my - slope * mx, n: points.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheckConfig {
    /// Triplets per held-out batch; must match training.
    pub batch: usize,
    pub hard_negatives: bool,
    pub heldout_batches: usize,
    pub heldout_seed: u64,
    pub tau: f64,
    pub delta: f64,
    pub sigma_q: f64,
    pub sigma_p: f64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            hard_negatives: true,
            heldout_batches: 32,
            heldout_seed: 0xB0D,
            tau: 0.05,
            delta: 0.05,
            sigma_q: SIGMA_Q,
            sigma_p: SIGMA_P,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub empirical_pop_risk: f64,
    pub bound: f64,
    pub holds: bool,
    pub inputs: BoundInputs,
    pub train_loss: f64,
    pub h_y: f64,
    /// Pre-refinement generative loss per sequence.
    pub lg: f64,
    pub sigma_q: f64,
    pub sigma_p: f64,
}

/// Per-sequence generative loss of predicting each class's page-0 text
/// from every page of it.
pub fn text_generative_loss(model: &ToyModel, world: &World) -> Result<f64> {
    let spec = world.spec();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for c in 0..world.classes() {
        for p in 0..spec.pages {
            inputs.push(world.tokens(c, p).to_vec());
            targets.push(world.tokens(c, 0).to_vec());
        }
    }
    let per_token = generative_loss_for(model, TEXT, Inputs::Tokens(&inputs), &targets, None)?;
    Ok(per_token * spec.text_len as f64)
}

/// Held-out triplet batches drawn from a seed independent of training.
pub fn heldout_batches(world: &World, cfg: &BoundCheckConfig) -> Result<Vec<TripletBatch>> {
    let mut rng = Rng::derive(cfg.heldout_seed, 0x4E1D);
    (0..cfg.heldout_batches)
        .map(|_| {
            let b = make_toy_triplets(world, cfg.batch, &mut rng)?;
            Ok(if cfg.hard_negatives { b } else { b.without_hard_negatives() })
        })
        .collect()
}

/// Compares held-out contrastive risk with the bound assembled from the
/// pre-refinement model's generative loss, the achieved training loss and
/// the Gaussian KL of the refinement delta.
pub fn bound_check(
    pre_cl: Option<&ToyModel>,
    refined: &Refined,
    world: &World,
    train_loss: f64,
    n_samples: usize,
    cfg: &BoundCheckConfig,
) -> Result<BoundReport> {
    let pre = pre_cl.ok_or_else(|| invalid("bound check needs the pre-refinement checkpoint"))?;
    if !train_loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let batch_size_n = cfg.batch * if cfg.hard_negatives { 2 } else { 1 };
    let h_y = (world.classes() as f64).ln();
    let lg = text_generative_loss(pre, world)?;
    let i_p = mi_from_generative(h_y, lg);
    let floor = (batch_size_n as f64).ln() - i_p;
    let eps_p = (train_loss - floor).max(0.0);
    let kl = kl_lora_gaussian(&effective_delta(pre, refined)?, cfg.sigma_q, cfg.sigma_p)?;
    let inputs = BoundInputs { batch_size_n, i_p, eps_p, kl, n_samples, delta: cfg.delta };
    let bound = pac_bayes_bound(&inputs)?;
    let empirical_pop_risk = mean_infonce(refined, &heldout_batches(world, cfg)?, cfg.tau)?;
    Ok(BoundReport {
        empirical_pop_risk,
        bound,
        holds: empirical_pop_risk <= bound,
        inputs,
        train_loss,
        h_y,
        lg,
        sigma_q: cfg.sigma_q,
        sigma_p: cfg.sigma_p,
    })
}
