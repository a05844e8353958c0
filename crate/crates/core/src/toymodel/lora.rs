//! Low-rank adapters on the trunk.

use super::{ModelSpec, ToyModel};
use crate::error::{invalid, shape, Result};
use crate::numerics::{Matrix, Rng};

/// Low-rank pair for one trunk layer: `B: out × r`, `A: r × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub b: Matrix,
    pub a: Matrix,
}

/// One [`LoraLayer`] per trunk layer. The effective weight delta of layer
/// `t` is `(alpha / r) · Bₜ · Aₜ`.
///
/// Encoders and the token table are never adapted.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A ~ N(0, 1/r)`, so attaching it is a no-op.
    pub fn new(spec: &ModelSpec, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("LoRA rank must be at least 1"));
        }
        if !alpha.is_finite() {
            return Err(invalid("LoRA alpha must be finite"));
        }
        let std = (1.0 / rank as f64).sqrt();
        let layers = (0..spec.trunk_dims.len())
            .map(|t| {
                let (input, out) = spec.trunk_layer_dims(t);
                LoraLayer { b: Matrix::zeros(out, rank), a: rng.normal_matrix(rank, input, std) }
            })
            .collect();
        Ok(Self { rank, alpha, layers })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                })
                .collect(),
        }
    }

    /// `(alpha / r) · B · A` for layer `t`.
    pub fn delta(&self, t: usize) -> Result<Matrix> {
        let l = &self.layers[t];
        Ok(l.b.matmul(&l.a)?.scale(self.scale()))
    }

    /// All effective deltas flattened in layer order.
    pub fn flat_delta(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for t in 0..self.layers.len() {
            out.extend_from_slice(self.delta(t)?.as_slice());
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.b, &l.a]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.b, &mut l.a]).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(t, l)| [(format!("lora.{t}.b"), &l.b), (format!("lora.{t}.a"), &l.a)])
            .collect()
    }

    pub(crate) fn check_compatible(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.trunk_dims.len() {
            return Err(shape(format!(
                "adapter has {} layers, trunk has {}",
                self.layers.len(),
                spec.trunk_dims.len()
            )));
        }
        for (t, l) in self.layers.iter().enumerate() {
            let (input, out) = spec.trunk_layer_dims(t);
            if l.b.shape() != (out, self.rank) || l.a.shape() != (self.rank, input) {
                return Err(shape(format!(
                    "adapter layer {t}: B {:?}, A {:?} do not fit a {out}x{input} weight at rank {}",
                    l.b.shape(),
                    l.a.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Materializes `W ← W + (alpha/r)·B·A` on every trunk layer.
pub fn merge_lora(model: &ToyModel, adapter: &LoraAdapter) -> Result<ToyModel> {
    adapter.check_compatible(model.spec())?;
    let mut out = model.clone();
    for (t, layer) in out.trunk.iter_mut().enumerate() {
        layer.weight.add_scaled(&adapter.delta(t)?, 1.0)?;
    }
    Ok(out)
}
