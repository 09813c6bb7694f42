//! The two-branch super-class guided network and its combined loss.
//!
//! ```text
//! input ─ trunk stages ─┬─ remaining backbone stages ─ fcb features ─┐
//!                       │                                            concat ─ FC ─ finer logits
//!                       └─ SCB stages ─────────────── scb features ──┘
//!                                                         └─ FC ─ super logits
//! ```

pub mod checkpoint;
mod config;

pub use config::{Downsample, ScbConfig, SgnetConfig, Stage};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Graph, NodeId, Real, Tensor};
use config::{LayerKind, LayerSpec};

/// Instantiated parameters plus the config they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnetModel<T: Real> {
    config: SgnetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Which classifier heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Both,
    /// Skips the super-class fully connected head (direct inference).
    FinerOnly,
}

/// Graph handles produced by [`SgnetModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub super_logits: Option<NodeId>,
    pub finer_logits: NodeId,
    pub scb_features: Option<NodeId>,
    pub fcb_features: NodeId,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub loss_fc: f64,
    pub loss_sc: f64,
    /// Bounding-box regression slot of the detector loss; always zero here.
    pub loss_bbox: f64,
    /// `Some(α)` for the blended classification loss, `None` for an unweighted sum.
    pub alpha: Option<f64>,
}

impl<T: Real> SgnetModel<T> {
    /// Seeded fan-in-scaled uniform weights, zero biases.
    pub fn build(config: &SgnetConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for layer in plan.layers() {
            let fan_in = layer.fan_in() as f64;
            // He-uniform ahead of ReLU, LeCun-uniform for logit layers.
            let bound = if layer.hidden { (6.0 / fan_in).sqrt() } else { (3.0 / fan_in).sqrt() };
            names.push(format!("{}.weight", layer.prefix));
            params.push(Tensor::uniform(&layer.weight_shape(), bound, &mut rng));
            names.push(format!("{}.bias", layer.prefix));
            params.push(Tensor::zeros(&[layer.out_dim]));
        }
        Self::assemble(config.clone(), names, params)
    }

    fn assemble(config: SgnetConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against the config.
    pub fn from_named(config: &SgnetConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = config.parameter_shapes()?;
        if expected.len() != tensors.len() {
            return Err(Error::shape(format!(
                "architecture {} expects {} parameter tensors, checkpoint has {}",
                config.name,
                expected.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(Error::shape(format!(
                    "architecture expects {name} {shape:?}, checkpoint has {got_name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Self::assemble(config.clone(), names, params)
    }

    pub fn config(&self) -> &SgnetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> SgnetModel<U> {
        SgnetModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a graph leaf, in [`names`](Self::names) order.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                let mut t = Tensor::from_vec(p.shape(), p.data().to_vec()).expect("valid param");
                t.requires_grad = requires_grad;
                g.input(t)
            })
            .collect()
    }

    fn apply_layer(&self, g: &mut Graph<T>, bound: &[NodeId], layer: &LayerSpec, x: NodeId) -> Result<NodeId> {
        let w = bound[self.index[&format!("{}.weight", layer.prefix)]];
        let b = bound[self.index[&format!("{}.bias", layer.prefix)]];
        let y = match layer.kind {
            LayerKind::Conv { stride } => g.conv2d(x, w, b, stride, 1)?,
            LayerKind::Linear => g.linear(x, w, b)?,
        };
        if layer.hidden {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    fn apply_stages(&self, g: &mut Graph<T>, bound: &[NodeId], stages: &[Vec<LayerSpec>], mut x: NodeId) -> Result<NodeId> {
        for stage in stages {
            for layer in stage {
                x = self.apply_layer(g, bound, layer, x)?;
            }
            if self.config.downsample == Downsample::MaxPool {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    fn apply_fc(&self, g: &mut Graph<T>, bound: &[NodeId], layers: &[LayerSpec], x: NodeId) -> Result<NodeId> {
        let mut x = g.flatten(x)?;
        for layer in layers {
            x = self.apply_layer(g, bound, layer, x)?;
        }
        Ok(x)
    }

    /// Runs both branches on an `[N, C, H, W]` batch node.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[NodeId], input: NodeId, heads: Heads) -> Result<BranchOutputs> {
        let cfg = &self.config;
        let expected = [cfg.input_channels, cfg.input_size, cfg.input_size];
        let shape = g.shape(input);
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(format!(
                "model {} expects input [N, {}, {}, {}], got {shape:?}",
                cfg.name, expected[0], expected[1], expected[2]
            )));
        }
        if bound.len() != self.params.len() {
            return Err(Error::Usage("parameter binding does not match the model".into()));
        }
        let plan = cfg.plan()?;
        let trunk = self.apply_stages(g, bound, &plan.trunk, input)?;
        let fcb_features = self.apply_stages(g, bound, &plan.fcb_convs, trunk)?;
        let (scb_features, super_logits, fused) = if cfg.has_scb() {
            let scb = self.apply_stages(g, bound, &plan.scb_convs, trunk)?;
            let super_logits = match heads {
                Heads::Both => Some(self.apply_fc(g, bound, &plan.scb_fc, scb)?),
                Heads::FinerOnly => None,
            };
            // order fixed as (finer-branch features, super-branch features)
            let fused = g.concat_channels(fcb_features, scb)?;
            (Some(scb), super_logits, fused)
        } else {
            (None, None, fcb_features)
        };
        let finer_logits = self.apply_fc(g, bound, &plan.fcb_fc, fused)?;
        Ok(BranchOutputs {
            super_logits,
            finer_logits,
            scb_features,
            fcb_features,
        })
    }

    /// Inference-only convenience: returns `(super_logits, finer_logits)` as tensors.
    pub fn logits(&self, batch: &Tensor<T>, heads: Heads) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input_ref(batch);
        let out = self.forward(&mut g, &bound, x, heads)?;
        Ok((
            out.super_logits.map(|id| g.value(id).clone()),
            g.value(out.finer_logits).clone(),
        ))
    }
}

/// `(1 − α)·CE(finer) + α·CE(super)`, with super targets derived from the taxonomy.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    out: &BranchOutputs,
    finer_labels: &[usize],
    taxonomy: &Taxonomy,
    alpha: f64,
) -> Result<(NodeId, LossBreakdown)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let super_logits = out.super_logits.ok_or_else(|| {
        Error::Usage("combined loss needs super-class logits (forward with Heads::Both on an SGNet config)".into())
    })?;
    let super_labels = taxonomy.derive_super_labels(finer_labels)?;
    let loss_fc = g.cross_entropy(out.finer_logits, finer_labels)?;
    let loss_sc = g.cross_entropy(super_logits, &super_labels)?;
    let a = T::from_f64_lossy(alpha);
    let wf = g.scale(loss_fc, T::one() - a)?;
    let ws = g.scale(loss_sc, a)?;
    let total = g.add(wf, ws)?;
    let val = |id: NodeId| g.value(id).item().to_f64().unwrap();
    let breakdown = LossBreakdown {
        total: val(total),
        loss_fc: val(loss_fc),
        loss_sc: val(loss_sc),
        loss_bbox: 0.0,
        alpha: Some(alpha),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_built_tensors() {
        for name in ["sgnet-tiny", "sgnet-synth-2x2", "sgnet-cifar-small"] {
            let cfg = SgnetConfig::preset(name).unwrap();
            let m = SgnetModel::<f32>::build(&cfg, 1).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count().unwrap());
            assert!(m.all_finite());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = SgnetConfig::preset("sgnet-synth-2x2").unwrap();
        let a = SgnetModel::<f32>::build(&cfg, 9).unwrap();
        let b = SgnetModel::<f32>::build(&cfg, 9).unwrap();
        let c = SgnetModel::<f32>::build(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shapes_and_feature_extents() {
        let cfg = SgnetConfig::preset("sgnet-synth-2x2").unwrap();
        let m = SgnetModel::<f32>::build(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let x = g.input(Tensor::zeros(&[4, 3, 16, 16]));
        let out = m.forward(&mut g, &bound, x, Heads::Both).unwrap();
        assert_eq!(g.shape(out.super_logits.unwrap()), &[4, 2]);
        assert_eq!(g.shape(out.finer_logits), &[4, 4]);
        let s = g.shape(out.scb_features.unwrap()).to_vec();
        let f = g.shape(out.fcb_features).to_vec();
        assert_eq!(s[2..], f[2..]);
        assert!(g.value(out.finer_logits).is_finite());
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let cfg = SgnetConfig::preset("sgnet-synth-2x2").unwrap();
        let m = SgnetModel::<f32>::build(&cfg, 0).unwrap();
        let err = m.logits(&Tensor::zeros(&[1, 3, 32, 32]), Heads::Both).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn finer_only_skips_super_head() {
        let cfg = SgnetConfig::preset("sgnet-tiny").unwrap();
        let m = SgnetModel::<f64>::build(&cfg, 0).unwrap();
        let x = Tensor::ones(&[2, 2, 8, 8]);
        let (s, f_di) = m.logits(&x, Heads::FinerOnly).unwrap();
        assert!(s.is_none());
        let (_, f_both) = m.logits(&x, Heads::Both).unwrap();
        assert_eq!(f_di, f_both);
    }

    #[test]
    fn combined_loss_blends_with_alpha() {
        let t = Taxonomy::new(
            "t",
            vec![("A".into(), vec!["x".into(), "y".into()]), ("B".into(), vec!["z".into()])],
            None,
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let super_logits = g.input(Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap());
        let finer_logits = g.input(Tensor::from_vec(&[1, 3], vec![1.0, 0.5, -1.0]).unwrap());
        let out = BranchOutputs {
            super_logits: Some(super_logits),
            finer_logits,
            scb_features: None,
            fcb_features: finer_logits,
        };
        let (_, b) = combined_loss(&mut g, &out, &[2], &t, 0.3).unwrap();
        assert!((b.total - (0.7 * b.loss_fc + 0.3 * b.loss_sc)).abs() < 1e-12);
        assert!(combined_loss(&mut g, &out, &[3], &t, 0.3).is_err());
    }
}
