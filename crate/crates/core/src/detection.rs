//! Detector-side classification: one score vector per region of interest,
//! split into a super-class segment and a finer-class segment.
//!
//! Background sits at index 0 of both segments and the finer background is
//! the only member of the super background.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict_di, predict_tsi, InferenceMode, Prediction};
use crate::model::LossBreakdown;
use crate::taxonomy::Taxonomy;
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::train::{sgd_step, SgdState};

pub const BACKGROUND: &str = "background";

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHeadConfig {
    /// Object taxonomy extended with the background singleton at index 0.
    taxonomy: Taxonomy,
}

impl DetectionHeadConfig {
    pub fn from_taxonomy(objects: &Taxonomy) -> Result<Self> {
        if objects.super_index(BACKGROUND).is_ok() || objects.finer_index(BACKGROUND).is_ok() {
            return Err(Error::validation(format!(
                "taxonomy already contains a \"{BACKGROUND}\" class"
            )));
        }
        let mut groups = vec![(BACKGROUND.to_string(), vec![BACKGROUND.to_string()])];
        for (s, name) in objects.super_names().iter().enumerate() {
            let members = objects.members_of(s)?;
            groups.push((
                name.clone(),
                members.iter().map(|&f| objects.finer_names()[f].clone()).collect(),
            ));
        }
        let mut order = vec![BACKGROUND.to_string()];
        order.extend(objects.finer_names().iter().cloned());
        let taxonomy = Taxonomy::new(format!("{}+background", objects.name()), groups, Some(order))?;
        Ok(Self { taxonomy })
    }

    pub fn coco() -> Self {
        Self::from_taxonomy(&Taxonomy::coco()).expect("builtin taxonomy has no background class")
    }

    pub fn c_sc(&self) -> usize {
        self.taxonomy.num_super()
    }

    pub fn c_fc(&self) -> usize {
        self.taxonomy.num_finer()
    }

    /// Score vector length `C_SC + C_FC`.
    pub fn c(&self) -> usize {
        self.c_sc() + self.c_fc()
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.c() {
            return Err(Error::validation(format!(
                "score vector has length {len}, expected C = {} ({} + {})",
                self.c(),
                self.c_sc(),
                self.c_fc()
            )));
        }
        Ok(())
    }

    fn check_label(&self, gt_finer: usize) -> Result<()> {
        if gt_finer >= self.c_fc() {
            return Err(Error::validation(format!(
                "finer label {gt_finer} out of range for {} finer classes",
                self.c_fc()
            )));
        }
        Ok(())
    }
}

/// `(V[0..C_SC], V[C_SC..C])`.
pub fn split_scores<'a, T: Real>(v: &'a [T], cfg: &DetectionHeadConfig) -> Result<(&'a [T], &'a [T])> {
    cfg.check_len(v.len())?;
    Ok(v.split_at(cfg.c_sc()))
}

/// Summed segment cross-entropies of a batch of score rows `[N, C]`, as a graph node.
pub fn detection_loss_node<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    gt_finer: &[usize],
    cfg: &DetectionHeadConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("score rows must be [N, C], got {shape:?}")));
    }
    cfg.check_len(shape[1])?;
    for &f in gt_finer {
        cfg.check_label(f)?;
    }
    let gt_super = cfg.taxonomy.derive_super_labels(gt_finer)?;
    let v_sc = g.slice_cols(scores, 0, cfg.c_sc())?;
    let v_fc = g.slice_cols(scores, cfg.c_sc(), cfg.c())?;
    let loss_sc = g.cross_entropy(v_sc, &gt_super)?;
    let loss_fc = g.cross_entropy(v_fc, gt_finer)?;
    let total = g.add(loss_sc, loss_fc)?;
    let val = |id: NodeId| g.value(id).item().to_f64().unwrap();
    let breakdown = LossBreakdown {
        total: val(total),
        loss_fc: val(loss_fc),
        loss_sc: val(loss_sc),
        loss_bbox: 0.0,
        alpha: None,
    };
    Ok((total, breakdown))
}

/// Classification loss of one region: `CE(V_SC, parent) + CE(V_FC, gt_finer)`.
pub fn detection_class_loss<T: Real>(v: &[T], gt_finer: usize, cfg: &DetectionHeadConfig) -> Result<LossBreakdown> {
    cfg.check_len(v.len())?;
    let mut g = Graph::<T>::new();
    let row = g.input(Tensor::from_vec(&[1, v.len()], v.to_vec())?);
    Ok(detection_loss_node(&mut g, row, &[gt_finer], cfg)?.1)
}

/// Per-region decision over the background-extended taxonomy.
pub fn roi_predict<T: Real>(v: &[T], cfg: &DetectionHeadConfig, mode: InferenceMode) -> Result<Prediction> {
    let (v_sc, v_fc) = split_scores(v, cfg)?;
    match mode {
        InferenceMode::Tsi => predict_tsi(v_sc, v_fc, &cfg.taxonomy),
        InferenceMode::Di => predict_di(v_fc, &cfg.taxonomy),
    }
}

/// One synthetic region: a feature vector and its labels (finer 0 = background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSample {
    pub features: Vec<f64>,
    pub gt_finer: usize,
    pub gt_super: usize,
}

/// Seeded stand-in for a region proposal pipeline: class prototypes in a
/// feature space plus a linear scorer producing score vectors.
#[derive(Debug, Clone)]
pub struct RoiHarness {
    pub cfg: DetectionHeadConfig,
    pub samples: Vec<RoiSample>,
    /// `[C, D]` weights and `[C]` bias of the linear scorer.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
    state: SgdState<f64>,
}

/// Feature dimension: enough for linearly independent class prototypes.
pub fn roi_feature_dim(cfg: &DetectionHeadConfig) -> usize {
    cfg.c_fc() + 16
}

/// Draws `n` regions with uniformly chosen finer labels. Features are the
/// class prototype plus `noise·N(0, 1)`; with zero noise the classes are
/// linearly separable. The scorer starts from small seeded weights.
pub fn synth_roi_harness(cfg: &DetectionHeadConfig, n: usize, noise: f64, seed: u64) -> Result<RoiHarness> {
    if n == 0 {
        return Err(Error::validation("harness needs at least one region"));
    }
    if !(noise >= 0.0) {
        return Err(Error::validation("noise must be non-negative"));
    }
    let d = roi_feature_dim(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.c_fc())
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let label = Uniform::new(0, cfg.c_fc()).expect("non-empty range");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let f = label.sample(&mut rng);
        let features = prototypes[f]
            .iter()
            .map(|&p| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p + noise * z
            })
            .collect();
        samples.push(RoiSample {
            features,
            gt_finer: f,
            gt_super: cfg.taxonomy.finer_to_super(f)?,
        });
    }
    let weight = Tensor::uniform(&[cfg.c(), d], 0.01, &mut rng);
    Ok(RoiHarness {
        cfg: cfg.clone(),
        samples,
        weight,
        bias: Tensor::zeros(&[cfg.c()]),
        state: SgdState::new(),
    })
}

impl RoiHarness {
    fn feature_matrix(&self) -> Tensor<f64> {
        let d = self.weight.shape()[1];
        let data = self.samples.iter().flat_map(|s| s.features.iter().copied()).collect();
        Tensor::from_vec(&[self.samples.len(), d], data).expect("uniform feature length")
    }

    /// Score vectors of every region under the current scorer.
    pub fn stream(&self) -> Vec<(Vec<f64>, RoiSample)> {
        let mut g = Graph::new();
        let x = g.input(self.feature_matrix());
        let w = g.input_ref(&self.weight);
        let b = g.input_ref(&self.bias);
        let v = g.linear(x, w, b).expect("consistent shapes");
        let c = self.cfg.c();
        g.value(v)
            .data()
            .chunks(c)
            .zip(&self.samples)
            .map(|(row, s)| (row.to_vec(), s.clone()))
            .collect()
    }

    /// One full-batch momentum SGD step on the mean detection loss; returns
    /// the loss before the update.
    pub fn train_step(&mut self, lr: f64, momentum: f64) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let x = g.input(self.feature_matrix());
        let w = g.input(self.weight.clone().with_requires_grad(true));
        let b = g.input(self.bias.clone().with_requires_grad(true));
        let v = g.linear(x, w, b)?;
        let labels: Vec<usize> = self.samples.iter().map(|s| s.gt_finer).collect();
        let (loss, br) = detection_loss_node(&mut g, v, &labels, &self.cfg)?;
        g.backward(loss)?;
        let gw = g.grad_or_zeros(w).into_data();
        let gb = g.grad_or_zeros(b).into_data();
        let mut params = [self.weight.clone(), self.bias.clone()];
        sgd_step(&mut params, &[&gw, &gb], lr, momentum, 0.0, &mut self.state)?;
        let [w2, b2] = params;
        self.weight = w2;
        self.bias = b2;
        Ok(br)
    }

    /// Fraction of regions whose finer prediction is correct under `mode`.
    pub fn accuracy(&self, mode: InferenceMode) -> Result<f64> {
        let stream = self.stream();
        let mut ok = 0usize;
        for (v, s) in &stream {
            ok += usize::from(roi_predict(v, &self.cfg, mode)?.finer_id == s.gt_finer);
        }
        Ok(ok as f64 / stream.len() as f64)
    }
}
