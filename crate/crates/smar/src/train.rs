//! Self-supervised training: completion and consistency losses, paired-trace
//! batch sampling, Adam, and the joint SinoNet + ImgNet loop.
//!
//! Each iteration draws a mini-batch of metal-free sinograms and pairs every
//! sample with two different metal traces. Both corrupted copies are
//! completed by SinoNet; the completion loss compares each against the clean
//! sinogram, the reconstruction loss compares the two FBP images against each
//! other outside the metal, and the refinement loss compares ImgNet output
//! against the clean reconstruction. One Adam step updates all parameters
//! jointly.

use crate::domain::{Image, MetalMask, MetalTrace, Sinogram};
use crate::geometry::Geometry;
use crate::marops::{self, MarOpsError};
use crate::nn::graph::{as_f64, Graph, NodeId, Value};
use crate::nn::{
    imgnet_graph, init_imgnet, init_sinonet, register_params, sinonet_graph, ImgNetConfig,
    ImgNetModel, SinoNetConfig, SinoNetModel,
};
use crate::projector::{self, FilterWindow, ProjectorError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error("mask bank needs at least 2 masks, got {0}")]
    InsufficientMasks(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{what} shape {actual:?} does not match {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("reconstruction loss mask excludes every pixel")]
    AllMasked,
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    MarOps(#[from] MarOpsError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Graph(#[from] crate::nn::graph::GraphError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub adam_betas: (f32, f32),
    pub adam_eps: f32,
    pub alpha1: f32,
    pub alpha2: f32,
    pub seed: u64,
    /// Ablation: include the paired FBP reconstruction loss.
    pub use_fbp_loss: bool,
    /// Ablation: train the image refinement network.
    pub use_imgnet: bool,
    /// Restrict the completion L1 to the trace region instead of the whole
    /// sinogram (the two differ by a constant because untraced bins match).
    pub sn_trace_only: bool,
    pub sinonet: SinoNetConfig,
    pub imgnet: ImgNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            lr: 1e-4,
            adam_betas: (0.5, 0.999),
            adam_eps: 1e-8,
            alpha1: 1.0,
            alpha2: 1.0,
            seed: 0,
            use_fbp_loss: true,
            use_imgnet: true,
            sn_trace_only: false,
            sinonet: SinoNetConfig::default(),
            imgnet: ImgNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive"));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(TrainError::BadConfig("loss weights must be nonnegative"));
        }
        Ok(())
    }

    /// Flag sets for the four ablation rows.
    pub fn apply_mode(&mut self, mode: crate::pipeline::AblationMode) {
        use crate::pipeline::AblationMode::*;
        match mode {
            Sinonet => {
                self.use_fbp_loss = false;
                self.use_imgnet = false;
            }
            SinonetFbp => {
                self.use_fbp_loss = true;
                self.use_imgnet = false;
            }
            Joint | JointMtr => {
                self.use_fbp_loss = true;
                self.use_imgnet = true;
            }
        }
    }
}

/// Metal-free training sinograms over one geometry.
pub struct TrainDataset {
    pub geometry: Geometry,
    pub sinograms: Vec<Sinogram>,
}

impl TrainDataset {
    pub fn new(geometry: Geometry, sinograms: Vec<Sinogram>) -> Result<Self, TrainError> {
        for s in &sinograms {
            if s.dims() != geometry.sinogram_shape() {
                return Err(TrainError::ShapeMismatch {
                    what: "training sinogram",
                    expected: geometry.sinogram_shape(),
                    actual: s.dims(),
                });
            }
        }
        Ok(Self { geometry, sinograms })
    }
}

/// Metal masks with their precomputed sinogram traces.
pub struct MaskBank {
    pub masks: Vec<MetalMask>,
    pub traces: Vec<MetalTrace>,
}

impl MaskBank {
    pub fn new(masks: Vec<MetalMask>, geometry: &Geometry) -> Result<Self, TrainError> {
        let traces = masks
            .iter()
            .map(|m| marops::compute_trace(m, geometry))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { masks, traces })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// One training sample: a clean sinogram paired with two different traces
/// and the interpolated inputs derived from them.
pub struct PairedSample {
    pub sino_index: usize,
    pub mask_indices: (usize, usize),
    pub s_li: (Sinogram, Sinogram),
}

pub struct PairedBatch {
    pub samples: Vec<PairedSample>,
}

/// Draws `batch_size` samples; each pairs a random sinogram with two masks
/// drawn without replacement. Deterministic in the RNG state.
pub fn sample_paired_batch(
    dataset: &TrainDataset,
    bank: &MaskBank,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedBatch, TrainError> {
    if bank.len() < 2 {
        return Err(TrainError::InsufficientMasks(bank.len()));
    }
    if dataset.sinograms.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let sino_index = rng.gen_range(0..dataset.sinograms.len());
        let m1 = rng.gen_range(0..bank.len());
        let mut m2 = rng.gen_range(0..bank.len() - 1);
        if m2 >= m1 {
            m2 += 1;
        }
        let sino = &dataset.sinograms[sino_index];
        let s_li = (
            corrupt_and_interpolate(sino, &bank.traces[m1])?,
            corrupt_and_interpolate(sino, &bank.traces[m2])?,
        );
        samples.push(PairedSample {
            sino_index,
            mask_indices: (m1, m2),
            s_li,
        });
    }
    Ok(PairedBatch { samples })
}

/// S_LI = LI(zero_trace(S, Tr), Tr): the network input for one trace.
pub fn corrupt_and_interpolate(
    sino: &Sinogram,
    trace: &MetalTrace,
) -> Result<Sinogram, MarOpsError> {
    let s_ma = marops::zero_trace(sino, trace)?;
    marops::li_interpolate(&s_ma, trace)
}

// ---------------------------------------------------------------------------
// Losses (measurement contracts; the training graph mirrors these exactly)
// ---------------------------------------------------------------------------

/// Completion loss: mean absolute difference over all bins, f64-accumulated.
pub fn loss_sn(s_sn: &Sinogram, s: &Sinogram) -> Result<f64, TrainError> {
    if s_sn.dims() != s.dims() {
        return Err(TrainError::ShapeMismatch {
            what: "completion vs reference sinogram",
            expected: s.dims(),
            actual: s_sn.dims(),
        });
    }
    let n = s.tensor.len() as f64;
    let acc: f64 = s_sn
        .tensor
        .data()
        .iter()
        .zip(s.tensor.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(acc / n)
}

/// Paired reconstruction loss: mean absolute difference of the two FBP
/// reconstructions over pixels outside both metal masks.
pub fn loss_fbp(
    s_sn1: &Sinogram,
    s_sn2: &Sinogram,
    m1: &MetalMask,
    m2: &MetalMask,
    geom: &Geometry,
) -> Result<f64, TrainError> {
    let r1 = projector::fbp(s_sn1, geom)?;
    let r2 = projector::fbp(s_sn2, geom)?;
    if m1.dims() != geom.image_size || m2.dims() != geom.image_size {
        return Err(TrainError::ShapeMismatch {
            what: "metal mask",
            expected: geom.image_size,
            actual: m1.dims(),
        });
    }
    let (h, w) = geom.image_size;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            if m1.0.get(r, c) || m2.0.get(r, c) {
                continue;
            }
            acc += (r1.tensor.at2(r, c) as f64 - r2.tensor.at2(r, c) as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(acc / count as f64)
}

/// Refinement loss: mean absolute difference between the refined image and
/// the reconstruction of the metal-free sinogram.
pub fn loss_in(x_out: &Image, s: &Sinogram, geom: &Geometry) -> Result<f64, TrainError> {
    let reference = projector::fbp(s, geom)?;
    if x_out.dims() != geom.image_size {
        return Err(TrainError::ShapeMismatch {
            what: "refined image",
            expected: geom.image_size,
            actual: x_out.dims(),
        });
    }
    let n = reference.tensor.len() as f64;
    let acc: f64 = x_out
        .tensor
        .data()
        .iter()
        .zip(reference.tensor.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(acc / n)
}

/// Total objective: L_SN + alpha1 * L_FBP + alpha2 * L_IN.
pub fn total_loss(l_sn: f64, l_fbp: f64, l_in: f64, alpha1: f64, alpha2: f64) -> f64 {
    l_sn + alpha1 * l_fbp + alpha2 * l_in
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f32,
    betas: (f32, f32),
    eps: f32,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::BadConfig("parameter/gradient count mismatch"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch {
                what: "parameter vs gradient",
                expected: (p.len(), 1),
                actual: (g.len(), 1),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (betas.0 as f64, betas.1 as f64);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for i in 0..data.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One line of loss history, emitted as JSON lines by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_sn: f64,
    pub l_fbp: f64,
    pub l_in: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub sinonet: SinoNetModel,
    pub imgnet: Option<ImgNetModel>,
    pub history: Vec<LossRecord>,
}

/// 99th percentile of sinogram values; the completion network's input scale.
pub fn sinogram_scale(dataset: &TrainDataset) -> f32 {
    let total: usize = dataset.sinograms.iter().map(|s| s.tensor.len()).sum();
    let stride = (total / 4_000_000).max(1);
    let mut vals: Vec<f32> = dataset
        .sinograms
        .iter()
        .flat_map(|s| s.tensor.data())
        .step_by(stride)
        .copied()
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite sinogram values"));
    if vals.is_empty() {
        return 1.0;
    }
    let idx = ((vals.len() - 1) as f64 * 0.99).round() as usize;
    vals[idx].max(1e-6)
}

/// Joint self-supervised training. Deterministic in `config.seed`.
pub fn train(
    dataset: &TrainDataset,
    bank: &MaskBank,
    config: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if dataset.sinograms.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if bank.len() < 2 {
        return Err(TrainError::InsufficientMasks(bank.len()));
    }
    let geom = Arc::new(dataset.geometry.clone());
    let (h, w) = geom.image_size;

    let sino_scale = sinogram_scale(dataset);
    let sinonet = init_sinonet(&config.sinonet, sino_scale, config.seed);
    let imgnet = config
        .use_imgnet
        .then(|| init_imgnet(&config.imgnet, crate::nn::NormalizationSpec::default().img_scale, config.seed ^ 0x5eed));
    let n_sino_params = sinonet.params.len();

    let mut params: Vec<Tensor> = sinonet.params.iter().map(|(_, t)| t.clone()).collect();
    if let Some(img) = &imgnet {
        params.extend(img.params.iter().map(|(_, t)| t.clone()));
    }
    let param_names: Vec<String> = sinonet
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .chain(
            imgnet
                .iter()
                .flat_map(|m| m.params.iter().map(|(n, _)| n.clone())),
        )
        .collect();

    // Reconstructions of the clean sinograms, reused by L_IN every iteration.
    let fbp_refs: Vec<Tensor> = if config.use_imgnet {
        dataset
            .sinograms
            .iter()
            .map(|s| projector::fbp(s, &geom).map(|img| img.tensor))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let iters_per_epoch = dataset.sinograms.len().div_ceil(config.batch_size);
    let mut iter = 0usize;

    for _epoch in 0..config.epochs {
        for _ in 0..iters_per_epoch {
            let batch = sample_paired_batch(dataset, bank, config.batch_size, &mut rng)?;
            let b = batch.samples.len() as f64;

            let mut g = Graph::<f32>::new();
            let param_ids = {
                let named: Vec<(String, Tensor)> = param_names
                    .iter()
                    .cloned()
                    .zip(params.iter().cloned())
                    .collect();
                register_params(&mut g, &named, true)
            };
            let sn_ids = &param_ids[..n_sino_params * 1];
            let im_ids = &param_ids[n_sino_params..];

            let mut parts: Vec<(NodeId, f32)> = Vec::new();
            let mut sums = (0.0f64, 0.0f64, 0.0f64);

            for sample in &batch.samples {
                let sino = &dataset.sinograms[sample.sino_index];
                let s_node = g.input(Value::feature_from_tensor(&sino.tensor));
                let (mi1, mi2) = sample.mask_indices;

                let branch = |g: &mut Graph<f32>, s_li: &Sinogram, trace: &MetalTrace| {
                    let tr_tensor = trace.0.to_tensor();
                    let s_li_node = g.input(Value::feature_from_tensor(&s_li.tensor));
                    let tr_node = g.input(Value::feature_from_tensor(&tr_tensor));
                    let raw = sinonet_graph(
                        g,
                        sn_ids,
                        &config.sinonet,
                        sino_scale,
                        s_li_node,
                        tr_node,
                    );
                    // S_sn = raw . Tr + S_LI . (1 - Tr); the untraced half is
                    // constant, so it enters as a precomputed input.
                    let untraced = Tensor::new(
                        vec![s_li.dims().0, s_li.dims().1],
                        s_li.tensor
                            .data()
                            .iter()
                            .zip(tr_tensor.data())
                            .map(|(v, t)| v * (1.0 - t))
                            .collect(),
                    )
                    .expect("finite");
                    let untraced_node = g.input(Value::feature_from_tensor(&untraced));
                    let masked_raw = g.mul(raw, tr_node);
                    let s_sn = g.add(masked_raw, untraced_node);

                    let sn_mask = config.sn_trace_only.then(|| {
                        Arc::new(tr_tensor.data().to_vec())
                    });
                    let l_sn = g.masked_l1(s_sn, s_node, sn_mask);
                    (s_sn, l_sn)
                };

                let (s_sn1, l_sn1) = branch(&mut g, &sample.s_li.0, &bank.traces[mi1]);
                let (s_sn2, l_sn2) = branch(&mut g, &sample.s_li.1, &bank.traces[mi2]);
                let half_b = (0.5 / b) as f32;
                parts.push((l_sn1, half_b));
                parts.push((l_sn2, half_b));
                sums.0 += 0.5 / b
                    * (as_f64(g.value(l_sn1).scalar_value())
                        + as_f64(g.value(l_sn2).scalar_value()));

                let needs_recon = config.use_fbp_loss || config.use_imgnet;
                if needs_recon {
                    let recon1 = g.fbp(s_sn1, geom.clone(), FilterWindow::RamLak);
                    let recon2 = g.fbp(s_sn2, geom.clone(), FilterWindow::RamLak);

                    if config.use_fbp_loss {
                        let mask_union = bank.masks[mi1].0.union(&bank.masks[mi2].0);
                        let outside: Vec<f32> = (0..h * w)
                            .map(|i| {
                                let (r, c) = (i / w, i % w);
                                if mask_union.get(r, c) {
                                    0.0
                                } else {
                                    1.0
                                }
                            })
                            .collect();
                        if outside.iter().all(|&v| v == 0.0) {
                            return Err(TrainError::AllMasked);
                        }
                        let l_fbp = g.masked_l1(recon1, recon2, Some(Arc::new(outside)));
                        parts.push((l_fbp, (config.alpha1 as f64 / b) as f32));
                        sums.1 += as_f64(g.value(l_fbp).scalar_value()) / b;
                    }

                    if config.use_imgnet {
                        let ref_node = g.input(Value::feature_from_tensor(
                            &fbp_refs[sample.sino_index],
                        ));
                        for recon in [recon1, recon2] {
                            let x_out = imgnet_graph(
                                &mut g,
                                im_ids,
                                &config.imgnet,
                                imgnet.as_ref().expect("imgnet enabled").img_scale,
                                recon,
                            );
                            let l_in = g.masked_l1(x_out, ref_node, None);
                            parts.push((l_in, (0.5 * config.alpha2 as f64 / b) as f32));
                            sums.2 += 0.5 * as_f64(g.value(l_in).scalar_value()) / b;
                        }
                    }
                }
            }

            let total_node = g.combine(parts);
            let total = as_f64(g.value(total_node).scalar_value());
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss(iter));
            }
            let grads_all = g.backward(total_node)?;
            let grads: Vec<Vec<f32>> = param_ids
                .iter()
                .zip(&params)
                .map(|(&id, p)| {
                    grads_all
                        .get(id)
                        .map(|v| v.data.clone())
                        .unwrap_or_else(|| vec![0.0; p.len()])
                })
                .collect();
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                config.lr,
                config.adam_betas,
                config.adam_eps,
            )?;

            history.push(LossRecord {
                iter,
                l_sn: sums.0,
                l_fbp: sums.1,
                l_in: sums.2,
                total: total_loss(sums.0, sums.1, sums.2, config.alpha1 as f64, config.alpha2 as f64),
            });
            iter += 1;
        }
    }

    // Write the optimized parameters back into the models.
    let mut sinonet = sinonet;
    for (slot, tensor) in sinonet.params.iter_mut().zip(&params[..n_sino_params]) {
        slot.1 = tensor.clone();
    }
    let imgnet = imgnet.map(|mut m| {
        for (slot, tensor) in m.params.iter_mut().zip(&params[n_sino_params..]) {
            slot.1 = tensor.clone();
        }
        m
    });

    Ok(TrainOutput {
        sinonet,
        imgnet,
        history,
    })
}
