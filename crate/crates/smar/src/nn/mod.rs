//! The two networks: SinoNet, a mask-pyramid U-Net that completes the metal
//! trace of an interpolated sinogram, and ImgNet, a half-width residual U-Net
//! that cleans secondary artifacts from reconstructed images.
//!
//! Both are built on the [`graph`] autodiff engine. The same graph builders
//! serve inference (constants only) and training (parameter leaves), so there
//! is exactly one forward implementation of each network.

pub mod graph;

use crate::container::{read_tensor_container, write_tensor_container, ContainerError};
use crate::domain::{Image, MetalTrace, Sinogram, Unit};
use crate::tensor::Tensor;
use graph::{lit, Graph, GraphError, NodeId, Scalar, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what} shape {actual:?} does not match {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image refinement expects attenuation (mu) images")]
    UnitMismatch,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinoNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for SinoNetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImgNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ImgNetConfig {
    /// Half the channels of the default SinoNet.
    fn default() -> Self {
        Self { depth: 3, base_channels: 4 }
    }
}

/// Input/output scalings applied symmetrically around the networks so
/// external units pass through unchanged. `sino_scale` divides sinogram
/// values on the way in (trained checkpoints store the 99th percentile of
/// the training data); `img_scale` maps attenuation values to roughly [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub sino_scale: f32,
    pub img_scale: f32,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            sino_scale: 1.0,
            img_scale: 3.0 * crate::simulate::MU_WATER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinoNetModel {
    pub config: SinoNetConfig,
    pub sino_scale: f32,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct ImgNetModel {
    pub config: ImgNetConfig,
    pub img_scale: f32,
    pub params: Vec<(String, Tensor)>,
}

// ---------------------------------------------------------------------------
// Layout: one list of convolutions, shared by init, save/load, and forward.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub zero_init: bool,
}

/// Convolution list for a U-Net with `depth` poolings. `extra_in` is the
/// number of side channels concatenated at every encoder scale (the mask
/// pyramid); 0 disables it.
pub(crate) fn unet_layout(
    depth: usize,
    base: usize,
    in_ch: usize,
    extra_in: usize,
    zero_final: bool,
) -> Vec<ConvSpec> {
    assert!(depth >= 1 && base >= 1);
    let ch = |l: usize| base << l;
    let mut layout = Vec::new();
    let conv = |name: String, out_ch, in_ch| ConvSpec {
        name,
        out_ch,
        in_ch,
        kernel: 3,
        zero_init: false,
    };
    layout.push(conv("enc0.conv1".into(), ch(0), in_ch));
    layout.push(conv("enc0.conv2".into(), ch(0), ch(0)));
    for l in 1..=depth {
        layout.push(conv(format!("enc{l}.conv1"), ch(l), ch(l - 1) + extra_in));
        layout.push(conv(format!("enc{l}.conv2"), ch(l), ch(l)));
    }
    for l in (0..depth).rev() {
        layout.push(conv(format!("dec{l}.conv1"), ch(l), ch(l + 1) + ch(l)));
        layout.push(conv(format!("dec{l}.conv2"), ch(l), ch(l)));
    }
    layout.push(ConvSpec {
        name: "out.conv".into(),
        out_ch: 1,
        in_ch: ch(0),
        kernel: 1,
        zero_init: zero_final,
    });
    layout
}

pub(crate) fn sinonet_layout(cfg: &SinoNetConfig) -> Vec<ConvSpec> {
    // Input channels: interpolated sinogram + trace; the trace is also
    // re-injected at every encoder scale.
    unet_layout(cfg.depth, cfg.base_channels, 2, 1, false)
}

pub(crate) fn imgnet_layout(cfg: &ImgNetConfig) -> Vec<ConvSpec> {
    // Zero-initialized final convolution: the residual starts at identity.
    unet_layout(cfg.depth, cfg.base_channels, 1, 0, true)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He fan-in normal for weights, zeros for biases; zero everything for
/// convolutions flagged `zero_init`.
fn init_params(layout: &[ConvSpec], seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layout.len() * 2);
    for spec in layout {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = spec.out_ch * spec.in_ch * spec.kernel * spec.kernel;
        let w: Vec<f32> = if spec.zero_init {
            vec![0.0; n]
        } else {
            (0..n).map(|_| (standard_normal(&mut rng) * std) as f32).collect()
        };
        params.push((
            format!("{}.w", spec.name),
            Tensor::new(vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], w)
                .expect("finite init"),
        ));
        params.push((
            format!("{}.b", spec.name),
            Tensor::zeros(&[spec.out_ch]),
        ));
    }
    params
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn init_sinonet(config: &SinoNetConfig, sino_scale: f32, seed: u64) -> SinoNetModel {
    assert!(sino_scale > 0.0, "sino_scale must be positive");
    SinoNetModel {
        config: *config,
        sino_scale,
        params: init_params(&sinonet_layout(config), seed),
    }
}

pub fn init_imgnet(config: &ImgNetConfig, img_scale: f32, seed: u64) -> ImgNetModel {
    assert!(img_scale > 0.0, "img_scale must be positive");
    ImgNetModel {
        config: *config,
        img_scale,
        params: init_params(&imgnet_layout(config), seed),
    }
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Registers model parameters on a graph, trainable or frozen.
pub(crate) fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &[(String, Tensor)],
    trainable: bool,
) -> Vec<NodeId> {
    params
        .iter()
        .map(|(_, t)| {
            let v = Value::from_tensor(t);
            if trainable {
                g.param(v)
            } else {
                g.input(v)
            }
        })
        .collect()
}

struct ParamCursor<'a> {
    ids: &'a [NodeId],
    next: usize,
}

impl<'a> ParamCursor<'a> {
    fn take_conv(&mut self) -> (NodeId, NodeId) {
        let w = self.ids[self.next];
        let b = self.ids[self.next + 1];
        self.next += 2;
        (w, b)
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// U-Net body on an already padded input. `trace` enables the mask pyramid:
/// the (padded) trace channel is pooled alongside the features and
/// concatenated at every encoder scale.
fn unet_body<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamCursor,
    depth: usize,
    x: NodeId,
    trace: Option<NodeId>,
) -> NodeId {
    let slope = lit::<T>(0.2);
    let conv_lrelu = |g: &mut Graph<T>, x: NodeId, p: &mut ParamCursor| {
        let (w, b) = p.take_conv();
        let y = g.conv2d(x, w, b);
        g.leaky_relu(y, slope)
    };

    let first = match trace {
        Some(tr) => g.concat_c(x, tr),
        None => x,
    };
    let mut cur = conv_lrelu(g, first, params);
    cur = conv_lrelu(g, cur, params);

    let mut skips = vec![cur];
    let mut tr_pyramid = trace;
    for _ in 1..=depth {
        cur = g.avg_pool2(cur);
        if let Some(tr) = tr_pyramid {
            let pooled = g.avg_pool2(tr);
            cur = g.concat_c(cur, pooled);
            tr_pyramid = Some(pooled);
        }
        cur = conv_lrelu(g, cur, params);
        cur = conv_lrelu(g, cur, params);
        skips.push(cur);
    }

    for l in (0..depth).rev() {
        let up = g.upsample2(cur);
        let cat = g.concat_c(up, skips[l]);
        let (w1, b1) = params.take_conv();
        let c1 = g.conv2d(cat, w1, b1);
        let a1 = g.relu(c1);
        let (w2, b2) = params.take_conv();
        let c2 = g.conv2d(a1, w2, b2);
        cur = g.relu(c2);
    }

    let (w, b) = params.take_conv();
    g.conv2d(cur, w, b)
}

/// SinoNet on the graph: normalize, pad to multiples of 2^depth, run the
/// mask-pyramid U-Net, crop, rescale. Returns raw completion values in
/// sinogram units (before compositing).
pub(crate) fn sinonet_graph<T: Scalar>(
    g: &mut Graph<T>,
    param_ids: &[NodeId],
    cfg: &SinoNetConfig,
    sino_scale: f32,
    s_li: NodeId,
    trace: NodeId,
) -> NodeId {
    let (_, n, d) = g.value(s_li).dims3();
    let mult = 1 << cfg.depth;
    let (pn, pd) = (round_up(n, mult), round_up(d, mult));

    let scale_in = lit::<T>(1.0 / sino_scale as f64);
    let norm = g.affine(s_li, scale_in, T::zero());
    let x = g.pad_to(norm, pn, pd);
    let tr = g.pad_to(trace, pn, pd);

    let mut cursor = ParamCursor { ids: param_ids, next: 0 };
    let raw = unet_body(g, &mut cursor, cfg.depth, x, Some(tr));
    debug_assert_eq!(cursor.next, param_ids.len(), "unconsumed parameters");

    let cropped = g.crop_to(raw, n, d);
    g.affine(cropped, lit(sino_scale as f64), T::zero())
}

/// ImgNet on the graph: X_out = recon + scale * f(recon / scale).
pub(crate) fn imgnet_graph<T: Scalar>(
    g: &mut Graph<T>,
    param_ids: &[NodeId],
    cfg: &ImgNetConfig,
    img_scale: f32,
    recon: NodeId,
) -> NodeId {
    let (_, h, w) = g.value(recon).dims3();
    let mult = 1 << cfg.depth;
    let (ph, pw) = (round_up(h, mult), round_up(w, mult));

    let norm = g.affine(recon, lit(1.0 / img_scale as f64), T::zero());
    let x = g.pad_to(norm, ph, pw);

    let mut cursor = ParamCursor { ids: param_ids, next: 0 };
    let residual = unet_body(g, &mut cursor, cfg.depth, x, None);
    debug_assert_eq!(cursor.next, param_ids.len(), "unconsumed parameters");

    let cropped = g.crop_to(residual, h, w);
    let scaled = g.affine(cropped, lit(img_scale as f64), T::zero());
    g.add(recon, scaled)
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

/// Raw SinoNet output f_S(S_LI, Tr), before compositing with the trace.
pub fn sinonet_forward(
    model: &SinoNetModel,
    s_li: &Sinogram,
    trace: &MetalTrace,
) -> Result<Sinogram, NnError> {
    if s_li.dims() != trace.dims() {
        return Err(NnError::ShapeMismatch {
            what: "sinogram vs trace",
            expected: s_li.dims(),
            actual: trace.dims(),
        });
    }
    let mut g = Graph::<f32>::new();
    let ids = register_params(&mut g, &model.params, false);
    let s_in = g.input(Value::feature_from_tensor(&s_li.tensor));
    let t_in = g.input(Value::feature_from_tensor(&trace.0.to_tensor()));
    let out = sinonet_graph(&mut g, &ids, &model.config, model.sino_scale, s_in, t_in);
    Ok(Sinogram::new(g.value(out).to_tensor2d()))
}

/// Residual refinement X_out = recon + f_I(recon).
pub fn imgnet_forward(model: &ImgNetModel, recon: &Image) -> Result<Image, NnError> {
    if recon.unit != Unit::Mu {
        return Err(NnError::UnitMismatch);
    }
    let mut g = Graph::<f32>::new();
    let ids = register_params(&mut g, &model.params, false);
    let r_in = g.input(Value::feature_from_tensor(&recon.tensor));
    let out = imgnet_graph(&mut g, &ids, &model.config, model.img_scale, r_in);
    Ok(Image::new(g.value(out).to_tensor2d(), Unit::Mu))
}

// ---------------------------------------------------------------------------
// Checkpoints: SMAR container + JSON sidecar.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    sinonet: SinoNetConfig,
    imgnet: Option<ImgNetConfig>,
    normalization: NormalizationSpec,
}

fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", path.display()))
}

pub fn save_checkpoint(
    path: &Path,
    sinonet: &SinoNetModel,
    imgnet: Option<&ImgNetModel>,
) -> Result<(), NnError> {
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in &sinonet.params {
        named.push((format!("sinonet.{name}"), t.clone()));
    }
    if let Some(img) = imgnet {
        for (name, t) in &img.params {
            named.push((format!("imgnet.{name}"), t.clone()));
        }
    }
    write_tensor_container(path, &named)?;

    let meta = CheckpointMeta {
        sinonet: sinonet.config,
        imgnet: imgnet.map(|m| m.config),
        normalization: NormalizationSpec {
            sino_scale: sinonet.sino_scale,
            img_scale: imgnet.map_or(NormalizationSpec::default().img_scale, |m| m.img_scale),
        },
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SinoNetModel, Option<ImgNetModel>), NnError> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let stored = read_tensor_container(path)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = stored.into_iter().collect();

    let collect = |by_name: &mut std::collections::HashMap<String, Tensor>,
                   prefix: &str,
                   layout: &[ConvSpec]|
     -> Result<Vec<(String, Tensor)>, NnError> {
        let mut params = Vec::new();
        for spec in layout {
            for (suffix, shape) in [
                (
                    "w",
                    vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
                ),
                ("b", vec![spec.out_ch]),
            ] {
                let name = format!("{}.{}", spec.name, suffix);
                let full = format!("{prefix}.{name}");
                let t = by_name.remove(&full).ok_or_else(|| {
                    NnError::ConfigMismatch(format!("missing parameter {full}"))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(NnError::ConfigMismatch(format!(
                        "{full}: shape {:?} does not match config {:?}",
                        t.shape(),
                        shape
                    )));
                }
                params.push((name, t));
            }
        }
        Ok(params)
    };

    let sous = collect(&mut by_name, "sinonet", &sinonet_layout(&meta.sinonet))?;
    let sinonet = SinoNetModel {
        config: meta.sinonet,
        sino_scale: meta.normalization.sino_scale,
        params: sous,
    };
    let imgnet = match meta.imgnet {
        Some(cfg) => Some(ImgNetModel {
            config: cfg,
            img_scale: meta.normalization.img_scale,
            params: collect(&mut by_name, "imgnet", &imgnet_layout(&cfg))?,
        }),
        None => None,
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(NnError::ConfigMismatch(format!(
            "unexpected parameter {extra} in checkpoint"
        )));
    }
    Ok((sinonet, imgnet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BitGrid;
    use crate::geometry::Geometry;

    fn test_sino(n: usize, d: usize, seed: u64) -> Sinogram {
        let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).max(3);
        Sinogram::new(Tensor::from_fn2(n, d, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) as f32 * 4.0
        }))
    }

    fn test_trace(n: usize, d: usize) -> MetalTrace {
        MetalTrace(BitGrid::from_fn(n, d, |r, c| (r + 2 * c) % 7 == 0))
    }

    fn zeroed(model: &SinoNetModel) -> SinoNetModel {
        let mut m = model.clone();
        for (_, t) in m.params.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        m
    }

    #[test]
    fn all_zero_parameters_give_zero_output() {
        let model = zeroed(&init_sinonet(&SinoNetConfig::default(), 1.0, 1));
        let s = test_sino(24, 25, 5);
        let t = test_trace(24, 25);
        let out = sinonet_forward(&model, &s, &t).unwrap();
        assert!(out.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = init_sinonet(&SinoNetConfig { depth: 2, base_channels: 4 }, 2.0, 9);
        let s = test_sino(20, 21, 7);
        let t = test_trace(20, 21);
        let a = sinonet_forward(&model, &s, &t).unwrap();
        let b = sinonet_forward(&model, &s, &t).unwrap();
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn perturbing_a_first_layer_weight_changes_output() {
        let cfg = SinoNetConfig { depth: 2, base_channels: 4 };
        let model = init_sinonet(&cfg, 1.0, 11);
        let s = test_sino(16, 16, 1);
        let t = test_trace(16, 16);
        let base = sinonet_forward(&model, &s, &t).unwrap();

        let mut perturbed = model.clone();
        let (name, w0) = perturbed.params[0].clone();
        assert_eq!(name, "enc0.conv1.w");
        let mut data = w0.data().to_vec();
        data[0] += 0.5;
        perturbed.params[0].1 = Tensor::new(w0.shape().to_vec(), data).unwrap();
        let out = sinonet_forward(&perturbed, &s, &t).unwrap();
        assert!(base.tensor.max_abs_diff(&out.tensor) > 0.0);
    }

    #[test]
    fn output_shape_matches_input_for_awkward_sizes() {
        let model = init_sinonet(&SinoNetConfig::default(), 1.0, 3);
        for (n, d) in [(45, 49), (40, 48), (33, 64)] {
            let s = test_sino(n, d, n as u64);
            let t = test_trace(n, d);
            let out = sinonet_forward(&model, &s, &t).unwrap();
            assert_eq!(out.dims(), (n, d));
        }
    }

    #[test]
    fn trace_channel_is_live() {
        let model = init_sinonet(&SinoNetConfig { depth: 2, base_channels: 4 }, 1.0, 21);
        let s = test_sino(16, 16, 2);
        let zeros = MetalTrace(BitGrid::new(16, 16));
        let ones = MetalTrace(BitGrid::from_fn(16, 16, |_, _| true));
        let a = sinonet_forward(&model, &s, &zeros).unwrap();
        let b = sinonet_forward(&model, &s, &ones).unwrap();
        assert!(a.tensor.max_abs_diff(&b.tensor) > 0.0);
    }

    #[test]
    fn imgnet_zero_init_is_identity() {
        let model = init_imgnet(&ImgNetConfig::default(), 0.05, 13);
        let recon = Image::new(
            Tensor::from_fn2(24, 24, |r, c| ((r * c) % 13) as f32 * 0.003),
            Unit::Mu,
        );
        let out = imgnet_forward(&model, &recon).unwrap();
        for (a, b) in out.tensor.data().iter().zip(recon.tensor.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // All-zero final conv by construction.
        let (name, w) = model.params.iter().rev().nth(1).unwrap();
        assert_eq!(name, "out.conv.w");
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn imgnet_rejects_hu_input() {
        let model = init_imgnet(&ImgNetConfig::default(), 0.05, 13);
        let recon = Image::new(Tensor::zeros(&[16, 16]), Unit::Hu);
        assert!(matches!(
            imgnet_forward(&model, &recon).unwrap_err(),
            NnError::UnitMismatch
        ));
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let cfg = SinoNetConfig::default();
        let a = init_sinonet(&cfg, 1.0, 77);
        let b = init_sinonet(&cfg, 1.0, 77);
        for ((_, ta), (_, tb)) in a.params.iter().zip(&b.params) {
            assert_eq!(ta, tb);
        }

        // Empirical variance of a large layer within 20% of 2/fan_in.
        let layout = sinonet_layout(&cfg);
        let (idx, spec) = layout
            .iter()
            .enumerate()
            .max_by_key(|(_, s)| s.out_ch * s.in_ch * s.kernel * s.kernel)
            .unwrap();
        let w = &a.params[idx * 2].1;
        assert!(w.len() >= 10_000, "largest layer has {} weights", w.len());
        let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var: f64 = w
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let expect = 2.0 / fan_in as f64;
        assert!(
            (var - expect).abs() <= 0.2 * expect,
            "var {var} vs 2/fan_in {expect}"
        );

        // Different seeds differ.
        let c = init_sinonet(&cfg, 1.0, 78);
        assert!(a.params[0].1 != c.params[0].1);
    }

    #[test]
    fn imgnet_gradient_matches_finite_differences() {
        // d ||X_out||^2 / d theta for a couple of parameters.
        let cfg = ImgNetConfig { depth: 1, base_channels: 2 };
        let model = init_imgnet(&cfg, 1.0, 31);
        let recon = Tensor::from_fn2(8, 8, |r, c| ((r * 5 + c * 3) % 11) as f32 * 0.1);

        let eval = |params: &[(String, Tensor)]| -> f64 {
            let mut g = Graph::<f32>::new();
            let ids = register_params(&mut g, params, false);
            let r = g.input(Value::feature_from_tensor(&recon));
            let out = imgnet_graph(&mut g, &ids, &cfg, 1.0, r);
            let sq = g.mul(out, out);
            let s = g.sum(sq);
            graph::as_f64(g.value(s).scalar_value())
        };

        let mut g = Graph::<f32>::new();
        let ids = register_params(&mut g, &model.params, true);
        let r = g.input(Value::feature_from_tensor(&recon));
        let out = imgnet_graph(&mut g, &ids, &cfg, 1.0, r);
        let sq = g.mul(out, out);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();

        for (pi, coord) in [(0usize, 0usize), (2, 1), (model.params.len() - 2, 0)] {
            let h = 1e-3;
            let mut plus = model.params.clone();
            let mut data = plus[pi].1.data().to_vec();
            data[coord] += h;
            plus[pi].1 = Tensor::new(plus[pi].1.shape().to_vec(), data).unwrap();
            let mut minus = model.params.clone();
            let mut data = minus[pi].1.data().to_vec();
            data[coord] -= h;
            minus[pi].1 = Tensor::new(minus[pi].1.shape().to_vec(), data).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let an = grads
                .get(ids[pi])
                .map_or(0.0, |v| graph::as_f64(v.data[coord]));
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / denom < 1e-2,
                "param {pi}[{coord}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.smar");
        let sn = init_sinonet(&SinoNetConfig { depth: 2, base_channels: 4 }, 3.5, 41);
        let im = init_imgnet(&ImgNetConfig { depth: 2, base_channels: 2 }, 0.06, 42);
        save_checkpoint(&path, &sn, Some(&im)).unwrap();
        let (sn2, im2) = load_checkpoint(&path).unwrap();
        let im2 = im2.unwrap();

        assert_eq!(sn2.sino_scale, 3.5);
        for ((na, ta), (nb, tb)) in sn.params.iter().zip(&sn2.params) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }

        let s = test_sino(20, 22, 3);
        let t = test_trace(20, 22);
        let a = sinonet_forward(&sn, &s, &t).unwrap();
        let b = sinonet_forward(&sn2, &s, &t).unwrap();
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let geom = Geometry::parallel(20, 22, (16, 16), 1.0, 1.0).unwrap();
        let recon = crate::projector::fbp(&s, &geom).unwrap();
        let xa = imgnet_forward(&im, &recon).unwrap();
        let xb = imgnet_forward(&im2, &recon).unwrap();
        for (x, y) in xa.tensor.data().iter().zip(xb.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_names_carry_prefixes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.smar");
        let sn = init_sinonet(&SinoNetConfig { depth: 1, base_channels: 2 }, 1.0, 1);
        let im = init_imgnet(&ImgNetConfig { depth: 1, base_channels: 2 }, 1.0, 2);
        save_checkpoint(&path, &sn, Some(&im)).unwrap();
        let stored = read_tensor_container(&path).unwrap();
        assert!(stored
            .iter()
            .all(|(n, _)| n.starts_with("sinonet.") || n.starts_with("imgnet.")));
        assert!(stored.iter().any(|(n, _)| n.starts_with("sinonet.")));
        assert!(stored.iter().any(|(n, _)| n.starts_with("imgnet.")));
    }

    #[test]
    fn checkpoint_without_imgnet_has_no_imgnet_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sn_only.smar");
        let sn = init_sinonet(&SinoNetConfig { depth: 1, base_channels: 2 }, 1.0, 1);
        save_checkpoint(&path, &sn, None).unwrap();
        let stored = read_tensor_container(&path).unwrap();
        assert!(stored.iter().all(|(n, _)| n.starts_with("sinonet.")));
        let (_, img) = load_checkpoint(&path).unwrap();
        assert!(img.is_none());
    }

    #[test]
    fn mismatched_depth_is_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.smar");
        let sn = init_sinonet(&SinoNetConfig { depth: 2, base_channels: 4 }, 1.0, 1);
        save_checkpoint(&path, &sn, None).unwrap();

        // Rewrite the sidecar claiming a different depth.
        let sidecar = PathBuf::from(format!("{}.json", path.display()));
        let meta = std::fs::read_to_string(&sidecar).unwrap();
        let edited = meta.replace("\"depth\": 2", "\"depth\": 1");
        assert_ne!(meta, edited);
        std::fs::write(&sidecar, edited).unwrap();

        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            NnError::ConfigMismatch(_)
        ));
    }
}
