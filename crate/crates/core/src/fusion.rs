//! Similarity-weighted late fusion of 2D and 3D point features, the losses,
//! and exact parameter gradients for the whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csm::{self, cosine_similarity_grad, CsmParams, CsmTape, OctantInputs, CONTEXT_DIM};
use crate::error::{Error, Result};
use crate::gsm::{masked_similarity, GsmNeighborhood, GsmParams, GsmTerms};
use crate::model::{FeatureTable, Point3};
use crate::nn::{cross_entropy, relu_backward, relu_in_place, sigmoid, Linear, ParamSet};
use crate::projection::BackprojectedCloud;
use crate::spatial::{NeighborHit, SpatialIndex};

/// Raw per-pixel channels: r, g, b, depth, u / width, v / height.
pub const IMAGE_CHANNELS: usize = 6;
pub const FEATURE_2D: usize = 64;
pub const FEATURE_3D: usize = 128;
pub const FUSED: usize = FEATURE_2D + FEATURE_3D;
pub const HEAD_WIDTH: usize = 20;
pub const DROPOUT_RATE: f64 = 0.5;
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.2, 0.8, 0.8];
pub const DEFAULT_R_PRIME: f64 = 0.1;
pub const AGGREGATE_NEIGHBORS: usize = 3;
const AGGREGATE_EPS: f64 = 1e-8;
/// Points per parallel gradient block. Fixed so reduction order never changes.
const BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub class_count: usize,
    /// Image feature provider. The weight is a fixed random projection and is
    /// never trained; only the bias is.
    pub provider2d: Linear,
    pub provider3d: Vec<Linear>,
    pub gate2d: Vec<f64>,
    pub gate3d: Vec<f64>,
    pub head: Vec<Linear>,
    pub aux2d: Linear,
    pub aux3d: Linear,
}

impl FusionParams {
    pub fn zeros(class_count: usize) -> Self {
        Self {
            class_count,
            provider2d: Linear::zeros(IMAGE_CHANNELS, FEATURE_2D),
            provider3d: vec![
                Linear::zeros(3 + CONTEXT_DIM, FEATURE_3D),
                Linear::zeros(FEATURE_3D, FEATURE_3D),
            ],
            gate2d: vec![0.0; FEATURE_2D],
            gate3d: vec![0.0; FEATURE_3D],
            head: vec![
                Linear::zeros(FUSED, FUSED),
                Linear::zeros(FUSED, FUSED),
                Linear::zeros(FUSED, FUSED),
                Linear::zeros(FUSED, HEAD_WIDTH),
            ],
            aux2d: Linear::zeros(FEATURE_2D, class_count),
            aux3d: Linear::zeros(FEATURE_3D, class_count),
        }
    }

    pub fn random<R: Rng>(class_count: usize, rng: &mut R) -> Self {
        Self {
            class_count,
            provider2d: Linear::uniform(IMAGE_CHANNELS, FEATURE_2D, rng),
            provider3d: vec![
                Linear::uniform(3 + CONTEXT_DIM, FEATURE_3D, rng),
                Linear::uniform(FEATURE_3D, FEATURE_3D, rng),
            ],
            gate2d: vec![0.0; FEATURE_2D],
            gate3d: vec![0.0; FEATURE_3D],
            head: vec![
                Linear::uniform(FUSED, FUSED, rng),
                Linear::uniform(FUSED, FUSED, rng),
                Linear::uniform(FUSED, FUSED, rng),
                Linear::uniform(FUSED, HEAD_WIDTH, rng),
            ],
            aux2d: Linear::uniform(FEATURE_2D, class_count, rng),
            aux3d: Linear::uniform(FEATURE_3D, class_count, rng),
        }
    }
}

impl ParamSet for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.provider2d.visit("fusion.provider2d", f);
        for (k, l) in self.provider3d.iter().enumerate() {
            l.visit(&format!("fusion.provider3d{k}"), f);
        }
        f("fusion.gate2d", &self.gate2d);
        f("fusion.gate3d", &self.gate3d);
        for (k, l) in self.head.iter().enumerate() {
            l.visit(&format!("fusion.head{k}"), f);
        }
        self.aux2d.visit("fusion.aux2d", f);
        self.aux3d.visit("fusion.aux3d", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.provider2d.visit_mut("fusion.provider2d", f);
        for (k, l) in self.provider3d.iter_mut().enumerate() {
            l.visit_mut(&format!("fusion.provider3d{k}"), f);
        }
        f("fusion.gate2d", &mut self.gate2d);
        f("fusion.gate3d", &mut self.gate3d);
        for (k, l) in self.head.iter_mut().enumerate() {
            l.visit_mut(&format!("fusion.head{k}"), f);
        }
        self.aux2d.visit_mut("fusion.aux2d", f);
        self.aux3d.visit_mut("fusion.aux3d", f);
    }
}

/// Every trainable piece of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SafnetModel {
    pub gsm: GsmParams,
    pub csm: CsmParams,
    pub fusion: FusionParams,
}

impl SafnetModel {
    pub fn new(class_count: usize, seed: u64) -> Result<Self> {
        if class_count == 0 || class_count > HEAD_WIDTH {
            return Err(Error::invalid(format!(
                "class count must be in 1..={HEAD_WIDTH}, got {class_count}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let csm = CsmParams::random(&mut rng);
        let fusion = FusionParams::random(class_count, &mut rng);
        Ok(Self {
            gsm: GsmParams::default(),
            csm,
            fusion,
        })
    }

    pub fn zeros(class_count: usize) -> Self {
        Self {
            gsm: GsmParams::zeros(),
            csm: CsmParams::zeros(),
            fusion: FusionParams::zeros(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.fusion.class_count
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.class_count())
    }
}

impl ParamSet for SafnetModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.gsm.visit(f);
        self.csm.visit(f);
        self.fusion.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.gsm.visit_mut(f);
        self.csm.visit_mut(f);
        self.fusion.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// 2D features scaled by the per-point similarity.
    #[default]
    Safnet,
    /// Plain concatenation: the similarity is computed but forced to 1.
    Fixed,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safnet" => Ok(Self::Safnet),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::invalid(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Architecture switches, including the ablation toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    pub mode: FusionMode,
    pub gsm_terms: GsmTerms,
    /// When off, the 3D provider sees zeros instead of the context vector and
    /// the contextual similarity is 1.
    pub csm: bool,
    pub channel_attention: bool,
    pub clip_similarity: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            mode: FusionMode::Safnet,
            gsm_terms: GsmTerms::default(),
            csm: true,
            channel_attention: true,
            clip_similarity: false,
        }
    }
}

impl FusionSettings {
    pub fn with_mode(self, mode: FusionMode) -> Self {
        Self { mode, ..self }
    }
}

/// Loss weights and switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    /// Weights of the 2D, 3D, and unprojected auxiliary terms.
    pub lambdas: [f64; 3],
    pub aux_losses: bool,
    pub unprojected_loss: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS,
            aux_losses: true,
            unprojected_loss: true,
        }
    }
}

impl LossSettings {
    /// Lambdas with disabled terms set to zero.
    pub fn effective_lambdas(&self) -> [f64; 3] {
        let [l2d, l3d, lunp] = self.lambdas;
        let aux = if self.aux_losses { 1.0 } else { 0.0 };
        let unp = if self.unprojected_loss { 1.0 } else { 0.0 };
        [aux * l2d, aux * l3d, unp * lunp]
    }
}

/// Everything the network needs for one point of a chunk; no learnable
/// state is involved in building it.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    pub scene_index: usize,
    pub position: Point3,
    pub p_context: OctantInputs,
    pub q_context: OctantInputs,
    pub geometry: GsmNeighborhood,
    /// Inverse-distance blend of the raw channels of the nearest Q points.
    pub image_raw: [f64; IMAGE_CHANNELS],
    /// Raw channels of the nearest Q point, if it lies within r'.
    pub unprojected_raw: Option<[f64; IMAGE_CHANNELS]>,
    pub label: Option<u32>,
}

/// A labeled back-projected pixel for the 2D auxiliary loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    pub raw: [f64; IMAGE_CHANNELS],
    pub label: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub points: Vec<PointSample>,
    pub pixels: Vec<PixelSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub s_geo: f64,
    pub s_con: f64,
    pub s_combined: f64,
}

pub fn combine_similarity(s_geo: f64, s_con: f64) -> f64 {
    s_geo * s_con
}

/// Scales the 2D feature by the similarity weight.
pub fn apply_gamma(f2d: &[f64], s: f64) -> Vec<f64> {
    f2d.iter().map(|v| s * v).collect()
}

pub fn channel_attention(f: &[f64], gate_logits: &[f64]) -> Result<Vec<f64>> {
    if f.len() != gate_logits.len() {
        return Err(Error::invalid(format!(
            "feature has {} channels but {} gates",
            f.len(),
            gate_logits.len()
        )));
    }
    Ok(f.iter().zip(gate_logits).map(|(v, g)| v * sigmoid(*g)).collect())
}

/// Inverse-distance weighted mean of the features of the three Q points
/// nearest to `point`.
pub fn aggregate_image_features(point: &Point3, q_cloud: &BackprojectedCloud, q_index: &SpatialIndex) -> Result<Vec<f64>> {
    let table = q_cloud
        .cloud
        .features()
        .ok_or_else(|| Error::invalid("back-projected cloud has no features"))?;
    let hits = q_index.knn(point, AGGREGATE_NEIGHBORS)?;
    Ok(inverse_distance_blend(&hits, table))
}

/// Blends table rows of `hits` with weights `1/(d + 1e-8)`, normalized.
pub fn inverse_distance_blend(hits: &[NeighborHit], table: &FeatureTable) -> Vec<f64> {
    let weights: Vec<f64> = hits.iter().map(|h| 1.0 / (h.distance + AGGREGATE_EPS)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; table.dim()];
    for (h, w) in hits.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(table.row(h.index)) {
            *o += w / total * v;
        }
    }
    out
}

/// Per-term losses; `total` always equals
/// `l_fusion + lambdas[0]*l_2d + lambdas[1]*l_3d + lambdas[2]*l_2d_unp`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fusion: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_2d_unp: f64,
    pub total: f64,
    pub lambdas: [f64; 3],
}

impl LossBreakdown {
    pub fn new(l_fusion: f64, l_2d: f64, l_3d: f64, l_2d_unp: f64, lambdas: [f64; 3]) -> Self {
        Self {
            l_fusion,
            l_2d,
            l_3d,
            l_2d_unp,
            total: l_fusion + lambdas[0] * l_2d + lambdas[1] * l_3d + lambdas[2] * l_2d_unp,
            lambdas,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (term, v) in [
            ("fusion", self.l_fusion),
            ("2d", self.l_2d),
            ("3d", self.l_3d),
            ("2d_unprojected", self.l_2d_unp),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term });
            }
        }
        Ok(())
    }
}

/// Cross-entropy restricted to the first `class_count` logits.
pub fn masked_cross_entropy(logits: &[f64], label: u32, class_count: usize) -> (f64, Vec<f64>) {
    let (loss, mut grad) = cross_entropy(&logits[..class_count], label as usize);
    grad.resize(logits.len(), 0.0);
    (loss, grad)
}

#[derive(Clone, Debug)]
struct PointTape {
    p_csm: Option<CsmTape>,
    q_csm: Option<CsmTape>,
    similarity: Similarity,
    s_used: f64,
    /// Gradient of the geometric similarity with respect to its parameters.
    geo_grad: GsmParams,
    /// Gradient pass-through of the optional clamp.
    clip_pass: f64,
    cos_grads: Option<(Vec<f64>, Vec<f64>)>,
    x3d: Vec<f64>,
    h3d: Vec<f64>,
    f3d: Vec<f64>,
    f2d: Vec<f64>,
    fused: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    /// Inverted-dropout scale per channel of the last hidden layer.
    mask: Option<Vec<f64>>,
    dropped: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_point(
    model: &SafnetModel,
    settings: &FusionSettings,
    sample: &PointSample,
    mask: Option<Vec<f64>>,
) -> PointTape {
    let fusion = &model.fusion;
    let (s_geo, geo_grad) = masked_similarity(&sample.geometry, &model.gsm, settings.gsm_terms);

    let (p_csm, q_csm) = if settings.csm {
        (
            Some(csm::csm_forward(&sample.p_context, &model.csm)),
            Some(csm::csm_forward(&sample.q_context, &model.csm)),
        )
    } else {
        (None, None)
    };
    let (s_con, cos_grads) = match (&p_csm, &q_csm) {
        (Some(p), Some(q)) => {
            let (c, ga, gb) = cosine_similarity_grad(&p.feature.embedding, &q.feature.embedding);
            (c, Some((ga, gb)))
        }
        _ => (1.0, None),
    };
    let raw_s = combine_similarity(s_geo, s_con);
    let (s, clip_pass) = if settings.clip_similarity && !(0.0..=1.0).contains(&raw_s) {
        (raw_s.clamp(0.0, 1.0), 0.0)
    } else {
        (raw_s, 1.0)
    };
    let s_used = match settings.mode {
        FusionMode::Safnet => s,
        FusionMode::Fixed => 1.0,
    };

    let mut x3d = Vec::with_capacity(3 + CONTEXT_DIM);
    x3d.extend_from_slice(&[sample.position.x, sample.position.y, sample.position.z]);
    match &p_csm {
        Some(t) => x3d.extend_from_slice(&t.feature.vector),
        None => x3d.resize(3 + CONTEXT_DIM, 0.0),
    }
    let mut h3d = fusion.provider3d[0].apply(&x3d);
    relu_in_place(&mut h3d);
    let mut f3d = fusion.provider3d[1].apply(&h3d);
    relu_in_place(&mut f3d);

    let f2d = fusion.provider2d.apply(&sample.image_raw);

    let mut fused = Vec::with_capacity(FUSED);
    for (k, v) in f2d.iter().enumerate() {
        let gate = if settings.channel_attention { sigmoid(fusion.gate2d[k]) } else { 1.0 };
        fused.push(s_used * v * gate);
    }
    for (k, v) in f3d.iter().enumerate() {
        let gate = if settings.channel_attention { sigmoid(fusion.gate3d[k]) } else { 1.0 };
        fused.push(v * gate);
    }

    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(3);
    for layer in &fusion.head[..3] {
        let mut h = layer.apply(hidden.last().unwrap_or(&fused));
        relu_in_place(&mut h);
        hidden.push(h);
    }
    let last = hidden.last().expect("three hidden layers");
    let dropped = match &mask {
        Some(m) => last.iter().zip(m).map(|(h, m)| h * m).collect(),
        None => last.clone(),
    };
    let logits = fusion.head[3].apply(&dropped);

    PointTape {
        p_csm,
        q_csm,
        similarity: Similarity {
            s_geo,
            s_con,
            s_combined: s,
        },
        s_used,
        geo_grad,
        clip_pass,
        cos_grads,
        x3d,
        h3d,
        f3d,
        f2d,
        fused,
        hidden,
        mask,
        dropped,
        logits,
    }
}

/// Class logits of one point (evaluation mode: no dropout).
#[derive(Clone, Debug, PartialEq)]
pub struct PointOutput {
    pub logits: Vec<f64>,
    pub similarity: Similarity,
}

impl PointOutput {
    /// Arg-max over the active classes, ties to the lower class id.
    pub fn predicted_class(&self, class_count: usize) -> u32 {
        let mut best = 0;
        for (c, &z) in self.logits[..class_count].iter().enumerate() {
            if z > self.logits[best] {
                best = c;
            }
        }
        best as u32
    }
}

pub fn forward(model: &SafnetModel, settings: &FusionSettings, sample: &PointSample) -> PointOutput {
    let tape = forward_point(model, settings, sample, None);
    PointOutput {
        logits: tape.logits,
        similarity: tape.similarity,
    }
}

/// Predicted class per sample, in order.
pub fn predict(model: &SafnetModel, settings: &FusionSettings, samples: &[PointSample]) -> Vec<u32> {
    samples
        .iter()
        .map(|s| forward(model, settings, s).predicted_class(model.class_count()))
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Backpropagates the fusion, 3D-auxiliary, and unprojected terms of one point.
#[allow(clippy::too_many_arguments)]
fn backward_point(
    model: &SafnetModel,
    settings: &FusionSettings,
    tape: &PointTape,
    g_logits: &[f64],
    g_aux3d: Option<&[f64]>,
    grad: &mut SafnetModel,
) {
    let fusion = &model.fusion;
    let gf = &mut grad.fusion;

    let mut g = vec![0.0; FUSED];
    fusion.head[3].backward(&tape.dropped, g_logits, &mut gf.head[3], Some(&mut g));
    if let Some(m) = &tape.mask {
        for (gi, mi) in g.iter_mut().zip(m) {
            *gi *= mi;
        }
    }
    for k in (0..3).rev() {
        relu_backward(&mut g, &tape.hidden[k]);
        let x = if k == 0 { &tape.fused } else { &tape.hidden[k - 1] };
        let mut gx = vec![0.0; FUSED];
        fusion.head[k].backward(x, &g, &mut gf.head[k], Some(&mut gx));
        g = gx;
    }

    // 2D branch: fused = s * f2d * sigmoid(gate)
    let mut g_f2d = vec![0.0; FEATURE_2D];
    let mut g_s = 0.0;
    for k in 0..FEATURE_2D {
        let gate = if settings.channel_attention { sigmoid(fusion.gate2d[k]) } else { 1.0 };
        let v = tape.f2d[k];
        if settings.channel_attention {
            gf.gate2d[k] += g[k] * tape.s_used * v * gate * (1.0 - gate);
        }
        g_f2d[k] = g[k] * tape.s_used * gate;
        g_s += g[k] * v * gate;
    }
    add_into(&mut gf.provider2d.bias, &g_f2d);

    // 3D branch
    let mut g_f3d = vec![0.0; FEATURE_3D];
    for k in 0..FEATURE_3D {
        let gk = g[FEATURE_2D + k];
        let gate = if settings.channel_attention { sigmoid(fusion.gate3d[k]) } else { 1.0 };
        if settings.channel_attention {
            gf.gate3d[k] += gk * tape.f3d[k] * gate * (1.0 - gate);
        }
        g_f3d[k] = gk * gate;
    }
    if let Some(ga) = g_aux3d {
        let mut gx = vec![0.0; FEATURE_3D];
        fusion.aux3d.backward(&tape.f3d, ga, &mut gf.aux3d, Some(&mut gx));
        add_into(&mut g_f3d, &gx);
    }
    relu_backward(&mut g_f3d, &tape.f3d);
    let mut g_h3d = vec![0.0; FEATURE_3D];
    fusion.provider3d[1].backward(&tape.h3d, &g_f3d, &mut gf.provider3d[1], Some(&mut g_h3d));
    relu_backward(&mut g_h3d, &tape.h3d);
    let mut g_x3d = vec![0.0; 3 + CONTEXT_DIM];
    fusion.provider3d[0].backward(&tape.x3d, &g_h3d, &mut gf.provider3d[0], Some(&mut g_x3d));

    // similarity
    let g_s = if settings.mode == FusionMode::Safnet {
        g_s * tape.clip_pass
    } else {
        0.0
    };
    let g_geo = g_s * tape.similarity.s_con;
    let g_con = g_s * tape.similarity.s_geo;
    grad.gsm.add_scaled(&tape.geo_grad, g_geo);

    if let (Some(p), Some(q)) = (&tape.p_csm, &tape.q_csm) {
        let (ga, gb) = tape.cos_grads.as_ref().expect("cosine gradients recorded with tapes");
        let g_emb_p: Vec<f64> = ga.iter().map(|v| v * g_con).collect();
        let g_emb_q: Vec<f64> = gb.iter().map(|v| v * g_con).collect();
        csm::csm_backward(p, &model.csm, &g_x3d[3..], &g_emb_p, &mut grad.csm);
        csm::csm_backward(q, &model.csm, &[0.0; CONTEXT_DIM], &g_emb_q, &mut grad.csm);
    }
}

/// CE of the 2D auxiliary head on raw channels; accumulates its gradient
/// scaled by `weight` when `grad` is given.
fn aux2d_term(model: &SafnetModel, raw: &[f64; IMAGE_CHANNELS], label: u32, weight: f64, grad: Option<&mut SafnetModel>) -> f64 {
    let fusion = &model.fusion;
    let f2d = fusion.provider2d.apply(raw);
    let logits = fusion.aux2d.apply(&f2d);
    let (loss, g) = cross_entropy(&logits, label as usize);
    if let Some(grad) = grad {
        let g: Vec<f64> = g.iter().map(|v| v * weight).collect();
        let mut g_f2d = vec![0.0; FEATURE_2D];
        fusion.aux2d.backward(&f2d, &g, &mut grad.fusion.aux2d, Some(&mut g_f2d));
        add_into(&mut grad.fusion.provider2d.bias, &g_f2d);
    }
    loss
}

/// Loss sums of a block of points.
#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    fusion: f64,
    l3d: f64,
    unp: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inverted dropout scales (0 or 1/(1-p)) for one sample.
pub fn dropout_mask(seed: u64, sample: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(sample as u64)));
    let keep = 1.0 / (1.0 - DROPOUT_RATE);
    (0..FUSED)
        .map(|_| if rng.gen_bool(1.0 - DROPOUT_RATE) { keep } else { 0.0 })
        .collect()
}

/// Batch loss and, optionally, the gradient of `total` with respect to every
/// parameter.
///
/// `dropout_seed` switches on training-mode dropout. Points are processed in
/// fixed-size blocks whose partial sums are added in block order, so the
/// result does not depend on the thread count.
pub fn batch_loss(
    model: &SafnetModel,
    settings: &FusionSettings,
    loss: &LossSettings,
    batch: &Batch,
    dropout_seed: Option<u64>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<SafnetModel>)> {
    let class_count = model.class_count();
    let lambdas = loss.effective_lambdas();
    let labeled = batch.points.iter().filter(|p| p.label.is_some()).count();
    let unprojected = batch
        .points
        .iter()
        .filter(|p| p.label.is_some() && p.unprojected_raw.is_some())
        .count();
    for (name, n) in [("fusion/3d", labeled), ("unprojected", unprojected), ("2d", batch.pixels.len())] {
        if n == 0 {
            log::debug!("no samples contribute to the {name} loss term");
        }
    }
    for p in &batch.points {
        if p.label.is_some_and(|l| l as usize >= class_count) {
            return Err(Error::invalid(format!("label {:?} outside {class_count} classes", p.label)));
        }
    }
    let w_fusion = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
    let w_3d = lambdas[1] * w_fusion;
    let w_unp = if unprojected > 0 { lambdas[2] / unprojected as f64 } else { 0.0 };

    let blocks: Vec<(Sums, Option<SafnetModel>)> = batch
        .points
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(b, block)| {
            let mut sums = Sums::default();
            let mut grad = with_grad.then(|| model.zeros_like());
            for (k, sample) in block.iter().enumerate() {
                let Some(label) = sample.label else { continue };
                let mask = dropout_seed.map(|seed| dropout_mask(seed, b * BLOCK + k));
                let tape = forward_point(model, settings, sample, mask);
                let (ce, g_logits) = masked_cross_entropy(&tape.logits, label, class_count);
                sums.fusion += ce;
                let aux3d_logits = model.fusion.aux3d.apply(&tape.f3d);
                let (ce3d, g3d) = cross_entropy(&aux3d_logits, label as usize);
                sums.l3d += ce3d;
                let unp = sample.unprojected_raw.map(|raw| {
                    let weight = if lambdas[2] != 0.0 { w_unp } else { 0.0 };
                    aux2d_term(model, &raw, label, weight, grad.as_mut().filter(|_| weight != 0.0))
                });
                sums.unp += unp.unwrap_or(0.0);
                if let Some(grad) = grad.as_mut() {
                    let g_logits: Vec<f64> = g_logits.iter().map(|v| v * w_fusion).collect();
                    let g3d: Vec<f64> = g3d.iter().map(|v| v * w_3d).collect();
                    let g3d = (w_3d != 0.0).then_some(g3d.as_slice());
                    backward_point(model, settings, &tape, &g_logits, g3d, grad);
                }
            }
            (sums, grad)
        })
        .collect();

    let mut total = Sums::default();
    let mut grad = with_grad.then(|| model.zeros_like());
    for (sums, g) in &blocks {
        total.fusion += sums.fusion;
        total.l3d += sums.l3d;
        total.unp += sums.unp;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.add_scaled(g, 1.0);
        }
    }

    let w_2d = if batch.pixels.is_empty() { 0.0 } else { lambdas[0] / batch.pixels.len() as f64 };
    let mut pixel_sum = 0.0;
    for px in &batch.pixels {
        if px.label as usize >= class_count {
            return Err(Error::invalid(format!("pixel label {} outside {class_count} classes", px.label)));
        }
        let g = grad.as_mut().filter(|_| w_2d != 0.0);
        pixel_sum += aux2d_term(model, &px.raw, px.label, w_2d, g);
    }

    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let breakdown = LossBreakdown::new(
        mean(total.fusion, labeled),
        mean(pixel_sum, batch.pixels.len()),
        mean(total.l3d, labeled),
        mean(total.unp, unprojected),
        lambdas,
    );
    breakdown.check_finite()?;
    Ok((breakdown, grad))
}
