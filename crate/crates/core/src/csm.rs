//! Contextual similarity: a small network that encodes a neighborhood into a
//! feature vector, and the cosine similarity between the P-side and Q-side
//! encodings of the same center point.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Point3;
use crate::nn::{dot, relu_backward, relu_in_place, Linear, ParamSet};

pub const CONTEXT_DIM: usize = 64;
pub const OCTANTS: usize = 8;
/// Center coordinates followed by the four neighborhood characters.
pub const ENRICH_INPUT: usize = 7;
const MLP_LAYERS: usize = 3;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CsmParams {
    pub enrich: Linear,
    pub octants: Vec<Linear>,
    pub mlp: Vec<Linear>,
    pub out: Linear,
}

impl CsmParams {
    pub fn zeros() -> Self {
        Self {
            enrich: Linear::zeros(ENRICH_INPUT, CONTEXT_DIM),
            octants: (0..OCTANTS).map(|_| Linear::zeros(CONTEXT_DIM, CONTEXT_DIM)).collect(),
            mlp: (0..MLP_LAYERS).map(|_| Linear::zeros(CONTEXT_DIM, CONTEXT_DIM)).collect(),
            out: Linear::zeros(CONTEXT_DIM, CONTEXT_DIM),
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            enrich: Linear::uniform(ENRICH_INPUT, CONTEXT_DIM, rng),
            octants: (0..OCTANTS).map(|_| Linear::uniform(CONTEXT_DIM, CONTEXT_DIM, rng)).collect(),
            mlp: (0..MLP_LAYERS).map(|_| Linear::uniform(CONTEXT_DIM, CONTEXT_DIM, rng)).collect(),
            out: Linear::uniform(CONTEXT_DIM, CONTEXT_DIM, rng),
        }
    }
}

impl ParamSet for CsmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.enrich.visit("csm.enrich", f);
        for (o, l) in self.octants.iter().enumerate() {
            l.visit(&format!("csm.octant{o}"), f);
        }
        for (k, l) in self.mlp.iter().enumerate() {
            l.visit(&format!("csm.mlp{k}"), f);
        }
        self.out.visit("csm.out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.enrich.visit_mut("csm.enrich", f);
        for (o, l) in self.octants.iter_mut().enumerate() {
            l.visit_mut(&format!("csm.octant{o}"), f);
        }
        for (k, l) in self.mlp.iter_mut().enumerate() {
            l.visit_mut(&format!("csm.mlp{k}"), f);
        }
        self.out.visit_mut("csm.out", f);
    }
}

/// Encoding of one neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeature {
    /// Output of the shared MLP stack; feeds the 3D feature provider.
    pub vector: Vec<f64>,
    /// `vector` passed through the output layer; compared by cosine.
    pub embedding: Vec<f64>,
}

/// `(x_i - x_j, |x_i - x_j|^2)` for each neighbor `x_j` of center `x_i`.
pub fn neighborhood_characters(center: &Point3, neighbors: &[Point3]) -> Result<Vec<[f64; 4]>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("neighborhood is empty"));
    }
    Ok(neighbors.iter().map(|n| character(center, n)).collect())
}

fn character(center: &Point3, neighbor: &Point3) -> [f64; 4] {
    let d = center - neighbor;
    [d.x, d.y, d.z, d.x * d.x + d.y * d.y + d.z * d.z]
}

/// Octant of `neighbor` around `center`: bit k is set when coordinate k of
/// `neighbor - center` is non-negative.
pub fn octant_of(center: &Point3, neighbor: &Point3) -> usize {
    let d = neighbor - center;
    usize::from(d.x >= 0.0) | usize::from(d.y >= 0.0) << 1 | usize::from(d.z >= 0.0) << 2
}

/// Nearest neighbor in each octant (ties to the lower index), as indices into
/// `neighbors`.
pub fn octant_partition(center: &Point3, neighbors: &[Point3]) -> [Option<usize>; OCTANTS] {
    let mut best: [Option<(f64, usize)>; OCTANTS] = [None; OCTANTS];
    for (j, n) in neighbors.iter().enumerate() {
        let o = octant_of(center, n);
        let d = crate::spatial::distance(center, n);
        match best[o] {
            Some((bd, _)) if bd <= d => {}
            _ => best[o] = Some((d, j)),
        }
    }
    best.map(|b| b.map(|(_, j)| j))
}

/// Enrichment inputs of the octant winners; `None` marks an empty octant.
#[derive(Clone, Debug, PartialEq)]
pub struct OctantInputs {
    pub slots: [Option<[f64; ENRICH_INPUT]>; OCTANTS],
}

impl OctantInputs {
    pub fn new(center: &Point3, neighbors: &[Point3]) -> Result<Self> {
        if neighbors.is_empty() {
            return Err(Error::invalid("neighborhood is empty"));
        }
        let winners = octant_partition(center, neighbors);
        let slots = winners.map(|w| {
            w.map(|j| {
                let c = character(center, &neighbors[j]);
                [center.x, center.y, center.z, c[0], c[1], c[2], c[3]]
            })
        });
        Ok(Self { slots })
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CsmTape {
    inputs: OctantInputs,
    /// Rectified enrichment per octant; zeros for empty octants.
    enriched: Vec<Vec<f64>>,
    /// Rectified MLP outputs; the last one is the context vector.
    hidden: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    pub feature: ContextFeature,
}

pub fn csm_forward(inputs: &OctantInputs, params: &CsmParams) -> CsmTape {
    let mut pooled = vec![0.0; CONTEXT_DIM];
    let mut scratch = vec![0.0; CONTEXT_DIM];
    let mut enriched = Vec::with_capacity(OCTANTS);
    for (slot, map) in inputs.slots.iter().zip(&params.octants) {
        let mut e = vec![0.0; CONTEXT_DIM];
        if let Some(x) = slot {
            params.enrich.forward(x, &mut e);
            relu_in_place(&mut e);
        }
        map.forward(&e, &mut scratch);
        for (p, s) in pooled.iter_mut().zip(&scratch) {
            *p += s;
        }
        enriched.push(e);
    }
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(MLP_LAYERS);
    for layer in &params.mlp {
        let x = hidden.last().unwrap_or(&pooled);
        let mut h = layer.apply(x);
        relu_in_place(&mut h);
        hidden.push(h);
    }
    let vector = hidden.last().expect("mlp has layers").clone();
    let embedding = params.out.apply(&vector);
    CsmTape {
        inputs: inputs.clone(),
        enriched,
        hidden,
        pooled,
        feature: ContextFeature { vector, embedding },
    }
}

/// Encodes the neighborhood of `center`.
pub fn contextual_feature(center: &Point3, neighbors: &[Point3], params: &CsmParams) -> Result<ContextFeature> {
    let inputs = OctantInputs::new(center, neighbors)?;
    Ok(csm_forward(&inputs, params).feature)
}

/// Accumulates parameter gradients given upstream gradients on the context
/// vector and on the embedding.
pub fn csm_backward(tape: &CsmTape, params: &CsmParams, g_vector: &[f64], g_embedding: &[f64], grad: &mut CsmParams) {
    let mut g = vec![0.0; CONTEXT_DIM];
    params
        .out
        .backward(&tape.feature.vector, g_embedding, &mut grad.out, Some(&mut g));
    for (a, b) in g.iter_mut().zip(g_vector) {
        *a += b;
    }
    for k in (0..MLP_LAYERS).rev() {
        relu_backward(&mut g, &tape.hidden[k]);
        let x = if k == 0 { &tape.pooled } else { &tape.hidden[k - 1] };
        let mut gx = vec![0.0; CONTEXT_DIM];
        params.mlp[k].backward(x, &g, &mut grad.mlp[k], Some(&mut gx));
        g = gx;
    }
    // g is now the gradient on the pooled sum, shared by every octant map
    let mut ge = vec![0.0; CONTEXT_DIM];
    for o in 0..OCTANTS {
        let e = &tape.enriched[o];
        match &tape.inputs.slots[o] {
            Some(x) => {
                params.octants[o].backward(e, &g, &mut grad.octants[o], Some(&mut ge));
                relu_backward(&mut ge, e);
                params.enrich.backward(x, &ge, &mut grad.enrich, None);
            }
            None => params.octants[o].backward(e, &g, &mut grad.octants[o], None),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine of the angle between `a` and `b`; 0 when either is (near) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity and its gradients with respect to both inputs.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (c.clamp(-1.0, 1.0), ga, gb)
}
