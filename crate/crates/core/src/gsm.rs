//! Geometric similarity: bidirectional nearest-neighbor distances between the
//! point cloud P and the back-projected cloud Q, mapped through learnable
//! negative exponentials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Point3;
use crate::nn::ParamSet;
use crate::spatial::{distance, SpatialIndex};

/// Lower bound kept on the two distance scales after every update.
pub const MIN_SCALE: f64 = 1e-3;
pub const DEFAULT_NEIGHBORS: usize = 64;
pub const DEFAULT_QUERY_RADIUS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsmParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl Default for GsmParams {
    fn default() -> Self {
        Self {
            a1: 0.1,
            a2: 0.1,
            a3: 0.5,
            a4: 0.5,
            b1: 0.0,
            b2: 0.0,
            b3: 0.0,
        }
    }
}

impl GsmParams {
    pub fn zeros() -> Self {
        Self {
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
            a4: 0.0,
            b1: 0.0,
            b2: 0.0,
            b3: 0.0,
        }
    }

    pub fn clamp(&mut self) {
        self.a1 = self.a1.max(MIN_SCALE);
        self.a2 = self.a2.max(MIN_SCALE);
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a1, self.a2, self.a3, self.a4, self.b1, self.b2, self.b3];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("geometric similarity parameters must be finite"));
        }
        if self.a1 < MIN_SCALE || self.a2 < MIN_SCALE {
            return Err(Error::invalid(format!(
                "distance scales must be at least {MIN_SCALE}, got {} and {}",
                self.a1, self.a2
            )));
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, &f64); 7] {
        [
            ("gsm.a1", &self.a1),
            ("gsm.a2", &self.a2),
            ("gsm.a3", &self.a3),
            ("gsm.a4", &self.a4),
            ("gsm.b1", &self.b1),
            ("gsm.b2", &self.b2),
            ("gsm.b3", &self.b3),
        ]
    }
}

impl ParamSet for GsmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, v) in self.fields() {
            f(name, std::slice::from_ref(v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let names = self.fields().map(|(n, _)| n);
        let slots = [
            &mut self.a1,
            &mut self.a2,
            &mut self.a3,
            &mut self.a4,
            &mut self.b1,
            &mut self.b2,
            &mut self.b3,
        ];
        for (name, v) in names.into_iter().zip(slots) {
            f(name, std::slice::from_mut(v));
        }
    }
}

/// Parameter-free distance statistics of one point's neighborhoods.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GsmNeighborhood {
    pub center_index: usize,
    pub mean_df: f64,
    pub mean_db: f64,
    /// Size of the P neighborhood.
    pub np: usize,
    /// Size of the Q neighborhood; 0 when no Q point lies within the radius.
    pub mq: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoSimilarity {
    pub s_p2q: f64,
    pub s_q2p: f64,
    pub s_geo: f64,
}

/// Which of the two directional terms enter the geometric similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsmTerms {
    pub forward: bool,
    pub backward: bool,
}

impl Default for GsmTerms {
    fn default() -> Self {
        Self {
            forward: true,
            backward: true,
        }
    }
}

/// Distance from `q` to the closest of `points` (brute force).
pub fn nearest_distance(points: &[Point3], q: &Point3) -> f64 {
    points.iter().map(|p| distance(p, q)).fold(f64::INFINITY, f64::min)
}

/// Mean over the P neighborhood of each point's distance to its nearest
/// point anywhere in Q.
pub fn forward_search(np_neighborhood: &[Point3], q_index: &SpatialIndex) -> Result<f64> {
    if np_neighborhood.is_empty() {
        return Err(Error::invalid("P neighborhood is empty"));
    }
    let mut sum = 0.0;
    for p in np_neighborhood {
        sum += q_index.nearest(p)?.distance;
    }
    Ok(sum / np_neighborhood.len() as f64)
}

/// Mean over the Q neighborhood of each point's distance to the nearest point
/// of the P neighborhood.
///
/// With an empty Q neighborhood the Q point nearest to `center` stands in
/// as the single starting point, and the reported count is 0.
pub fn backward_search(
    nq_neighborhood: &[Point3],
    np_neighborhood: &[Point3],
    q_index: &SpatialIndex,
    center: &Point3,
) -> Result<(f64, usize)> {
    if q_index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if np_neighborhood.is_empty() {
        return Err(Error::invalid("P neighborhood is empty"));
    }
    if nq_neighborhood.is_empty() {
        let start = q_index.points()[q_index.nearest(center)?.index];
        return Ok((nearest_distance(np_neighborhood, &start), 0));
    }
    let sum: f64 = nq_neighborhood
        .iter()
        .map(|q| nearest_distance(np_neighborhood, q))
        .sum();
    Ok((sum / nq_neighborhood.len() as f64, nq_neighborhood.len()))
}

pub fn geo_similarity(nbhd: &GsmNeighborhood, params: &GsmParams) -> GeoSimilarity {
    let s_p2q = (-nbhd.mean_df / params.a1).exp() + params.b1;
    let s_q2p = (-nbhd.mean_db / params.a2).exp() + params.b2;
    GeoSimilarity {
        s_p2q,
        s_q2p,
        s_geo: params.a3 * s_p2q + params.a4 * s_q2p + params.b3,
    }
}

/// Partial derivatives of `s_geo` with respect to every parameter.
pub fn geo_similarity_grad(nbhd: &GsmNeighborhood, params: &GsmParams) -> GsmParams {
    let ef = (-nbhd.mean_df / params.a1).exp();
    let eb = (-nbhd.mean_db / params.a2).exp();
    GsmParams {
        a1: params.a3 * ef * nbhd.mean_df / (params.a1 * params.a1),
        a2: params.a4 * eb * nbhd.mean_db / (params.a2 * params.a2),
        a3: ef + params.b1,
        a4: eb + params.b2,
        b1: params.a3,
        b2: params.a4,
        b3: 1.0,
    }
}

/// Geometric similarity with some directional terms switched off.
///
/// Returns the value and its parameter gradient. With both terms off the
/// similarity is the constant 1.
pub fn masked_similarity(nbhd: &GsmNeighborhood, params: &GsmParams, terms: GsmTerms) -> (f64, GsmParams) {
    if !terms.forward && !terms.backward {
        return (1.0, GsmParams::zeros());
    }
    let s = geo_similarity(nbhd, params);
    let mut g = geo_similarity_grad(nbhd, params);
    let mut value = s.s_geo;
    if !terms.forward {
        value -= params.a3 * s.s_p2q;
        g.a1 = 0.0;
        g.a3 = 0.0;
        g.b1 = 0.0;
    }
    if !terms.backward {
        value -= params.a4 * s.s_q2p;
        g.a2 = 0.0;
        g.a4 = 0.0;
        g.b2 = 0.0;
    }
    (value, g)
}
