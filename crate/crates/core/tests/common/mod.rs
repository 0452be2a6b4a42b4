//! Brute-force oracles and tiny fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safnet::csm::OctantInputs;
use safnet::fusion::{Batch, FusionMode, FusionSettings, PixelSample, PointSample, SafnetModel};
use safnet::gsm::GsmNeighborhood;
use safnet::nn::{Linear, ParamSet};
use safnet::{CameraIntrinsics, Point3, RgbdFrame, RigidPose};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(rng.gen::<f64>() * scale, rng.gen::<f64>() * scale, rng.gen::<f64>() * scale))
        .collect()
}

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}

/// Every point sorted by (distance, index), truncated to k, optionally
/// filtered by radius.
pub fn brute_knn(points: &[Point3], q: &Point3, k: usize, radius: Option<f64>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, dist(p, q))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.into_iter()
        .filter(|(_, d)| radius.map_or(true, |r| *d <= r))
        .take(k)
        .collect()
}

pub fn brute_nearest(points: &[Point3], q: &Point3) -> f64 {
    points.iter().map(|p| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Mean over `from` of the distance to the nearest point of `to`.
pub fn brute_directed_mean(from: &[Point3], to: &[Point3]) -> f64 {
    from.iter().map(|p| brute_nearest(to, p)).sum::<f64>() / from.len() as f64
}

/// Best coverage over all subsets of at most `budget` masks.
pub fn exhaustive_best_cover(masks: &[Vec<bool>], budget: usize) -> usize {
    let n = masks.len();
    let points = masks.first().map_or(0, |m| m.len());
    let mut best = 0;
    for subset in 0u32..(1 << n) {
        if subset.count_ones() as usize > budget {
            continue;
        }
        let covered = (0..points)
            .filter(|&p| (0..n).any(|f| subset >> f & 1 == 1 && masks[f][p]))
            .count();
        best = best.max(covered);
    }
    best
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let angle = rng.gen_range(-3.0..3.0);
    let rot = Rotation3::new(axis.normalize() * angle);
    let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    RigidPose::new(*rot.matrix(), t).unwrap()
}

pub fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    let w = rng.gen_range(16..400);
    let h = rng.gen_range(16..300);
    CameraIntrinsics::new(
        rng.gen_range(20.0..600.0),
        rng.gen_range(20.0..600.0),
        rng.gen_range(0.0..w as f64 - 1.0),
        rng.gen_range(0.0..h as f64 - 1.0),
        w,
        h,
    )
    .unwrap()
}

/// A frame with constant depth and flat gray color.
pub fn flat_frame(id: u32, k: CameraIntrinsics, pose: RigidPose, depth: f64) -> RgbdFrame {
    RgbdFrame::new(id, k, pose, vec![depth; k.pixel_count()], vec![[0.5; 3]; k.pixel_count()]).unwrap()
}

// ---- second implementation of the network, written with plain loops ----

pub fn ref_linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.outputs)
        .map(|o| {
            let mut acc = l.bias[o];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * l.weight[i * l.outputs + o];
            }
            acc
        })
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (context vector, embedding)
pub fn ref_csm(model: &SafnetModel, inputs: &OctantInputs) -> (Vec<f64>, Vec<f64>) {
    let c = &model.csm;
    let mut pooled = vec![0.0; 64];
    for (o, slot) in inputs.slots.iter().enumerate() {
        let e = match slot {
            Some(x) => relu(ref_linear(&c.enrich, x)),
            None => vec![0.0; 64],
        };
        for (p, v) in pooled.iter_mut().zip(ref_linear(&c.octants[o], &e)) {
            *p += v;
        }
    }
    let mut h = pooled;
    for layer in &c.mlp {
        h = relu(ref_linear(layer, &h));
    }
    let emb = ref_linear(&c.out, &h);
    (h, emb)
}

pub fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

pub fn ref_s_geo(model: &SafnetModel, g: &GsmNeighborhood, settings: &FusionSettings) -> f64 {
    let p = &model.gsm;
    let fwd = (-g.mean_df / p.a1).exp() + p.b1;
    let bwd = (-g.mean_db / p.a2).exp() + p.b2;
    match (settings.gsm_terms.forward, settings.gsm_terms.backward) {
        (false, false) => 1.0,
        (f, b) => {
            let mut s = p.b3;
            if f {
                s += p.a3 * fwd;
            }
            if b {
                s += p.a4 * bwd;
            }
            s
        }
    }
}

/// Evaluation-mode logits computed independently of the library's tapes.
pub fn ref_logits(model: &SafnetModel, settings: &FusionSettings, s: &PointSample) -> Vec<f64> {
    let f = &model.fusion;
    let s_geo = ref_s_geo(model, &s.geometry, settings);
    let (ctx, s_con) = if settings.csm {
        let (pv, pe) = ref_csm(model, &s.p_context);
        let (_, qe) = ref_csm(model, &s.q_context);
        (pv, ref_cosine(&pe, &qe))
    } else {
        (vec![0.0; 64], 1.0)
    };
    let mut sim = s_geo * s_con;
    if settings.clip_similarity {
        sim = sim.clamp(0.0, 1.0);
    }
    if settings.mode == FusionMode::Fixed {
        sim = 1.0;
    }
    let mut x3 = vec![s.position.x, s.position.y, s.position.z];
    x3.extend(ctx);
    let f3 = relu(ref_linear(&f.provider3d[1], &relu(ref_linear(&f.provider3d[0], &x3))));
    let f2 = ref_linear(&f.provider2d, &s.image_raw);
    let mut fused = Vec::new();
    for (k, v) in f2.iter().enumerate() {
        let g = if settings.channel_attention { sig(f.gate2d[k]) } else { 1.0 };
        fused.push(sim * v * g);
    }
    for (k, v) in f3.iter().enumerate() {
        let g = if settings.channel_attention { sig(f.gate3d[k]) } else { 1.0 };
        fused.push(v * g);
    }
    let mut h = fused;
    for layer in &f.head[..3] {
        h = relu(ref_linear(layer, &h));
    }
    ref_linear(&f.head[3], &h)
}

// ---- tiny fixtures ----

pub fn random_raw(rng: &mut ChaCha8Rng) -> [f64; 6] {
    std::array::from_fn(|_| rng.gen::<f64>())
}

/// A point sample built from a handful of random neighbors.
pub fn tiny_sample(rng: &mut ChaCha8Rng, class_count: usize, max_neighbors: usize) -> PointSample {
    let center = Point3::new(rng.gen(), rng.gen(), rng.gen());
    let around = |rng: &mut ChaCha8Rng| -> Vec<Point3> {
        let n = rng.gen_range(1..=max_neighbors);
        (0..n)
            .map(|_| center + Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)))
            .collect()
    };
    let np = around(rng);
    let nq = around(rng);
    PointSample {
        scene_index: 0,
        position: center,
        p_context: OctantInputs::new(&center, &np).unwrap(),
        q_context: OctantInputs::new(&center, &nq).unwrap(),
        geometry: GsmNeighborhood {
            center_index: 0,
            mean_df: rng.gen_range(0.0..0.3),
            mean_db: rng.gen_range(0.0..0.3),
            np: np.len(),
            mq: nq.len(),
        },
        image_raw: random_raw(rng),
        unprojected_raw: rng.gen_bool(0.6).then(|| random_raw(rng)),
        label: Some(rng.gen_range(0..class_count as u32)),
    }
}

pub fn tiny_batch(seed: u64, class_count: usize, points: usize, pixels: usize) -> Batch {
    let mut r = rng(seed);
    Batch {
        points: (0..points).map(|_| tiny_sample(&mut r, class_count, 5)).collect(),
        pixels: (0..pixels)
            .map(|_| PixelSample {
                raw: random_raw(&mut r),
                label: r.gen_range(0..class_count as u32),
            })
            .collect(),
    }
}

/// Model with a perturbed (nonzero) GSM and gate state so every path
/// carries gradient.
pub fn tiny_model(seed: u64, class_count: usize) -> SafnetModel {
    let mut m = SafnetModel::new(class_count, seed).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    m.gsm.a1 = r.gen_range(0.05..0.3);
    m.gsm.a2 = r.gen_range(0.05..0.3);
    m.gsm.b1 = r.gen_range(-0.2..0.2);
    m.gsm.b2 = r.gen_range(-0.2..0.2);
    m.gsm.b3 = r.gen_range(-0.2..0.2);
    for g in m.fusion.gate2d.iter_mut().chain(m.fusion.gate3d.iter_mut()) {
        *g = r.gen_range(-1.0..1.0);
    }
    m
}

/// Indices into the flat parameter vector: up to `per_tensor` entries of
/// every named tensor, chosen at random.
pub fn sampled_parameters<P: ParamSet>(model: &P, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, t| {
        let picks = rand::seq::index::sample(rng, t.len(), per_tensor.min(t.len()));
        for i in picks {
            out.push((name.to_string(), offset + i));
        }
        offset += t.len();
    });
    out
}

/// Central difference of `f` with respect to flat parameter `i`.
pub fn central_difference<P: ParamSet + Clone>(model: &P, i: usize, h: f64, f: &dyn Fn(&P) -> f64) -> f64 {
    let base = model.flatten();
    let mut plus = model.clone();
    let mut v = base.clone();
    v[i] += h;
    plus.assign_flat(&v);
    let mut minus = model.clone();
    v[i] = base[i] - h;
    minus.assign_flat(&v);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compares against central differences at shrinking steps, so that a ReLU
/// kink lying within the first step does not count as a mismatch.
pub fn gradient_matches<P: ParamSet + Clone>(
    model: &P,
    i: usize,
    analytic: f64,
    rel: f64,
    abs_floor: f64,
    f: &dyn Fn(&P) -> f64,
) -> Result<(), f64> {
    let mut last = f64::NAN;
    for h in [1e-6, 1e-7] {
        last = central_difference(model, i, h, f);
        if close_relative(analytic, last, rel, abs_floor) {
            return Ok(());
        }
    }
    Err(last)
}

pub fn close_relative(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs_floor
}
