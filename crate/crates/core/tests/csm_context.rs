mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use safnet::csm::*;
use safnet::nn::ParamSet;
use safnet::Point3;

fn brute_octants(center: &Point3, neighbors: &[Point3]) -> [Option<usize>; 8] {
    let mut best: [Option<usize>; 8] = [None; 8];
    for (j, n) in neighbors.iter().enumerate() {
        let d = n - center;
        let o = (d.x >= 0.0) as usize | ((d.y >= 0.0) as usize) << 1 | ((d.z >= 0.0) as usize) << 2;
        let dj = dist(center, n);
        match best[o] {
            Some(b) if dist(center, &neighbors[b]) <= dj => {}
            _ => best[o] = Some(j),
        }
    }
    best
}

#[test]
fn characters_are_offsets_and_squared_distances() {
    let c = Point3::new(1.0, 2.0, 3.0);
    let n = [Point3::new(0.0, 2.0, 5.0)];
    let ch = neighborhood_characters(&c, &n).unwrap();
    assert_eq!(ch, vec![[1.0, 0.0, -2.0, 5.0]]);
    assert!(neighborhood_characters(&c, &[]).is_err());
}

#[test]
fn empty_octants_still_contribute_their_bias() {
    let mut r = rng(2);
    let params = CsmParams::random(&mut r);
    let c = Point3::new(0.0, 0.0, 0.0);
    let inputs = OctantInputs::new(&c, &[Point3::new(0.1, 0.1, 0.1)]).unwrap();
    assert_eq!(inputs.filled(), 1);
    let mut no_bias = params.clone();
    for o in &mut no_bias.octants {
        o.bias.fill(0.0);
    }
    let a = csm_forward(&inputs, &params).feature;
    let b = csm_forward(&inputs, &no_bias).feature;
    assert_ne!(a, b);
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let params = CsmParams::random(&mut r);
        let c = Point3::new(r.gen(), r.gen(), r.gen());
        let neighbors: Vec<Point3> = (0..r.gen_range(1..=5))
            .map(|_| c + nalgebra::Vector3::new(r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)))
            .collect();
        let inputs = OctantInputs::new(&c, &neighbors).unwrap();
        let u: Vec<f64> = (0..CONTEXT_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..CONTEXT_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |p: &CsmParams| {
            let t = csm_forward(&inputs, p).feature;
            t.vector.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                + t.embedding.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = csm_forward(&inputs, &params);
        let mut grad = CsmParams::zeros();
        csm_backward(&tape, &params, &u, &w, &mut grad);
        let grad = grad.flatten();
        for (name, i) in sampled_parameters(&params, 8, &mut r) {
            if let Err(numeric) = gradient_matches(&params, i, grad[i], 1e-3, 1e-8, &f) {
                panic!("seed {seed} {name}[{i}]: analytic {} numeric {numeric}", grad[i]);
            }
        }
    }
}

#[test]
fn cosine_degenerate_inputs() {
    assert_eq!(cosine_similarity(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0]), 0.0);
    let (c, ga, gb) = cosine_similarity_grad(&[0.0; 3], &[1.0; 3]);
    assert_eq!((c, ga, gb), (0.0, vec![0.0; 3], vec![0.0; 3]));
    assert!((cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]) + 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn octant_winners_match_brute_force(seed in 0u64..100_000, n in 1usize..40) {
        let mut r = rng(seed);
        let c = Point3::new(0.5, 0.5, 0.5);
        // a coarse lattice forces exact ties and zero offsets
        let neighbors: Vec<Point3> = (0..n)
            .map(|_| Point3::new(r.gen_range(0..5) as f64 * 0.25, r.gen_range(0..5) as f64 * 0.25, r.gen_range(0..5) as f64 * 0.25))
            .collect();
        prop_assert_eq!(octant_partition(&c, &neighbors), brute_octants(&c, &neighbors));
    }

    #[test]
    fn cosine_bounds_symmetry_and_scale_invariance(
        a in prop::collection::vec(-10.0..10.0f64, 16),
        b in prop::collection::vec(-10.0..10.0f64, 16),
        k in 0.01..100.0f64,
    ) {
        let c = cosine_similarity(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_similarity(&b, &a));
        let ka: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine_similarity(&ka, &b) - c).abs() < 1e-12);
        prop_assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-12 || a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cosine_gradient_matches_differences(
        a in prop::collection::vec(-3.0..3.0f64, 8),
        b in prop::collection::vec(-3.0..3.0f64, 8),
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 0.1 && b.iter().map(|v| v * v).sum::<f64>() > 0.1);
        let (_, ga, _) = cosine_similarity_grad(&a, &b);
        for i in 0..8 {
            let mut ap = a.clone();
            ap[i] += 1e-6;
            let mut am = a.clone();
            am[i] -= 1e-6;
            let numeric = (cosine_similarity(&ap, &b) - cosine_similarity(&am, &b)) / 2e-6;
            prop_assert!(close_relative(ga[i], numeric, 1e-4, 1e-8));
        }
    }
}
