mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use safnet::chunks::*;
use safnet::fusion::{FusionSettings, SafnetModel};
use safnet::segment::{segment_scene, SegmentConfig};
use safnet::synth::{generate_scene, CameraSpec, SceneSpec};
use safnet::{Point3, PointCloud};

fn small_scene(seed: u64) -> safnet::SceneBundle {
    generate_scene(&SceneSpec {
        seed,
        points_per_scene: 1500,
        camera: CameraSpec { width: 64, height: 48, focal: 48.0 },
        camera_count: 6,
        ..SceneSpec::default()
    })
    .unwrap()
}

proptest! {
    #[test]
    fn every_point_lands_in_a_window_containing_it(
        seed in 0u64..100_000,
        n in 1usize..300,
        extent in 0.1..6.0f64,
        stride in 0.2..1.5f64,
    ) {
        let mut r = rng(seed);
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::new(r.gen::<f64>() * extent, r.gen::<f64>() * extent * 0.7, r.gen::<f64>() * 4.0))
            .collect();
        let cloud = PointCloud::from_points(pts.clone()).unwrap();
        let chunks = make_chunks(&cloud, DEFAULT_CHUNK_SIZE, stride).unwrap();
        let mut hits = vec![0usize; n];
        for c in &chunks {
            prop_assert!(!c.is_empty());
            let (lo, hi) = (c.min_corner, c.max_corner());
            for &i in &c.point_indices {
                let p = pts[i];
                prop_assert!(p.x >= lo.x && p.x <= hi.x + 1e-9 && p.y >= lo.y && p.y <= hi.y + 1e-9);
                prop_assert!(p.z >= lo.z && p.z <= hi.z + 1e-9);
                hits[i] += 1;
            }
        }
        prop_assert!(hits.iter().all(|&h| h >= 1));
    }

    #[test]
    fn votes_match_a_brute_force_tally(seed in 0u64..100_000, points in 1usize..50, classes in 1usize..6) {
        let mut r = rng(seed);
        let mut acc = VoteAccumulator::new(points, classes);
        let mut tally = vec![vec![0u32; classes]; points];
        for _ in 0..r.gen_range(1..8) {
            let idx: Vec<usize> = (0..r.gen_range(1..points + 1)).map(|_| r.gen_range(0..points)).collect();
            let preds: Vec<u32> = idx.iter().map(|_| r.gen_range(0..classes as u32)).collect();
            for (&i, &c) in idx.iter().zip(&preds) {
                tally[i][c as usize] += 1;
            }
            acc.add(&idx, &preds).unwrap();
        }
        let votes = acc.vote(false).unwrap();
        for p in 0..points {
            prop_assert_eq!(acc.counts(p), tally[p].as_slice());
            let max = *tally[p].iter().max().unwrap();
            let want = (max > 0).then(|| tally[p].iter().position(|&c| c == max).unwrap() as u32);
            prop_assert_eq!(votes[p], want);
        }
    }

    #[test]
    fn sampling_returns_exactly_n_members(seed in 0u64..100_000, len in 1usize..100, n in 1usize..200) {
        let chunk = ChunkWindow { min_corner: Point3::origin(), size: [1.0; 3], point_indices: (100..100 + len).collect() };
        let s = sample_chunk(&chunk, n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.iter().all(|i| chunk.point_indices.contains(i)));
        let mut unique = s.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), n.min(len));
        prop_assert_eq!(s, sample_chunk(&chunk, n, seed).unwrap());
    }
}

#[test]
fn uncovered_points_are_reported() {
    let mut acc = VoteAccumulator::new(3, 2);
    acc.add(&[0, 2], &[1, 1]).unwrap();
    assert!(matches!(acc.labels(), Err(safnet::Error::UncoveredPoints(v)) if v == vec![1]));
    assert_eq!(acc.vote(false).unwrap(), vec![Some(1), None, Some(1)]);
}

#[test]
fn invalid_chunk_parameters() {
    let cloud = PointCloud::from_points(vec![Point3::origin()]).unwrap();
    assert!(make_chunks(&cloud, [0.0, 1.0, 1.0], 0.5).is_err());
    assert!(make_chunks(&cloud, DEFAULT_CHUNK_SIZE, 0.0).is_err());
    assert!(make_chunks(&cloud, DEFAULT_CHUNK_SIZE, 2.0).is_err());
    assert!(make_chunks(&PointCloud::default(), DEFAULT_CHUNK_SIZE, 0.5).unwrap().is_empty());
}

#[test]
fn segmentation_votes_cover_every_point_and_ignore_thread_count() {
    let scene = small_scene(5);
    let model = SafnetModel::new(4, 1).unwrap();
    let settings = FusionSettings::default();
    let config = SegmentConfig::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| segment_scene(&scene, &model, &settings, &config).unwrap())
    };
    let two = run(2);
    let eight = run(8);
    assert_eq!(two.labels, eight.labels);
    assert_eq!(two.votes, eight.votes);
    assert_eq!(two.mean_similarity.to_bits(), eight.mean_similarity.to_bits());

    let chunks = make_chunks(&scene.cloud, config.chunk_size, config.stride).unwrap();
    let mut memberships = vec![0u32; scene.cloud.len()];
    for c in &chunks {
        for &i in &c.point_indices {
            memberships[i] += 1;
        }
    }
    for (p, &m) in memberships.iter().enumerate() {
        assert!(m >= 1);
        assert_eq!(two.votes.counts(p).iter().sum::<u32>(), m);
    }
}

#[test]
fn segmentation_rejects_class_mismatch() {
    let scene = small_scene(6);
    let model = SafnetModel::new(3, 0).unwrap();
    assert!(segment_scene(&scene, &model, &FusionSettings::default(), &SegmentConfig::default()).is_err());
}
