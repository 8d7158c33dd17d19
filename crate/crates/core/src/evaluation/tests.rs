use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::retrieval::{summarize, Query};
use super::*;
use crate::geometry::{quaternion_distance, relative_transform, translation_distance, RigidTransform, Rotation};
use crate::losses::{align_poses, representation_tensor};
use crate::synthscene::{DatasetConfig, Split, ViewRecord};
use crate::tensor::{Graph, Tensor};

fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let t = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    RigidTransform::new(Rotation::from_quaternion(q).unwrap(), t)
}

fn random_poses(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let mut out = p.to_vec();
    for o in out.chunks_mut(16) {
        let n = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        o.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn mini_dataset(views: usize) -> crate::synthscene::Dataset {
    crate::synthscene::Dataset::generate(&DatasetConfig {
        seed: 5,
        classes: 3,
        instances_per_class: 5,
        views,
        resolution: 8,
    })
    .unwrap()
}

#[test]
fn r_squared_examples() {
    let y = [0.0, 1.0, 2.0];
    assert_eq!(r_squared(&y, &y, 1).unwrap(), 1.0);
    assert_eq!(r_squared(&y, &[1.0, 1.0, 1.0], 1).unwrap(), 0.0);
    assert_abs_diff_eq!(r_squared(&y, &[0.0, 1.0, 1.0], 1).unwrap(), 0.5, epsilon = 1e-15);
    // the mean is per column
    let y2 = [0.0, 10.0, 2.0, 10.0];
    assert_abs_diff_eq!(r_squared(&y2, &[1.0, 10.0, 1.0, 10.0], 2).unwrap(), 0.0, epsilon = 1e-15);
}

#[test]
fn r_squared_rejects_bad_input() {
    assert!(matches!(r_squared(&[1.0, 1.0], &[0.0, 2.0], 1), Err(crate::Error::Degenerate(_))));
    assert!(r_squared(&[1.0], &[1.0], 1).is_err());
    assert!(r_squared(&[1.0, 2.0], &[1.0], 1).is_err());
}

proptest! {
    #[test]
    fn r_squared_is_permutation_invariant(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 3..30),
        shift in 0usize..30,
    ) {
        let y: Vec<f64> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
        let p: Vec<f64> = rows.iter().flat_map(|r| [r.2, r.3]).collect();
        prop_assume!(rows.iter().any(|r| (r.0 - rows[0].0).abs() > 1e-3));
        let k = shift % rows.len();
        let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(2 * k); v };
        let a = r_squared(&y, &p, 2).unwrap();
        let b = r_squared(&rot(&y), &rot(&p), 2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn rotation_targets_are_relative_quaternions() {
    let ds = mini_dataset(6);
    let m = &ds.manifest;
    for i in 0..m.num_instances() {
        let v = m.view(i, 2);
        let q = rotation_target(v, v);
        for (a, b) in q.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        for a in 0..m.views {
            for b in 0..m.views {
                let q = rotation_target(m.view(i, a), m.view(i, b));
                let rel = relative_transform(&m.view(i, a).transform(), &m.view(i, b).transform());
                assert!(q[0] >= 0.0);
                assert!(quaternion_distance(q, rel.rotation.quaternion()) < 1e-15);
            }
        }
    }
}

#[test]
fn predict_embedding_identity_and_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let z = random_poses(&mut rng, 3);
        let id = predict_embedding(&z, &RigidTransform::identity()).unwrap();
        for (a, b) in id.iter().zip(normalized(&z)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let g = random_transform(&mut rng);
        let there = predict_embedding(&z, &g).unwrap();
        let back = predict_embedding(&there, &g.inverse()).unwrap();
        for (a, b) in back.iter().zip(normalized(&z)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }
}

#[test]
fn predict_embedding_matches_loss_alignment_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses: Vec<Vec<f64>> = (0..5).map(|_| random_poses(&mut rng, 4)).collect();
    let gs: Vec<RigidTransform> = (0..5).map(|_| random_transform(&mut rng)).collect();
    let mut g = Graph::<f64>::new();
    let flat: Vec<f64> = poses.iter().flatten().copied().collect();
    let z = g.constant(Tensor::new(&[5, 4, 4, 4], flat).unwrap());
    let rho = g.constant(representation_tensor(&gs));
    let aligned = align_poses(&mut g, z, rho).unwrap();
    let expected = g.value(aligned).data().to_vec();
    let batched: Vec<f64> = predict_embeddings(&poses, &gs).unwrap().concat();
    assert_eq!(batched, expected);
    for k in 0..5 {
        assert_eq!(predict_embedding(&poses[k], &gs[k]).unwrap(), expected[k * 64..(k + 1) * 64]);
    }
}

fn analytic_objects(ds: &crate::synthscene::Dataset, split: Split, capsules: usize) -> Vec<ObjectViews> {
    let m = &ds.manifest;
    m.instances(split)
        .into_iter()
        .map(|i| ObjectViews {
            instance: i,
            embeddings: (0..m.views).map(|v| analytic_embedding(&m.view(i, v).transform(), capsules)).collect(),
            latents: (0..m.views).map(|v| *m.view(i, v)).collect(),
        })
        .collect()
}

#[test]
fn analytic_embeddings_retrieve_perfectly() {
    let ds = mini_dataset(8);
    for split in [Split::Train, Split::Val] {
        let objects = analytic_objects(&ds, split, 2);
        let r = retrieval_metrics(&objects, None, &RetrievalConfig::default()).unwrap();
        assert_eq!(r.mrr, 1.0);
        assert_eq!(r.hit_at_1, 1.0);
        assert_eq!(r.hit_at_5, 1.0);
        assert!(r.pre_rotation < 1e-9 && r.pre_translation < 1e-9);
        assert_eq!(r.queries, objects.len() * 8 * 7);
        // a pool spanning every object of the split is still solved exactly
        let pooled = retrieval_metrics(&objects, Some(&objects), &RetrievalConfig::default()).unwrap();
        assert_eq!(pooled.mrr, 1.0);
    }
}

#[test]
fn random_embeddings_match_uniform_rank_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = 25;
    let objects: Vec<ObjectViews> = (0..40)
        .map(|i| ObjectViews {
            instance: i,
            embeddings: (0..v).map(|_| normalized(&random_poses(&mut rng, 4))).collect(),
            latents: (0..v)
                .map(|_| {
                    let l = crate::synthscene::SceneLatents::sample(&mut rng);
                    ViewRecord::from_latents(&l).unwrap()
                })
                .collect(),
        })
        .collect();
    assert_abs_diff_eq!(expected_random_mrr(25), 0.152_7, epsilon = 1e-4);
    let cfg = RetrievalConfig {
        include_source: false,
        ..RetrievalConfig::default()
    };
    let r = retrieval_metrics(&objects, None, &cfg).unwrap();
    assert!((r.mrr - expected_random_mrr(v - 1)).abs() < 0.02, "mrr {}", r.mrr);
    assert!(r.hit_at_1 <= r.hit_at_5 && r.hit_at_1 <= r.mrr);
    // the prediction stays correlated with its source, so keeping the source
    // in the pool pushes the target down
    let with_source = retrieval_metrics(&objects, None, &RetrievalConfig::default()).unwrap();
    assert!(with_source.mrr < r.mrr);
}

/// Quadratic scan over every candidate for every ordered pair.
fn naive_report(objects: &[ObjectViews]) -> RetrievalReport {
    let mut queries = Vec::new();
    for obj in objects {
        let v = obj.embeddings.len();
        for s in 0..v {
            for t in 0..v {
                if s == t {
                    continue;
                }
                let g = relative_transform(&obj.latents[s].transform(), &obj.latents[t].transform());
                let pred = predict_embedding(&obj.embeddings[s], &g).unwrap();
                let dist = |k: usize| {
                    pred.iter()
                        .zip(&obj.embeddings[k])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                };
                let mut rank = 1;
                let mut best = 0;
                for k in 0..v {
                    if k != t && dist(k) <= dist(t) {
                        rank += 1;
                    }
                    if dist(k) < dist(best) {
                        best = k;
                    }
                }
                queries.push(Query {
                    rank,
                    d_rotation: quaternion_distance(obj.latents[best].quaternion, obj.latents[t].quaternion),
                    d_translation: translation_distance(obj.latents[best].translation, obj.latents[t].translation),
                });
            }
        }
    }
    summarize(&queries)
}

#[test]
fn retrieval_equals_naive_scan() {
    let ds = mini_dataset(10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // half-informative embeddings so ranks spread out
    let objects: Vec<ObjectViews> = analytic_objects(&ds, Split::Train, 2)
        .into_iter()
        .take(8)
        .map(|mut o| {
            for e in &mut o.embeddings {
                for x in e.iter_mut() {
                    *x += rng.gen_range(-0.3..0.3);
                }
            }
            o
        })
        .collect();
    assert!(objects.iter().map(|o| o.embeddings.len()).sum::<usize>() <= 100);
    let fast = retrieval_metrics(&objects, None, &RetrievalConfig::default()).unwrap();
    let naive = naive_report(&objects);
    assert_eq!(fast.mrr, naive.mrr);
    assert_eq!(fast.hit_at_1, naive.hit_at_1);
    assert_eq!(fast.hit_at_5, naive.hit_at_5);
    assert_eq!(fast.pre_rotation, naive.pre_rotation);
    assert_eq!(fast.pre_translation, naive.pre_translation);
    assert!(fast.mrr < 1.0 && fast.mrr > 0.2);
}

#[test]
fn summary_of_known_ranks() {
    let q = |rank| Query {
        rank,
        d_rotation: 0.0,
        d_translation: 0.0,
    };
    let r = summarize(&[q(1), q(2), q(4)]);
    assert_abs_diff_eq!(r.mrr, (1.0 + 0.5 + 0.25) / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(r.hit_at_1, 1.0 / 3.0, epsilon = 1e-15);
    assert_eq!(r.hit_at_5, 1.0);
}

#[test]
fn collapsed_embeddings_do_not_score() {
    let ds = mini_dataset(5);
    let mut objects = analytic_objects(&ds, Split::Train, 1);
    for o in &mut objects {
        let first = o.embeddings[0].clone();
        o.embeddings.iter_mut().for_each(|e| *e = first.clone());
    }
    let r = retrieval_metrics(&objects, None, &RetrievalConfig::default()).unwrap();
    assert_eq!(r.hit_at_1, 0.0);
    assert_abs_diff_eq!(r.mrr, 0.2, epsilon = 1e-12);
}

#[test]
fn retrieval_samples_pairs_when_too_many() {
    let ds = mini_dataset(6);
    let objects = analytic_objects(&ds, Split::Val, 1);
    let cfg = RetrievalConfig {
        max_pairs_per_instance: 7,
        ..RetrievalConfig::default()
    };
    let r = retrieval_metrics(&objects, None, &cfg).unwrap();
    assert_eq!(r.queries, objects.len() * 7);
    assert_eq!(r, retrieval_metrics(&objects, None, &cfg).unwrap());
}

#[test]
fn single_view_objects_are_skipped() {
    let ds = mini_dataset(4);
    let mut objects = analytic_objects(&ds, Split::Train, 1);
    objects[0].embeddings.truncate(1);
    objects[0].latents.truncate(1);
    let r = retrieval_metrics(&objects, None, &RetrievalConfig::default()).unwrap();
    assert_eq!(r.skipped_instances, 1);
    assert_eq!(r.instances, objects.len() - 1);
}

#[test]
fn demo_with_analytic_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_transform(&mut rng);
    let sweep = sweep_transforms(&base, [0.0, 0.0, 1.0], 5.0, 90.0).unwrap();
    assert_eq!(sweep.len(), 19);
    let emb: Vec<Vec<f64>> = sweep.iter().map(|g| analytic_embedding(g, 3)).collect();
    let inv = demo_from_embeddings(&emb, &sweep, 5.0, DemoMode::Inverse).unwrap();
    assert!(inv.rows.iter().all(|r| r.nn_view == 0));
    assert_eq!(inv.success_rate, 1.0);
    let fwd = demo_from_embeddings(&emb, &sweep, 5.0, DemoMode::Forward).unwrap();
    assert!(fwd.rows.iter().all(|r| r.nn_view == r.step));
    assert_eq!(fwd.rows[0].nn_view, 0);
}

#[test]
fn demo_forward_identity_returns_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sweep = sweep_transforms(&RigidTransform::identity(), [1.0, 0.0, 0.0], 10.0, 30.0).unwrap();
    let emb: Vec<Vec<f64>> = (0..sweep.len()).map(|_| normalized(&random_poses(&mut rng, 2))).collect();
    let fwd = demo_from_embeddings(&emb, &sweep, 10.0, DemoMode::Forward).unwrap();
    assert_eq!(fwd.rows[0].nn_view, 0);
}

#[test]
fn probe_heads_fit_learnable_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for _ in 0..n {
            let x: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            inputs.extend(x);
            labels.push((x[0] > 0.0) as usize + 2 * (x[1] > 0.0) as usize);
            values.extend([(x[0] * x[1]) as f64, (x[2] - x[3]) as f64]);
        }
        (inputs, labels, values)
    };
    let (xt, lt, vt) = make(&mut rng, 512);
    let (xv, lv, vv) = make(&mut rng, 256);
    let cls = |x: Vec<f32>, l: Vec<usize>| ProbeData {
        inputs: x,
        dim: 4,
        targets: ProbeTargets::Labels { labels: l, classes: 4 },
    };
    let mut cfg = ProbeConfig::new(ProbeTask::Classification, FeatureSource::Representation);
    cfg.epochs = 300;
    cfg.batch_size = 64;
    let r = train_probe(&cls(xt.clone(), lt), &cls(xv.clone(), lv), &cfg).unwrap();
    assert!(r.val > 0.9, "top1 {}", r.val);
    assert_eq!(r.metric, "top1");

    let reg = |x: Vec<f32>, v: Vec<f64>| ProbeData {
        inputs: x,
        dim: 4,
        targets: ProbeTargets::Values { values: v, dim: 2 },
    };
    let mut cfg = ProbeConfig::new(ProbeTask::Rotation, FeatureSource::Representation);
    cfg.hidden = vec![64, 64];
    cfg.epochs = 60;
    cfg.batch_size = 64;
    let r = train_probe(&reg(xt, vt), &reg(xv, vv), &cfg).unwrap();
    assert!(r.val > 0.9, "r2 {}", r.val);
}

#[test]
fn probe_rejects_mismatched_data() {
    let good = ProbeData {
        inputs: vec![0.0; 8],
        dim: 2,
        targets: ProbeTargets::Values {
            values: vec![0.0, 1.0, 2.0, 3.0],
            dim: 1,
        },
    };
    let bad = ProbeData {
        inputs: vec![0.0; 7],
        ..good.clone()
    };
    let cfg = ProbeConfig::new(ProbeTask::Colour, FeatureSource::Representation);
    assert!(train_probe(&bad, &good, &cfg).is_err());
    let wide = ProbeData {
        inputs: vec![0.0; 12],
        dim: 3,
        ..good.clone()
    };
    assert!(train_probe(&good, &wide, &cfg).is_err());
}

#[test]
fn probe_data_layout() {
    use crate::capsnet::{init_params, EncoderConfig, ModelConfig};
    let ds = mini_dataset(4);
    let model = ModelConfig {
        encoder: EncoderConfig {
            resolution: 8,
            channels: vec![3, 4],
            strides: vec![2, 2],
            kernel: 3,
            norm_groups: 2,
        },
        primary_types: 2,
        capsules: 3,
        pose_bias: true,
    };
    let params = init_params::<f32>(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let feats = ViewFeatures::extract(&params, &model, &ds, 7).unwrap();
    assert_eq!(feats.len(), ds.manifest.num_instances() * 4);
    assert_eq!(feats.embedding(3).len(), feats.dim(FeatureSource::Embedding));
    let batched = ViewFeatures::extract(&params, &model, &ds, 1000).unwrap();
    assert_eq!(feats.representation, batched.representation);

    let cls = build_probe_data(&feats, &ds, Split::Train, &ProbeConfig::new(ProbeTask::Classification, FeatureSource::Embedding)).unwrap();
    assert_eq!(cls.len(), ds.manifest.instances(Split::Train).len() * 4);
    assert_eq!(cls.dim, 3 * 17);
    let mut cfg = ProbeConfig::new(ProbeTask::TranslationBase, FeatureSource::Representation);
    cfg.pairs_per_instance = 3;
    let tr = build_probe_data(&feats, &ds, Split::Val, &cfg).unwrap();
    assert_eq!(tr.len(), ds.manifest.instances(Split::Val).len() * 3);
    assert_eq!(tr.dim, 8);
    assert_eq!(tr, build_probe_data(&feats, &ds, Split::Val, &cfg).unwrap());
}

#[test]
fn task_and_source_names_round_trip() {
    for t in ProbeTask::ALL {
        assert_eq!(t.to_string().parse::<ProbeTask>().unwrap(), t);
    }
    assert_eq!("repr".parse::<FeatureSource>().unwrap(), FeatureSource::Representation);
    assert_eq!("embed".parse::<FeatureSource>().unwrap(), FeatureSource::Embedding);
    assert!("x".parse::<DemoMode>().is_err());
    assert_eq!(ProbeTask::Rotation.default_hidden(), vec![1024, 1024]);
    assert!(ProbeTask::Colour.default_hidden().is_empty());
}
