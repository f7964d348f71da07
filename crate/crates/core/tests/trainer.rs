use fghcl::fgh::OptimizerKind;
use fghcl::model::{self, init_params, masked_cross_entropy, unique_labels, ModelConfig, FC_BIAS, FC_WEIGHT};
use fghcl::prototypes::proto_loss;
use fghcl::stream::{make_clear, make_si_blurry, make_synthetic_blobs};
use fghcl::trainer::{evaluate, train_stream, Learner, RunRecord};
use fghcl::*;

fn blob_setup(seed: u64) -> (Dataset, TaskStream, ModelParams) {
    let ds = make_synthetic_blobs(6, 4, 30, 5.0, 0.5, &mut Rng::new(seed)).unwrap();
    let spec = StreamSpec {
        mode: StreamMode::Clear { initial_classes: 2, increment: 2 },
        num_tasks: 3,
        batch_size: 10,
        seed,
    };
    let stream = make_clear(&ds, &spec, &mut Rng::new(seed)).unwrap();
    let cfg = ModelConfig {
        input_dim: 4,
        feature_dim: 4,
        num_classes: 6,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let params = init_params(&cfg, &mut Rng::new(seed + 100)).unwrap();
    (ds, stream, params)
}

fn mlp_params(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        input_dim: 4,
        feature_dim: 5,
        num_classes: 6,
        extractor: Extractor::TrainableMlp { hidden_dim: 5 },
        extractor_trainable: true,
    };
    init_params(&cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn one_batch_stream_is_one_optimizer_step() {
    let (ds, stream, params) = blob_setup(1);
    let one = TaskStream {
        batches: vec![stream.batches[0].clone()],
        ..stream.clone()
    };
    let cfg = MethodConfig {
        optimizer: OptimizerKind::Sgd { lr: 0.1 },
        ..MethodConfig::new(Method::FineTune, 0.1)
    };
    let rec = train_stream(&one, &ds, params.clone(), &cfg, Rng::new(0), 0).unwrap();

    let b = &stream.batches[0];
    let x = ds.train_features(&b.sample_ids);
    let cache = model::forward(&params, &x).unwrap();
    let (_, d) = masked_cross_entropy(&cache.logits, &b.labels, &unique_labels(&b.labels)).unwrap();
    let g = model::backward(&params, &cache, &d).unwrap();
    let mut expect = params.clone();
    for (name, grad) in g.iter() {
        let p = expect.get_mut(name).unwrap();
        for (t, gi) in p.data_mut().iter_mut().zip(grad.data()) {
            *t -= 0.1 * gi;
        }
    }
    assert_eq!(rec.final_params.unwrap(), expect);
}

#[test]
fn proto_fgh_with_zero_gamma_is_bitwise_proto() {
    for seed in 0..3 {
        let (ds, stream, params) = blob_setup(seed);
        let proto = MethodConfig::new(Method::Proto, 0.01);
        let mut pf = MethodConfig::new(Method::ProtoFgh, 0.01);
        pf.fgh.gamma = 0.0;
        let a = train_stream(&stream, &ds, params.clone(), &proto, Rng::new(0), seed).unwrap();
        let b = train_stream(&stream, &ds, params.clone(), &pf, Rng::new(0), seed).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.batches, b.batches);

        let mut off = MethodConfig::new(Method::ProtoFgh, 0.01);
        off.fgh.enabled = false;
        let c = train_stream(&stream, &ds, params, &off, Rng::new(0), seed).unwrap();
        assert_eq!(a.final_params, c.final_params);
    }
}

/// The whole LinearProbe loop written out with plain vectors.
fn scripted_linear_probe(ds: &Dataset, stream: &TaskStream, params: &ModelParams, lr: f64) -> f64 {
    let (l, c) = params.fc_weight().shape();
    let mut w = params.fc_weight().data().to_vec();
    let mut bias = params.fc_bias().data().to_vec();
    let (mut mw, mut vw) = (vec![0.0; l * c], vec![0.0; l * c]);
    let (mut mb, mut vb) = (vec![0.0; c], vec![0.0; c]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let logits_of = |w: &[f64], bias: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|j| bias[j] + (0..l).map(|k| x[k] * w[k * c + j]).sum::<f64>())
            .collect()
    };
    let mut last_eval = Vec::new();
    for (step, batch) in stream.batches.iter().enumerate() {
        let mut present: Vec<usize> = batch.labels.clone();
        present.sort();
        present.dedup();
        let n = batch.labels.len() as f64;
        let mut gw = vec![0.0; l * c];
        let mut gb = vec![0.0; c];
        for (&id, &y) in batch.sample_ids.iter().zip(&batch.labels) {
            let x = &ds.train[id].features;
            let z = logits_of(&w, &bias, x);
            let max = present.iter().map(|&j| z[j]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = present.iter().map(|&j| (z[j] - max).exp()).sum();
            for &j in &present {
                let p = (z[j] - max).exp() / denom;
                let d = (p - if j == y { 1.0 } else { 0.0 }) / n;
                gb[j] += d;
                for k in 0..l {
                    gw[k * c + j] += x[k] * d;
                }
            }
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, g) in gw.iter().enumerate() {
            mw[i] = b1 * mw[i] + (1.0 - b1) * g;
            vw[i] = b2 * vw[i] + (1.0 - b2) * g * g;
            w[i] -= lr * (mw[i] / c1) / ((vw[i] / c2).sqrt() + eps);
        }
        for (j, g) in gb.iter().enumerate() {
            mb[j] = b1 * mb[j] + (1.0 - b1) * g;
            vb[j] = b2 * vb[j] + (1.0 - b2) * g * g;
            bias[j] -= lr * (mb[j] / c1) / ((vb[j] / c2).sqrt() + eps);
        }
        let end_of_task = stream
            .batches
            .get(step + 1)
            .is_none_or(|nb| nb.task_index != batch.task_index);
        if end_of_task {
            last_eval = stream.task_classes[..=batch.task_index]
                .iter()
                .map(|classes| {
                    let tests: Vec<_> = ds.test.iter().filter(|s| classes.contains(&s.label)).collect();
                    let correct = tests
                        .iter()
                        .filter(|s| {
                            let z = logits_of(&w, &bias, &s.features);
                            let mut best = 0;
                            for j in 1..c {
                                if z[j] > z[best] {
                                    best = j;
                                }
                            }
                            best == s.label
                        })
                        .count();
                    correct as f64 / tests.len() as f64
                })
                .collect();
        }
    }
    last_eval.iter().sum::<f64>() / last_eval.len() as f64
}

#[test]
fn linear_probe_matches_scripted_rerun() {
    let ds = make_synthetic_blobs(6, 4, 30, 5.0, 0.5, &mut Rng::new(7)).unwrap();
    let spec = StreamSpec {
        mode: StreamMode::Clear { initial_classes: 2, increment: 2 },
        num_tasks: 3,
        batch_size: 10,
        seed: 7,
    };
    let stream = make_clear(&ds, &spec, &mut Rng::new(7)).unwrap();
    let cfg = ModelConfig {
        input_dim: 4,
        feature_dim: 4,
        num_classes: 6,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let params = init_params(&cfg, &mut Rng::new(7)).unwrap();
    let rec = train_stream(&stream, &ds, params.clone(), &MethodConfig::new(Method::LinearProbe, 0.01), Rng::new(0), 7)
        .unwrap();
    let scripted = scripted_linear_probe(&ds, &stream, &params, 0.01);
    let ours = rec.summary.final_accuracy.unwrap();
    assert!((ours - scripted).abs() <= 1e-12, "{ours} vs {scripted}");
}

#[test]
fn linear_probe_freezes_the_extractor() {
    let (ds, stream, _) = blob_setup(2);
    let params = mlp_params(2);
    let rec = train_stream(&stream, &ds, params.clone(), &MethodConfig::new(Method::LinearProbe, 0.01), Rng::new(0), 0)
        .unwrap();
    let after = rec.final_params.unwrap();
    assert_eq!(after.get("mlp.weight"), params.get("mlp.weight"));
    assert_eq!(after.get("mlp.bias"), params.get("mlp.bias"));
    assert_ne!(after.fc_weight(), params.fc_weight());

    let ft = train_stream(&stream, &ds, params.clone(), &MethodConfig::new(Method::FineTune, 0.01), Rng::new(0), 0)
        .unwrap();
    assert_ne!(ft.final_params.unwrap().get("mlp.weight"), params.get("mlp.weight"));
}

#[test]
fn training_never_reads_task_indices() {
    let (ds, stream, params) = blob_setup(3);
    let mut scrambled = stream.clone();
    let mut rng = Rng::new(99);
    for b in &mut scrambled.batches {
        b.task_index = rng.below(1000);
    }
    for method in Method::ALL {
        let mut a = Learner::new(params.clone(), MethodConfig::new(method, 0.01), Rng::new(4)).unwrap();
        let mut b = Learner::new(params.clone(), MethodConfig::new(method, 0.01), Rng::new(4)).unwrap();
        for (x, y) in stream.batches.iter().zip(&scrambled.batches) {
            a.observe(&ds.train_features(&x.sample_ids), &x.labels).unwrap();
            b.observe(&ds.train_features(&y.sample_ids), &y.labels).unwrap();
        }
        assert_eq!(a.params(), b.params(), "{method}");
    }
}

#[test]
fn memory_free_methods_keep_only_means_counts_and_fgh_state() {
    let (ds, stream, _) = blob_setup(4);
    let params = mlp_params(4);
    let baseline = {
        let mut l = Learner::new(params.clone(), MethodConfig::new(Method::FineTune, 0.01), Rng::new(0)).unwrap();
        for b in &stream.batches {
            l.observe(&ds.train_features(&b.sample_ids), &b.labels).unwrap();
        }
        l.state_audit()
    };
    let (c, f) = (params.num_classes(), params.feature_dim());
    for method in [Method::Proto, Method::Fgh, Method::ProtoFgh] {
        let mut l = Learner::new(params.clone(), MethodConfig::new(method, 0.01), Rng::new(0)).unwrap();
        for b in &stream.batches {
            l.observe(&ds.train_features(&b.sample_ids), &b.labels).unwrap();
        }
        let audit = l.state_audit();
        assert_eq!(audit.replay_samples, 0);
        assert_eq!(audit.model, baseline.model);
        assert_eq!(audit.optimizer, baseline.optimizer);
        let protos = if method.uses_prototypes() { c * f + c } else { 0 };
        assert_eq!(audit.prototypes, protos, "{method}");
        // class-wise: alpha (c), cached previous rows, Adam m and v rows, each c x (f + 1)
        let fgh = if method.uses_fgh() { c + 3 * c * (f + 1) } else { 0 };
        assert_eq!(audit.fgh, fgh, "{method}");
    }
    let mut er = Learner::new(params, MethodConfig::new(Method::Er, 0.01), Rng::new(0)).unwrap();
    for b in &stream.batches {
        er.observe(&ds.train_features(&b.sample_ids), &b.labels).unwrap();
    }
    assert_eq!(er.state_audit().replay_samples, stream.streamed_ids().len().min(1000));
}

#[test]
fn gradient_of_summed_loss_is_sum_of_gradients() {
    let (ds, stream, params) = blob_setup(5);
    let mut learner = Learner::new(params, MethodConfig::new(Method::Proto, 0.05), Rng::new(0)).unwrap();
    for b in &stream.batches {
        let x = ds.train_features(&b.sample_ids);
        let bg = learner.batch_gradients(&x, &b.labels).unwrap();
        let proto = bg.proto.as_ref().unwrap();
        for (name, total) in bg.total.iter() {
            let base = bg.base.get(name).unwrap();
            let p = proto.get(name).unwrap();
            let residual = total
                .data()
                .iter()
                .zip(base.data())
                .zip(p.data())
                .map(|((t, a), b)| (t - a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(residual <= 1e-12, "{name}: {residual}");
        }

        let bank = learner.bank().unwrap();
        let pl = proto_loss(
            bank,
            learner.params().fc_weight(),
            learner.params().fc_bias(),
            &bank.old_classes(),
            ProtoNorm::MeanOverSeen,
        )
        .unwrap();
        assert_eq!(proto.get(FC_WEIGHT).unwrap(), &pl.grad_w);
        assert_eq!(proto.get(FC_BIAS).unwrap(), &pl.grad_b);
        learner.observe(&x, &b.labels).unwrap();
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let c = 20;
    let ds = make_synthetic_blobs(c, 8, 250, 3.0, 1.0, &mut Rng::new(11)).unwrap();
    let cfg = ModelConfig {
        input_dim: 8,
        feature_dim: 8,
        num_classes: c,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let all: model::ClassSet = (0..c).collect();
    let n = ds.test.len() as f64;
    let mut accs = Vec::new();
    for seed in 0..20 {
        let params = init_params(&cfg, &mut Rng::new(seed)).unwrap();
        accs.push(evaluate(&params, &ds, std::slice::from_ref(&all), 0).unwrap()[0].unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let band = 5.0 / n.sqrt();
    assert!((mean - 1.0 / c as f64).abs() <= band, "mean {mean}");
}

#[test]
fn centroid_weights_are_perfect_on_noise_free_blobs() {
    let c = 5;
    let ds = make_synthetic_blobs(c, 6, 20, 4.0, 0.0, &mut Rng::new(3)).unwrap();
    let cfg = ModelConfig {
        input_dim: 6,
        feature_dim: 6,
        num_classes: c,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let mut params = init_params(&cfg, &mut Rng::new(0)).unwrap();
    let mut w = Matrix::zeros(6, c);
    let mut b = Matrix::zeros(1, c);
    for j in 0..c {
        let mu = &ds.train.iter().find(|s| s.label == j).unwrap().features;
        for k in 0..6 {
            w.set(k, j, mu[k]);
        }
        b.set(0, j, -0.5 * mu.iter().map(|v| v * v).sum::<f64>());
    }
    *params.get_mut(FC_WEIGHT).unwrap() = w;
    *params.get_mut(FC_BIAS).unwrap() = b;
    let tasks: Vec<model::ClassSet> = vec![[0, 1].into(), [2, 3, 4].into()];
    let accs = evaluate(&params, &ds, &tasks, 1).unwrap();
    assert_eq!(accs, vec![Some(1.0), Some(1.0)]);
}

#[test]
fn blurry_evaluation_uses_home_tasks() {
    let ds = make_synthetic_blobs(10, 4, 30, 5.0, 0.5, &mut Rng::new(8)).unwrap();
    let spec = StreamSpec {
        mode: StreamMode::SiBlurry { disjoint_class_pct: 20.0, blurry_sample_pct: 50.0 },
        num_tasks: 5,
        batch_size: 10,
        seed: 8,
    };
    let stream = make_si_blurry(&ds, &spec, &mut Rng::new(8)).unwrap();
    let cfg = ModelConfig {
        input_dim: 4,
        feature_dim: 4,
        num_classes: 10,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let params = init_params(&cfg, &mut Rng::new(8)).unwrap();
    let rec = train_stream(&stream, &ds, params, &MethodConfig::new(Method::ProtoFgh, 0.01), Rng::new(0), 8).unwrap();
    let homes = stream.home_task();
    for (k, classes) in stream.task_classes.iter().enumerate() {
        assert!(classes.iter().all(|&j| homes[j] == Some(k)));
    }
    assert_eq!(rec.evals.len(), 5);
    assert!(rec.accuracy.is_row_complete(4));
}

#[test]
fn replay_buffer_stays_within_budget() {
    let ds = make_synthetic_blobs(10, 4, 300, 5.0, 0.5, &mut Rng::new(9)).unwrap();
    let spec = StreamSpec {
        mode: StreamMode::Clear { initial_classes: 2, increment: 2 },
        num_tasks: 5,
        batch_size: 100,
        seed: 9,
    };
    let stream = make_clear(&ds, &spec, &mut Rng::new(9)).unwrap();
    assert!(stream.streamed_ids().len() > 1000);
    let cfg = ModelConfig {
        input_dim: 4,
        feature_dim: 4,
        num_classes: 10,
        extractor: Extractor::Identity,
        extractor_trainable: false,
    };
    let params = init_params(&cfg, &mut Rng::new(9)).unwrap();
    let mut learner = Learner::new(params, MethodConfig::new(Method::Er, 0.01), Rng::new(1)).unwrap();
    for b in &stream.batches {
        learner.observe(&ds.train_features(&b.sample_ids), &b.labels).unwrap();
        assert!(learner.replay().unwrap().len() <= 1000);
    }
    assert_eq!(learner.replay().unwrap().len(), 1000);
    assert_eq!(learner.replay().unwrap().seen() as usize, stream.streamed_ids().len());
}

#[test]
fn record_file_round_trip() {
    let (ds, stream, params) = blob_setup(6);
    let rec = train_stream(&stream, &ds, params, &MethodConfig::new(Method::ErLinearProbe, 0.01), Rng::new(3), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    rec.write_jsonl(&path).unwrap();
    let back = RunRecord::read_jsonl(&path).unwrap();
    assert_eq!(back.header, rec.header);
    assert_eq!(back.summary, rec.summary);
    assert_eq!(back.grad_norm_log(), rec.grad_norm_log());
}
