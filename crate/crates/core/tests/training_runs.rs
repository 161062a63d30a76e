use ads3d::adsnet::{AdsNet, AdsNetConfig};
use ads3d::eegio::ModelCheckpoint;
use ads3d::montage::MontageMap;
use ads3d::nn::{conv3d_output_dims, conv3d_valid, pool3d, pool_output_dims, PoolKind, Tensor};
use ads3d::optim::AdamWConfig;
use ads3d::rng::CounterRng;
use ads3d::synthgen::{default_paper_template, generate, SynthConfig};
use ads3d::training::*;
use proptest::prelude::*;

fn fixture(seed: u64) -> (Dataset, Vec<usize>) {
    let map = MontageMap::reduced_4x4();
    let cfg = SynthConfig {
        n_trials_per_class: 8,
        fs: 128.0,
        trial_s: 1.0,
        window_onset_s: 0.25,
        window_s: 0.5,
        effect_gain: 4.0,
        channel_names: map.names().to_vec(),
        seed,
        ..default_paper_template()
    };
    Dataset::prepare(&generate(&cfg).unwrap(), &AdsNetConfig::reduced(), &map).unwrap()
}

fn short(epochs: usize) -> TrainHyper {
    TrainHyper {
        epochs,
        batch_size: 8,
        adamw: AdamWConfig { lr: 3e-3, ..Default::default() },
        ..Default::default()
    }
}

fn param_bits(m: &AdsNet) -> Vec<u64> {
    m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn seeded_runs_are_bit_identical() {
    let (data, gather) = fixture(1);
    let cfg = AdsNetConfig::reduced();
    let a = cross_validate(&cfg, &data, &gather, 4, &short(3), 7, 1).unwrap();
    let b = cross_validate(&cfg, &data, &gather, 4, &short(3), 7, 2).unwrap();
    for (x, y) in a.folds.iter().zip(&b.folds) {
        assert_eq!(x.report, y.report);
        assert_eq!(param_bits(&x.model), param_bits(&y.model));
    }
    assert_eq!(a.mean_accuracy.to_bits(), b.mean_accuracy.to_bits());
    let c = cross_validate(&cfg, &data, &gather, 4, &short(3), 8, 1).unwrap();
    assert_ne!(param_bits(&a.folds[0].model), param_bits(&c.folds[0].model));
}

#[test]
fn restored_checkpoint_reproduces_best_loss() {
    let (data, gather) = fixture(2);
    let cfg = AdsNetConfig::reduced();
    let plan = make_folds(&data.labels, 4, 3).unwrap();
    let test = plan.test(0).to_vec();
    let run = train_one_fold(&cfg, &data, &gather, &plan.train(0), &test, &test, &short(6), 3, 0).unwrap();
    let report = &run.report;
    assert!(report.epochs.iter().all(|e| report.best_eval_loss() <= e.eval_loss));

    let bytes = run.model.to_checkpoint([]).encode().unwrap();
    let ckpt = ModelCheckpoint::decode(&bytes).unwrap();
    let restored = AdsNet::from_checkpoint(cfg, gather, &ckpt).unwrap();
    let again = evaluate(&restored, &data, &test, 40).unwrap();
    assert!(
        (again.loss - report.best_eval_loss()).abs() <= 1e-6,
        "{} vs {}",
        again.loss,
        report.best_eval_loss()
    );
}

#[test]
fn zero_learning_rate_keeps_initial_metrics() {
    let (data, gather) = fixture(3);
    let cfg = AdsNetConfig::reduced();
    let plan = make_folds(&data.labels, 4, 1).unwrap();
    let test = plan.test(1).to_vec();
    let mut hyper = short(3);
    hyper.adamw.lr = 0.0;
    let run = train_one_fold(&cfg, &data, &gather, &plan.train(1), &test, &test, &hyper, 1, 1).unwrap();
    for e in &run.report.epochs {
        assert_eq!(e.eval_loss.to_bits(), run.report.initial.loss.to_bits());
        assert_eq!(e.eval_accuracy, run.report.initial.accuracy);
    }
    assert_eq!(run.report.test, run.report.initial);
}

#[test]
fn evaluate_oracles() {
    let (data, gather) = fixture(4);
    let mut model = AdsNet::new(AdsNetConfig::reduced(), gather, 5).unwrap();
    assert!(evaluate(&model, &data, &[], 8).is_err());

    model.zero_head();
    let all: Vec<usize> = (0..data.len()).collect();
    let e = evaluate(&model, &data, &all, 7).unwrap();
    assert!((e.loss - 4f64.ln()).abs() < 1e-12);
    assert_eq!(e.accuracy, 0.25);
    assert_eq!(e.confusion.iter().map(|r| r[0]).sum::<usize>(), data.len());

    let bias = model.params_mut().iter_mut().find(|p| p.name == "head.b").unwrap();
    bias.value.data_mut()[2] = 1.0;
    let twos: Vec<usize> = all.iter().copied().filter(|&i| data.labels[i] == 2).collect();
    let e = evaluate(&model, &data, &twos, 3).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.confusion[2][2], twos.len());
}

#[test]
fn forward_shapes_follow_the_shape_chain() {
    let cfg = AdsNetConfig::reduced();
    let (data, gather) = fixture(5);
    let model = AdsNet::new(cfg.clone(), gather, 1).unwrap();
    let (x, _) = data.batch(&[0, 1, 2]);
    let fwd = model.forward(&x).unwrap();
    assert_eq!(fwd.shapes, cfg.shape_chain(3).unwrap());
}

fn tensor(dims: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(dims, 1.0, &mut CounterRng::new(seed, &[]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_dims_match_loop(
        d in 1usize..6, h in 1usize..6, w in 1usize..12,
        kd in 1usize..4, kh in 1usize..4, kw in 1usize..6,
        sw in 1usize..3, cout in 1usize..3,
    ) {
        let x = tensor(&[1, 2, d, h, w], 1);
        let weight = tensor(&[cout, 2, kd, kh, kw], 2);
        let predicted = conv3d_output_dims([d, h, w], [kd, kh, kw], [1, 1, sw]);
        match conv3d_valid(&x, &weight, &vec![0.0; cout], [1, 1, sw]) {
            Ok(y) => {
                let p = predicted.unwrap();
                prop_assert_eq!(y.dims(), &[1, cout, p[0], p[1], p[2]][..]);
                // brute-force output element (0, 0, 0) against the definition
                let mut acc = 0.0;
                for c in 0..2 { for a in 0..kd { for b in 0..kh { for e in 0..kw {
                    let xi = ((c * d + a) * h + b) * w + e;
                    let wi = ((c * kd + a) * kh + b) * kw + e;
                    acc += x.data()[xi] * weight.data()[wi];
                }}}}
                prop_assert!((y.data()[0] - acc).abs() < 1e-12);
            }
            Err(_) => prop_assert!(predicted.is_none()),
        }
    }

    #[test]
    fn pool_dims_match_loop(d in 1usize..4, h in 1usize..4, w in 1usize..20, k in 1usize..5) {
        let x = tensor(&[2, 1, d, h, w], 3);
        let predicted = pool_output_dims([d, h, w], [1, 1, k], [1, 1, k]);
        match pool3d(&x, PoolKind::Max, [1, 1, k], [1, 1, k]) {
            Ok((y, _)) => {
                let p = predicted.unwrap();
                prop_assert_eq!(p, [d, h, w / k]);
                prop_assert_eq!(y.dims(), &[2, 1, p[0], p[1], p[2]][..]);
                let first = x.data()[..k].iter().cloned().fold(f64::MIN, f64::max);
                prop_assert_eq!(y.data()[0], first);
            }
            Err(_) => prop_assert!(predicted.is_none()),
        }
    }
}
