use super::*;
use crate::net::NetConfig;
use crate::scene::{generate_dataset, Domain, GridSpec};
use crate::tensor::ConvGrads;
use proptest::prelude::*;

fn cfg(mode: TrainMode, batch_size: usize) -> TrainConfig {
    TrainConfig {
        mode,
        batch_size,
        epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn small_net() -> MfmNet {
    MfmNet::new(NetConfig::five_block([2, 4, 4, 4, 4], 16)).unwrap()
}

fn sets() -> (Dataset, Dataset) {
    let grid = GridSpec::default();
    (
        generate_dataset(Domain::Syn, 24, &grid, 1).unwrap(),
        generate_dataset(Domain::Real, 10, &grid, 2).unwrap(),
    )
}

#[test]
fn batch_of_256_is_64_real_192_synthetic() {
    let plan = make_mixed_batches(1000, 300, &cfg(TrainMode::Joint, 256), 0).unwrap();
    assert_eq!(plan.len(), 1000 / 192);
    for b in &plan {
        assert_eq!((b.real.len(), b.syn.len()), (64, 192));
    }
}

#[test]
fn batch_of_8_is_2_real_6_synthetic() {
    for epoch in 0..3 {
        let plan = make_mixed_batches(30, 3, &cfg(TrainMode::Joint, 8), epoch).unwrap();
        assert_eq!(plan.len(), 5);
        for b in &plan {
            assert_eq!((b.real.len(), b.syn.len()), (2, 6));
            assert!(b.real.iter().all(|&i| i < 3));
        }
        let mut syn: Vec<usize> = plan.iter().flat_map(|b| b.syn.clone()).collect();
        syn.sort_unstable();
        assert_eq!(syn, (0..30).collect::<Vec<_>>());
    }
}

#[test]
fn single_domain_modes() {
    let plan = make_mixed_batches(20, 0, &cfg(TrainMode::SynOnly, 8), 0).unwrap();
    assert_eq!(plan.len(), 2);
    assert!(plan.iter().all(|b| b.real.is_empty() && b.syn.len() == 8));
    let plan = make_mixed_batches(0, 17, &cfg(TrainMode::RealOnly, 4), 0).unwrap();
    assert_eq!(plan.len(), 4);
    assert!(plan.iter().all(|b| b.syn.is_empty() && b.real.len() == 4));
}

#[test]
fn empty_required_pool_is_a_config_error() {
    for (mode, s, r) in [
        (TrainMode::Joint, 10, 0),
        (TrainMode::SynOnly, 0, 10),
        (TrainMode::RealOnly, 10, 0),
    ] {
        assert!(matches!(
            make_mixed_batches(s, r, &cfg(mode, 8), 0),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn shuffles_depend_on_seed_and_epoch_only() {
    let c = cfg(TrainMode::Joint, 8);
    let a = make_mixed_batches(40, 9, &c, 3).unwrap();
    assert_eq!(a, make_mixed_batches(40, 9, &c, 3).unwrap());
    assert_ne!(a, make_mixed_batches(40, 9, &c, 4).unwrap());
    let other = TrainConfig { seed: 12, ..c };
    assert_ne!(a, make_mixed_batches(40, 9, &other, 3).unwrap());
}

proptest! {
    #[test]
    fn composition_is_exact(b in 4usize..64, rf in 0.0f64..0.95, n_syn in 64usize..400, n_real in 1usize..50, epoch in 0usize..5) {
        let c = TrainConfig { real_fraction: rf, ..cfg(TrainMode::Joint, b) };
        let r = (rf * b as f64).floor() as usize;
        prop_assume!(r < b);
        let plan = make_mixed_batches(n_syn, n_real, &c, epoch).unwrap();
        prop_assert_eq!(plan.len(), n_syn / (b - r));
        for p in &plan {
            prop_assert_eq!(p.real.len(), r);
            prop_assert_eq!(p.syn.len(), b - r);
        }
    }
}

#[test]
fn config_text_round_trip() {
    let mut c = TrainConfig::default();
    c.set("lr_decay_epoch", "60").unwrap();
    c.set("mode", "real").unwrap();
    c.set("lambda3", "0.5").unwrap();
    let back = TrainConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(c.to_text().lines().count(), CONFIG_KEYS.len());
}

#[test]
fn config_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.epochs, c.batch_size, c.real_fraction), (1e-4, 80, 256, 0.25));
    assert_eq!(c.real_per_batch(), 64);
    assert_eq!(c.lr_decay_epoch, None);
    assert_eq!(c.adam(79).lr, 1e-4);
    let decayed = TrainConfig {
        lr_decay_epoch: Some(60),
        ..c
    };
    assert!((decayed.adam(60).lr - 1e-5).abs() < 1e-18);
}

#[test]
fn config_errors() {
    assert!(matches!(TrainConfig::from_text("speed = 3"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_text("lr"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_text("epochs = many"), Err(Error::Config(_))));
    let c = TrainConfig::from_text("# comment\n\nbatch_size = 3\n").unwrap();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = TrainConfig::from_text("real_fraction = 1.0").unwrap();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let (syn, real) = sets();
    let net = small_net();
    let init = net.init_params::<f32>(5);
    let mut c = cfg(TrainMode::Joint, 8);
    c.weights.lambda1 = 0.0;
    c.weights.lambda2 = 0.0;
    c.weights.lambda3 = 0.0;
    let out = train(
        &net,
        init.clone(),
        TrainData {
            syn: Some(&syn),
            real: Some(&real),
        },
        &c,
        |_| {},
    )
    .unwrap();
    assert!(out.params.bit_identical(&init));
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let (syn, real) = sets();
    let net = small_net();
    let c = cfg(TrainMode::Joint, 8);
    let data = TrainData {
        syn: Some(&syn),
        real: Some(&real),
    };
    let a = train(&net, net.init_params(5), data, &c, |_| {}).unwrap();
    let b = train(&net, net.init_params(5), data, &c, |_| {}).unwrap();
    assert!(a.params.bit_identical(&b.params));
    assert!(!a.params.bit_identical(&net.init_params(5)));
    assert_eq!(a.log.len(), 2);
    assert!(a.log.iter().all(|l| l.total.is_finite()));
}

#[test]
fn single_domain_modes_switch_terms_off() {
    let (syn, real) = sets();
    let net = small_net();
    let data = TrainData {
        syn: Some(&syn),
        real: Some(&real),
    };
    let s = train(&net, net.init_params(1), data, &cfg(TrainMode::SynOnly, 8), |_| {}).unwrap();
    assert!(s.log.iter().all(|l| l.loss2 == 0.0 && l.loss3 == 0.0 && l.loss1 > 0.0));
    let r = train(&net, net.init_params(1), data, &cfg(TrainMode::RealOnly, 4), |_| {}).unwrap();
    assert!(r.log.iter().all(|l| l.loss1 == 0.0 && l.loss3 == 0.0));
}

#[test]
fn mode_and_label_mismatches() {
    let (syn, real) = sets();
    let net = small_net();
    let joint = cfg(TrainMode::Joint, 8);
    let missing = train(
        &net,
        net.init_params(1),
        TrainData {
            syn: Some(&syn),
            real: None,
        },
        &joint,
        |_| {},
    );
    assert!(matches!(missing, Err(Error::Config(_))));
    let syn_only = cfg(TrainMode::SynOnly, 8);
    let ok = train(
        &net,
        net.init_params(1),
        TrainData {
            syn: Some(&syn),
            real: None,
        },
        &syn_only,
        |_| {},
    );
    assert!(ok.is_ok());
    let swapped = train(
        &net,
        net.init_params(1),
        TrainData {
            syn: Some(&real),
            real: Some(&syn),
        },
        &joint,
        |_| {},
    );
    assert!(matches!(swapped, Err(Error::Data(_))));
}

#[test]
fn non_finite_values_abort_with_position() {
    let (syn, _) = sets();
    let net = small_net();
    let mut p = net.init_params::<f32>(1);
    p.tensors_mut()[0].data_mut()[0] = f32::NAN;
    let err = train(
        &net,
        p,
        TrainData {
            syn: Some(&syn),
            real: None,
        },
        &cfg(TrainMode::SynOnly, 8),
        |_| {},
    )
    .unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("epoch 0 batch 0"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn split_of_2000_is_1500_500() {
    let s = finetune_split(2000);
    assert_eq!((s.train.len(), s.test.len()), (1500, 500));
    let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..2000).collect::<Vec<_>>());
    assert_eq!(s, finetune_split(2000));
    assert_eq!(finetune_split(7).train.len(), 5);
}

#[test]
fn finetune_contract() {
    let net = small_net();
    let prime = generate_dataset(Domain::Realprime, 16, &GridSpec::default(), 3).unwrap();
    let init = net.init_params::<f32>(2);
    let zero = TrainConfig {
        epochs: 0,
        ..cfg(TrainMode::Joint, 4)
    };
    let (out, split) = finetune(&net, init.clone(), &prime, None, &zero, |_| {}).unwrap();
    assert!(out.params.bit_identical(&init));
    assert_eq!(split.train.len(), 12);

    let (_, real) = sets();
    assert!(matches!(
        finetune(&net, init.clone(), &real, None, &cfg(TrainMode::Finetune, 4), |_| {}),
        Err(Error::Data(_))
    ));
    let (out, _) = finetune(&net, init.clone(), &prime, None, &cfg(TrainMode::Finetune, 4), |_| {}).unwrap();
    assert!(!out.params.bit_identical(&init));
    assert!(out.log.iter().all(|l| l.loss1 > 0.0 && l.loss2 == 0.0));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = gradcheck_suite(3);
    assert!(a.passed, "{}", a.to_json());
    assert!(a.components.iter().all(|c| c.points >= 10));
    for name in [
        "conv2d", "maxpool2", "mfm", "linear", "loss1", "loss2", "loss3", "combined",
    ] {
        assert!(a.components.iter().any(|c| c.name == name), "{name}");
    }
    assert_eq!(a, gradcheck_suite(3));
}

fn broken_conv_backward(
    cache: &crate::tensor::ConvCache<f64>,
    weight: &Tensor<f64>,
    d_out: &Tensor<f64>,
    need_input: bool,
) -> Result<ConvGrads<f64>> {
    let mut g = crate::tensor::conv2d_backward(cache, weight, d_out, need_input)?;
    g.weight = g.weight.map(|v| v * 1.01);
    Ok(g)
}

#[test]
fn corrupted_conv_backward_is_reported() {
    let report = gradcheck_suite_with(
        3,
        &Kernels {
            conv_backward: broken_conv_backward,
        },
    );
    assert!(!report.passed);
    assert_eq!(report.failures(), vec!["conv2d"]);
}
