use eyedeg::net::{MfmNet, NetConfig};
use eyedeg::scene::{generate_dataset, Domain, GridSpec};
use eyedeg::trainer::{train, TrainConfig, TrainData, TrainMode};

#[test]
fn desk_syn_only_loss_falls_every_epoch() {
    let grid = GridSpec {
        stratified: false,
        openness: None,
    };
    let syn = generate_dataset(Domain::Syn, 512, &grid, 31).unwrap();
    let net = MfmNet::new(NetConfig::desk()).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::SynOnly,
        epochs: 5,
        ..TrainConfig::default()
    };
    let data = TrainData {
        syn: Some(&syn),
        real: None,
    };
    let out = train(&net, net.init_params(cfg.seed), data, &cfg, |_| {}).unwrap();
    let loss1: Vec<f64> = out.log.iter().map(|l| l.loss1).collect();
    let total: Vec<f64> = out.log.iter().map(|l| l.total).collect();
    assert_eq!(loss1.len(), 5);
    assert!(loss1.windows(2).all(|w| w[1] < w[0]), "{loss1:?}");
    assert!(total.windows(2).all(|w| w[1] <= w[0]), "{total:?}");
}
