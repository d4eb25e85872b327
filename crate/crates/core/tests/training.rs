use fedrel::diig::train_epoch;
use fedrel::harness::{prepare, ExperimentConfig};
use fedrel::numerics::Adam;
use fedrel::rng::{stream, Stream};

/// Sixty centralized epochs on the default synthetic dataset halve the mean
/// training loss of the first epoch.
#[test]
fn sixty_central_epochs_halve_the_training_loss() {
    let cfg = ExperimentConfig::new(1);
    let exp = prepare(&cfg, None).unwrap();
    let fed = cfg.fed_config();
    let model = &exp.data.model;
    let train: Vec<_> = exp.data.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    let mut params = model.init_params(&mut stream(cfg.seed, Stream::ModelInit, 0)).unwrap();
    let mut adam = Adam::new(fed.adam());
    let mut rng = stream(cfg.seed, Stream::ParticipantTrain, 0);
    let losses: Vec<f64> = (0..60)
        .map(|_| train_epoch(model, &mut params, &mut adam, &train, fed.batch_size, &mut rng).unwrap())
        .collect();
    let (first, last) = (losses[0], losses[59]);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(
        last <= 0.5 * first,
        "epoch 60 loss {last:.4} is not half of epoch 1 loss {first:.4} (ratio {:.3})",
        last / first
    );
}
