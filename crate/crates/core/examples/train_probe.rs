use fblab_core::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = TrainConfig {
        k: 4,
        n: 12,
        sigma1_sq: fblab_core::rng::snr_db_to_noise_var(1.0),
        sigma2_sq: 0.01,
        train_samples: 10_000,
        batch: 500,
        epochs: 5,
        enc_hidden: 32,
        dec_hidden: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_enc, _dec, report) = train::<f64>(&cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let total_steps = cfg.epochs * cfg.steps_per_epoch();
    println!("total {dt:.1}s, {:.0} ms/step ({} steps)", dt / total_steps as f64 * 1e3, total_steps);
    println!("loss per epoch: {:?}", report.epoch_loss);
    println!("bler per epoch: {:?}", report.epoch_bler);
    println!("max power violation: {:.2e}", report.max_power_violation);
}
