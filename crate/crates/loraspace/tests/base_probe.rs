// Temporary experiment harness; removed before finalization.
use loraspace::encoders::{EncoderConfig, IdEncoder};
use loraspace::numerics::RngStream;
use loraspace::pipeline::PipelineConfig;
use loraspace::synthdata::Dataset;
use loraspace::trainer::*;

#[test]
#[ignore]
fn base_probe() {
    let dataset = Dataset::generate(2000, 4, 7).unwrap();
    let cfg = PipelineConfig::default();
    for (iters, lr, batch, label) in [
        (3000usize, 3e-4f64, 16usize, "pilot"),
        (3000, 1e-3, 16, "hot"),
        (6000, 6e-4, 16, "warm-long"),
    ] {
        let idenc = IdEncoder::init(&EncoderConfig::default(), &RngStream::named(1, "x"));
        let mut nets = Nets::init(
            &cfg.denoiser,
            &cfg.hyper,
            &cfg.layout(),
            &cfg.encoders,
            idenc,
            7,
        )
        .unwrap();
        let tc = TrainConfig {
            base_iters: iters,
            base_batch_size: batch,
            base_learning_rate: lr,
            ..TrainConfig::default()
        };
        let mut log = TrainLog::in_memory();
        let t0 = std::time::Instant::now();
        let out = train_base_model(&mut nets, &dataset, &tc, None, &mut log).unwrap();
        // trailing-500-step average for a stable read
        let tail: Vec<f64> = log.entries.iter().rev().take(500).map(|e| e.loss).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        println!(
            "{label}: iters={iters} lr={lr} batch={batch} -> first {:.4} last {:.4} tail500 {:.4} ({:?})",
            out.mean_first_losses,
            out.mean_last_losses,
            tail_mean,
            t0.elapsed()
        );
    }
    panic!("probe");
}
