//! Criterion 8: the desk-scale end-to-end run at default configuration,
//! plus the trained-model measurements that only make sense on a real run
//! (identity-encoder quality, base-model behavior, stage learning curves,
//! and the micro-set overfitting checks).

use std::time::Instant;

use loraspace::denoiser::sample;
use loraspace::encoders::{blur_face, triple_accuracy};
use loraspace::eval::{full_report, EvalConfig};
use loraspace::hypernet::generate_lora;
use loraspace::numerics::{cosine, RngStream};
use loraspace::pipeline::{ensure_dataset, init_nets, PipelineConfig};
use loraspace::synthdata::{
    self, classify_background, pad_caption, reference_scene, render, Dataset,
};
use loraspace::trainer::{
    run_stage1, run_stage2, run_stage3, train_base_model, Nets, TrainLog,
};

use super::{acceptance_work_dir, heavy_lock};

/// Small fidelity readout without the full suite: mean id-sim of full-mix
/// generations against their references over a few held-out identities.
fn fidelity_probe(nets: &Nets, cfg: &PipelineConfig, dir: &std::path::Path, n: usize) -> f64 {
    let eval_cfg = EvalConfig {
        held_out_identities: n,
        prompts_per_identity: 1,
        sample_steps: 50,
        multi_image_inputs: 1,
        interp_pairs: 0,
        slider_pairs: 0,
        cfg_sweep_scales: vec![],
        cfg_sweep_seeds: 1,
        save_images: false,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let report = full_report(nets, &eval_cfg, dir).unwrap();
    report.fidelity.mean_id_sim
}

/// Per-image pixel mean and variance (unit scale).
fn image_stats(img: &loraspace::img::Image) -> (f64, f64) {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
    let var = img
        .pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var)
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
    (m, v.sqrt())
}

#[test]
fn criterion_08_desk_scale_end_to_end() {
    let _lock = heavy_lock();
    let t_start = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.seed = 7;
    cfg.propagate_seed();
    let dir = acceptance_work_dir("desk-scale");

    // Dataset and the frozen perception stack.
    let dataset = ensure_dataset(&cfg, dir.join("dataset.hlra")).unwrap();
    assert_eq!(dataset.len(), cfg.dataset.n_identities * cfg.dataset.per_identity);
    let (mut nets, id_r2, id_triples) = init_nets(&cfg, &dataset).unwrap();
    assert!(id_r2 >= 0.8, "id encoder validation R2 {id_r2}");
    assert!(id_triples >= 0.9, "id encoder triple accuracy {id_triples}");

    // Blurring weakens the identity signal the trained encoder reads.
    {
        let mut rng = RngStream::named(cfg.seed, "acc-blur");
        let mut sharp = Vec::new();
        let mut blurred = Vec::new();
        for id in 0..12 {
            let identity = synthdata::gen_identity(&mut rng);
            for _ in 0..3 {
                let scene = synthdata::gen_scene(&mut rng);
                let (img, bbox) = render(&identity, &scene);
                let crop = nets.encoders.crop(&img, bbox).unwrap();
                let blur = blur_face(&crop, 8).unwrap();
                sharp.push((id, nets.encoders.id_encoder.embed(&crop).unwrap()));
                blurred.push((id, nets.encoders.id_encoder.embed(&blur).unwrap()));
            }
        }
        let acc_sharp = triple_accuracy(&sharp, &RngStream::named(1, "t"));
        let acc_blur = triple_accuracy(&blurred, &RngStream::named(1, "t"));
        assert!(
            acc_blur < acc_sharp,
            "blur retrieval {acc_blur} vs sharp {acc_sharp}"
        );
    }

    // Frozen-encoder hashes held across the whole run.
    let idenc_hash = nets.encoders.id_encoder.hash();
    let feature_hash = nets.encoders.features.weight_hash();

    // Base-model pretraining: loss at least halves.
    let mut log = TrainLog::to_file(dir.join("train_log.jsonl")).unwrap();
    let base = train_base_model(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    assert!(
        base.mean_last_losses <= 0.5 * base.mean_first_losses,
        "base loss {} -> {}",
        base.mean_first_losses,
        base.mean_last_losses
    );

    // Base-model behavior: prompted backgrounds followed above chance, and
    // sample statistics inside the 3-sigma band of per-image training stats.
    {
        let schedule = &nets.schedule;
        let mut follows = 0;
        let mut gen_means = Vec::new();
        let mut gen_vars = Vec::new();
        for trial in 0..10 {
            let scene = reference_scene(trial % 5, trial % 4);
            let caption = pad_caption(
                &synthdata::caption(&scene, true),
                nets.denoiser.cfg.max_caption_len,
            );
            let img = sample(&nets.denoiser, schedule, &caption, 5.0, 50, 1000 + trial as u64, None)
                .unwrap();
            if classify_background(&img, None) == scene.background {
                follows += 1;
            }
            let (m, v) = image_stats(&img);
            gen_means.push(m);
            gen_vars.push(v);
        }
        let follow_rate = follows as f64 / 10.0;
        assert!(follow_rate > 0.2, "prompt following {follow_rate}");

        let data_stats: Vec<(f64, f64)> = dataset.samples.iter().map(|s| image_stats(&s.image)).collect();
        let (data_mean, data_mean_std) =
            mean_std(&data_stats.iter().map(|s| s.0).collect::<Vec<_>>());
        let (data_var, data_var_std) = mean_std(&data_stats.iter().map(|s| s.1).collect::<Vec<_>>());
        let (gen_mean, _) = mean_std(&gen_means);
        let (gen_var, _) = mean_std(&gen_vars);
        assert!(
            (gen_mean - data_mean).abs() <= 3.0 * data_mean_std,
            "pixel mean {gen_mean} vs {data_mean} +- 3x{data_mean_std}"
        );
        assert!(
            (gen_var - data_var).abs() <= 3.0 * data_var_std,
            "pixel variance {gen_var} vs {data_var} +- 3x{data_var_std}"
        );
        println!(
            "  base model: prompt following {follow_rate:.2}, pixel mean {gen_mean:.3} (data {data_mean:.3})"
        );
    }

    // Stage 1: identity-free warm-up.
    let s1 = run_stage1(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    println!(
        "  stage1 loss {:.4} -> {:.4}",
        s1.mean_first_losses, s1.mean_last_losses
    );

    // Stage 2, with the situation mix checked over its full log.
    let s2 = run_stage2(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    let total: usize = s2.situation_counts.iter().sum();
    for (count, prob) in s2.situation_counts.iter().zip([0.9, 0.05, 0.05]) {
        let freq = *count as f64 / total as f64;
        assert!(
            (freq - prob).abs() <= 0.02,
            "situation mix {:?} over {total}",
            s2.situation_counts
        );
    }
    println!(
        "  stage2 loss {:.4} -> {:.4}, situations {:?}",
        s2.mean_first_losses, s2.mean_last_losses, s2.situation_counts
    );

    let probe_after_2 = fidelity_probe(&nets, &cfg, &dir.join("probe-s2"), 8);

    // Stage 3: identity-embedding attention fine-tune.
    let s3 = run_stage3(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    println!(
        "  stage3 loss {:.4} -> {:.4}",
        s3.mean_first_losses, s3.mean_last_losses
    );
    let probe_after_3 = fidelity_probe(&nets, &cfg, &dir.join("probe-s3"), 8);
    println!("  held-out id-sim after stage2 {probe_after_2:.3}, after stage3 {probe_after_3:.3}");
    assert!(
        probe_after_3 >= probe_after_2 - 0.01,
        "stage 3 regressed held-out id-sim: {probe_after_2} -> {probe_after_3}"
    );

    // The frozen stack never moved.
    assert_eq!(nets.encoders.id_encoder.hash(), idenc_hash);
    assert_eq!(nets.encoders.features.weight_hash(), feature_hash);

    // Same-identity adapter coefficients are closer than cross-identity
    // ones on held-out faces.
    {
        let mut rng = RngStream::named(cfg.seed, "acc-coeff-sim");
        let mut sets: Vec<Vec<loraspace::numerics::Array<f32>>> = Vec::new();
        for _ in 0..6 {
            let identity = synthdata::gen_identity(&mut rng);
            let mut per_id = Vec::new();
            for _ in 0..2 {
                let scene = synthdata::gen_scene(&mut rng);
                let (img, bbox) = render(&identity, &scene);
                let (ci, _) =
                    generate_lora(&img, bbox, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                        .unwrap();
                per_id.push(ci.values);
            }
            sets.push(per_id);
        }
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..sets.len() {
            same.push(cosine(&sets[i][0], &sets[i][1]).unwrap() as f64);
            for j in 0..sets.len() {
                if i != j {
                    cross.push(cosine(&sets[i][0], &sets[j][0]).unwrap() as f64);
                }
            }
        }
        let (same_mean, _) = mean_std(&same);
        let (cross_mean, _) = mean_std(&cross);
        println!("  coeff cosine: same-id {same_mean:.3}, cross-id {cross_mean:.3}");
        assert!(same_mean > cross_mean);
    }

    // Full evaluation at the default protocol.
    nets.save(dir.join("stage3_final.hlra")).unwrap();
    let report = full_report(&nets, &cfg.eval, dir.join("reports")).unwrap();
    println!(
        "  fidelity: id-sim {:.3} vs shuffled {:.3} (margin {:.3}), clip-i {:.3}",
        report.fidelity.mean_id_sim,
        report.fidelity.mean_id_sim_shuffled,
        report.fidelity.id_sim_margin,
        report.fidelity.mean_clip_i
    );
    println!(
        "  multi-image {:.3} vs single {:.3}; editability id-only {:.3} vs full {:.3}; slider monotonic {:.2}",
        report.multi_image.mean_id_sim_multi,
        report.multi_image.mean_id_sim_single,
        report.editability.mean_with_without_id_only,
        report.editability.mean_with_without_full,
        report.slider.monotonic_fraction
    );

    // The headline desk-scale criteria.
    assert!(
        report.fidelity.id_sim_margin >= 0.2,
        "id-sim margin {}",
        report.fidelity.id_sim_margin
    );
    assert!(
        report.multi_image.mean_id_sim_multi >= report.multi_image.mean_id_sim_single,
        "multi-image averaging decreased id-sim: {} vs {}",
        report.multi_image.mean_id_sim_multi,
        report.multi_image.mean_id_sim_single
    );
    assert!(
        report.editability.mean_with_without_id_only >= report.editability.mean_with_without_full,
        "id-only editability {} vs full {}",
        report.editability.mean_with_without_id_only,
        report.editability.mean_with_without_full
    );

    // Companion measurements from the report.
    assert!(report.slider.monotonic_fraction >= 0.7, "slider {}", report.slider.monotonic_fraction);
    for curve in &report.interpolation {
        assert!(!curve.is_empty());
    }
    let start_sim: f64 = report
        .interpolation
        .iter()
        .map(|c| c.first().unwrap().sim_to_a as f64)
        .sum::<f64>();
    let end_sim: f64 = report
        .interpolation
        .iter()
        .map(|c| c.last().unwrap().sim_to_a as f64)
        .sum::<f64>();
    assert!(
        start_sim >= end_sim,
        "interp similarity to endpoint A should fall along the path"
    );
    assert_eq!(report.cfg_sweep.len(), 5);
    assert!(report.cfg_sweep.iter().all(|p| p.saturation.is_finite()));

    let elapsed = t_start.elapsed();
    assert!(
        elapsed.as_secs() < 2 * 3600,
        "end-to-end run took {elapsed:?}"
    );
    println!(
        "[PASS] criterion 8: desk-scale end-to-end in {:.1} min (id-sim margin {:.3})",
        elapsed.as_secs_f64() / 60.0,
        report.fidelity.id_sim_margin
    );
}

#[test]
fn stage_overfit_micro_set() {
    // A 64-sample micro-set: stage 1 halves its reconstruction loss within
    // its default iteration budget, and stage 2 keeps improving it.
    let _lock = heavy_lock();
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.dataset.n_identities = 16;
    cfg.dataset.per_identity = 4;
    cfg.id_train.steps = 600;
    cfg.train.base_iters = 1200;
    cfg.propagate_seed();

    let dataset = Dataset::generate(16, 4, cfg.seed).unwrap();
    assert_eq!(dataset.len(), 64);
    let (mut nets, _, _) = init_nets(&cfg, &dataset).unwrap();
    let mut log = TrainLog::in_memory();
    train_base_model(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();

    let s1 = run_stage1(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    assert!(
        s1.mean_last_losses <= 0.5 * s1.mean_first_losses,
        "stage 1 micro-set: {} -> {}",
        s1.mean_first_losses,
        s1.mean_last_losses
    );

    // Stage 2 on the same micro-set: reconstruction (S1) loss halves again
    // relative to its own start.
    let s2 = run_stage2(&mut nets, &dataset, &cfg.train, None, &mut log).unwrap();
    let s1_losses: Vec<f64> = log
        .entries
        .iter()
        .filter(|e| e.stage == "stage2" && e.situation == "S1")
        .map(|e| e.loss)
        .collect();
    let head: f64 = s1_losses.iter().take(50).sum::<f64>() / 50.0;
    let tail: f64 = s1_losses.iter().rev().take(50).sum::<f64>() / 50.0;
    assert!(
        tail <= 0.5 * head,
        "stage 2 micro-set S1 loss: {head} -> {tail}"
    );
    let _ = s2;
    println!(
        "[PASS] micro-set overfitting: stage1 {:.4} -> {:.4}, stage2 S1 {head:.4} -> {tail:.4}",
        s1.mean_first_losses, s1.mean_last_losses
    );
}
