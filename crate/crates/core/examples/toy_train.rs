//! Desk-scale training probe: synthesizes a corpus, pre-trains the tiny
//! codec, runs two-stage watermark training, and reports robustness.
//!
//! Usage: toy_train [iters] [lr] [seed]

use std::collections::BTreeMap;

use lowmark::attacks::{AttackKind, AttackSpec};
use lowmark::codec::{pretrain_tiny_autoencoder, CodecSpec, PretrainConfig};
use lowmark::embednet::EmbedConfig;
use lowmark::extractnet::ExtractNetConfig;
use lowmark::pipeline::{evaluate, WatermarkModel};
use lowmark::synth;
use lowmark::trainer::{TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let max_iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5000);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(7);

    let t0 = std::time::Instant::now();
    let dataset = synth::natural_dataset(seed, 208, 64, 64).unwrap();
    eprintln!("[{:7.1?}] dataset ready: {} images", t0.elapsed(), dataset.len());

    let pre_iters: usize = std::env::var("PRETRAIN_ITERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(800);
    let spec = CodecSpec::TinyAe { downsample_factor: 2, widths: vec![16] };
    let pre_cfg = PretrainConfig {
        iterations: pre_iters,
        learning_rate: 2e-3,
        batch_size: 8,
        patience: pre_iters,
        smooth_window: 100,
        seed,
    };
    let codec = pretrain_tiny_autoencoder(
        &dataset,
        &lowmark::freq::ExtractorKind::default(),
        &spec,
        &pre_cfg,
    )
    .unwrap();
    eprintln!(
        "[{:7.1?}] codec pretrained, recon rms {:.5}",
        t0.elapsed(),
        codec.pretrain_rms.unwrap()
    );

    let cfg = TrainConfig {
        learning_rate: lr,
        image_size: 64,
        watermark_length: 16,
        max_iterations: max_iters,
        heldout_count: 8,
        eval_interval: 100,
        seed,
        embedder: EmbedConfig {
            fc_hidden: 64,
            primary_width: 24,
            tap_widths: [12, 8, 8],
            latent_width: 24,
            fused_widths: [24, 16, 8, 4],
            stream_widths: [16, 8, 8, 4],
        },
        extractor_net: ExtractNetConfig {
            feature_widths: [32, 24],
            decode_widths: [16, 8, 8, 4],
            fc_widths: [128, 32],
        },
        ..TrainConfig::default()
    };

    let mut trainer = Trainer::new(cfg, &codec).unwrap();
    let mut cb = |row: &lowmark::trainer::MetricRow| {
        if row.iteration % 25 == 0 || row.heldout_bit_accuracy.is_some() {
            eprintln!(
                "[{:7.1?}] it {:5} stage {} lw {:.4} smooth {:.4} l2 {:.5} ssim {:.4} jnd {:.5} heldout {:?}",
                t0.elapsed(),
                row.iteration,
                row.stage,
                row.watermark,
                row.smoothed_watermark,
                row.l2,
                row.ssim,
                row.jnd,
                row.heldout_bit_accuracy
            );
        }
    };
    match trainer.run(&dataset, None, Some(&mut cb)) {
        Ok(()) => eprintln!("[{:7.1?}] training complete", t0.elapsed()),
        Err(e) => {
            eprintln!("[{:7.1?}] training failed: {e}", t0.elapsed());
            std::process::exit(3);
        }
    }

    let ckpt = trainer.into_checkpoint();
    eprintln!(
        "stage1 iters: {:?}, total {}",
        ckpt.meta.stage1_iterations, ckpt.meta.total_iterations
    );
    let model = WatermarkModel::from_checkpoint(&ckpt).unwrap();
    let eval_images = synth::natural_dataset(seed + 10_000, 20, 64, 64).unwrap();
    let grid = vec![
        AttackSpec::new(AttackKind::Identity),
        AttackSpec::new(AttackKind::GaussianFilter { kernel: 3 }),
        AttackSpec::new(AttackKind::Brightness { factor: 0.15 }),
        AttackSpec::new(AttackKind::Brightness { factor: -0.15 }),
        AttackSpec::new(AttackKind::Jpeg { quality: 50 }),
        AttackSpec::new(AttackKind::GaussianNoise { sigma: 0.1 }),
    ];
    let report = evaluate(&model, &eval_images, &grid, &BTreeMap::new(), 99).unwrap();
    eprintln!(
        "clean psnr {:.2} dB ssim {:.4} ceiling {:.2} dB",
        report.clean_psnr_db, report.clean_ssim, report.fidelity_ceiling_psnr_db
    );
    for row in &report.rows {
        eprintln!("  {:40} {:6.2}%", row.attack, row.mean_bit_accuracy_pct);
    }
    eprintln!("[{:7.1?}] done", t0.elapsed());
}
