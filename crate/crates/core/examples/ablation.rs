//! Trains the three ablation variants on the small synthetic preset and prints
//! held-out masked PSNR per seed and variant.
//!
//! Usage: `cargo run --release --example ablation -- [steps] [seed...]`
//!
//! `REGULARIZER` may hold a JSON object of regularizer settings for the full
//! variant, and `VARIANTS` a comma-separated subset of `full,no_attention,no_depth`.

use std::time::Instant;

use splat_inpaint::trainer::{train, TrainConfig};
use splat_inpaint::workbench::cli::evaluate;
use splat_inpaint::workbench::{synth_scene, SynthPreset};

#[derive(Debug, Clone, Copy)]
enum Variant {
    Full,
    NoAttention,
    NoAttentionNoDepth,
}

fn config(variant: Variant, steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::scaled(steps, seed);
    match variant {
        Variant::Full => {
            if let Ok(json) = std::env::var("REGULARIZER") {
                let mut value = serde_json::to_value(&cfg.regularizer).expect("serializable");
                let overrides: serde_json::Value = serde_json::from_str(&json).expect("REGULARIZER must be JSON");
                for (k, v) in overrides.as_object().expect("REGULARIZER must be an object") {
                    value[k] = v.clone();
                }
                cfg.regularizer = serde_json::from_value(value).expect("valid regularizer settings");
            }
        }
        Variant::NoAttention => cfg.regularizer.enabled = false,
        Variant::NoAttentionNoDepth => {
            cfg.regularizer.enabled = false;
            cfg.loss.lambda_depth = 0.0;
            cfg.loss.lambda_tv = 0.0;
        }
    }
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map_or(3000, |s| s.parse().expect("steps"));
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().expect("seed")).collect()
    } else {
        vec![1, 2, 3]
    };
    let selected = std::env::var("VARIANTS").unwrap_or_else(|_| "full,no_attention,no_depth".into());
    let variants: Vec<Variant> = selected
        .split(',')
        .map(|v| match v {
            "full" => Variant::Full,
            "no_attention" => Variant::NoAttention,
            "no_depth" => Variant::NoAttentionNoDepth,
            other => panic!("unknown variant {other}"),
        })
        .collect();
    let mut sums = vec![0.0; variants.len()];
    for &seed in &seeds {
        let synth = synth_scene(&SynthPreset::Small.config(), seed);
        for (v, &variant) in variants.iter().enumerate() {
            let start = Instant::now();
            let (trainer, _) = train(&synth.dataset, config(variant, steps, seed), None).expect("training");
            let report = evaluate(&trainer, &synth.dataset).expect("evaluation");
            let masked = report.mean.masked_psnr.expect("masks present");
            sums[v] += masked;
            println!(
                "seed {seed} {variant:?}: masked_psnr {masked:.3} psnr {:.3} ({:.0}s)",
                report.mean.psnr,
                start.elapsed().as_secs_f64()
            );
        }
    }
    for (v, variant) in variants.iter().enumerate() {
        println!("mean {variant:?}: {:.3}", sums[v] / seeds.len() as f64);
    }
}
