//! Scratch harness for picking desk-scale learning rates.

use tcl_core::data::{make_gaussian_clusters, BatchMode, ViewConfig};
use tcl_core::losses::{LossKind, LossParams};
use tcl_core::trainer::{
    train_contrastive, train_linear_probe, MlpSpec, OptimConfig, ProbeConfig, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("tiny");

    if which == "tiny" {
        let ds = make_gaussian_clusters(3, 20, 8, 0.15, 42).unwrap();
        for seed in [3u64, 5, 7, 13] {
            for lr in [0.05, 0.1, 0.2] {
                let cfg = TrainConfig {
                    mode: BatchMode::Supervised,
                    loss_kind: LossKind::Tcl,
                    loss_params: LossParams::new(0.1, 100.0, 1.0).unwrap(),
                    mlp: MlpSpec { encoder: vec![8, 16, 6], projector: vec![6, 6, 4] },
                    optim: OptimConfig::new(lr, 30),
                    view_cfg: ViewConfig::default(),
                    batch_size: 10,
                    seed,
                    grad_log: None,
                    threads: 1,
                };
                let (model, trace) = train_contrastive(&ds, &cfg).unwrap();
                let probe =
                    train_linear_probe(&model, &ds, &ProbeConfig::new(30, 0.5, 5)).unwrap();
                println!(
                    "seed {seed} lr {lr:>5}: loss {:.4} -> {:.4}, probe {:.3}",
                    trace.records.first().unwrap().loss,
                    trace.records.last().unwrap().loss,
                    probe.top1
                );
            }
        }
    }

    if which == "desk" {
        // The full desk-scale setting for both losses over several seeds.
        let ds = make_gaussian_clusters(10, 100, 32, 0.15, 1234).unwrap();
        let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
        let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
        for (kind, params) in [
            (LossKind::SupCon, LossParams::new(0.1, 0.0, 1.0).unwrap()),
            (LossKind::Tcl, LossParams::new(0.1, 5000.0, 1.0).unwrap()),
        ] {
            let start = std::time::Instant::now();
            let mut tops = Vec::new();
            for seed in [1u64, 2, 3, 4, 5] {
                let cfg = TrainConfig {
                    mode: BatchMode::Supervised,
                    loss_kind: kind,
                    loss_params: params,
                    mlp: MlpSpec { encoder: vec![32, 64, 32], projector: vec![32, 32, 16] },
                    optim: OptimConfig::new(lr, epochs),
                    view_cfg: ViewConfig::default(),
                    batch_size: 64,
                    seed,
                    grad_log: None,
                    threads: 1,
                };
                let (model, _) = train_contrastive(&ds, &cfg).unwrap();
                let probe =
                    train_linear_probe(&model, &ds, &ProbeConfig::new(50, 0.5, seed)).unwrap();
                tops.push(probe.top1);
            }
            let mean: f64 = tops.iter().sum::<f64>() / tops.len() as f64;
            println!(
                "{kind} lr {lr}: tops {tops:?} mean {mean:.4}, {:.1}s",
                start.elapsed().as_secs_f64()
            );
        }
    }

    if which == "selfsup" {
        let ds = make_gaussian_clusters(10, 100, 32, 0.15, 1234).unwrap();
        let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.4);
        let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
        for views in [2usize, 3] {
            let start = std::time::Instant::now();
            let mut tops = Vec::new();
            for seed in [1u64, 2, 3, 4, 5] {
                let cfg = TrainConfig {
                    mode: BatchMode::SelfSupervised,
                    loss_kind: LossKind::Tcl,
                    loss_params: LossParams::new(0.1, 1.0, 1.5).unwrap(),
                    mlp: MlpSpec { encoder: vec![32, 64, 32], projector: vec![32, 32, 16] },
                    optim: OptimConfig::new(lr, epochs),
                    view_cfg: ViewConfig { views_per_sample: views, ..ViewConfig::default() },
                    batch_size: 64,
                    seed,
                    grad_log: None,
                    threads: 1,
                };
                let (model, _) = train_contrastive(&ds, &cfg).unwrap();
                let probe =
                    train_linear_probe(&model, &ds, &ProbeConfig::new(50, 0.5, seed)).unwrap();
                tops.push(probe.top1);
            }
            let mean: f64 = tops.iter().sum::<f64>() / tops.len() as f64;
            println!(
                "selfsup V={views} lr {lr}: tops {tops:?} mean {mean:.4}, {:.1}s",
                start.elapsed().as_secs_f64()
            );
        }
        // Random-encoder baseline across several seeds.
        for seed in [1u64, 2, 3, 11, 99] {
            let model = tcl_core::trainer::Model::init(
                &MlpSpec { encoder: vec![32, 64, 32], projector: vec![32, 32, 16] },
                seed,
            )
            .unwrap();
            let probe = train_linear_probe(&model, &ds, &ProbeConfig::new(50, 0.5, seed)).unwrap();
            println!("random-init encoder probe (seed {seed}): {:.4}", probe.top1);
        }
    }
}
