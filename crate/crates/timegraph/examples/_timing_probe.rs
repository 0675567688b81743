use std::time::Instant;
use timegraph::config::TrainConfig;
use timegraph::train::train;

fn main() {
    let mut config = TrainConfig::default();
    config.epochs = 60;
    config.learning_rate = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-4);
    config.early_stop_patience = 100;
    let t0 = Instant::now();
    let out = train(&config, 42).unwrap();
    let dt = t0.elapsed();
    println!(
        "{} epochs in {:.1}s ({:.1}s/epoch); best val balacc {:.3}",
        out.records.len(),
        dt.as_secs_f64(),
        dt.as_secs_f64() / out.records.len() as f64,
        out.best_val_balanced_accuracy,
    );
    for r in &out.records {
        println!(
            "epoch {}: total {:.4} bce {:.4} focal {:.4} vgae {:.4} reg {:.4} struct {:.4} contrast {:.4} val_loss {:.4} val_bal {:.3}",
            r.epoch, r.train.total, r.train.bce, r.train.focal, r.train.vgae, r.train.reg, r.train.structural, r.train.contrast, r.val_loss, r.val_balanced_accuracy
        );
    }
}
