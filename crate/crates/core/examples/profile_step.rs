//! Scratch profiling harness (not part of the deliverable surface).
use std::time::Instant;
use xmodal::trainer::TrainConfig;

fn main() {
    let mut cfg = TrainConfig::default();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    cfg.epochs = epochs.max(1);
    cfg.train_samples = 4096;
    let t0 = Instant::now();
    let out = xmodal::trainer::train(&cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let report = out.report.unwrap();
    println!(
        "epochs={} time={:.1}s per_epoch={:.2}s r1_i2t={:.4} r5_i2t={:.4} match_acc={:.4} tau={:.4}",
        cfg.epochs, dt, dt / cfg.epochs as f64, report.r1_i2t, report.r5_i2t, report.matching_accuracy,
        out.params.tau()
    );
    let lines: Vec<&str> = out.eval_csv.lines().collect();
    for l in lines.iter().skip(1) {
        println!("eval {l}");
    }
    let m: Vec<&str> = out.metrics_csv.lines().collect();
    for l in m.iter().skip(1).step_by(16) {
        println!("step {l}");
    }
}
