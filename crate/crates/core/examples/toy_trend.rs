//! Runs the toy noise-trend experiment and prints per-run results and the
//! seed-averaged test rank-1 of each method.
//!
//! cargo run --release --example toy_trend

use cmil::experiment::{run_trend, Method, TrendConfig};

fn main() -> cmil::Result<()> {
    let cfg = TrendConfig::default();
    let report = run_trend(&cfg)?;
    for r in &report.runs {
        println!(
            "seed={} k={} noise={:.3} {:?} lr={} val={:.3} test_rank1={:.3} test_map={:.3} {:.1}s",
            r.data_seed,
            r.duplication_factor,
            r.measured_noise,
            r.method,
            r.learning_rate,
            r.val_rank1,
            r.test_rank1,
            r.test_map,
            r.train_seconds
        );
    }
    for &k in &cfg.duplication_factors {
        println!(
            "k={k}: cmil {:.3} baseline {:.3}",
            report.mean_test_rank1(Method::Cmil, k),
            report.mean_test_rank1(Method::CropBaseline, k)
        );
    }
    Ok(())
}
