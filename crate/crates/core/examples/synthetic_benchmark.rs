//! End-to-end run on the synthetic benchmark: prints the score-variant and
//! aggregation tables for each seed.
//!
//! `cargo run --example synthetic_benchmark -- [epochs] [seed...]`

use std::time::Instant;

use g2sf::bank::{build_banks, CoresetParams};
use g2sf::eval::{ablation_csv, ablation_scores, EvalConfig};
use g2sf::features::{gen_synthetic_dataset, SynthConfig};
use g2sf::geometry::fit_normalizer;
use g2sf::losses::LossConfig;
use g2sf::lspn::LspnConfig;
use g2sf::synthesis::{build_training_pool, SynthesisConfig};
use g2sf::trainer::{compute_m0, train, TrainConfig};

fn main() -> g2sf::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(40);
    let seeds: Vec<u64> =
        if args.len() > 1 { args[1..].iter().filter_map(|a| a.parse().ok()).collect() } else { vec![0, 1, 2] };
    for seed in seeds {
        let t0 = Instant::now();
        let data = SynthConfig::default();
        let ds = gen_synthetic_dataset(&data, seed)?;
        let banks = build_banks(&ds.train, &CoresetParams { seed, ..Default::default() })?;
        let norm = fit_normalizer(&ds.train, &banks)?.normalizer;
        let k = 5;
        let pool = build_training_pool(&ds.train, &banks, &norm, &SynthesisConfig::default(), k, seed)?;
        let loss = LossConfig { m0: compute_m0(&pool.train), k, ..LossConfig::default() };
        let cfg = TrainConfig { epochs, seed, deterministic: true, ..TrainConfig::desk() };
        let t1 = Instant::now();
        let out = train(&pool, &banks, &norm, &LspnConfig::desk(data.dims.0, data.dims.1), &cfg, &loss)?;
        let t2 = Instant::now();
        for e in out.log.iter().step_by(5.max(epochs / 8)) {
            println!(
                "  epoch {:3} loss {:10.3} val {:10.3} mean_w {:.3} sigma ({:.3}, {:.3})",
                e.epoch,
                e.train.total,
                e.validation.map(|v| v.total).unwrap_or(f64::NAN),
                e.mean_w,
                e.sigma_pc,
                e.sigma_rgb
            );
        }
        let eval = EvalConfig::default();
        let init = ablation_scores(&out.snapshots[0], &banks, &ds.test, &eval)?;
        let tables = ablation_scores(&out.checkpoint, &banks, &ds.test, &eval)?;
        println!(
            "seed {seed}: pool {} cells ({:.1}% anomalous), prep {:.1}s, train {:.1}s, eval {:.1}s",
            pool.train.len(),
            100.0 * pool.anomalous_fraction(),
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            t2.elapsed().as_secs_f64()
        );
        println!("-- at init\n{}", ablation_csv(&init.score_variants));
        println!("-- trained\n{}{}", ablation_csv(&tables.score_variants), ablation_csv(&tables.aggregations));
    }
    Ok(())
}
