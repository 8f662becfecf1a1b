//! Seeded desk-scale run: fit the frozen model, train, print the eval table.
//!
//! `cargo run --release -p oodseg-core --example desk_run -- [iterations] [--ablate]`

use std::time::Instant;

use oodseg::ablation::{ablation_csv, run_ablation};
use oodseg::trainer::{eval_csv, evaluate, train};
use oodseg::world::{Dataset, FrozenConfig, FrozenModel, SceneSpec};
use oodseg::{Scorer, TrainConfig};

fn main() -> oodseg::Result<()> {
    let iterations = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("iteration count"));
    let ablate = std::env::args().any(|a| a == "--ablate");
    let spec = SceneSpec::default();
    let data = Dataset::generate(&spec, 32, 16)?;
    let frozen = FrozenModel::fit(&spec, &FrozenConfig::default())?;
    let scenes: Vec<_> = (0..20)
        .map(|i| oodseg::world::generate_scene(&spec, false, &mut oodseg::rng::stream(99, i, 7)).unwrap())
        .collect();
    println!("frozen accuracy {:.4}", frozen.pixel_accuracy(&scenes));
    let cfg = TrainConfig {
        iterations,
        warmup_iters: iterations.min(200),
        ..TrainConfig::default()
    };
    let jem_only = evaluate(&oodseg::HeadParams::init(&cfg.head, 0)?, &frozen, &data.eval, 0.5, &[Scorer::Jem])?;
    println!("jem auroc {:.4} ap {:.4}", jem_only[0].1.auroc, jem_only[0].1.ap);
    if iterations == 0 {
        return Ok(());
    }
    let start = Instant::now();
    let (head, log) = train(&data.train, &frozen, &cfg)?;
    println!("trained {iterations} iterations in {:.1?}, aborted {}", start.elapsed(), log.aborted);
    let rows = evaluate(&head, &frozen, &data.eval, cfg.lambda, &Scorer::ALL)?;
    print!("{}", eval_csv(&rows));
    if ablate {
        let start = Instant::now();
        let arms = run_ablation(&data.train, &frozen, &data.eval, &cfg, true)?;
        println!("ablation in {:.1?}", start.elapsed());
        print!("{}", ablation_csv(&arms));
    }
    Ok(())
}
