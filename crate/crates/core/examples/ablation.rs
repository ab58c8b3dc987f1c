//! Paired runs with and without column centering on signals with random
//! segment levels.
//!
//! ```text
//! cargo run --release --example ablation -- [eta2] [steps]
//! ```

use analysparse::datagen::{gen_dataset, make_dtv, AmpMode, DataConfig};
use analysparse::learner::{match_columns, train, Projection, TrainConfig};

fn main() -> analysparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eta2: f64 = args.first().map_or(0.1, |s| s.parse().expect("eta2"));
    let steps: usize = args.get(1).map_or(2000, |s| s.parse().expect("steps"));

    let p = 32;
    let data = DataConfig {
        amp_mode: AmpMode::Uniform,
        ..DataConfig::new(p, 20_000, 0.5, 2)
    };
    let train_set = gen_dataset(&data)?;
    let val_set = gen_dataset(&DataConfig {
        l: 256,
        split: 1,
        ..data
    })?;

    for projection in [Projection::CenterColumns, Projection::None] {
        let cfg = TrainConfig {
            eta2,
            projection,
            ..TrainConfig::new(p, steps, 2)
        };
        let report = train(&train_set, &val_set, &cfg)?;
        let refs = report.references.clone().expect("references requested");
        let m = match_columns(&report.final_d, &make_dtv(p).scale(refs.lambda_star))?;
        let worst_sum = report.col_sum_max.iter().cloned().fold(0.0, f64::max);
        println!(
            "{projection:>14}: validation loss {:.4} (D=0 {:.4}, TV {:.4}), mean |cosine| {:.3}, max column sum {worst_sum:.2e}, {:.0}s",
            report.final_val_loss().unwrap_or(f64::NAN),
            refs.zero,
            refs.tv,
            m.mean_abs_cosine,
            report.wall_time
        );
    }
    Ok(())
}
