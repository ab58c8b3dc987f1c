//! The smoothed-l1 benchmark against the projected learner on the same data
//! and seed.
//!
//! ```text
//! cargo run --release --example baseline_compare -- [eta2] [steps]
//! ```

use analysparse::baseline::{train_smoothed, SmoothedConfig};
use analysparse::datagen::{gen_dataset, make_dtv, AmpMode, DataConfig};
use analysparse::learner::{match_columns, train, TrainConfig, TrainReport};

fn summary(name: &str, report: &TrainReport, tv: &analysparse::linalg::Tensor) -> analysparse::Result<()> {
    let m = match_columns(&report.final_d, tv)?;
    println!(
        "{name:>10}: final validation loss {:.4}, mean |cosine| {:.3}, {:.0}s",
        report.final_val_loss().unwrap_or(f64::NAN),
        m.mean_abs_cosine,
        report.wall_time
    );
    Ok(())
}

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
    let cfg = TrainConfig {
        eta2,
        validation_every: steps / 10,
        ..TrainConfig::new(p, steps, 2)
    };

    let ours = train(&train_set, &val_set, &cfg)?;
    let tv = make_dtv(p).scale(ours.references.as_ref().map_or(1.0, |r| r.lambda_star));
    let theirs = train_smoothed(
        &train_set,
        &val_set,
        &SmoothedConfig::new(TrainConfig {
            references: false,
            ..cfg
        }),
    )?;

    println!("step,projected,smoothed");
    for (a, b) in ours.val_loss.iter().zip(&theirs.val_loss) {
        println!("{},{:.4},{:.4}", a.0, a.1, b.1);
    }
    summary("projected", &ours, &tv)?;
    summary("smoothed", &theirs, &tv)?;
    Ok(())
}
