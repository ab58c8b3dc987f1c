//! Trains one dictionary per noise level and reports how close each one
//! gets to the total-variation operator.
//!
//! ```text
//! cargo run --release --example noise_sweep -- [steps] [train pairs]
//! ```

use analysparse::datagen::{gen_dataset, make_dtv, DataConfig};
use analysparse::learner::{match_columns, train, TrainConfig};

fn main() -> analysparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map_or(200, |s| s.parse().expect("steps"));
    let l: usize = args.get(1).map_or(4000, |s| s.parse().expect("pairs"));
    let p = 16;

    println!("sigma,val_loss,tv_loss,mean_abs_cosine");
    for sigma in [0.05, 0.5, 1.0, 4.0] {
        let train_set = gen_dataset(&DataConfig::new(p, l, sigma, 3))?;
        let val_set = gen_dataset(&DataConfig {
            split: 1,
            ..DataConfig::new(p, 64, sigma, 3)
        })?;
        let cfg = TrainConfig {
            eta2: 0.1,
            validation_every: steps,
            ..TrainConfig::new(p, steps, 3)
        };
        let report = train(&train_set, &val_set, &cfg)?;
        let refs = report.references.clone().expect("references requested");
        let m = match_columns(&report.final_d, &make_dtv(p).scale(refs.lambda_star))?;
        println!(
            "{sigma},{:.4},{:.4},{:.3}",
            report.final_val_loss().unwrap_or(f64::NAN),
            refs.tv,
            m.mean_abs_cosine
        );
    }
    Ok(())
}
