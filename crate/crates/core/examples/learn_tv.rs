//! Learns a 32x32 dictionary from noisy piecewise-constant signals and
//! compares it with the total-variation operator.
//!
//! ```text
//! cargo run --release --example learn_tv -- [eta2] [steps] [train pairs]
//! ```

use analysparse::datagen::{gen_dataset, make_dtv, DataConfig};
use analysparse::learner::{match_columns, rescale_unit, sort_columns, train, TrainConfig};

fn main() -> analysparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eta2: f64 = args.first().map_or(1.0, |s| s.parse().expect("eta2"));
    let steps: usize = args.get(1).map_or(300, |s| s.parse().expect("steps"));
    let l: usize = args.get(2).map_or(20_000, |s| s.parse().expect("pairs"));

    let p = 32;
    let train_set = gen_dataset(&DataConfig::new(p, l, 1.0, 1))?;
    let val_set = gen_dataset(&DataConfig {
        split: 1,
        ..DataConfig::new(p, 256, 1.0, 1)
    })?;

    let cfg = TrainConfig {
        eta2,
        validation_every: 50,
        ..TrainConfig::new(p, steps, 1)
    };
    let report = train(&train_set, &val_set, &cfg)?;
    let refs = report.references.clone().expect("references requested");

    for (t, (loss, inner)) in report.train_loss.iter().zip(&report.inner_iterations).enumerate() {
        if std::env::var("VERBOSE").is_ok() {
            println!("step {:>5}  train loss {loss:.4}  inner iterations {inner:.0}", t + 1);
        }
    }
    for (t, loss) in &report.val_loss {
        println!("step {t:>5}  validation loss {loss:.4}");
    }
    println!("D = 0 loss {:.4}", refs.zero);
    println!("lambda* = {} D_TV loss {:.4}", refs.lambda_star, refs.tv);

    let m = match_columns(&report.final_d, &make_dtv(p).scale(refs.lambda_star))?;
    println!("mean |cosine| to D_TV: {:.3}", m.mean_abs_cosine);
    println!("wall time {:.1}s", report.wall_time);

    let shown = rescale_unit(&sort_columns(&report.final_d))?;
    for r in 0..8 {
        let row: Vec<String> = (0..8).map(|c| format!("{:+.2}", shown.get(r, c))).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
