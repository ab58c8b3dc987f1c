//! Denoises one noisy piecewise-constant signal with scaled total-variation
//! operators and prints the error and the solver diagnostics.
//!
//! ```text
//! cargo run --release --example denoise_tv -- [p] [sigma]
//! ```

use analysparse::datagen::{gen_dataset, make_dtv, DataConfig};
use analysparse::denoiser::{denoise, DenoiseConfig};
use analysparse::linalg::{Rng, Stream};

fn main() -> analysparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let p: usize = args.first().map_or(64, |s| s.parse().expect("p"));
    let sigma: f64 = args.get(1).map_or(1.0, |s| s.parse().expect("sigma"));

    let ds = gen_dataset(&DataConfig::new(p, 1, sigma, 7))?;
    let (w, y) = &ds.pairs[0];
    let cfg = DenoiseConfig {
        tol: 1e-8,
        max_itr1: 100_000,
        ..DenoiseConfig::evaluation()
    };
    println!("noisy input error {:.4}", y.sub(w)?.sq_norm());
    for lambda in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let r = denoise(&make_dtv(p).scale(lambda), y, &cfg, &mut Rng::new(7, Stream::Eval))?;
        println!(
            "lambda {lambda:<5} error {:>9.4}  iterations {:>6}  relative gap {:.1e}",
            r.w_hat.sub(w)?.sq_norm(),
            r.iterations,
            r.relative_gap()
        );
    }
    Ok(())
}
