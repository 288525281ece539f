//! The verification suite on persistence forecasts of synthetic storms:
//! CSI and FSS per lead, ensemble CRPS, Taylor statistics and the radially
//! averaged power spectrum.
//!
//! ```text
//! cargo run --example verify
//! ```

use dtca::data::{gen_synthetic, BlobParams};
use dtca::metrics::{EvalConfig, ForecastCase, MetricsReport};

fn main() -> dtca::Result<()> {
    let params = BlobParams::default();
    let cases = (0..32)
        .map(|i| {
            let seq = gen_synthetic(&params, 6, 32, 32, 500 + i)?;
            Ok(ForecastCase {
                members: vec![seq.persistence(2, 4)?],
                truth: seq.window(2, 4)?,
            })
        })
        .collect::<dtca::Result<Vec<_>>>()?;
    let cfg = EvalConfig::default();
    let report = MetricsReport::evaluate(&cases, &cfg)?;

    println!("persistence over {} cases", report.cases);
    print!("lead");
    for t in &report.thresholds {
        print!("  CSI@{t:<5} FSS@{t:<5}");
    }
    println!("  CRPS");
    for l in 0..report.leads() {
        print!("{:4}", l + 1);
        for k in 0..report.thresholds.len() {
            print!("  {:9.4} {:9.4}", report.csi[k][l], report.fss[k][l]);
        }
        println!("  {:.4}", report.crps[l]);
    }
    if let Some(t) = &report.taylor {
        println!("Taylor: corr {:.4}, std ratio {:.4}, centered RMS {:.4}", t.corr, t.std_ratio, t.centered_rms);
    }
    if let (Some(p), Some(o)) = (&report.spectrum_pred, &report.spectrum_obs) {
        println!("wavelength(px)  power(forecast)  power(observed)");
        for k in 1..p.power.len() {
            if p.count[k] > 0 {
                println!("{:14.2}  {:15.4e}  {:15.4e}", p.wavelength(k), p.power[k], o.power[k]);
            }
        }
    }
    Ok(())
}
