//! Simulate a small two-condition experiment, fit the PLMM and print the
//! condition effects and correlation-increase probabilities.
//!
//! cargo run --release -p cytomix-core --example quickstart

use cytomix_core::plmm::{corr_increase_probability, fixed_effect_summary, Parameterization, Plmm, PlmmPriors};
use cytomix_core::sampler::{run_chains, SamplerConfig};
use cytomix_core::simgen::{simulate_plmm, PlmmSimSettings};

fn main() -> cytomix_core::Result<()> {
    let mut settings = PlmmSimSettings::simple([vec![2.0, 1.5, 1.0], vec![2.5, 1.5, 1.0]], 6, 100);
    settings.sigma_cond = [vec![0.6; 3], vec![0.6; 3]];
    settings.sigma_donor = vec![0.3; 3];
    settings.omega_cond[1] = vec![1.0, 0.6, 0.0, 0.6, 1.0, 0.0, 0.0, 0.0, 1.0];
    let sim = simulate_plmm(&settings, 42)?;

    let model = Plmm::new(&sim.table, PlmmPriors::default(), Parameterization::NonCentered)?;
    let config = SamplerConfig { chains: 4, ..SamplerConfig::default() };
    let (inits, _) = model.initial_values(config.chains, config.seed);
    let (draws, diag) = run_chains(&model, &config, &inits, None)?;
    println!(
        "{} draws, max R-hat {:.3}, min ESS {:.0}",
        draws.n_draws(),
        diag.max_rhat().unwrap_or(f64::NAN),
        diag.min_ess().unwrap_or(f64::NAN)
    );

    let markers = model.markers().to_vec();
    for row in fixed_effect_summary(&draws, &markers)? {
        if row.quantity == "beta_2_minus_beta_1" {
            println!("{}: {:+.2} [{:+.2}, {:+.2}]", row.marker, row.median, row.q025, row.q975);
        }
    }
    let p = corr_increase_probability(&draws, &markers)?;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        println!("P(corr {}-{} higher under stimulation) = {:.2}", markers[a], markers[b], p.get(a, b));
    }
    Ok(())
}
