//! Two independent routes to the same dynamics: the instantaneous-basis
//! integration against the fixed-basis oracle, projected onto the
//! gauge-fixed frames.

use eploop::dynamics::{
    max_relative_coeff_deviation, max_weighted_deviation, reconstruct_state, EvolveOptions,
    LoopSystem,
};
use eploop::{MatrixFamily, ParameterLoop, SpectralOptions};
use num_complex::Complex64 as C64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family = MatrixFamily::ep3_companion();
    let lp = ParameterLoop::circle((0.0, 0.0), 0.5, 20.0).with_steps(256);
    let sys = LoopSystem::prepare(&family, &lp, None, SpectralOptions::default())?;
    let opts = EvolveOptions {
        n_samples: 100,
        ..Default::default()
    };

    let a0 = [
        C64::new(1.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
    ];
    let full = sys.evolve_full(&a0, &opts)?;

    // prepare the same physical state and integrate it without ever
    // diagonalizing along the way
    let psi0 = reconstruct_state(&sys.track.samples[0].frame, &a0);
    let oracle = sys.evolve_oracle(&psi0, &opts)?;

    println!(
        "instantaneous-basis RHS evaluations: {}, fixed-basis: {}",
        full.rhs_evals, oracle.result.rhs_evals
    );
    println!(
        "max deviation of weighted coefficients:  {:.3e}",
        max_weighted_deviation(&full, &oracle.result)
    );
    println!(
        "max relative deviation of coefficients:  {:.3e}",
        max_relative_coeff_deviation(&full, &oracle.result)
    );

    let w = full.final_weighted();
    println!(
        "final weighted populations: ({:.4}, {:.4}, {:.4})",
        w[0], w[1], w[2]
    );
    Ok(())
}
