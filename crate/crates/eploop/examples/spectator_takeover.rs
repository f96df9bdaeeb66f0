//! Nearby long-lived resonances change the flip outcome: with two weakly
//! decaying spectators coupled to the exchanging EP2 pair, the surviving
//! population deserts the pair entirely.

use eploop::dynamics::{EvolveOptions, LoopSystem};
use eploop::{MatrixFamily, ParameterLoop, SpectralOptions};
use num_complex::Complex64 as C64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family = MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]);
    let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 30.0).with_steps(256);
    let sys = LoopSystem::prepare(&family, &lp, None, SpectralOptions::default())?;
    println!("4-state family, signature {}", sys.track.signature.cycle_notation());

    // identify the exchanging pair from the signature
    let moved: Vec<usize> = (0..4).filter(|&i| sys.track.signature.apply(i) != i).collect();
    println!("exchanging pair: states {moved:?}; the others are spectators\n");

    let opts = EvolveOptions {
        n_samples: 400,
        ..Default::default()
    };
    for &start in &moved {
        let a0: Vec<C64> = (0..4)
            .map(|i| C64::new(if i == start { 1.0 } else { 0.0 }, 0.0))
            .collect();
        let res = sys.evolve_full(&a0, &opts)?;
        let w = res.final_weighted();
        println!(
            "start in pair state {start}: final weighted = ({:.3}, {:.3}, {:.3}, {:.3}) -> dominant {}{}",
            w[0],
            w[1],
            w[2],
            w[3],
            res.final_dominant(),
            if moved.contains(&res.final_dominant()) {
                ""
            } else {
                "  (a spectator)"
            }
        );
    }
    Ok(())
}
