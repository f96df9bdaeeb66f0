//! State flip at a third-order EP: from any of the three exchanging states,
//! the surviving population ends in the same one. With three extra
//! spectator resonances, it ends in the most slowly decaying spectator
//! instead.

use eploop::dynamics::{EvolveOptions, LoopSystem};
use eploop::{MatrixFamily, ParameterLoop, SpectralOptions};
use num_complex::Complex64 as C64;

fn basis(k: usize, n: usize) -> Vec<C64> {
    (0..n)
        .map(|i| C64::new(if i == k { 1.0 } else { 0.0 }, 0.0))
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = EvolveOptions {
        n_samples: 400,
        ..Default::default()
    };
    let lp = ParameterLoop::circle((0.0, 0.0), 0.5, 30.0).with_steps(256);

    println!("three states, bare EP3:");
    let family = MatrixFamily::ep3_companion();
    let sys = LoopSystem::prepare(&family, &lp, None, SpectralOptions::default())?;
    for start in 0..3 {
        let res = sys.evolve_full(&basis(start, 3), &opts)?;
        let w = res.final_weighted();
        println!(
            "  start {start}: final weighted = ({:.3}, {:.3}, {:.3}) -> dominant {}",
            w[0],
            w[1],
            w[2],
            res.final_dominant()
        );
    }

    println!("\nsix states, EP3 triple plus spectators:");
    let family = MatrixFamily::ep3_with_spectators(0.05, [-0.08, -0.01, -0.2]);
    let sys = LoopSystem::prepare(&family, &lp, None, SpectralOptions::default())?;
    println!("  signature {}", sys.track.signature.cycle_notation());
    let triple: Vec<usize> = (0..6).filter(|&i| sys.track.signature.apply(i) != i).collect();
    // the spectator with the smallest decay rate wins
    let slowest = (0..6)
        .filter(|i| !triple.contains(i))
        .min_by(|&a, &b| {
            let ia = sys.track.samples[0].frame.energies[a].im.abs();
            let ib = sys.track.samples[0].frame.energies[b].im.abs();
            ia.total_cmp(&ib)
        })
        .unwrap();
    for &start in &triple {
        let res = sys.evolve_full(&basis(start, 6), &opts)?;
        let dom = res.final_dominant();
        println!(
            "  start {start}: dominant {} (weighted {:.3}){}",
            dom,
            res.final_weighted()[dom],
            if dom == slowest {
                "  <- slowest-decaying spectator"
            } else {
                ""
            }
        );
    }
    Ok(())
}
