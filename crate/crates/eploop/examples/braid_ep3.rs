//! Braid structure of a third-order exceptional point: one circle permutes
//! all three eigenvalues cyclically; only three consecutive circles close
//! every eigenvalue curve.

use eploop::spectral::continue_loop;
use eploop::{MatrixFamily, ParameterLoop, SpectralOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family = MatrixFamily::ep3_companion();
    let opts = SpectralOptions::default();

    for turns in [1, 2, 3] {
        let lp = ParameterLoop::circle((0.0, 0.0), 0.5, 30.0)
            .with_steps(256)
            .with_turns(turns);
        let track = continue_loop(&family, &lp, None, &opts)?;
        println!(
            "{turns} turn(s): signature {} (longest cycle {})",
            track.signature.cycle_notation(),
            track.signature.max_cycle_len()
        );
    }

    // reversing the traversal inverts the cycle
    let lp = ParameterLoop::circle((0.0, 0.0), 0.5, 30.0)
        .with_steps(256)
        .with_direction(-1);
    let track = continue_loop(&family, &lp, None, &opts)?;
    println!(
        "reversed direction: signature {}",
        track.signature.cycle_notation()
    );
    Ok(())
}
