//! Continue the two eigenvalues of the canonical EP2 model around a circle
//! enclosing the exceptional point at (0, 1) and watch them trade places.
//!
//! Writes the braid track to `target/example-out/braid_ep2/track.csv`.

use std::fs;

use eploop::experiments::write_track_csv;
use eploop::spectral::continue_loop;
use eploop::{MatrixFamily, ParameterLoop, SpectralOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family = MatrixFamily::canonical_ep2();
    let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 30.0).with_steps(256);
    let track = continue_loop(&family, &lp, None, &SpectralOptions::default())?;

    println!("loop around (0, 1), radius 0.1");
    println!("permutation signature: {}", track.signature.cycle_notation());
    println!("closure signs: {:?}", track.closure_signs);
    println!();
    println!("state energies at quarter turns (label order):");
    for quarter in 0..=4 {
        let s = &track.samples[quarter * lp.n_steps / 4];
        let energies: Vec<String> = s
            .frame
            .energies
            .iter()
            .map(|e| format!("{:+.4}{:+.4}i", e.re, e.im))
            .collect();
        println!("  φ = {:5.2}π : {}", s.phi / std::f64::consts::PI, energies.join("  "));
    }

    // A loop that stays away from the EP leaves the labels alone.
    let outside = ParameterLoop::circle((0.0, 0.5), 0.1, 30.0).with_steps(256);
    let t2 = continue_loop(&family, &outside, None, &SpectralOptions::default())?;
    println!();
    println!(
        "loop around (0, 0.5) (EP outside): signature {}",
        t2.signature.cycle_notation()
    );

    let dir = std::path::Path::new("target/example-out/braid_ep2");
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_track_csv(&track, &mut buf)?;
    fs::write(dir.join("track.csv"), buf)?;
    println!("\nwrote {}", dir.join("track.csv").display());
    Ok(())
}
