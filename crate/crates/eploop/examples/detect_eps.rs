//! Locate exceptional points by recursive loop bisection: compute the
//! permutation signature of a rectangle's boundary and split while it stays
//! non-trivial.

use eploop::spectral::{detect_ep, DetectOptions, Rect};
use eploop::{MatrixFamily, SpectralOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sopts = SpectralOptions::default();
    let dopts = DetectOptions::default();

    let canonical = MatrixFamily::canonical_ep2();
    let out = detect_ep(&canonical, Rect::new(-0.5, 0.5, 0.5, 1.5), &dopts, &sopts)?;
    println!("canonical EP2 model, rectangle [-0.5,0.5]x[0.5,1.5]:");
    for ep in &out.eps {
        println!("  EP at ({:.9}, {:.9}), order {}", ep.point.p1, ep.point.p2, ep.order);
    }

    let companion = MatrixFamily::ep3_companion();
    let out = detect_ep(&companion, Rect::new(-0.4, 0.4, -0.4, 0.4), &dopts, &sopts)?;
    println!("EP3 companion model, rectangle [-0.4,0.4]x[-0.4,0.4]:");
    for ep in &out.eps {
        println!("  EP at ({:.9}, {:.9}), order {}", ep.point.p1, ep.point.p2, ep.order);
    }

    let empty = detect_ep(&canonical, Rect::new(0.2, 0.6, 0.1, 0.5), &dopts, &sopts)?;
    println!(
        "rectangle without an EP: {} found, {} undecided",
        empty.eps.len(),
        empty.undecided.len()
    );
    Ok(())
}
