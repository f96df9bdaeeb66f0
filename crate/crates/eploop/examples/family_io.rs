//! The family file format: save a built-in model, reload it, and see the
//! validation diagnostics rejecting broken files.

use eploop::MatrixFamily;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::Path::new("target/example-out/family_io");
    std::fs::create_dir_all(dir)?;
    let path = dir.join("spectators.json");

    let mut family = MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]);
    family.set_meta(Some(serde_json::json!({
        "description": "EP2 pair with two weakly decaying spectators",
        "ep": { "p1": 0.0, "p2": 1.0 },
    })));
    family.save(&path)?;
    println!("saved {} ({} terms, dim {})", path.display(), family.terms().len(), family.dim());

    let back = MatrixFamily::load(&path)?;
    assert_eq!(back.dim(), family.dim());
    assert_eq!(back.terms()[0].matrix, family.terms()[0].matrix);
    println!("reloaded: bit-identical matrices, symmetric = {}", back.symmetric());

    // a metric that is not positive definite is rejected with a pointed error
    let bad = r#"{
        "dim": 2, "symmetric": false, "energy_scale": 1.0,
        "metric": [1.0, 2.0, 2.0, 1.0],
        "terms": [{ "e1": 0, "e2": 0, "re": [1.0, 0.0, 0.0, 1.0], "im": [0.0, 0.0, 0.0, 0.0] }]
    }"#;
    match MatrixFamily::from_json_str(bad) {
        Err(e) => println!("indefinite metric rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    // symmetry violations under the symmetric flag are diagnosed separately
    let asym = r#"{
        "dim": 2, "symmetric": true, "energy_scale": 1.0,
        "terms": [{ "e1": 1, "e2": 0, "re": [0.0, 1.0, 0.5, 0.0], "im": [0.0, 0.0, 0.0, 0.0] }]
    }"#;
    match MatrixFamily::from_json_str(asym) {
        Err(e) => println!("broken symmetry rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
