//! Walks through the Santa's hat: the (a)-fault at the apex, the two local
//! components there, a fault scan along the circle and the refinement that
//! removes the fault.

use nalgebra::DVector;
use stratcheck::fixtures;
use stratcheck::refine;
use stratcheck::whitney::{self, CheckOptions, Condition};

fn main() -> stratcheck::Result<()> {
    let set = fixtures::santa_hat_set();
    let pair = set.pair("X,Y")?;
    let opts = CheckOptions::default();

    for y in [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]] {
        let y = DVector::from_row_slice(&y);
        let v = whitney::check_a(&pair, &y, &opts)?;
        println!("check_a at {:?}: {} (score {:.4})", y.as_slice(), v.status.as_str(), v.score);
    }

    let apex = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
    let comps = whitney::local_components(&pair, &apex, opts.seed)?;
    let essential = whitney::essential_flags(&pair, &comps, opts.seed)?;
    println!("local components at the apex: {} (essential {:?})", comps.components.len(), essential);
    let sing = whitney::sing_a_kaloshin(&pair, &apex, &opts)?;
    println!("essential-only check at the apex: {}", sing.verdict.status.as_str());

    let report = whitney::scan_pair(&pair, Condition::A, 64, &opts);
    println!(
        "scan: {} faults in {} cluster(s), fault fraction {:.4}",
        report.faults(),
        report.isolated_faults.len(),
        report.fault_fraction
    );

    let refined = refine::refine_until_regular(&pair, opts.tol, 3, opts.seed)?;
    println!("refinement: {} round(s), complete = {}", refined.iterations, refined.complete);
    for s in &refined.strata {
        println!("  {} (dim {})", s.name, s.dim());
    }
    Ok(())
}
