//! Finite-difference audit of renderer and loss gradients.
//!
//! cargo run --release --example gradient_audit -- [cases] [seed]

use std::collections::BTreeMap;

use unisplat::gradcheck::{run_all, REL_TOL};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cases = args.get(1).map_or(20, |s| s.parse().expect("cases"));
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let mut by_kind: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for r in run_all(cases, seed) {
        let e = by_kind.entry(r.kind).or_default();
        e.0 += r.passed as usize;
        e.1 += r.checked;
        e.2 = e.2.max(r.max_rel_err);
    }
    for (kind, (passed, checked, worst)) in by_kind {
        println!("{kind:>10}: {passed}/{cases} cases, {checked} partials, worst {worst:.2e} (tol {REL_TOL:.0e})");
    }
}
