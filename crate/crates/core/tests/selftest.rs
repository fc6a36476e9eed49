use lad::selftest::{run_all, toy_problem, END_TO_END_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_check_passes_within_its_tolerance() {
    let t = std::time::Instant::now();
    let checks = run_all(0).unwrap();
    for c in &checks {
        println!("{:<50} {:.3e} <= {:.0e} {}", c.name, c.measured, c.tolerance, c.passed);
    }
    assert!(checks.iter().all(|c| c.passed));
    assert!(checks.iter().all(|c| c.tolerance <= END_TO_END_TOLERANCE));
    assert_eq!(checks.iter().filter(|c| c.name.starts_with("end-to-end")).count(), 1);
    assert!(checks.iter().filter(|c| c.name.starts_with("end-to-end")).all(|c| c.tolerance == END_TO_END_TOLERANCE));
    assert!(checks.iter().filter(|c| c.name.starts_with("op ")).all(|c| c.tolerance == OP_TOLERANCE));
    assert!(t.elapsed().as_secs() < 120, "took {:?}", t.elapsed());
}

#[test]
fn toy_house_has_five_nodes() {
    let toy = toy_problem(0).unwrap();
    assert_eq!(toy.house.nodes.len(), 5);
    assert!(toy.episode.gold_path.len() >= 2);
}
