use pointsup::gradcheck::{self, MIN_TRIALS};

#[test]
fn every_backward_pass_matches_finite_differences() {
    let reports = gradcheck::run_all(7, 60);
    for r in &reports {
        println!("{r}");
    }
    assert_eq!(reports.len(), 7);
    for r in &reports {
        assert!(r.ok(), "{r}");
        assert!(r.passed >= MIN_TRIALS);
    }
}

#[test]
fn a_wrong_gradient_is_caught() {
    // a gradient off by 1e-4 relative must fail the tolerance
    let g = 1.0;
    assert!(gradcheck::rel_err(g * (1.0 + 1e-4), g) > gradcheck::TOL);
    assert!(gradcheck::rel_err(g, g) == 0.0);
}
