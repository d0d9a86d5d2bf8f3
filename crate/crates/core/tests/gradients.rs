use evplug::gradcheck;

#[test]
fn backward_passes_match_central_differences() {
    for check in gradcheck::check_all(100, 200) {
        println!("{:<24} probes {:>3}  max rel err {:.2e}  ({})", check.name, check.probes, check.max_rel_err, check.worst);
        assert!(check.max_rel_err < 1e-4, "{}: {}", check.name, check.worst);
    }
}

#[test]
fn other_seeds_agree() {
    for seed in [1, 2, 3] {
        let e = gradcheck::check_eformer(seed, 100);
        assert!(e.max_rel_err < 1e-4, "{}", e.worst);
    }
}
