//! Config parsing must never panic on arbitrary text, and whatever it
//! accepts must satisfy the validated invariants (bounded grid, expandable
//! cell list).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };

    if let Ok(run) = iris_traverse::config::parse_single(text) {
        // Parsing implies validity; re-validating must agree.
        run.validate().expect("parsed run stays valid");
    }

    if let Ok(plan) = iris_traverse::config::parse_plan(text) {
        plan.validate().expect("parsed plan stays valid");
        let cells = plan.cell_count();
        assert!(
            (1..=iris_traverse::config::MAX_PLAN_CELLS).contains(&cells),
            "validated plan expands to {cells} cells"
        );
        let expanded = iris_traverse::harness::expand_cells(&plan);
        assert_eq!(expanded.len(), cells, "expansion matches the advertised count");
    }
});
