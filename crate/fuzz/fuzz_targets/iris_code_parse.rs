//! The code-file reader must never panic on hostile bytes; accepted codes
//! re-serialize byte-identically (padding bits are canonical) and can be
//! fed to the matcher without crashing it.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(code) = iris_traverse::identity::parse_code(data, "fuzz") else {
        return;
    };
    let mut buf = Vec::new();
    iris_traverse::identity::write_code(&mut buf, &code).expect("accepted code serializes");
    assert_eq!(buf, data, "accepted code files have one canonical form");

    // A code always matches itself wherever it has jointly valid bits; a
    // fully invalid code is a domain error, not a crash.
    if let Ok(hd) = iris_traverse::identity::hamming(&code, &code, 1) {
        assert_eq!(hd, 0.0, "self-distance at shift 0 must be zero");
    }
});
