//! The weights reader must never panic on hostile bytes; the format has one
//! canonical encoding, so accepted files re-serialize byte-identically.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(tensors) = iris_traverse::decoders::weights_io::parse_tensors(data) else {
        return;
    };
    let mut buf = Vec::new();
    iris_traverse::decoders::weights_io::write_tensors(&mut buf, &tensors)
        .expect("accepted tensors serialize");
    assert_eq!(buf, data, "accepted weights files have one canonical form");
});
