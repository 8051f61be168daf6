//! The PGM reader must never panic on hostile bytes, and anything it
//! accepts must survive a write/re-parse cycle up to 8-bit quantization.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = iris_traverse::imageio::parse_pgm(data) else {
        return;
    };
    let mut buf = Vec::new();
    iris_traverse::imageio::write_pgm(&mut buf, &img).expect("accepted image serializes");
    let back = iris_traverse::imageio::parse_pgm(&buf).expect("own output parses");
    assert_eq!(back.shape(), img.shape(), "shape survives the roundtrip");
    for (a, b) in back.data().iter().zip(img.data()) {
        // The writer quantizes to 255 levels; inputs with other maxvals may
        // shift by up to half a level.
        assert!(
            (a - b).abs() <= 0.5 / 255.0 + 1e-12,
            "pixel drifted beyond quantization: {a} vs {b}"
        );
    }
});
