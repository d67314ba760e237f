#![no_main]

use dmsg_core::trainer::AccuracyMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(matrix) = AccuracyMatrix::from_csv(text) {
        // Anything that parses must survive the render/re-parse roundtrip.
        let rendered = matrix.to_csv();
        let again = AccuracyMatrix::from_csv(&rendered).expect("rendered csv must re-parse");
        assert_eq!(rendered, again.to_csv(), "roundtrip must be stable");
    }
});
