#![no_main]

use dmsg_core::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut cfg = TrainConfig::default();
    if cfg.apply_text(text, "fuzz").is_ok() {
        // Anything that parses must survive the render/re-parse roundtrip.
        let rendered = cfg.to_text();
        let mut again = TrainConfig::default();
        again
            .apply_text(&rendered, "roundtrip")
            .expect("rendered config must re-parse");
        assert_eq!(rendered, again.to_text(), "roundtrip must be stable");
    }
});
