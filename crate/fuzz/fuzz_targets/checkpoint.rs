#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Must return Ok or Err, never panic or over-allocate, on arbitrary
        // checkpoint text (including forged matrix headers).
        let _ = dmsg_core::model::parse_checkpoint(text);
    }
});
