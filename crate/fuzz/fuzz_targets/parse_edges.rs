#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Must return Ok or Err, never panic, on arbitrary edge lists.
        let _ = dmsg_core::graph::parse_edges(text);
    }
});
