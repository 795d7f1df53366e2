#![no_main]

use libfuzzer_sys::fuzz_target;
use panelfx::ingest::parse_override_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_override_csv(data, "fuzz") {
        assert!(rows.iter().all(|r| r.poverty_rate.is_finite()));
    }
});
