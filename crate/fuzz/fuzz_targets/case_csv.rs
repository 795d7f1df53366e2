#![no_main]

use libfuzzer_sys::fuzz_target;
use panelfx::ingest::{parse_case_csv, RepairPolicy};

fuzz_target!(|data: &[u8]| {
    for policy in [RepairPolicy::Clamp, RepairPolicy::Fail] {
        if let Ok(table) = parse_case_csv(data, "fuzz", "Arkansas", policy) {
            assert_eq!(table.units.len(), table.cumulative.len());
            for row in &table.cumulative {
                assert_eq!(row.len(), table.dates.len());
                // the clamp repair leaves every series non-decreasing
                if policy == RepairPolicy::Clamp {
                    assert!(row.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }
    }
});
