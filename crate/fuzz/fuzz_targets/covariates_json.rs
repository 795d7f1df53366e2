#![no_main]

use libfuzzer_sys::fuzz_target;
use panelfx::ingest::CovariateTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = serde_json::from_slice::<CovariateTable>(data) {
        if let Ok(table) = table.validated() {
            let names = table.covariate_names.clone();
            for u in table.unit_ids.clone() {
                let _ = table.column(&u, &names);
            }
        }
    }
});
