#![no_main]

use libfuzzer_sys::fuzz_target;
use panelfx::ingest::{parse_covariate_csv, CovariateSpec};

fuzz_target!(|data: &[u8]| {
    let spec = CovariateSpec {
        covariates: vec!["poverty_rate".into(), "pop_density".into()],
        ..CovariateSpec::default()
    };
    if let Ok(rows) = parse_covariate_csv(data, "fuzz", &spec) {
        let _ = rows.populations();
        if let Ok((table, _)) = rows.into_table() {
            assert!(table.normalized.iter().flatten().all(|v| v.is_finite()));
        }
    }
});
