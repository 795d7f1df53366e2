#![no_main]

use libfuzzer_sys::fuzz_target;
use panelfx::PanelDataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(panel) = serde_json::from_slice::<PanelDataset>(data) {
        if let Ok(panel) = panel.validated() {
            for i in 0..panel.n_units() {
                assert_eq!(panel.counts(i).len(), panel.dates().len());
            }
        }
    }
});
