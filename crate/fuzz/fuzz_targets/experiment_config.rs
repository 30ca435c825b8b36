#![no_main]

use heatflow::experiment::ExperimentConfig;
use heatflow::train::FlgpConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        if cfg.validate().is_ok() {
            for &method in &cfg.methods {
                let _ = cfg.method_config(method, cfg.seed);
            }
        }
    }
    if let Ok(flgp) = serde_json::from_str::<FlgpConfig>(text) {
        let _ = flgp.validate();
    }
});
