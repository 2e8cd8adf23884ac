#![no_main]

use libfuzzer_sys::fuzz_target;
use safeopt::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must also pass validation again unchanged.
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        cfg.validate().expect("accepted config failed revalidation");
    }
});
