#![no_main]

use libfuzzer_sys::fuzz_target;
use safeopt::record::ExperimentRecord;

const JSON: &str = include_str!("../fixtures/record.json");

fuzz_target!(|data: &[u8]| {
    let Ok(csv) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rec) = ExperimentRecord::from_parts(JSON, csv, None) else {
        return;
    };
    let emitted = rec.to_csv().unwrap();
    let again = ExperimentRecord::from_parts(JSON, &emitted, None).expect("emitted CSV does not parse");
    assert_eq!(again.to_csv().unwrap(), emitted);
});
