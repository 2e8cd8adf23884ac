#![no_main]

use libfuzzer_sys::fuzz_target;
use safeopt::record::ExperimentRecord;

const CSV: &str = include_str!("../fixtures/record.csv");

fuzz_target!(|data: &[u8]| {
    let Ok(json) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rec) = ExperimentRecord::from_parts(json, CSV, None) {
        roundtrip(&rec);
    }
});

fn roundtrip(rec: &ExperimentRecord) {
    let (json, csv) = (rec.to_json().unwrap(), rec.to_csv().unwrap());
    let again = ExperimentRecord::from_parts(&json, &csv, None).expect("emitted record does not parse");
    assert_eq!(again.to_json().unwrap(), json);
    assert_eq!(again.to_csv().unwrap(), csv);
}
