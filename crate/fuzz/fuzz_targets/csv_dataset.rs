#![no_main]

use heatflow::data::{parse_csv_dataset, write_csv_dataset, Task};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&sel, body)) = data.split_first() else { return };
    let task = if sel & 1 == 0 { Task::Regression } else { Task::BinaryClassification };
    let Ok(ds) = parse_csv_dataset(body, task) else { return };
    assert!(ds.m() <= ds.n());
    assert_eq!(ds.labels().len(), ds.m());

    let mut buf = Vec::new();
    write_csv_dataset(&ds, &mut buf).expect("write parsed dataset");
    let again = parse_csv_dataset(buf.as_slice(), task).expect("reparse written dataset");
    assert_eq!(again.n(), ds.n());
    assert_eq!(again.labels(), ds.labels());
    for (a, b) in again.cloud.rows().zip(ds.cloud.rows()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (*x == 0.0 && *y == 0.0)));
    }
});
