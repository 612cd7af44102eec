//! Small reference databases used by tests, examples and the demo commands.

use std::collections::BTreeMap;

use crate::crypto::{Grouping, SchemeParams};
use crate::model::{PlainDatabase, Record};

/// Five-row staff table with two fields and two groups per field.
pub const STAFF_ROWS: [(&str, &str); 5] = [("Alice", "27"), ("Anna", "30"), ("Bob", "27"), ("Bill", "25"), ("Bob", "33")];

pub fn staff_params() -> SchemeParams {
    let table: BTreeMap<String, u64> = [("Alice", 1), ("Anna", 1), ("Bob", 2), ("Bill", 2), ("25", 1), ("27", 1), ("30", 2), ("33", 2)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    SchemeParams::new(2).with_group_bits(2).with_grouping(Grouping::Table { table })
}

pub fn staff_db(params: &SchemeParams) -> PlainDatabase {
    let rows = STAFF_ROWS
        .iter()
        .map(|(n, a)| Record::from_strs(&[n, a], params).expect("fixture fits"))
        .collect();
    PlainDatabase::new(vec!["Name".into(), "Age".into()], rows)
}
