#![allow(dead_code)]

use std::path::Path;

use covbal::data::Dataset;

pub fn write_csv(path: &Path, data: &Dataset) {
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["id".to_string(), "treat".into(), "outcome".into(), "rep".into()];
    header.extend((1..=data.p1()).map(|j| format!("x_{j}")));
    header.extend((1..=data.p2()).map(|j| format!("u_{j}")));
    w.write_record(&header).unwrap();
    for r in data.to_records() {
        let mut row = vec![
            r.id.clone(),
            r.treat.to_string(),
            r.outcome.map(|y| y.to_string()).unwrap_or_default(),
            r.rep.to_string(),
        ];
        row.extend(r.x.iter().chain(&r.u).map(f64::to_string));
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
}

pub fn schema() -> jsonschema::Validator {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schemas/result.schema.json")).unwrap();
    jsonschema::draft202012::new(&serde_json::from_str(&text).unwrap()).unwrap()
}

pub fn assert_valid(doc: &serde_json::Value) {
    let v = schema();
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}

pub fn example_csv() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/example.csv")
}
