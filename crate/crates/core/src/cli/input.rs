use std::collections::HashMap;
use std::path::Path;

use super::CliError;
use crate::data::{validate, Dataset, RawRecord, WeightVector};

/// Parsed input file: the dataset plus the covariate column names, error-prone
/// first.
#[derive(Debug, Clone)]
pub struct Input {
    pub data: Dataset,
    pub x_names: Vec<String>,
    pub u_names: Vec<String>,
}

impl Input {
    pub fn covariate_names(&self) -> Vec<String> {
        self.x_names.iter().chain(&self.u_names).cloned().collect()
    }
}

fn field(path: &Path, line: u64, msg: impl Into<String>) -> CliError {
    CliError::Input {
        path: path.display().to_string(),
        line: Some(line),
        message: msg.into(),
    }
}

fn parse_f64(path: &Path, line: u64, col: &str, raw: &str) -> Result<f64, CliError> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| field(path, line, format!("column {col}: cannot parse {raw:?} as a number")))
}

/// Read the long-format subject file: `id, treat, [outcome], rep, x_*, u_*`,
/// one row per replicate.
pub fn read_dataset(path: &Path) -> Result<Input, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| CliError::Input {
        path: path.display().to_string(),
        line: Some(1),
        message: format!("missing required column {name:?}"),
    };
    let id_col = find("id").ok_or_else(|| missing("id"))?;
    let treat_col = find("treat").ok_or_else(|| missing("treat"))?;
    let rep_col = find("rep").ok_or_else(|| missing("rep"))?;
    let outcome_col = find("outcome");
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| headers[c].starts_with("x_")).collect();
    let u_cols: Vec<usize> = (0..headers.len()).filter(|&c| headers[c].starts_with("u_")).collect();
    if x_cols.is_empty() && u_cols.is_empty() {
        return Err(missing("x_* or u_*"));
    }
    for (c, h) in headers.iter().enumerate() {
        let known = [Some(id_col), Some(treat_col), Some(rep_col), outcome_col].contains(&Some(c));
        if !known && !x_cols.contains(&c) && !u_cols.contains(&c) {
            return Err(CliError::Input {
                path: path.display().to_string(),
                line: Some(1),
                message: format!("unexpected column {h:?}"),
            });
        }
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::io(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |c: usize| row.get(c).unwrap_or("");
        let id = get(id_col).to_string();
        if id.is_empty() {
            return Err(field(path, line, "empty id"));
        }
        let treat = parse_f64(path, line, "treat", get(treat_col))?;
        let rep: usize = get(rep_col)
            .parse()
            .ok()
            .filter(|r| *r >= 1)
            .ok_or_else(|| field(path, line, format!("rep must be an integer >= 1, got {:?}", get(rep_col))))?;
        let outcome = match outcome_col.map(get) {
            None | Some("") => None,
            Some(raw) => Some(parse_f64(path, line, "outcome", raw)?),
        };
        let x = x_cols
            .iter()
            .map(|&c| parse_f64(path, line, &headers[c], get(c)))
            .collect::<Result<Vec<_>, _>>()?;
        let u = u_cols
            .iter()
            .map(|&c| parse_f64(path, line, &headers[c], get(c)))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(bad) = x.iter().chain(&u).chain(outcome.iter()).find(|v| !v.is_finite()) {
            return Err(field(path, line, format!("non-finite value {bad}")));
        }
        records.push(RawRecord {
            id,
            treat,
            outcome,
            rep,
            x,
            u,
        });
    }
    if records.is_empty() {
        return Err(CliError::Input {
            path: path.display().to_string(),
            line: None,
            message: "no data rows".into(),
        });
    }
    let data = validate(&records)?;
    Ok(Input {
        data,
        x_names: x_cols.iter().map(|&c| headers[c].to_string()).collect(),
        u_names: u_cols.iter().map(|&c| headers[c].to_string()).collect(),
    })
}

/// Write control weights as `id,weight`.
pub fn write_weights(path: &Path, weights: &WeightVector, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(["id", "weight"]).map_err(|e| CliError::io(path, e))?;
    for (&row, wt) in weights.control_rows().iter().zip(weights.weights()) {
        w.write_record([data.subject(row).id.as_str(), &wt.to_string()])
            .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Read `id,weight` rows covering exactly the control subjects of `data`.
/// The weights must already sum to one.
pub fn read_weights(path: &Path, data: &Dataset) -> Result<WeightVector, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let id_col = headers.iter().position(|h| h == "id");
    let w_col = headers.iter().position(|h| h == "weight");
    let (Some(id_col), Some(w_col)) = (id_col, w_col) else {
        return Err(CliError::Input {
            path: path.display().to_string(),
            line: Some(1),
            message: "weights file needs columns id and weight".into(),
        });
    };
    let row_of: HashMap<&str, usize> = data
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut given: HashMap<usize, f64> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::io(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row.get(id_col).unwrap_or("");
        let &i = row_of
            .get(id)
            .ok_or_else(|| field(path, line, format!("unknown subject id {id:?}")))?;
        if data.subject(i).treated {
            return Err(field(path, line, format!("subject {id:?} is treated; weights apply to controls")));
        }
        let wt = parse_f64(path, line, "weight", row.get(w_col).unwrap_or(""))?;
        if given.insert(i, wt).is_some() {
            return Err(field(path, line, format!("duplicate subject id {id:?}")));
        }
    }
    let ctrl = data.control_indices().to_vec();
    let weights = ctrl
        .iter()
        .map(|i| {
            given.get(i).copied().ok_or_else(|| CliError::Input {
                path: path.display().to_string(),
                line: None,
                message: format!("no weight for control subject {:?}", data.subject(*i).id),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WeightVector::new(ctrl, weights)?)
}
