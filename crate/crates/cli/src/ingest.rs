//! One-column CSV input.

use std::io::Read;
use std::path::Path;

use dp_sumquery::data::Dataset;

use crate::error::CliError;

/// Reads one non-negative number per row. A first row that does not parse
/// as a number is taken as a header.
pub fn ingest_csv(path: &Path) -> Result<Dataset, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_values(file, &path.display().to_string())
}

pub fn parse_values(input: impl Read, source: &str) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut values = Vec::new();
    let mut first = true;
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Data(format!("{source}: {e}")))?;
        let line = row.position().map_or(0, |p| p.line());
        let is_header = std::mem::replace(&mut first, false);
        if row.len() != 1 {
            if row.iter().all(str::is_empty) {
                continue;
            }
            return Err(CliError::Data(format!(
                "{source}: line {line}: expected one value, found {}",
                row.len()
            )));
        }
        let field = &row[0];
        let value: f64 = match field.parse() {
            Ok(v) => v,
            Err(_) if is_header => continue,
            Err(_) => {
                return Err(CliError::Data(format!(
                    "{source}: line {line}: `{field}` is not a number"
                )))
            }
        };
        if !value.is_finite() {
            return Err(CliError::Data(format!(
                "{source}: line {line}: `{field}` is not finite"
            )));
        }
        if value < 0.0 {
            return Err(CliError::Data(format!("{source}: line {line}: negative value {value}")));
        }
        values.push(value);
    }
    Dataset::new(values).map_err(|e| CliError::Data(format!("{source}: {e}")))
}
