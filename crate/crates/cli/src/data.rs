//! Numeric CSV ingestion.

use std::fmt;
use std::path::Path;

use wemix::DataMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelection {
    All,
    /// 1-based column positions.
    Positions(Vec<usize>),
    Names(Vec<String>),
}

impl ColumnSelection {
    /// `1,3,4` selects by position; anything non-numeric selects by header name.
    pub fn parse(spec: &str) -> Result<Self, InputError> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if parts.is_empty() {
            return Err(InputError("empty column selection".into()));
        }
        if parts.iter().all(|p| p.parse::<usize>().is_ok()) {
            let pos: Vec<usize> = parts.iter().map(|p| p.parse().unwrap()).collect();
            if pos.contains(&0) {
                return Err(InputError("column positions are 1-based".into()));
            }
            Ok(ColumnSelection::Positions(pos))
        } else {
            Ok(ColumnSelection::Names(parts.iter().map(|s| s.to_string()).collect()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub header: bool,
    pub columns: ColumnSelection,
}

pub fn parse_delimiter(s: &str) -> Result<u8, InputError> {
    match s {
        "," | "comma" => Ok(b','),
        ";" | "semicolon" => Ok(b';'),
        other => Err(InputError(format!("unsupported delimiter '{other}', expected ',' or ';'"))),
    }
}

/// Reads a numeric matrix. Errors carry the 1-based line number of the
/// offending record.
pub fn read_csv(path: &Path, opts: &CsvOptions) -> Result<DataMatrix, InputError> {
    let file = std::fs::File::open(path).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    read_csv_from(file, opts)
}

pub fn read_csv_from<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<DataMatrix, InputError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Option<Vec<String>> = if opts.header {
        let h = rdr.headers().map_err(|e| InputError(format!("line 1: {e}")))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut selected: Option<Vec<usize>> = match (&opts.columns, &header) {
        (ColumnSelection::All, _) => None,
        (ColumnSelection::Positions(p), _) => Some(p.iter().map(|c| c - 1).collect()),
        (ColumnSelection::Names(names), Some(h)) => Some(
            names
                .iter()
                .map(|n| {
                    h.iter()
                        .position(|x| x == n)
                        .ok_or_else(|| InputError(format!("no column named '{n}' in the header")))
                })
                .collect::<Result<_, _>>()?,
        ),
        (ColumnSelection::Names(_), None) => {
            return Err(InputError("selecting columns by name needs --header".into()));
        }
    };
    let mut values = Vec::new();
    let mut n = 0;
    let mut width: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            InputError(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if selected.is_none() {
            selected = Some((0..record.len()).collect());
            width = Some(record.len());
        }
        if let Some(w) = width {
            if record.len() != w {
                return Err(InputError(format!("line {line}: expected {w} fields, found {}", record.len())));
            }
        }
        let cols = selected.as_ref().expect("set above");
        for &c in cols.iter() {
            let cell = record
                .get(c)
                .ok_or_else(|| InputError(format!("line {line}: missing column {}", c + 1)))?;
            let v: f64 = cell
                .parse()
                .map_err(|_| InputError(format!("line {line}, column {}: '{cell}' is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(InputError(format!("line {line}, column {}: non-finite value '{cell}'", c + 1)));
            }
            values.push(v);
        }
        n += 1;
    }
    let p = selected.map_or(0, |c| c.len());
    if n == 0 || p == 0 {
        return Err(InputError("no data rows".into()));
    }
    DataMatrix::new(n, p, values).map_err(|e| InputError(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(delimiter: u8, header: bool, columns: ColumnSelection) -> CsvOptions {
        CsvOptions { delimiter, header, columns }
    }

    #[test]
    fn reads_semicolons_and_selects_columns() {
        let text = "a;b;c\n1;2;3\n4;5;6\n";
        let m = read_csv_from(text.as_bytes(), &opts(b';', true, ColumnSelection::parse("c,a").unwrap())).unwrap();
        assert_eq!(m.values(), &[3.0, 1.0, 6.0, 4.0]);
        let m = read_csv_from(text.as_bytes(), &opts(b';', true, ColumnSelection::parse("2").unwrap())).unwrap();
        assert_eq!(m.values(), &[2.0, 5.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = read_csv_from("1,2\n3,x\n".as_bytes(), &opts(b',', false, ColumnSelection::All)).unwrap_err();
        assert!(err.0.starts_with("line 2"), "{err}");
        let err = read_csv_from("1,2\n3,4\nNaN,1\n".as_bytes(), &opts(b',', false, ColumnSelection::All)).unwrap_err();
        assert!(err.0.starts_with("line 3") && err.0.contains("non-finite"), "{err}");
        let err = read_csv_from("h1,h2\n1,2\n3\n".as_bytes(), &opts(b',', true, ColumnSelection::All)).unwrap_err();
        assert!(err.0.starts_with("line 3"), "{err}");
    }

    #[test]
    fn quoted_fields_and_no_silent_delimiter_guess() {
        let m = read_csv_from("\"1.5\",\"2\"\n".as_bytes(), &opts(b',', false, ColumnSelection::All)).unwrap();
        assert_eq!(m.values(), &[1.5, 2.0]);
        assert!(read_csv_from("1;2\n".as_bytes(), &opts(b',', false, ColumnSelection::All)).is_err());
        assert!(parse_delimiter("\t").is_err());
    }
}
