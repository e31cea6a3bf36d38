//! Deterministic CSV/JSON rendering shared by all subcommands. CSV output
//! starts with one version header line; everything after it is
//! byte-identical across identical invocations.

use serde_json::{json, Value};

pub const VERSION_HEADER: &str = concat!("# moeperf v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    U64(u64),
    I64(i64),
    /// Value with a fixed number of decimals in CSV.
    F64(f64, usize),
    Str(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::U64(v) => v.to_string(),
            Cell::I64(v) => v.to_string(),
            Cell::F64(v, places) => format!("{v:.places$}"),
            Cell::Str(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::U64(v) => json!(v),
            Cell::I64(v) => json!(v),
            Cell::F64(v, places) => {
                // round to the same precision the CSV shows
                let factor = 10f64.powi(*places as i32);
                json!((v * factor).round() / factor)
            }
            Cell::Str(s) => json!(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub comments: Vec<String>,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Report {
            comments: Vec::new(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, text: impl Into<String>) {
        self.comments.push(text.into());
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(VERSION_HEADER);
        out.push('\n');
        for c in &self.comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj: serde_json::Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(col, cell)| (col.to_string(), cell.json()))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        let doc = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "comments": self.comments,
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("report serialization cannot fail");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_determinism() {
        let mut r = Report::new(vec!["a", "b"]);
        r.comment("note");
        r.row(vec![Cell::U64(1), Cell::F64(0.5, 3)]);
        let text = r.render(Format::Csv);
        assert_eq!(
            text,
            format!("{VERSION_HEADER}\n# note\na,b\n1,0.500\n")
        );
        assert_eq!(text, r.render(Format::Csv));
    }

    #[test]
    fn json_rows_carry_column_names() {
        let mut r = Report::new(vec!["a", "b"]);
        r.row(vec![Cell::Str("x".into()), Cell::I64(-2)]);
        let parsed: Value = serde_json::from_str(&r.render(Format::Json)).unwrap();
        assert_eq!(parsed["rows"][0]["a"], "x");
        assert_eq!(parsed["rows"][0]["b"], -2);
    }
}
