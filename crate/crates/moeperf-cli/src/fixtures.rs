//! Bundled reference measurement tables and the rank-correlation metric
//! used to compare modeled curves against them.
//!
//! Fixtures ship as CSV with a small comment header recording provenance
//! and any rows flagged anomalous (the concurrency-192 measurements, where
//! the measuring engine's scheduler misbehaved). Parsing round-trips
//! byte-exactly through [`FixtureTable::to_csv_string`].

use std::fmt;
use std::str::FromStr;

use moeperf_core::{Error, Result};

const FIXTURE_HEADER: &str = "# moeperf fixture v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureId {
    /// Throughput vs input/output split, 2048 total tokens (v2-lite).
    Table6,
    /// Throughput for two input/output splits (v3).
    Table7,
    /// Throughput vs concurrency for uniform active-expert counts (v2-lite).
    Table9,
    /// Benchmark accuracies for the 162 four-tuple skip schedules (v2-lite).
    Table10_12,
    /// Throughput vs concurrency for reduced total expert counts (v2-lite).
    Table13,
}

impl FixtureId {
    pub const ALL: [FixtureId; 5] = [
        FixtureId::Table6,
        FixtureId::Table7,
        FixtureId::Table9,
        FixtureId::Table10_12,
        FixtureId::Table13,
    ];

    pub fn bundled_text(self) -> &'static str {
        match self {
            FixtureId::Table6 => include_str!("../data/table6.csv"),
            FixtureId::Table7 => include_str!("../data/table7.csv"),
            FixtureId::Table9 => include_str!("../data/table9.csv"),
            FixtureId::Table10_12 => include_str!("../data/table10_12.csv"),
            FixtureId::Table13 => include_str!("../data/table13.csv"),
        }
    }
}

impl fmt::Display for FixtureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FixtureId::Table6 => "table6",
            FixtureId::Table7 => "table7",
            FixtureId::Table9 => "table9",
            FixtureId::Table10_12 => "table10_12",
            FixtureId::Table13 => "table13",
        };
        write!(f, "{s}")
    }
}

impl FromStr for FixtureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table6" => Ok(FixtureId::Table6),
            "table7" => Ok(FixtureId::Table7),
            "table9" => Ok(FixtureId::Table9),
            "table10_12" => Ok(FixtureId::Table10_12),
            "table13" => Ok(FixtureId::Table13),
            other => Err(Error::InvalidArgument(format!(
                "unknown fixture '{other}' (expected one of table6, table7, table9, table10_12, table13)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureTable {
    pub source: String,
    pub description: String,
    /// Concurrency values whose rows are flagged anomalous.
    pub anomalous_concurrency: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FixtureTable {
    pub fn load(id: FixtureId) -> FixtureTable {
        // bundled fixtures are validated by tests; a parse failure here is a
        // build defect, not a runtime condition
        FixtureTable::parse(id.bundled_text()).expect("bundled fixture must parse")
    }

    pub fn parse(text: &str) -> Result<FixtureTable> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l == FIXTURE_HEADER => {}
            _ => return Err(Error::Parse("fixture missing version header".into())),
        }
        let mut source = String::new();
        let mut description = String::new();
        let mut anomalous = Vec::new();
        let mut columns: Vec<String> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(v) = rest.strip_prefix("source: ") {
                    source = v.to_string();
                } else if let Some(v) = rest.strip_prefix("description: ") {
                    description = v.to_string();
                } else if let Some(v) = rest.strip_prefix("anomalous_concurrency: ") {
                    for part in v.split(',') {
                        anomalous.push(part.trim().parse().map_err(|_| {
                            Error::Parse(format!("bad anomalous concurrency '{part}'"))
                        })?);
                    }
                } else {
                    return Err(Error::Parse(format!("unknown fixture header line '{line}'")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if columns.is_empty() {
                columns = line.split(',').map(str::to_string).collect();
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|c| {
                    c.parse()
                        .map_err(|_| Error::Parse(format!("non-numeric fixture cell '{c}'")))
                })
                .collect::<Result<_>>()?;
            if row.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "fixture row has {} cells, expected {}",
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        if source.is_empty() {
            return Err(Error::Parse("fixture missing source header".into()));
        }
        if columns.is_empty() || rows.is_empty() {
            return Err(Error::Parse("fixture has no data".into()));
        }
        Ok(FixtureTable {
            source,
            description,
            anomalous_concurrency: anomalous,
            columns,
            rows,
        })
    }

    /// Canonical serialization; equals the bundled file byte-for-byte.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(FIXTURE_HEADER);
        s.push('\n');
        s.push_str(&format!("# source: {}\n", self.source));
        s.push_str(&format!("# description: {}\n", self.description));
        if !self.anomalous_concurrency.is_empty() {
            let list: Vec<String> = self
                .anomalous_concurrency
                .iter()
                .map(u64::to_string)
                .collect();
            s.push_str(&format!("# anomalous_concurrency: {}\n", list.join(",")));
        }
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&v| format_cell(v)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "fixture {} has no column '{name}' (columns: {})",
                self.source,
                self.columns.join(", ")
            ))
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// True when the row (identified by its leading concurrency cell) is
    /// flagged anomalous.
    pub fn is_anomalous_row(&self, row: &[f64]) -> bool {
        self.anomalous_concurrency
            .iter()
            .any(|&c| row.first() == Some(&(c as f64)))
    }
}

fn format_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs two equal-length series of length >= 2".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_parse_with_expected_shapes() {
        let t6 = FixtureTable::load(FixtureId::Table6);
        assert_eq!(t6.rows.len(), 7);
        assert_eq!(t6.columns, ["input_tokens", "output_tokens", "throughput"]);

        let t7 = FixtureTable::load(FixtureId::Table7);
        assert_eq!(t7.rows.len(), 2);

        let t9 = FixtureTable::load(FixtureId::Table9);
        assert_eq!(t9.rows.len(), 14);
        assert_eq!(t9.anomalous_concurrency, [192]);
        assert_eq!(t9.column("na_6").unwrap()[0], 479.0);

        let grids = FixtureTable::load(FixtureId::Table10_12);
        assert_eq!(grids.rows.len(), 162);
        assert_eq!(grids.columns.len(), 11);

        let t13 = FixtureTable::load(FixtureId::Table13);
        assert_eq!(t13.rows.len(), 17);
        assert_eq!(t13.anomalous_concurrency, [192]);
    }

    #[test]
    fn fixtures_round_trip_to_bundled_bytes() {
        for id in FixtureId::ALL {
            let table = FixtureTable::load(id);
            assert_eq!(table.to_csv_string(), id.bundled_text(), "{id}");
        }
    }

    #[test]
    fn anomalous_rows_detected() {
        let t9 = FixtureTable::load(FixtureId::Table9);
        let flagged: Vec<&Vec<f64>> =
            t9.rows.iter().filter(|r| t9.is_anomalous_row(r)).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0][0], 192.0);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(FixtureTable::parse("no header").is_err());
        assert!(FixtureTable::parse("# moeperf fixture v1\n# source: x\na,b\n1,banana\n").is_err());
        assert!(FixtureTable::parse("# moeperf fixture v1\n# source: x\na,b\n1\n").is_err());
    }

    #[test]
    fn spearman_basics() {
        let inc = [1.0, 2.0, 3.0, 4.0];
        let also_inc = [10.0, 20.0, 25.0, 90.0];
        let dec = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&inc, &also_inc).unwrap(), 1.0);
        assert_eq!(spearman(&inc, &dec).unwrap(), -1.0);
        // ties get average ranks
        let tied = [1.0, 2.0, 2.0, 3.0];
        let r = spearman(&tied, &inc).unwrap();
        assert!(r > 0.9 && r < 1.0);
        assert!(spearman(&inc, &dec[..3]).is_err());
    }
}
