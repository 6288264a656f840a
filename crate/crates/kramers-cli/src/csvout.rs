//! Deterministic CSV emission: comma separators, `.` decimal point, LF line
//! endings, one header row. Floats go through `Display`, which prints the
//! shortest decimal string that round-trips, so outputs are byte-stable
//! across runs and platforms.

use std::path::Path;

use kramers::error::Result;

/// Formats one float cell. Non-finite values print as `nan`, `inf`, `-inf`
/// (from `Display`); they only appear when an upstream estimate is itself
/// non-finite.
pub fn format_field(x: f64) -> String {
    format!("{x}")
}

/// An in-memory CSV table with a fixed header.
#[derive(Clone, Debug)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    /// Appends a row. Panics if the cell count does not match the header;
    /// rows are produced by fixed-arity formatters, so a mismatch is a bug.
    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "row width must match header");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_header_and_rows_with_lf() {
        let mut t = Table::new(&["a", "b"]);
        t.push_row(vec!["1".into(), format_field(0.5)]);
        t.push_row(vec!["2".into(), format_field(-0.25)]);
        assert_eq!(t.render(), "a,b\n1,0.5\n2,-0.25\n");
    }

    #[test]
    fn float_cells_round_trip() {
        for &x in &[0.1, 1.0 / 3.0, 1e-12, -2.5e8, 0.0, f64::MIN_POSITIVE] {
            let s = format_field(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "cell {s} must round-trip");
            assert!(!s.contains(','));
        }
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn row_width_mismatch_panics() {
        let mut t = Table::new(&["a", "b"]);
        t.push_row(vec!["1".into()]);
    }
}
