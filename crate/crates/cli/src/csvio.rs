//! CSV emission with a fixed dialect: comma-delimited, header row, '.'
//! decimal separator, floats printed with 17 significant digits. Cells are
//! finite numbers, plain strings, or explicitly empty; NaN or infinity never
//! appears as text.

/// One CSV cell.
#[derive(Clone, Debug)]
pub enum Cell {
    Float(f64),
    OptFloat(Option<f64>),
    Int(i64),
    Uint(u64),
    Str(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => fmt_float(*x),
            Cell::OptFloat(Some(x)) => fmt_float(*x),
            Cell::OptFloat(None) | Cell::Empty => String::new(),
            Cell::Int(i) => i.to_string(),
            Cell::Uint(u) => u.to_string(),
            Cell::Str(s) => s.clone(),
        }
    }
}

/// 17 significant digits; non-finite values become the empty cell.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        String::new()
    }
}

/// In-memory CSV table with a fixed header.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Table {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
