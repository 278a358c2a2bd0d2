//! CSV output with a fixed number format so reruns are byte-identical.

use ::csv::{Terminator, Writer, WriterBuilder};

/// 17 significant digits; round-trips every `f64`.
pub fn number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// In-memory CSV with RFC 4180 quoting and CRLF row endings.
pub struct CsvBuffer {
    w: Writer<Vec<u8>>,
}

impl CsvBuffer {
    pub fn with_header<S: AsRef<str>>(header: &[S]) -> Self {
        let w = WriterBuilder::new()
            .terminator(Terminator::CRLF)
            .flexible(true)
            .from_writer(Vec::new());
        let mut b = CsvBuffer { w };
        b.text_row(header);
        b
    }

    pub fn text_row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.w
            .write_record(cells.iter().map(|c| c.as_ref()))
            .and_then(|_| Ok(self.w.flush()?))
            .expect("writing to memory cannot fail");
    }

    pub fn number_row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|&v| number(v)).collect();
        self.text_row(&cells);
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(self.w.get_ref()).expect("rows are built from strings")
    }

    pub fn into_string(self) -> String {
        self.as_str().to_string()
    }
}
