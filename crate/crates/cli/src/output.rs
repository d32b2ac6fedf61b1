use std::fmt::Display;

use lakelog::datafile::{Row, Value};

/// Line-oriented printer. Porcelain mode prints only `key=value` lines and
/// raw rows; the default mode adds headers and prose.
#[derive(Clone, Copy, Debug)]
pub struct Out {
    pub porcelain: bool,
}

impl Out {
    pub fn kv(&self, key: &str, value: impl Display) {
        println!("{key}={value}");
    }

    /// A sentence in human mode, `key=value` in porcelain mode.
    pub fn say(&self, key: &str, value: impl Display, sentence: impl FnOnce() -> String) {
        if self.porcelain {
            self.kv(key, value);
        } else {
            println!("{}", sentence());
        }
    }

    pub fn note(&self, text: impl Display) {
        if !self.porcelain {
            println!("{text}");
        }
    }

    pub fn rows(&self, columns: &[String], rows: &[Row]) {
        if !self.porcelain {
            println!("{}", columns.join("\t"));
        }
        for r in rows {
            println!("{}", render_row(r));
        }
        if !self.porcelain {
            println!("({} rows)", rows.len());
        }
    }
}

pub fn render_row(row: &[Value]) -> String {
    row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t")
}
