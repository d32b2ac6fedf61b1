use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datafile::{ColumnStats, ColumnType, Row, Schema, Value};
use crate::error::{EngineError, EngineResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    fn holds(self, o: Ordering) -> bool {
        match self {
            CmpOp::Eq => o.is_eq(),
            CmpOp::Ne => o.is_ne(),
            CmpOp::Lt => o.is_lt(),
            CmpOp::Le => o.is_le(),
            CmpOp::Gt => o.is_gt(),
            CmpOp::Ge => o.is_ge(),
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// `column op literal`; the literal is kept as text until bound to a schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub column: String,
    pub op: CmpOp,
    pub literal: String,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.column, self.op.symbol(), self.literal)
    }
}

impl FromStr for Term {
    type Err = EngineError;

    /// Parses `C2>=3`, `C1 = A`, `name!=x`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        for (sym, op) in [
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("=", CmpOp::Eq),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ] {
            if let Some(i) = s.find(sym) {
                let column = s[..i].trim();
                if column.is_empty() {
                    break;
                }
                return Ok(Term {
                    column: column.to_owned(),
                    op,
                    literal: s[i + sym.len()..].trim().to_owned(),
                });
            }
        }
        Err(EngineError::Invalid(format!("cannot parse predicate term {s:?}")))
    }
}

/// Conjunction of terms. The empty predicate matches every row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub terms: Vec<Term>,
}

impl Predicate {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn term(column: &str, op: CmpOp, literal: impl ToString) -> Self {
        Self::all().and(column, op, literal)
    }

    pub fn and(mut self, column: &str, op: CmpOp, literal: impl ToString) -> Self {
        self.terms.push(Term {
            column: column.to_owned(),
            op,
            literal: literal.to_string(),
        });
        self
    }

    pub fn parse_all<S: AsRef<str>>(terms: &[S]) -> EngineResult<Self> {
        Ok(Self {
            terms: terms.iter().map(|t| t.as_ref().parse()).collect::<EngineResult<_>>()?,
        })
    }

    pub fn bind(&self, schema: &Schema) -> EngineResult<BoundPredicate> {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let idx = schema.index_of(&t.column)?;
                let value = literal(schema.columns()[idx].ty, &t.column, &t.literal)?;
                Ok((idx, t.op, value))
            })
            .collect::<EngineResult<_>>()?;
        Ok(BoundPredicate { terms })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("true");
        }
        let parts: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        f.write_str(&parts.join(" and "))
    }
}

pub(crate) fn literal(ty: ColumnType, column: &str, text: &str) -> EngineResult<Value> {
    Value::parse_as(ty, text).ok_or_else(|| EngineError::Invalid(format!("{text:?} is not a valid {ty} for column {column}")))
}

#[derive(Clone, Debug)]
pub struct BoundPredicate {
    terms: Vec<(usize, CmpOp, Value)>,
}

impl BoundPredicate {
    pub fn matches(&self, row: &Row) -> bool {
        self.terms
            .iter()
            .all(|(i, op, v)| row[*i].compare(v).is_some_and(|o| op.holds(o)))
    }

    /// False only when the file's min/max prove no row can match.
    pub fn may_match(&self, stats: &[ColumnStats]) -> bool {
        self.terms.iter().all(|(i, op, v)| {
            let Some(s) = stats.get(*i) else { return true };
            let (Some(lo), Some(hi)) = (s.min.compare(v), s.max.compare(v)) else {
                return true;
            };
            match op {
                CmpOp::Eq => lo.is_le() && hi.is_ge(),
                CmpOp::Ne => !(lo.is_eq() && hi.is_eq()),
                CmpOp::Lt => lo.is_lt(),
                CmpOp::Le => lo.is_le(),
                CmpOp::Gt => hi.is_gt(),
                CmpOp::Ge => hi.is_ge(),
            }
        })
    }
}

/// `column = literal` assignments of an update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignments(pub Vec<(String, String)>);

impl Assignments {
    pub fn set(mut self, column: &str, literal: impl ToString) -> Self {
        self.0.push((column.to_owned(), literal.to_string()));
        self
    }

    pub fn parse_all<S: AsRef<str>>(items: &[S]) -> EngineResult<Self> {
        items
            .iter()
            .map(|s| {
                let s = s.as_ref();
                let (c, v) = s
                    .split_once('=')
                    .ok_or_else(|| EngineError::Invalid(format!("expected column=value, got {s:?}")))?;
                Ok((c.trim().to_owned(), v.trim().to_owned()))
            })
            .collect::<EngineResult<_>>()
            .map(Self)
    }

    pub fn bind(&self, schema: &Schema) -> EngineResult<Vec<(usize, Value)>> {
        self.0
            .iter()
            .map(|(c, v)| {
                let idx = schema.index_of(c)?;
                Ok((idx, literal(schema.columns()[idx].ty, c, v)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::of(&[("C1", ColumnType::Utf8), ("C2", ColumnType::Int64)]).unwrap()
    }

    #[test]
    fn parses_terms() {
        let p = Predicate::parse_all(&["C2>=3", "C1 = A"]).unwrap();
        assert_eq!(p.terms[0].op, CmpOp::Ge);
        assert_eq!(p.terms[1].literal, "A");
        assert_eq!(p.to_string(), "C2>=3 and C1=A");
        assert!("=3".parse::<Term>().is_err());
        assert!("C2".parse::<Term>().is_err());
    }

    #[test]
    fn rows_and_stats() {
        let b = Predicate::term("C2", CmpOp::Gt, 2).bind(&schema()).unwrap();
        assert!(b.matches(&vec![Value::from("x"), Value::Int(3)]));
        assert!(!b.matches(&vec![Value::from("x"), Value::Int(2)]));
        let stats = |lo, hi| {
            vec![
                ColumnStats {
                    min: Value::from("a"),
                    max: Value::from("z"),
                },
                ColumnStats {
                    min: Value::Int(lo),
                    max: Value::Int(hi),
                },
            ]
        };
        assert!(!b.may_match(&stats(1, 2)));
        assert!(b.may_match(&stats(1, 3)));
        let ne = Predicate::term("C2", CmpOp::Ne, 5).bind(&schema()).unwrap();
        assert!(!ne.may_match(&stats(5, 5)));
        assert!(ne.may_match(&stats(5, 6)));
        let eq = Predicate::term("C2", CmpOp::Eq, 9).bind(&schema()).unwrap();
        assert!(!eq.may_match(&stats(1, 8)));
        assert!(Predicate::term("C2", CmpOp::Eq, "x").bind(&schema()).is_err());
        assert!(Predicate::term("C9", CmpOp::Eq, 1).bind(&schema()).is_err());
    }

    #[test]
    fn assignments_bind_to_columns() {
        let a = Assignments::parse_all(&["C2=7"]).unwrap();
        assert_eq!(a.bind(&schema()).unwrap(), vec![(1, Value::Int(7))]);
        assert!(Assignments::parse_all(&["C2"]).is_err());
    }
}
