//! Categorical longitudinal datasets and their CSV form.
//!
//! A dataset is an `N x p` table of positive integer category codes, plus an
//! optional covariate column. The CSV reader accepts:
//!
//! * comma-separated values, one observation per line;
//! * an optional header row (enabled by [`ReadOptions::header`]);
//! * comment lines beginning with `#`, of which `# alphabets: 2,2,3` declares
//!   the alphabet size of each variable column (otherwise each size is the
//!   largest code seen in that column);
//! * a covariate column picked by header name or zero-based index, either
//!   categorical (any integer or string labels) or continuous (numbers).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::automaton::Symbol;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariate {
    /// Group codes `0..levels.len()`, with the original labels in sorted order.
    Categorical {
        name: String,
        levels: Vec<String>,
        groups: Vec<usize>,
    },
    Continuous { name: String, values: Vec<f64> },
}

impl Covariate {
    pub fn name(&self) -> &str {
        match self {
            Covariate::Categorical { name, .. } | Covariate::Continuous { name, .. } => name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Covariate::Categorical { groups, .. } => groups.len(),
            Covariate::Continuous { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a categorical covariate from arbitrary labels.
    pub fn categorical<S: AsRef<str>>(name: &str, labels: &[S]) -> Covariate {
        let mut levels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        sort_labels(&mut levels);
        levels.dedup();
        let groups = labels
            .iter()
            .map(|l| levels.iter().position(|x| x == l.as_ref()).unwrap())
            .collect();
        Covariate::Categorical {
            name: name.to_string(),
            levels,
            groups,
        }
    }
}

/// Numeric labels sort numerically, everything else lexicographically.
fn sort_labels(levels: &mut [String]) {
    levels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        _ => a.cmp(b),
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    alphabets: Vec<u32>,
    values: Vec<Symbol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariate: Option<Covariate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from rows, inferring each alphabet as `1..=max`.
    pub fn from_rows(rows: &[Vec<Symbol>]) -> Result<Self> {
        let p = rows.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
        let mut alphabets = vec![1u32; p];
        let mut values = Vec::with_capacity(rows.len() * p);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::RowLength {
                    line: k as u64 + 1,
                    expected: p,
                    found: row.len(),
                });
            }
            for (j, &x) in row.iter().enumerate() {
                if x == 0 {
                    return Err(Error::BadCategory {
                        line: k as u64 + 1,
                        column: j + 1,
                        value: "0".into(),
                    });
                }
                alphabets[j] = alphabets[j].max(x);
            }
            values.extend_from_slice(row);
        }
        Ok(Dataset {
            alphabets,
            values,
            covariate: None,
            names: None,
        })
    }

    /// Builds a dataset from `(row, multiplicity)` pairs.
    pub fn from_counts(counts: &[(Vec<Symbol>, usize)]) -> Result<Self> {
        let rows: Vec<Vec<Symbol>> = counts
            .iter()
            .flat_map(|(row, n)| std::iter::repeat_n(row.clone(), *n))
            .collect();
        Self::from_rows(&rows)
    }

    pub(crate) fn from_flat(alphabets: Vec<u32>, values: Vec<Symbol>) -> Self {
        Dataset {
            alphabets,
            values,
            covariate: None,
            names: None,
        }
    }

    pub fn with_alphabets(mut self, alphabets: Vec<u32>) -> Result<Self> {
        if alphabets.len() != self.alphabets.len() {
            return Err(Error::AlphabetMismatch {
                data: self.alphabets,
                model: alphabets,
            });
        }
        for (j, (&seen, &declared)) in self.alphabets.iter().zip(&alphabets).enumerate() {
            if seen > declared {
                let k = self.rows().position(|r| r[j] > declared).unwrap_or(0);
                return Err(Error::OutsideAlphabet {
                    line: k as u64 + 1,
                    column: j + 1,
                    value: seen,
                    size: declared,
                });
            }
        }
        self.alphabets = alphabets;
        Ok(self)
    }

    pub fn with_covariate(mut self, covariate: Covariate) -> Result<Self> {
        if covariate.len() != self.len() {
            return Err(Error::Other(format!(
                "covariate has {} values for {} rows",
                covariate.len(),
                self.len()
            )));
        }
        self.covariate = Some(covariate);
        Ok(self)
    }

    pub fn without_covariate(mut self) -> Self {
        self.covariate = None;
        self
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = Some(names);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.alphabets.len()
    }

    pub fn len(&self) -> usize {
        if self.alphabets.is_empty() {
            0
        } else {
            self.values.len() / self.alphabets.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alphabets(&self) -> &[u32] {
        &self.alphabets
    }

    pub fn row(&self, k: usize) -> &[Symbol] {
        let p = self.num_vars();
        &self.values[k * p..(k + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Symbol]> {
        self.values.chunks_exact(self.num_vars().max(1))
    }

    pub fn covariate(&self) -> Option<&Covariate> {
        self.covariate.as_ref()
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Splits rows by categorical covariate group.
    pub fn group_indices(&self) -> Result<Vec<Vec<usize>>> {
        match &self.covariate {
            Some(Covariate::Categorical { levels, groups, .. }) => {
                let mut out = vec![Vec::new(); levels.len()];
                for (k, &g) in groups.iter().enumerate() {
                    out[g].push(k);
                }
                Ok(out)
            }
            Some(_) => Err(Error::CovariateKind {
                expected: "categorical",
            }),
            None => Err(Error::MissingCovariate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl std::str::FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovariateKind {
    #[default]
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, Default)]
pub struct ReadOptions {
    pub header: bool,
    pub covariate: Option<(ColumnRef, CovariateKind)>,
    /// Column holding a frequency for each row, for data supplied as a
    /// table of outcome counts. Rows with frequency 0 are dropped.
    pub weight: Option<ColumnRef>,
}

fn resolve(col: &ColumnRef, header: Option<&Vec<String>>) -> Result<usize> {
    match col {
        ColumnRef::Index(i) => Ok(*i),
        ColumnRef::Name(name) => header
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::UnknownColumn(name.clone())),
    }
}

fn parse_directive(line: &str) -> Result<Option<Vec<u32>>> {
    let body = line.trim_start_matches('#').trim();
    let Some(rest) = body.strip_prefix("alphabets:") else {
        return Ok(None);
    };
    rest.split(',')
        .map(|t| match t.trim().parse::<u32>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::BadDirective(line.to_string())),
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Parses CSV text into a dataset.
pub fn read_dataset<R: Read>(mut source: R, options: &ReadOptions) -> Result<Dataset> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;

    let mut declared = None;
    for line in text.lines() {
        let t = line.trim_start();
        if t.starts_with('#') {
            if let Some(a) = parse_directive(t)? {
                declared = Some(a);
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.header)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header: Option<Vec<String>> = if options.header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let cov_col = match &options.covariate {
        None => None,
        Some((col, kind)) => {
            let i = resolve(col, header.as_ref())?;
            let name = match col {
                ColumnRef::Name(n) => n.clone(),
                ColumnRef::Index(i) => format!("column{i}"),
            };
            Some((i, *kind, name))
        }
    };
    let weight_col = options.weight.as_ref().map(|c| resolve(c, header.as_ref())).transpose()?;
    if let Some(h) = &header {
        for i in cov_col.iter().map(|c| c.0).chain(weight_col) {
            if i >= h.len() {
                return Err(Error::UnknownColumn(i.to_string()));
            }
        }
    }
    if weight_col.is_some() && weight_col == cov_col.as_ref().map(|c| c.0) {
        return Err(Error::UnknownColumn("weight and covariate share a column".into()));
    }

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut values = Vec::new();
    let mut cov_raw: Vec<(u64, String)> = Vec::new();
    let mut nrows = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::RowLength {
                line,
                expected: w,
                found: record.len(),
            });
        }
        for i in cov_col.iter().map(|c| c.0).chain(weight_col) {
            if i >= w {
                return Err(Error::UnknownColumn(i.to_string()));
            }
        }
        let mut column = 0usize;
        let mut row = Vec::with_capacity(w);
        let mut cov_field = None;
        let mut times = 1u64;
        for (j, field) in record.iter().enumerate() {
            if matches!(&cov_col, Some((ci, _, _)) if *ci == j) {
                cov_field = Some(field.to_string());
                continue;
            }
            if weight_col == Some(j) {
                times = field.parse::<u64>().map_err(|_| Error::BadWeight {
                    line,
                    value: field.to_string(),
                })?;
                continue;
            }
            column += 1;
            match field.parse::<u32>() {
                Ok(x) if x >= 1 => row.push(x),
                _ => {
                    return Err(Error::BadCategory {
                        line,
                        column,
                        value: field.to_string(),
                    })
                }
            }
        }
        for _ in 0..times {
            values.extend_from_slice(&row);
            if let Some(f) = &cov_field {
                cov_raw.push((line, f.clone()));
            }
            nrows += 1;
        }
    }
    if nrows == 0 {
        return Err(Error::EmptyDataset);
    }
    let p = values.len() / nrows;
    if p == 0 {
        return Err(Error::EmptyDataset);
    }

    let mut alphabets = vec![1u32; p];
    for row in values.chunks_exact(p) {
        for (j, &x) in row.iter().enumerate() {
            alphabets[j] = alphabets[j].max(x);
        }
    }
    let mut data = Dataset::from_flat(alphabets, values);
    if let Some(decl) = declared {
        data = data.with_alphabets(decl)?;
    }
    if let Some(h) = header {
        let names = h
            .into_iter()
            .enumerate()
            .filter(|(j, _)| !matches!(&cov_col, Some((ci, _, _)) if ci == j) && weight_col != Some(*j))
            .map(|(_, n)| n)
            .collect();
        data = data.with_names(names);
    }
    if let Some((_, kind, name)) = cov_col {
        let cov = match kind {
            CovariateKind::Categorical => {
                let labels: Vec<&str> = cov_raw.iter().map(|(_, s)| s.as_str()).collect();
                Covariate::categorical(&name, &labels)
            }
            CovariateKind::Continuous => {
                let values = cov_raw
                    .iter()
                    .map(|(line, s)| {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| Error::BadCovariate {
                                line: *line,
                                value: s.clone(),
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Covariate::Continuous { name, values }
            }
        };
        data = data.with_covariate(cov)?;
    }
    Ok(data)
}

/// Writes the dataset as CSV; the covariate, if any, becomes the last column.
pub fn write_dataset<W: Write>(data: &Dataset, sink: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(sink);
    let p = data.num_vars();
    if header {
        let mut names: Vec<String> = match data.names() {
            Some(n) if n.len() == p => n.to_vec(),
            _ => (1..=p).map(|i| format!("X{i}")).collect(),
        };
        if let Some(c) = data.covariate() {
            names.push(c.name().to_string());
        }
        w.write_record(&names)?;
    }
    for (k, row) in data.rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(u32::to_string).collect();
        match data.covariate() {
            Some(Covariate::Categorical { levels, groups, .. }) => fields.push(levels[groups[k]].clone()),
            Some(Covariate::Continuous { values, .. }) => fields.push(format!("{}", values[k])),
            None => {}
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_column_expands_rows() {
        let text = "a,b,n,g\n1,1,3,x\n2,1,0,y\n2,2,2,y\n";
        let opts = ReadOptions {
            header: true,
            covariate: Some(("g".parse().unwrap(), CovariateKind::Categorical)),
            weight: Some("n".parse().unwrap()),
        };
        let d = read_dataset(text.as_bytes(), &opts).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.names().unwrap(), &["a".to_string(), "b".to_string()]);
        assert_eq!(d.row(4), &[2, 2]);
        assert_eq!(d.group_indices().unwrap(), vec![vec![0, 1, 2], vec![3, 4]]);
        let bad = read_dataset("1,1,x\n".as_bytes(), &ReadOptions {
            weight: Some(ColumnRef::Index(2)),
            ..Default::default()
        });
        assert!(matches!(bad, Err(Error::BadWeight { line: 1, .. })));
    }

    #[test]
    fn reads_binary_columns() {
        let d = read_dataset("1,2,1\n2,2,1\n1,1,2\n".as_bytes(), &ReadOptions::default()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.alphabets(), &[2, 2, 2]);
        assert_eq!(d.row(1), &[2, 2, 1]);
    }

    #[test]
    fn long_row_reports_its_line() {
        let err = read_dataset("1,2,1\n1,2,1,2\n".as_bytes(), &ReadOptions::default()).unwrap_err();
        match err {
            Error::RowLength { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 3, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_integer_category_is_rejected() {
        let err = read_dataset("1,2\n1,x\n".as_bytes(), &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::BadCategory { line: 2, column: 2, .. }), "{err:?}");
        let err = read_dataset("1,0\n".as_bytes(), &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::BadCategory { .. }));
    }

    #[test]
    fn directive_declares_unseen_categories() {
        let d = read_dataset("# alphabets: 2,3\n1,1\n1,2\n".as_bytes(), &ReadOptions::default()).unwrap();
        assert_eq!(d.alphabets(), &[2, 3]);
        let err = read_dataset("# alphabets: 2,1\n1,2\n".as_bytes(), &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::OutsideAlphabet { .. }));
    }

    #[test]
    fn covariate_by_name_and_index() {
        let text = "w1,w2,smoke\n1,2,0\n2,2,1\n1,1,0\n";
        let opts = ReadOptions {
            header: true,
            covariate: Some((ColumnRef::Name("smoke".into()), CovariateKind::Categorical)),
            ..Default::default()
        };
        let d = read_dataset(text.as_bytes(), &opts).unwrap();
        assert_eq!(d.num_vars(), 2);
        match d.covariate().unwrap() {
            Covariate::Categorical { levels, groups, .. } => {
                assert_eq!(levels, &["0", "1"]);
                assert_eq!(groups, &[0, 1, 0]);
            }
            _ => panic!(),
        }
        assert_eq!(d.names().unwrap(), &["w1", "w2"]);

        let opts = ReadOptions {
            header: false,
            covariate: Some((ColumnRef::Index(0), CovariateKind::Continuous)),
            ..Default::default()
        };
        let d = read_dataset("0.5,1,2\n-1.25,2,2\n".as_bytes(), &opts).unwrap();
        assert_eq!(d.row(0), &[1, 2]);
        assert_eq!(
            d.covariate().unwrap(),
            &Covariate::Continuous {
                name: "column0".into(),
                values: vec![0.5, -1.25]
            }
        );
    }

    #[test]
    fn unknown_covariate_column() {
        let opts = ReadOptions {
            header: true,
            covariate: Some((ColumnRef::Name("z".into()), CovariateKind::Categorical)),
            ..Default::default()
        };
        let err = read_dataset("a,b\n1,2\n".as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, Error::UnknownColumn(_)));
    }

    #[test]
    fn empty_input() {
        let err = read_dataset("".as_bytes(), &ReadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn csv_round_trip_with_covariate() {
        let d = Dataset::from_rows(&[vec![1, 2], vec![2, 1], vec![1, 1]])
            .unwrap()
            .with_covariate(Covariate::Continuous {
                name: "z".into(),
                values: vec![0.1, 2.0, -3.5],
            })
            .unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf, true).unwrap();
        let opts = ReadOptions {
            header: true,
            covariate: Some((ColumnRef::Name("z".into()), CovariateKind::Continuous)),
            ..Default::default()
        };
        let back = read_dataset(buf.as_slice(), &opts).unwrap();
        assert_eq!(back.covariate(), d.covariate());
        assert_eq!(back.rows().collect::<Vec<_>>(), d.rows().collect::<Vec<_>>());
    }
}
