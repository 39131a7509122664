//! CSV input with missing cells and a plain-text model format.
//!
//! Missing cells are empty fields or `NA`. Model files store every float in
//! Rust's shortest round-trip decimal form, so a saved model reloads
//! bit-for-bit.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::data::IncompleteMatrix;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::missglasso::GaussianModel;

/// A parsed CSV file: raw tokens are kept so observed cells can be written
/// back unchanged.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub header: Option<Vec<String>>,
    pub tokens: Vec<Vec<String>>,
    pub data: IncompleteMatrix,
}

fn is_missing(tok: &str) -> bool {
    let t = tok.trim();
    t.is_empty() || t == "NA"
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

pub fn read_csv<R: Read>(input: R, has_header: bool) -> Result<CsvTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut header = None;
    let mut tokens: Vec<Vec<String>> = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    let mut width: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: Vec<String> = rec.iter().map(str::to_string).collect();
        match width {
            Some(w) if w != row.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", row.len())));
            }
            None => width = Some(row.len()),
            _ => {}
        }
        if has_header && header.is_none() {
            header = Some(row);
            continue;
        }
        let parsed = row
            .iter()
            .map(|tok| {
                if is_missing(tok) {
                    Ok(None)
                } else {
                    match tok.trim().parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(Some(v)),
                        _ => Err(parse_err(line, format!("cannot parse {tok:?} as a number"))),
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(parsed);
        tokens.push(row);
    }
    if cells.is_empty() {
        return Err(parse_err(0, "no data rows"));
    }
    let data = IncompleteMatrix::from_rows(&cells)?;
    Ok(CsvTable { header, tokens, data })
}

/// 17 significant digits.
pub fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `table` with missing cells replaced by `filled[(i, j)]`; observed
/// cells are copied token for token.
pub fn write_imputed<W: Write>(out: W, table: &CsvTable, filled: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if let Some(h) = &table.header {
        w.write_record(h).map_err(io)?;
    }
    for (i, row) in table.tokens.iter().enumerate() {
        let rec: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, tok)| {
                if table.data.is_observed(i, j) {
                    tok.clone()
                } else {
                    format_sig17(filled[(i, j)])
                }
            })
            .collect();
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Round-trip decimal with zeros written as `0`.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:?}")
    }
}

const MAGIC: &str = "missglasso-model";
const VERSION: u32 = 1;

/// Regression part of a saved model.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPart {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub lambda2: f64,
    /// Response mean and column means subtracted before fitting.
    pub centering: Option<(f64, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct ModelFile {
    pub model: GaussianModel,
    pub lambda: f64,
    pub em_iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub regression: Option<RegressionPart>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let p = self.model.dim();
        let mut s = String::new();
        let kind = if self.regression.is_some() { "regression" } else { "gaussian" };
        writeln!(s, "{MAGIC} {VERSION}").unwrap();
        writeln!(s, "kind {kind}").unwrap();
        writeln!(s, "p {p}").unwrap();
        writeln!(s, "lambda {}", fmt_f64(self.lambda)).unwrap();
        writeln!(s, "em_iterations {}", self.em_iterations).unwrap();
        writeln!(s, "converged {}", self.converged).unwrap();
        writeln!(s, "objective {}", fmt_f64(self.objective)).unwrap();
        writeln!(s, "mu {}", join(&self.model.mu)).unwrap();
        writeln!(s, "k").unwrap();
        for i in 0..p {
            let row: Vec<f64> = (0..p).map(|j| self.model.k.get(i, j)).collect();
            writeln!(s, "{}", join(&row)).unwrap();
        }
        if let Some(r) = &self.regression {
            writeln!(s, "lambda2 {}", fmt_f64(r.lambda2)).unwrap();
            writeln!(s, "sigma {}", fmt_f64(r.sigma)).unwrap();
            writeln!(s, "beta {}", join(&r.beta)).unwrap();
            match &r.centering {
                Some((ym, xm)) => {
                    writeln!(s, "y_mean {}", fmt_f64(*ym)).unwrap();
                    writeln!(s, "x_means {}", join(xm)).unwrap();
                }
                None => writeln!(s, "centered false").unwrap(),
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .ok_or_else(|| parse_err(0, format!("unexpected end of file, expected {what}")))
        };
        let (ln, l) = next("header")?;
        if l != format!("{MAGIC} {VERSION}") {
            return Err(parse_err(ln as u64, format!("unsupported model header {l:?}")));
        }
        fn field<'a>(line: (usize, &'a str), key: &str) -> Result<&'a str> {
            let (ln, l) = line;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim()),
                _ if l == key => Ok(""),
                _ => Err(parse_err(ln as u64, format!("expected `{key}`, found {l:?}"))),
            }
        }
        fn num<T: std::str::FromStr>(ln: usize, s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| parse_err(ln as u64, format!("cannot parse {s:?}")))
        }
        fn nums(ln: usize, s: &str, len: usize) -> Result<Vec<f64>> {
            let v = s
                .split_whitespace()
                .map(|t| num::<f64>(ln, t))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != len {
                return Err(parse_err(ln as u64, format!("expected {len} values, found {}", v.len())));
            }
            Ok(v)
        }
        let kind_line = next("kind")?;
        let kind = field(kind_line, "kind")?.to_string();
        let pl = next("p")?;
        let p: usize = num(pl.0, field(pl, "p")?)?;
        let l = next("lambda")?;
        let lambda: f64 = num(l.0, field(l, "lambda")?)?;
        let l = next("em_iterations")?;
        let em_iterations: usize = num(l.0, field(l, "em_iterations")?)?;
        let l = next("converged")?;
        let converged: bool = num(l.0, field(l, "converged")?)?;
        let l = next("objective")?;
        let objective: f64 = num(l.0, field(l, "objective")?)?;
        let l = next("mu")?;
        let mu = nums(l.0, field(l, "mu")?, p)?;
        let l = next("k")?;
        field(l, "k")?;
        let mut k = nalgebra::DMatrix::zeros(p, p);
        for i in 0..p {
            let (ln, row) = next("precision row")?;
            let v = nums(ln, row, p)?;
            for j in 0..p {
                k[(i, j)] = v[j];
            }
        }
        let k = SymMatrix::new(k)?;
        let model = GaussianModel::new(mu, k)?;
        let regression = match kind.as_str() {
            "gaussian" => None,
            "regression" => {
                let l = next("lambda2")?;
                let lambda2: f64 = num(l.0, field(l, "lambda2")?)?;
                let l = next("sigma")?;
                let sigma: f64 = num(l.0, field(l, "sigma")?)?;
                let l = next("beta")?;
                let beta = nums(l.0, field(l, "beta")?, p)?;
                let l = next("centering")?;
                let centering = if l.1 == "centered false" {
                    None
                } else {
                    let ym: f64 = num(l.0, field(l, "y_mean")?)?;
                    let l = next("x_means")?;
                    Some((ym, nums(l.0, field(l, "x_means")?, p)?))
                };
                Some(RegressionPart {
                    beta,
                    sigma,
                    lambda2,
                    centering,
                })
            }
            other => return Err(parse_err(kind_line.0 as u64, format!("unknown model kind {other:?}"))),
        };
        Ok(ModelFile {
            model,
            lambda,
            em_iterations,
            converged,
            objective,
            regression,
        })
    }
}
