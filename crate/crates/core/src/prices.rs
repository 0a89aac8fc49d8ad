//! Price table ingestion: CSV with a `date` column and one positive price
//! series per remaining column.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// What to do with rows that have empty cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Reuse the most recent observed value for the series.
    #[default]
    ForwardFill,
    /// Discard the whole row.
    DropRow,
}

/// Ordered daily prices for `k` named series.
///
/// Dates are strictly increasing and every stored price is finite and
/// positive; both are enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    dates: Vec<NaiveDate>,
    names: Vec<String>,
    /// Row per date, column per series.
    prices: DMatrix<f64>,
}

impl PriceTable {
    pub fn new(dates: Vec<NaiveDate>, names: Vec<String>, prices: DMatrix<f64>) -> Result<Self> {
        if prices.nrows() != dates.len() || prices.ncols() != names.len() {
            return Err(Error::ShapeError(format!(
                "price matrix is {}x{} but there are {} dates and {} names",
                prices.nrows(),
                prices.ncols(),
                dates.len(),
                names.len()
            )));
        }
        for pair in dates.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Parse(format!(
                    "dates not strictly increasing: {} follows {}",
                    pair[1], pair[0]
                )));
            }
        }
        for (i, row) in prices.row_iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if !p.is_finite() || p <= 0.0 {
                    return Err(Error::InvalidPrice {
                        row: i + 2,
                        message: format!("series {} has non-positive price {}", names[j], p),
                    });
                }
            }
        }
        Ok(Self { dates, names, prices })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of price series.
    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    /// Natural-log prices, same layout as `prices`.
    pub fn log_prices(&self) -> DMatrix<f64> {
        self.prices.map(f64::ln)
    }

    /// Simple returns between consecutive rows: row `t` holds
    /// `p[t+1]/p[t] - 1`, so the result has one row fewer than the table.
    pub fn simple_returns(&self) -> DMatrix<f64> {
        let n = self.len();
        let k = self.width();
        let mut out = DMatrix::zeros(n.saturating_sub(1), k);
        for t in 0..n.saturating_sub(1) {
            for j in 0..k {
                out[(t, j)] = self.prices[(t + 1, j)] / self.prices[(t, j)] - 1.0;
            }
        }
        out
    }

    /// Table restricted to the first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dates: self.dates[..n].to_vec(),
            names: self.names.clone(),
            prices: self.prices.rows(0, n).into_owned(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        writer.write_record(&header)?;
        for (i, date) in self.dates.iter().enumerate() {
            let mut record = vec![date.format("%Y-%m-%d").to_string()];
            for j in 0..self.width() {
                record.push(format!("{}", self.prices[(i, j)]));
            }
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Parse a `date,NAME1,...,NAMEk` CSV into a validated table.
///
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_price_csv(path: &Path, policy: MissingPolicy) -> Result<PriceTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("date") {
        return Err(Error::Parse(
            "header row must start with a `date` column".to_string(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Parse("no price series columns".to_string()));
    }
    let k = names.len();

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut last_seen: Vec<Option<f64>> = vec![None; k];
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() != k + 1 {
            return Err(Error::Parse(format!(
                "row {line} has {} fields, expected {}",
                record.len(),
                k + 1
            )));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| Error::Parse(format!("row {line}: bad date {:?}: {e}", &record[0])))?;

        let mut row = Vec::with_capacity(k);
        let mut dropped = false;
        for j in 0..k {
            let cell = &record[j + 1];
            let value = if cell.is_empty() {
                match policy {
                    MissingPolicy::ForwardFill => match last_seen[j] {
                        Some(v) => v,
                        None => {
                            return Err(Error::InvalidPrice {
                                row: line,
                                message: format!(
                                    "series {} is missing with no prior value to fill from",
                                    names[j]
                                ),
                            })
                        }
                    },
                    MissingPolicy::DropRow => {
                        dropped = true;
                        break;
                    }
                }
            } else {
                let v: f64 = cell.parse().map_err(|e| {
                    Error::Parse(format!("row {line}: bad price {cell:?}: {e}"))
                })?;
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::InvalidPrice {
                        row: line,
                        message: format!("series {} has non-positive price {v}", names[j]),
                    });
                }
                v
            };
            row.push(value);
        }
        if dropped {
            continue;
        }
        for (j, &v) in row.iter().enumerate() {
            last_seen[j] = Some(v);
        }
        if let Some(&prev) = dates.last() {
            if date <= prev {
                return Err(Error::Parse(format!(
                    "row {line}: dates not strictly increasing ({date} follows {prev})"
                )));
            }
        }
        dates.push(date);
        rows.push(row);
    }

    let n = rows.len();
    let prices = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    PriceTable::new(dates, names, prices)
}
