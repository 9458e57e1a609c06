//! Price ingestion, log returns, sliding windows and chronological splits.

mod cache;
mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};

pub use cache::{read_cache, write_cache, Cached};
pub use synth::{synthetic, Family, SynthConfig};

/// Daily log returns, `n` rows by `M` assets, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub returns: Vec<f64>,
    /// Price rows dropped for missing or non-positive cells.
    pub dropped_rows: usize,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, returns: Vec<f64>) -> Result<Self> {
        let p = Self {
            dates,
            assets,
            returns,
            dropped_rows: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(invalid("panel has no assets"));
        }
        if self.returns.len() != self.dates.len() * self.assets.len() {
            return Err(invalid("panel returns do not match dates x assets"));
        }
        if let Some(w) = self.dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(invalid(format!("panel dates not strictly increasing at {}", w[1])));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_assets();
        &self.returns[i * m..(i + 1) * m]
    }

    /// Return series of asset `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(usize, NaiveDate, Vec<Option<f64>>)>)> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("date") {
        return Err(parse_err(path, 1, "header must be `date,TICKER1,...`"));
    }
    let assets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != assets.len() + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", assets.len() + 1, rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| parse_err(path, line, format!("bad date `{}`: {e}", &rec[0])))?;
        let cells = rec
            .iter()
            .skip(1)
            .map(|s| {
                if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| parse_err(path, line, format!("bad number `{s}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, date, cells));
    }
    Ok((assets, rows))
}

/// Loads a `date,TICKER..` price CSV and converts it to log returns.
/// Rows with a missing or non-positive price are dropped and counted.
pub fn load_prices(path: &Path) -> Result<ReturnPanel> {
    let (assets, rows) = read_table(path)?;
    let mut kept: Vec<(NaiveDate, Vec<f64>)> = Vec::with_capacity(rows.len());
    let mut dropped = 0;
    for (line, date, cells) in rows {
        if let Some((prev, _)) = kept.last() {
            if date <= *prev {
                return Err(parse_err(path, line, format!("date {date} not after {prev}")));
            }
        }
        let prices: Option<Vec<f64>> = cells.into_iter().map(|c| c.filter(|p| *p > 0.0 && p.is_finite())).collect();
        match prices {
            Some(p) => kept.push((date, p)),
            None => dropped += 1,
        }
    }
    if kept.len() < 2 {
        return Err(parse_err(path, 0, format!("need at least 2 usable price rows, found {}", kept.len())));
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing or non-positive prices", path.display());
    }
    let mut dates = Vec::with_capacity(kept.len() - 1);
    let mut returns = Vec::with_capacity((kept.len() - 1) * assets.len());
    for w in kept.windows(2) {
        dates.push(w[1].0);
        returns.extend(w[0].1.iter().zip(&w[1].1).map(|(a, b)| (b / a).ln()));
    }
    Ok(ReturnPanel {
        dates,
        assets,
        returns,
        dropped_rows: dropped,
    })
}

pub fn write_returns_csv(panel: &ReturnPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["date".to_string()];
    header.extend(panel.assets.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for i in 0..panel.n_rows() {
        let mut rec = vec![panel.dates[i].format("%Y-%m-%d").to_string()];
        // shortest representation that parses back to the same bits
        rec.extend(panel.row(i).iter().map(|x| format!("{x:?}")));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a returns CSV written by [`write_returns_csv`]; no cell may be missing.
pub fn read_returns_csv(path: &Path) -> Result<ReturnPanel> {
    let (assets, rows) = read_table(path)?;
    let mut dates = Vec::with_capacity(rows.len());
    let mut returns = Vec::with_capacity(rows.len() * assets.len());
    for (line, date, cells) in rows {
        dates.push(date);
        for c in cells {
            returns.push(c.ok_or_else(|| parse_err(path, line, "missing return"))?);
        }
    }
    let panel = ReturnPanel {
        dates,
        assets,
        returns,
        dropped_rows: 0,
    };
    panel.validate()?;
    Ok(panel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Context/scenario pairs cut from a panel. Window `i` uses panel rows
/// `starts[i] .. starts[i] + cond_len` as context and the following
/// `horizon` rows as scenario, both transposed to assets x time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDataset {
    pub panel: ReturnPanel,
    pub cond_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
    /// `None` marks a sample purged at a split boundary.
    pub splits: Vec<Option<Split>>,
}

/// Stacked contexts `(B, M*T_c)` and scenarios `(B, M*T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub contexts: Tensor,
    pub scenarios: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.contexts.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_windows(panel: &ReturnPanel, cond_len: usize, horizon: usize, stride: usize) -> Result<WindowDataset> {
    if cond_len == 0 || horizon == 0 || stride == 0 {
        return Err(invalid("window lengths and stride must be at least 1"));
    }
    let n = panel.n_rows();
    if n < cond_len + horizon {
        return Err(invalid(format!(
            "panel has {n} rows, windows need at least {}",
            cond_len + horizon
        )));
    }
    let count = (n - cond_len - horizon) / stride + 1;
    let starts: Vec<usize> = (0..count).map(|i| i * stride).collect();
    Ok(WindowDataset {
        panel: panel.clone(),
        cond_len,
        horizon,
        stride,
        splits: vec![Some(Split::Train); starts.len()],
        starts,
    })
}

fn floor_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.panel.n_assets()
    }

    pub fn context_len(&self) -> usize {
        self.n_assets() * self.cond_len
    }

    pub fn scenario_len(&self) -> usize {
        self.n_assets() * self.horizon
    }

    fn block(&self, first_row: usize, len: usize) -> Vec<f64> {
        let m = self.n_assets();
        let mut out = vec![0.0; m * len];
        for t in 0..len {
            let row = self.panel.row(first_row + t);
            for j in 0..m {
                out[j * len + t] = row[j];
            }
        }
        out
    }

    /// Context of sample `i`, row-major `M x T_c`.
    pub fn context(&self, i: usize) -> Vec<f64> {
        self.block(self.starts[i], self.cond_len)
    }

    /// Scenario of sample `i`, row-major `M x T`.
    pub fn scenario(&self, i: usize) -> Vec<f64> {
        self.block(self.starts[i] + self.cond_len, self.horizon)
    }

    /// Panel row range covered by sample `i`'s scenario.
    pub fn scenario_rows(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.starts[i] + self.cond_len;
        s..s + self.horizon
    }

    pub fn origin_date(&self, i: usize) -> NaiveDate {
        self.panel.dates[self.starts[i] + self.cond_len]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == Some(split)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == Some(split)).count()
    }

    pub fn purged(&self) -> usize {
        self.splits.iter().filter(|s| s.is_none()).count()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let (dc, ds) = (self.context_len(), self.scenario_len());
        let mut c = Vec::with_capacity(idx.len() * dc);
        let mut s = Vec::with_capacity(idx.len() * ds);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            c.extend(self.context(i));
            s.extend(self.scenario(i));
        }
        Ok(Batch {
            contexts: Tensor::new(vec![idx.len(), dc], c)?,
            scenarios: Tensor::new(vec![idx.len(), ds], s)?,
        })
    }

    pub fn split_batch(&self, split: Split) -> Result<Batch> {
        self.batch(&self.indices(split))
    }

    /// Assigns contiguous chronological blocks of `floor(ratio * n)` samples
    /// (the last split takes the remainder), then purges samples whose
    /// scenario rows overlap the preceding split.
    pub fn split(mut self, ratios: [f64; 3]) -> Result<Self> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
        }
        let n = self.len();
        let n_train = floor_count(ratios[0], n);
        let n_val = floor_count(ratios[1], n).min(n - n_train);
        let mut tags: Vec<Option<Split>> = (0..n)
            .map(|i| {
                Some(if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                })
            })
            .collect();
        for split in Split::ALL {
            if !tags.contains(&Some(split)) {
                return Err(invalid(format!("split `{split}` would be empty")));
            }
        }
        // purge later-split samples overlapping the previous block's scenarios
        let mut prev_end: Option<usize> = None;
        let mut current = Split::Train;
        for i in 0..n {
            let tag = tags[i].expect("assigned");
            let rows = self.scenario_rows(i);
            if tag != current {
                current = tag;
                prev_end = (0..i)
                    .filter(|&k| tags[k].is_some() && tags[k] != Some(tag))
                    .map(|k| self.scenario_rows(k).end)
                    .max();
            }
            if let Some(end) = prev_end {
                if tag != Split::Train && rows.start < end {
                    tags[i] = None;
                }
            }
        }
        for split in Split::ALL {
            if !tags.contains(&Some(split)) {
                return Err(invalid(format!("split `{split}` is empty after purging boundary overlap")));
            }
        }
        self.splits = tags;
        Ok(self)
    }

    /// Fails if any sample's scenario rows overlap another split's scenario rows.
    pub fn check_leakage(&self) -> Result<()> {
        let mut ranges: Vec<(Split, usize, usize)> = Vec::new();
        for split in Split::ALL {
            let idx = self.indices(split);
            if let (Some(lo), Some(hi)) = (
                idx.iter().map(|&i| self.scenario_rows(i).start).min(),
                idx.iter().map(|&i| self.scenario_rows(i).end).max(),
            ) {
                ranges.push((split, lo, hi));
            }
        }
        for i in 0..self.len() {
            let Some(own) = self.splits[i] else { continue };
            let rows = self.scenario_rows(i);
            for &(split, lo, hi) in &ranges {
                if split != own && rows.start < hi && lo < rows.end {
                    return Err(invalid(format!(
                        "sample {i} ({own}) scenario rows {rows:?} overlap the {split} range {lo}..{hi}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    pub(crate) fn ramp_panel(n: usize, m: usize) -> ReturnPanel {
        let dates = (0..n).map(day).collect();
        let assets = (0..m).map(|j| format!("A{j}")).collect();
        let returns = (0..n * m).map(|k| k as f64).collect();
        ReturnPanel::new(dates, assets, returns).unwrap()
    }

    #[test]
    fn log_returns() {
        let f = csv_file("date,X,Y\n2020-01-01,100,100\n2020-01-02,100,110\n");
        let p = load_prices(f.path()).unwrap();
        assert_eq!(p.returns[0], 0.0);
        assert!((p.returns[1] - 1.1f64.ln()).abs() < 1e-15);
        assert!((p.returns[1] - 0.09531).abs() < 1e-5);
    }

    #[test]
    fn missing_rows_are_dropped() {
        let f = csv_file("date,X,Y\n2020-01-01,100,100\n2020-01-02,,101\n2020-01-03,101,-1\n2020-01-04,102,99\n");
        let p = load_prices(f.path()).unwrap();
        assert_eq!(p.dropped_rows, 2);
        assert_eq!(p.n_rows(), 1);
        assert_eq!(p.dates[0], NaiveDate::from_ymd_opt(2020, 1, 4).unwrap());
    }

    #[test]
    fn parse_errors_carry_line() {
        let f = csv_file("date,X\n2020-01-01,100\n2020-01-02,abc\n");
        let err = load_prices(f.path()).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        let f = csv_file("date,X\n2020-01-01,100\n");
        assert!(load_prices(f.path()).is_err());
        let f = csv_file("date,X\n2020-01-02,100\n2020-01-01,100\n");
        assert!(load_prices(f.path()).is_err());
    }

    #[test]
    fn returns_csv_round_trip_is_bit_identical() {
        let mut p = ramp_panel(30, 3);
        for (k, x) in p.returns.iter_mut().enumerate() {
            *x = ((k as f64) * 0.3719).sin() * 1e-2 / 3.0;
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        write_returns_csv(&p, f.path()).unwrap();
        let q = read_returns_csv(f.path()).unwrap();
        assert_eq!(p.dates, q.dates);
        assert!(p.returns.iter().zip(&q.returns).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp_panel(15, 2), 5, 10, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp_panel(20, 2), 5, 10, 1).unwrap().len(), 6);
        assert_eq!(make_windows(&ramp_panel(20, 2), 5, 10, 20).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp_panel(20, 2), 5, 10, 2).unwrap().len(), 3);
        assert!(make_windows(&ramp_panel(14, 2), 5, 10, 1).is_err());
    }

    #[test]
    fn windows_reconstruct_panel_slice() {
        let p = ramp_panel(25, 3);
        let ds = make_windows(&p, 4, 6, 3).unwrap();
        for i in 0..ds.len() {
            let (c, s) = (ds.context(i), ds.scenario(i));
            for j in 0..3 {
                let mut joined: Vec<f64> = c[j * 4..(j + 1) * 4].to_vec();
                joined.extend_from_slice(&s[j * 6..(j + 1) * 6]);
                let slice: Vec<f64> = (0..10).map(|t| p.row(ds.starts[i] + t)[j]).collect();
                assert_eq!(joined, slice);
            }
        }
    }

    #[test]
    fn split_counts() {
        // non-overlapping windows so nothing is purged
        let ds = make_windows(&ramp_panel(150, 1), 5, 10, 15).unwrap().split([0.8, 0.1, 0.1]).unwrap();
        assert_eq!((ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)), (8, 1, 1));
        let ds = make_windows(&ramp_panel(1500, 1), 5, 10, 15).unwrap().split([0.8, 0.1, 0.1]).unwrap();
        assert_eq!((ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)), (80, 10, 10));
        let ds = make_windows(&ramp_panel(150, 1), 5, 10, 15).unwrap();
        assert!(ds.split([1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn overlapping_boundaries_are_purged() {
        let ds = make_windows(&ramp_panel(400, 2), 5, 10, 1).unwrap();
        let n = ds.len();
        let ds = ds.split([0.8, 0.1, 0.1]).unwrap();
        assert_eq!(ds.purged(), 2 * 9);
        assert_eq!(ds.count(Split::Train), (n as f64 * 0.8).floor() as usize);
        ds.check_leakage().unwrap();
        let mut leaky = ds.clone();
        leaky.splits = leaky.splits.iter().map(|s| Some(s.unwrap_or(Split::Val))).collect();
        assert!(leaky.check_leakage().is_err());
    }

    #[test]
    fn batches_stack_rows() {
        let ds = make_windows(&ramp_panel(30, 2), 3, 4, 1).unwrap();
        let b = ds.batch(&[0, 5]).unwrap();
        assert_eq!(b.contexts.shape(), &[2, 6]);
        assert_eq!(b.scenarios.row(1), ds.scenario(5).as_slice());
        assert!(ds.batch(&[999]).is_err());
    }
}
