use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Input layout of the CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvFormat {
    /// One row per `(unit, period, feature)` with a `value` column.
    #[default]
    Long,
    /// One row per `(unit, period)`; every other column is a feature.
    Wide,
}

/// What to do with missing `(unit, period, feature)` cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FillPolicy {
    #[default]
    Error,
    /// Carry the last observation forward for the listed features
    /// (`"*"` selects all features). Leading gaps are still an error.
    Locf(Vec<String>),
}

/// Column names and identification of the treated unit and treatment date.
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub unit_col: String,
    pub period_col: String,
    pub feature_col: String,
    pub value_col: String,
    pub treated_unit: String,
    /// First post-treatment period; every earlier period is pre-treatment.
    pub first_post_period: i64,
    pub format: CsvFormat,
    pub fill: FillPolicy,
}

impl PanelSchema {
    pub fn new(treated_unit: impl Into<String>, first_post_period: i64) -> Self {
        Self {
            unit_col: "unit".into(),
            period_col: "period".into(),
            feature_col: "feature".into(),
            value_col: "value".into(),
            treated_unit: treated_unit.into(),
            first_post_period,
            format: CsvFormat::Long,
            fill: FillPolicy::Error,
        }
    }
}

/// Balanced panel of `N + 1` units, `T0 + T1` periods and `M` features.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    periods: Vec<i64>,
    feature_labels: Vec<String>,
    /// `[unit][period][feature]`, row-major.
    values: Vec<f64>,
    t0: usize,
}

impl PanelDataset {
    /// Builds a panel from a dense `[unit][period][feature]` array. The first
    /// unit is the treated one; the first `t0` periods are pre-treatment.
    pub fn new(
        unit_ids: Vec<String>,
        periods: Vec<i64>,
        feature_labels: Vec<String>,
        values: Vec<f64>,
        t0: usize,
    ) -> Result<Self> {
        let (u, t, m) = (unit_ids.len(), periods.len(), feature_labels.len());
        if u < 2 {
            return Err(Error::Data(format!("need at least one donor unit, got {} units", u)));
        }
        if m == 0 {
            return Err(Error::Data("panel has no features".into()));
        }
        if t0 < 1 || t0 >= t {
            return Err(Error::Data(format!(
                "need T0 >= 1 and T1 >= 1, got T0 = {} of {} periods",
                t0, t
            )));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("periods must be strictly increasing".into()));
        }
        if values.len() != u * t * m {
            return Err(Error::Dimension(format!(
                "values has length {}, expected {} x {} x {}",
                values.len(),
                u,
                t,
                m
            )));
        }
        let panel = Self { unit_ids, periods, feature_labels, values, t0 };
        if let Some((ui, ti, fi)) = panel.first_missing() {
            return Err(Error::Data(format!(
                "missing cell (unit {}, period {}, feature {})",
                panel.unit_ids[ui], panel.periods[ti], panel.feature_labels[fi]
            )));
        }
        Ok(panel)
    }

    fn first_missing(&self) -> Option<(usize, usize, usize)> {
        let (t, m) = (self.periods.len(), self.feature_labels.len());
        self.values.iter().position(|v| !v.is_finite()).map(|idx| {
            let ui = idx / (t * m);
            let rem = idx % (t * m);
            (ui, rem / m, rem % m)
        })
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn treated_unit(&self) -> &str {
        &self.unit_ids[0]
    }

    pub fn donor_ids(&self) -> &[String] {
        &self.unit_ids[1..]
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn feature_labels(&self) -> &[String] {
        &self.feature_labels
    }

    /// Number of donors `N`.
    pub fn n_donors(&self) -> usize {
        self.unit_ids.len() - 1
    }

    pub fn n_features(&self) -> usize {
        self.feature_labels.len()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn t1(&self) -> usize {
        self.periods.len() - self.t0
    }

    pub fn post_periods(&self) -> &[i64] {
        &self.periods[self.t0..]
    }

    pub fn feature_index(&self, label: &str) -> Option<usize> {
        self.feature_labels.iter().position(|f| f == label)
    }

    pub fn period_index(&self, period: i64) -> Option<usize> {
        self.periods.iter().position(|&p| p == period)
    }

    pub fn value(&self, unit: usize, period: usize, feature: usize) -> f64 {
        let (t, m) = (self.periods.len(), self.feature_labels.len());
        self.values[unit * t * m + period * m + feature]
    }

    /// Full time series of one feature for one unit.
    pub fn series(&self, unit: usize, feature: usize) -> Vec<f64> {
        (0..self.periods.len()).map(|t| self.value(unit, t, feature)).collect()
    }

    /// First differences (optionally of logs) of every series. The first
    /// period is dropped, so `T0` shrinks by one.
    pub fn differenced(&self, log: bool) -> Result<Self> {
        if self.t0 < 2 {
            return Err(Error::Data("differencing needs T0 >= 2".into()));
        }
        let (u, t, m) = (self.unit_ids.len(), self.periods.len(), self.feature_labels.len());
        let mut values = Vec::with_capacity(u * (t - 1) * m);
        for ui in 0..u {
            for ti in 1..t {
                for fi in 0..m {
                    let (prev, cur) = (self.value(ui, ti - 1, fi), self.value(ui, ti, fi));
                    let v = if log {
                        if prev <= 0.0 || cur <= 0.0 {
                            return Err(Error::Data(format!(
                                "log-difference of non-positive value for unit {}",
                                self.unit_ids[ui]
                            )));
                        }
                        cur.ln() - prev.ln()
                    } else {
                        cur - prev
                    };
                    values.push(v);
                }
            }
        }
        Self::new(
            self.unit_ids.clone(),
            self.periods[1..].to_vec(),
            self.feature_labels.clone(),
            values,
            self.t0 - 1,
        )
    }

    /// Writes the panel in long format (`unit,period,feature,value`).
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["unit", "period", "feature", "value"]).map_err(|e| csv_err(path, e))?;
        for (ui, unit) in self.unit_ids.iter().enumerate() {
            for (ti, period) in self.periods.iter().enumerate() {
                for (fi, feature) in self.feature_labels.iter().enumerate() {
                    let v = self.value(ui, ti, fi);
                    w.write_record([unit.as_str(), &period.to_string(), feature, &format!("{}", v)])
                        .map_err(|e| csv_err(path, e))?;
                }
            }
        }
        w.flush().map_err(io_err)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            let msg = e.to_string();
            Error::Io { path: path.display().to_string(), source: std::io::Error::other(msg) }
        }
        _ => Error::Parse {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        },
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column '{}'", name)))
}

fn parse_num<T: std::str::FromStr>(s: &str, row: usize, what: &str) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Parse {
        row,
        message: format!("non-numeric {} '{}'", what, s),
    })
}

type Cells = HashMap<(String, i64, String), f64>;

/// Reads a UTF-8 CSV panel and validates it into a balanced [`PanelDataset`].
///
/// Row numbers in parse errors are 1-based file lines (the header is line 1).
pub fn load_panel(path: &Path, schema: &PanelSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let unit_i = column(&headers, &schema.unit_col)?;
    let period_i = column(&headers, &schema.period_col)?;

    let mut cells: Cells = HashMap::new();
    let mut units: Vec<String> = Vec::new();
    let mut seen_units = BTreeSet::new();
    let mut periods = BTreeSet::new();
    let mut features: Vec<String> = Vec::new();

    let insert = |cells: &mut Cells, key: (String, i64, String), v: f64, row: usize| -> Result<()> {
        if cells.insert(key.clone(), v).is_some() {
            return Err(Error::Data(format!(
                "duplicate cell (unit {}, period {}, feature {}) at row {}",
                key.0, key.1, key.2, row
            )));
        }
        Ok(())
    };

    match schema.format {
        CsvFormat::Long => {
            let feature_i = column(&headers, &schema.feature_col)?;
            let value_i = column(&headers, &schema.value_col)?;
            for (k, rec) in reader.records().enumerate() {
                let row = k + 2;
                let rec = rec.map_err(|e| csv_err(path, e))?;
                let unit = rec.get(unit_i).unwrap_or("").trim().to_string();
                let period: i64 = parse_num(rec.get(period_i).unwrap_or(""), row, "period")?;
                let feature = rec.get(feature_i).unwrap_or("").trim().to_string();
                let value: f64 = parse_num(rec.get(value_i).unwrap_or(""), row, "value")?;
                if seen_units.insert(unit.clone()) {
                    units.push(unit.clone());
                }
                if !features.contains(&feature) {
                    features.push(feature.clone());
                }
                periods.insert(period);
                insert(&mut cells, (unit, period, feature), value, row)?;
            }
        }
        CsvFormat::Wide => {
            let feature_cols: Vec<(usize, String)> = headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != unit_i && *i != period_i)
                .map(|(i, h)| (i, h.trim().to_string()))
                .collect();
            if feature_cols.is_empty() {
                return Err(Error::Schema("wide CSV has no feature columns".into()));
            }
            features = feature_cols.iter().map(|(_, h)| h.clone()).collect();
            for (k, rec) in reader.records().enumerate() {
                let row = k + 2;
                let rec = rec.map_err(|e| csv_err(path, e))?;
                let unit = rec.get(unit_i).unwrap_or("").trim().to_string();
                let period: i64 = parse_num(rec.get(period_i).unwrap_or(""), row, "period")?;
                if seen_units.insert(unit.clone()) {
                    units.push(unit.clone());
                }
                periods.insert(period);
                for (ci, label) in &feature_cols {
                    let raw = rec.get(*ci).unwrap_or("").trim();
                    if raw.is_empty() {
                        continue;
                    }
                    let value: f64 = parse_num(raw, row, "value")?;
                    insert(&mut cells, (unit.clone(), period, label.clone()), value, row)?;
                }
            }
        }
    }

    if features.is_empty() {
        return Err(Error::Schema("CSV contains no feature values".into()));
    }
    let treated_pos = units
        .iter()
        .position(|u| *u == schema.treated_unit)
        .ok_or_else(|| Error::Schema(format!("treated unit '{}' not found", schema.treated_unit)))?;
    let treated = units.remove(treated_pos);
    units.insert(0, treated);

    let periods: Vec<i64> = periods.into_iter().collect();
    let t0 = periods.iter().filter(|&&p| p < schema.first_post_period).count();

    let locf: BTreeMap<&str, bool> = match &schema.fill {
        FillPolicy::Error => BTreeMap::new(),
        FillPolicy::Locf(list) => features
            .iter()
            .map(|f| (f.as_str(), list.iter().any(|l| l == "*" || l == f)))
            .collect(),
    };

    let mut values = Vec::with_capacity(units.len() * periods.len() * features.len());
    for unit in &units {
        let mut last: Vec<Option<f64>> = vec![None; features.len()];
        let mut block = vec![0.0; periods.len() * features.len()];
        for (ti, &period) in periods.iter().enumerate() {
            for (fi, feature) in features.iter().enumerate() {
                let v = match cells.get(&(unit.clone(), period, feature.clone())) {
                    Some(&v) => v,
                    None => match (locf.get(feature.as_str()), last[fi]) {
                        (Some(true), Some(prev)) => prev,
                        _ => {
                            return Err(Error::Data(format!(
                                "missing cell (unit {}, period {}, feature {})",
                                unit, period, feature
                            )))
                        }
                    },
                };
                last[fi] = Some(v);
                block[ti * features.len() + fi] = v;
            }
        }
        values.extend(block);
    }
    PanelDataset::new(units, periods, features, values, t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_units_three_periods() {
        let f = write(
            "unit,period,feature,value\n\
             b,1,y,1.0\nb,2,y,2.0\nb,3,y,3.0\n\
             a,1,y,1.5\na,2,y,2.5\na,3,y,3.5\n",
        );
        let panel = load_panel(f.path(), &PanelSchema::new("a", 3)).unwrap();
        assert_eq!(panel.n_donors(), 1);
        assert_eq!(panel.n_features(), 1);
        assert_eq!(panel.t0() + panel.t1(), 3);
        assert_eq!(panel.treated_unit(), "a");
        assert_eq!(panel.series(0, 0), vec![1.5, 2.5, 3.5]);
    }

    #[test]
    fn missing_cell_is_named() {
        let f = write("unit,period,feature,value\na,1,y,1\na,2,y,2\nb,1,y,1\n");
        let err = load_panel(f.path(), &PanelSchema::new("a", 2)).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("unit b") && msg.contains("period 2"), "{}", msg),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn locf_fills_gap() {
        let f = write("unit,period,feature,value\na,1,y,1\na,2,y,2\na,3,y,3\nb,1,y,7\nb,3,y,9\n");
        let mut schema = PanelSchema::new("a", 3);
        schema.fill = FillPolicy::Locf(vec!["y".into()]);
        let panel = load_panel(f.path(), &schema).unwrap();
        assert_eq!(panel.series(1, 0), vec![7.0, 7.0, 9.0]);
    }

    #[test]
    fn non_numeric_reports_row() {
        let f = write("unit,period,feature,value\na,1,y,1\na,2,y,abc\n");
        match load_panel(f.path(), &PanelSchema::new("a", 2)).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write("unit,time,feature,value\na,1,y,1\n");
        assert!(matches!(load_panel(f.path(), &PanelSchema::new("a", 2)), Err(Error::Schema(_))));
    }

    #[test]
    fn wide_format_matches_long() {
        let long = write(
            "unit,period,feature,value\na,1,y,1\na,1,x,5\na,2,y,2\na,2,x,6\nb,1,y,3\nb,1,x,7\nb,2,y,4\nb,2,x,8\n",
        );
        let wide = write("unit,period,y,x\na,1,1,5\na,2,2,6\nb,1,3,7\nb,2,4,8\n");
        let p_long = load_panel(long.path(), &PanelSchema::new("a", 2)).unwrap();
        let mut schema = PanelSchema::new("a", 2);
        schema.format = CsvFormat::Wide;
        let p_wide = load_panel(wide.path(), &schema).unwrap();
        assert_eq!(p_long, p_wide);
    }

    #[test]
    fn differencing_drops_first_period() {
        let panel = PanelDataset::new(
            vec!["a".into(), "b".into()],
            vec![1, 2, 3],
            vec!["y".into()],
            vec![1.0, 3.0, 6.0, 2.0, 2.0, 5.0],
            2,
        )
        .unwrap();
        let d = panel.differenced(false).unwrap();
        assert_eq!(d.t0(), 1);
        assert_eq!(d.series(0, 0), vec![2.0, 3.0]);
        assert_eq!(d.series(1, 0), vec![0.0, 3.0]);
    }
}
