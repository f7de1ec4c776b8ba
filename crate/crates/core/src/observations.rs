use crate::error::{Error, Result};

/// Noisy measurements of the observed state components on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    /// Indices of the observed state components, increasing.
    pub observed_idx: Vec<usize>,
    /// `values[k][i]` is component `observed_idx[k]` at `times[i]`.
    pub values: Vec<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(times: Vec<f64>, observed_idx: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        if observed_idx.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} observed indices but {} value series",
                observed_idx.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| v.len() != times.len()) {
            return Err(Error::Dimension(format!("series of length {} for {} times", v.len(), times.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("observation times must be strictly increasing".into()));
        }
        if observed_idx.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("observed indices must be strictly increasing".into()));
        }
        Ok(Self { times, observed_idx, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.observed_idx.len()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    /// CSV with a `time` column followed by one `x<i>` column (1-based) per
    /// observed component.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for &c in &self.observed_idx {
            out.push_str(&format!(",x{}", c + 1));
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in &self.values {
                out.push(',');
                out.push_str(&v[i].to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses the layout written by [`ObservationSet::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty observation file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"time") {
            return Err(Error::InvalidInput("first column must be 'time'".into()));
        }
        let observed_idx = cols[1..]
            .iter()
            .map(|c| {
                c.strip_prefix('x')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|n| *n >= 1)
                    .map(|n| n - 1)
                    .ok_or_else(|| Error::InvalidInput(format!("bad column name '{c}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut times = Vec::new();
        let mut values = vec![Vec::new(); observed_idx.len()];
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::InvalidInput(format!("row {} has {} fields", row + 1, fields.len())));
            }
            let parsed = fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad number '{f}'"))))
                .collect::<Result<Vec<_>>>()?;
            times.push(parsed[0]);
            for (k, v) in parsed[1..].iter().enumerate() {
                values[k].push(*v);
            }
        }
        Self::new(times, observed_idx, values)
    }
}
