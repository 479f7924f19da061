//! Dataset ingestion, chronological windowing, train-only normalisation and the
//! seeded synthetic generator.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Number of calendar features per time step: month, day of month, weekday, hour.
pub const N_MARKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Hourly,
    #[serde(rename = "15min")]
    Min15,
    #[serde(rename = "5min")]
    Min5,
    Daily,
}

impl Frequency {
    pub fn seconds(self) -> i64 {
        match self {
            Frequency::Hourly => 3600,
            Frequency::Min15 => 900,
            Frequency::Min5 => 300,
            Frequency::Daily => 86_400,
        }
    }

    pub fn from_seconds(s: i64) -> Option<Self> {
        [
            Frequency::Hourly,
            Frequency::Min15,
            Frequency::Min5,
            Frequency::Daily,
        ]
        .into_iter()
        .find(|f| f.seconds() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Frequency::Hourly => "hourly",
            Frequency::Min15 => "15min",
            Frequency::Min5 => "5min",
            Frequency::Daily => "daily",
        }
    }
}

/// `T×M` observations on a regular calendar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Tensor,
    timestamps: Vec<NaiveDateTime>,
    frequency: Frequency,
    channels: Vec<String>,
}

impl TimeSeries {
    pub fn new(
        values: Tensor,
        timestamps: Vec<NaiveDateTime>,
        frequency: Frequency,
        channels: Vec<String>,
    ) -> Result<Self> {
        let (t_len, m) = values.dims2()?;
        if values.ndim() != 2 || timestamps.len() != t_len || channels.len() != m {
            return Err(Error::dim(
                "time series",
                values.shape(),
                &[timestamps.len(), channels.len()],
            ));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if (w[1] - w[0]).num_seconds() != frequency.seconds() {
                return Err(Error::Ingestion {
                    row: i + 2,
                    msg: format!("spacing does not match {} frequency", frequency.name()),
                });
            }
        }
        Ok(Self {
            values,
            timestamps,
            frequency,
            channels,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Calendar marks `(month 0–11, day 0–30, weekday 0–6, hour 0–23)` for rows in `range`.
    pub fn marks(&self, range: Range<usize>) -> Tensor {
        let mut data = Vec::with_capacity(range.len() * N_MARKS);
        for ts in &self.timestamps[range.clone()] {
            data.extend_from_slice(&time_marks(ts));
        }
        Tensor::from_parts(vec![range.len(), N_MARKS], data)
    }

    pub fn rows(&self, range: Range<usize>) -> Tensor {
        let m = self.n_channels();
        Tensor::from_parts(
            vec![range.len(), m],
            self.values.data()[range.start * m..range.end * m].to_vec(),
        )
    }

    /// Writes the series in the `date,<channels…>` CSV layout read by [`load_csv`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for (i, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn time_marks(ts: &NaiveDateTime) -> [f64; N_MARKS] {
    [
        ts.month0() as f64,
        ts.day0() as f64,
        ts.weekday().num_days_from_monday() as f64,
        ts.hour() as f64,
    ]
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Column layout expected by [`load_csv`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub date_column: String,
    /// Keep only these channels (in this order); `None` keeps every numeric column.
    pub channels: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            channels: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeries> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parses a header + rows CSV whose first column holds `YYYY-MM-DD HH:MM:SS` timestamps.
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn read_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some(schema.date_column.as_str()) {
        return Err(Error::Ingestion {
            row: 1,
            msg: format!("first column must be `{}`", schema.date_column),
        });
    }
    let all_channels: Vec<String> = header[1..].to_vec();
    if all_channels.is_empty() {
        return Err(Error::Ingestion {
            row: 1,
            msg: "no numeric columns".into(),
        });
    }
    let selected: Vec<usize> = match &schema.channels {
        None => (0..all_channels.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                all_channels
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Ingestion {
                        row: 1,
                        msg: format!("missing column `{n}`"),
                    })
            })
            .collect::<Result<_>>()?,
    };

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Ingestion {
                row,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(rec[0].trim(), TIMESTAMP_FORMAT).map_err(|e| {
            Error::Parse {
                row,
                column: 1,
                msg: format!("bad timestamp `{}`: {e}", &rec[0]),
            }
        })?;
        if let Some(prev) = timestamps.last() {
            if ts == *prev {
                return Err(Error::Ingestion {
                    row,
                    msg: format!("duplicate timestamp {ts}"),
                });
            }
            if ts < *prev {
                return Err(Error::Ingestion {
                    row,
                    msg: format!("timestamp {ts} goes backwards"),
                });
            }
        }
        timestamps.push(ts);
        for &c in &selected {
            let cell = rec[c + 1].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 2,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 2,
                    msg: format!("non-finite cell `{cell}`"),
                });
            }
            values.push(v);
        }
    }
    if timestamps.len() < 2 {
        return Err(Error::Ingestion {
            row: timestamps.len() + 1,
            msg: "at least two rows are needed to infer the sampling frequency".into(),
        });
    }
    let step = (timestamps[1] - timestamps[0]).num_seconds();
    let frequency = Frequency::from_seconds(step).ok_or_else(|| Error::Ingestion {
        row: 3,
        msg: format!("unsupported sampling interval of {step} s"),
    })?;
    for (i, w) in timestamps.windows(2).enumerate() {
        if (w[1] - w[0]).num_seconds() != step {
            return Err(Error::Ingestion {
                row: i + 3,
                msg: format!("gap in timestamps: {} follows {}", w[1], w[0]),
            });
        }
    }
    let t_len = timestamps.len();
    let channels = selected
        .iter()
        .map(|&c| all_channels[c].clone())
        .collect::<Vec<_>>();
    let values = Tensor::new(vec![t_len, channels.len()], values)?;
    TimeSeries::new(values, timestamps, frequency, channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Chronological split proportions, applied in train → val → test order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn single() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0)
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Row ranges of the three splits for a series of length `t_len`.
    pub fn regions(&self, t_len: usize) -> [Range<usize>; 3] {
        let n_train = (t_len as f64 * self.train + 1e-9).floor() as usize;
        let n_test = (t_len as f64 * self.test + 1e-9).floor() as usize;
        let n_val = t_len - n_train.min(t_len) - n_test.min(t_len - n_train.min(t_len));
        let a = n_train.min(t_len);
        let b = a + n_val;
        [0..a, a..b, b..t_len]
    }

    fn fraction(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Number of stride-1 windows in a contiguous region.
pub fn window_count(region_len: usize, look_back: usize, horizon: usize) -> usize {
    (region_len + 1).saturating_sub(look_back + horizon)
}

/// Input/target pairs drawn from one contiguous split region.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub split: Split,
    pub look_back: usize,
    pub horizon: usize,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub time_marks: Vec<Tensor>,
    /// Source row of each window's first input step.
    pub starts: Vec<usize>,
    /// Source rows owned by this split.
    pub region: Range<usize>,
    region_values: Tensor,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Raw rows of this split's region.
    pub fn region_values(&self) -> &Tensor {
        &self.region_values
    }

    /// Copy with inputs and targets z-scored by `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<WindowSet> {
        let mut out = self.clone();
        out.inputs = self
            .inputs
            .iter()
            .map(|x| apply_norm(x, stats))
            .collect::<Result<_>>()?;
        out.targets = self
            .targets
            .iter()
            .map(|y| apply_norm(y, stats))
            .collect::<Result<_>>()?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Splits {
    pub fn get(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Smallest series length for which every split with a positive fraction holds a window.
pub fn minimum_length(look_back: usize, horizon: usize, fractions: &SplitFractions) -> usize {
    let need = look_back + horizon;
    let mut t_len = need;
    loop {
        let regions = fractions.regions(t_len);
        let ok = [Split::Train, Split::Val, Split::Test]
            .iter()
            .zip(regions.iter())
            .all(|(s, r)| fractions.fraction(*s) == 0.0 || r.len() >= need);
        if ok {
            return t_len;
        }
        t_len += 1;
    }
}

/// Stride-1 windows per chronological split. A window never leaves its split's region.
pub fn make_windows(
    series: &TimeSeries,
    look_back: usize,
    horizon: usize,
    fractions: &SplitFractions,
) -> Result<Splits> {
    if look_back == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "look-back and horizon must be at least 1, got {look_back} and {horizon}"
        )));
    }
    fractions.validate()?;
    let min_len = minimum_length(look_back, horizon, fractions);
    if series.len() < min_len {
        return Err(Error::Config(format!(
            "series too short: {} rows, minimum T is {min_len} for look-back {look_back}, horizon {horizon}",
            series.len()
        )));
    }
    let [train, val, test] = fractions.regions(series.len());
    let build = |split: Split, region: Range<usize>| {
        let count = window_count(region.len(), look_back, horizon);
        let mut ws = WindowSet {
            split,
            look_back,
            horizon,
            inputs: Vec::with_capacity(count),
            targets: Vec::with_capacity(count),
            time_marks: Vec::with_capacity(count),
            starts: Vec::with_capacity(count),
            region_values: if region.is_empty() {
                Tensor::zeros(&[1, series.n_channels()])
            } else {
                series.rows(region.clone())
            },
            region: region.clone(),
        };
        for k in 0..count {
            let s = region.start + k;
            ws.inputs.push(series.rows(s..s + look_back));
            ws.targets
                .push(series.rows(s + look_back..s + look_back + horizon));
            ws.time_marks.push(series.marks(s..s + look_back));
            ws.starts.push(s);
        }
        ws
    };
    Ok(Splits {
        train: build(Split::Train, train),
        val: build(Split::Val, val),
        test: build(Split::Test, test),
    })
}

/// Per-channel z-score statistics, always fitted on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source_split: Split,
}

impl NormStats {
    /// Mean 0, std 1: normalisation is the identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            source_split: Split::Train,
        }
    }
}

/// Fits statistics on the train split's region rows (population std, clamped to 1
/// for constant channels).
pub fn fit_norm(train: &WindowSet) -> Result<NormStats> {
    if train.split != Split::Train {
        return Err(Error::Contract(format!(
            "normalisation statistics must come from the train split, got {}",
            train.split.name()
        )));
    }
    if train.region.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let x = train.region_values();
    let (t_len, m) = x.dims2()?;
    let mut mean = vec![0.0; m];
    for i in 0..t_len {
        for (acc, v) in mean.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= t_len as f64);
    let mut var = vec![0.0; m];
    for i in 0..t_len {
        for ((acc, v), mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / t_len as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(NormStats {
        mean,
        std,
        source_split: Split::Train,
    })
}

pub fn apply_norm(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    per_channel(x, stats, |v, mu, sd| (v - mu) / sd)
}

pub fn invert_norm(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    per_channel(x, stats, |v, mu, sd| v * sd + mu)
}

fn per_channel(x: &Tensor, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
    let (t_len, m) = x.dims2()?;
    if m != stats.mean.len() {
        return Err(Error::dim("normalisation", x.shape(), &[stats.mean.len()]));
    }
    let mut out = x.data().to_vec();
    for i in 0..t_len {
        for c in 0..m {
            out[i * m + c] = f(out[i * m + c], stats.mean[c], stats.std[c]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Period in time steps.
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
}

/// One generated channel: `level + slope·t + Σ sinusoids + AR(1) noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub trend_slope: f64,
    #[serde(default)]
    pub ar_phi: f64,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub sinusoids: Vec<Sinusoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    pub frequency: Frequency,
    /// First timestamp, `YYYY-MM-DD HH:MM:SS`.
    pub start: String,
    #[serde(rename = "channel")]
    pub channels: Vec<ChannelSpec>,
}

/// Deterministic synthetic multivariate series.
pub fn gen_synthetic(seed: u64, spec: &SyntheticSpec) -> Result<TimeSeries> {
    if spec.length == 0 || spec.channels.is_empty() {
        return Err(Error::Config(
            "synthetic spec needs length ≥ 1 and at least one channel".into(),
        ));
    }
    for c in &spec.channels {
        if !(c.ar_phi.abs() < 1.0) {
            return Err(Error::Config(format!(
                "channel `{}`: AR coefficient |phi| = {} must be < 1 for stationary noise",
                c.name,
                c.ar_phi.abs()
            )));
        }
        if c.noise_scale < 0.0 || c.sinusoids.iter().any(|s| s.period <= 0.0) {
            return Err(Error::Config(format!(
                "channel `{}`: noise scale must be ≥ 0 and periods > 0",
                c.name
            )));
        }
    }
    let start = NaiveDateTime::parse_from_str(&spec.start, TIMESTAMP_FORMAT)
        .map_err(|e| Error::Config(format!("bad start timestamp `{}`: {e}", spec.start)))?;
    let t_len = spec.length;
    let m = spec.channels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; t_len * m];
    for (c, ch) in spec.channels.iter().enumerate() {
        let stationary_sd = ch.noise_scale / (1.0 - ch.ar_phi * ch.ar_phi).sqrt();
        let mut noise = 0.0;
        for t in 0..t_len {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise = if t == 0 {
                stationary_sd * z
            } else {
                ch.ar_phi * noise + ch.noise_scale * z
            };
            let tf = t as f64;
            let seasonal: f64 = ch
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (2.0 * std::f64::consts::PI * tf / s.period + s.phase).sin())
                .sum();
            values[t * m + c] = ch.level + ch.trend_slope * tf + seasonal + noise;
        }
    }
    let step = chrono::Duration::seconds(spec.frequency.seconds());
    let timestamps = (0..t_len).map(|t| start + step * t as i32).collect();
    let names = spec.channels.iter().map(|c| c.name.clone()).collect();
    TimeSeries::new(
        Tensor::new(vec![t_len, m], values)?,
        timestamps,
        spec.frequency,
        names,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(rows: &[&str]) -> String {
        let mut s = String::from("date,a,b\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn ramp_series(t_len: usize, m: usize) -> TimeSeries {
        let start = NaiveDateTime::parse_from_str("2020-01-01 00:00:00", TIMESTAMP_FORMAT).unwrap();
        let ts = (0..t_len)
            .map(|t| start + chrono::Duration::hours(t as i64))
            .collect();
        let vals = (0..t_len * m).map(|i| i as f64).collect();
        TimeSeries::new(
            Tensor::new(vec![t_len, m], vals).unwrap(),
            ts,
            Frequency::Hourly,
            (0..m).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn loads_well_formed_file() {
        let text = csv_text(&[
            "2016-07-01 00:00:00,1,2",
            "2016-07-01 01:00:00,3,4",
            "2016-07-01 02:00:00,5,6",
        ]);
        let s = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.n_channels(), 2);
        assert_eq!(s.frequency(), Frequency::Hourly);
        assert_eq!(s.values().row(2), &[5.0, 6.0]);
    }

    #[test]
    fn duplicate_timestamp_reports_row() {
        let text = csv_text(&[
            "2016-07-01 00:00:00,1,2",
            "2016-07-01 01:00:00,3,4",
            "2016-07-01 01:00:00,5,6",
        ]);
        match read_csv(text.as_bytes(), &CsvSchema::default()) {
            Err(Error::Ingestion { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_reports_row() {
        let text = csv_text(&[
            "2016-07-01 00:00:00,1,2",
            "2016-07-01 01:00:00,3,4",
            "2016-07-01 03:00:00,5,6",
        ]);
        assert!(matches!(
            read_csv(text.as_bytes(), &CsvSchema::default()),
            Err(Error::Ingestion { row: 4, .. })
        ));
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let text = csv_text(&["2016-07-01 00:00:00,1,x", "2016-07-01 01:00:00,3,4"]);
        assert!(matches!(
            read_csv(text.as_bytes(), &CsvSchema::default()),
            Err(Error::Parse {
                row: 2,
                column: 3,
                ..
            })
        ));
    }

    #[test]
    fn ett_layout_is_hourly_with_seven_channels() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for h in 0..24 {
            text.push_str(&format!(
                "2016-07-01 {h:02}:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531\n"
            ));
        }
        let s = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.frequency(), Frequency::Hourly);
        assert_eq!(s.n_channels(), 7);
        assert_eq!(s.channels()[6], "OT");
    }

    #[test]
    fn schema_selects_channels() {
        let text = csv_text(&["2016-07-01 00:00:00,1,2", "2016-07-01 00:15:00,3,4"]);
        let schema = CsvSchema {
            channels: Some(vec!["b".into()]),
            ..CsvSchema::default()
        };
        let s = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(s.frequency(), Frequency::Min15);
        assert_eq!(s.values().data(), &[2.0, 4.0]);
    }

    #[test]
    fn window_counting() {
        let s = ramp_series(10, 1);
        let w = make_windows(&s, 3, 2, &SplitFractions::single()).unwrap();
        assert_eq!(w.train.len(), 6);
        assert!(w.val.is_empty() && w.test.is_empty());
        assert_eq!(window_count(10, 3, 2), 6);
        assert_eq!(window_count(4, 3, 2), 0);
    }

    #[test]
    fn targets_follow_inputs() {
        let s = ramp_series(12, 1);
        let w = make_windows(&s, 4, 3, &SplitFractions::single()).unwrap();
        for k in 0..w.train.len() {
            let last_in = *w.train.inputs[k].data().last().unwrap();
            assert_eq!(w.train.targets[k].data()[0], last_in + 1.0);
        }
    }

    #[test]
    fn standard_window_shapes() {
        let s = ramp_series(2000, 7);
        let w = make_windows(&s, 96, 96, &SplitFractions::default()).unwrap();
        assert_eq!(w.train.inputs[0].shape(), &[96, 7]);
        assert_eq!(w.train.targets[0].shape(), &[96, 7]);
        assert_eq!(w.train.time_marks[0].shape(), &[96, N_MARKS]);
        let short = make_windows(&s, 24, 12, &SplitFractions::default()).unwrap();
        assert_eq!(short.test.targets[0].shape(), &[12, 7]);
    }

    #[test]
    fn too_short_names_minimum() {
        let s = ramp_series(50, 1);
        let err = make_windows(&s, 24, 12, &SplitFractions::default()).unwrap_err();
        let min = minimum_length(24, 12, &SplitFractions::default());
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains(&format!("minimum T is {min}")));
        assert!(make_windows(&ramp_series(min, 1), 24, 12, &SplitFractions::default()).is_ok());
        assert!(
            make_windows(&ramp_series(min - 1, 1), 24, 12, &SplitFractions::default()).is_err()
        );
    }

    #[test]
    fn windows_stay_inside_their_split() {
        let s = ramp_series(400, 2);
        let w = make_windows(&s, 20, 10, &SplitFractions::default()).unwrap();
        for ws in [&w.train, &w.val, &w.test] {
            assert_eq!(ws.len(), window_count(ws.region.len(), 20, 10));
            for &st in &ws.starts {
                assert!(st >= ws.region.start && st + 30 <= ws.region.end);
            }
        }
        assert_eq!(w.train.region.end, w.val.region.start);
        assert_eq!(w.val.region.end, w.test.region.start);
        assert_eq!(w.test.region.end, 400);
    }

    #[test]
    fn constant_channel_std_is_clamped() {
        let start = NaiveDateTime::parse_from_str("2020-01-01 00:00:00", TIMESTAMP_FORMAT).unwrap();
        let ts = (0..3).map(|t| start + chrono::Duration::hours(t)).collect();
        let s = TimeSeries::new(
            Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap(),
            ts,
            Frequency::Hourly,
            vec!["c".into()],
        )
        .unwrap();
        let w = make_windows(&s, 1, 1, &SplitFractions::single()).unwrap();
        let stats = fit_norm(&w.train).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        let z = apply_norm(s.values(), &stats).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_on_non_train_split_is_refused() {
        let s = ramp_series(400, 1);
        let w = make_windows(&s, 20, 10, &SplitFractions::default()).unwrap();
        assert!(matches!(fit_norm(&w.test), Err(Error::Contract(_))));
    }

    #[test]
    fn norm_round_trip() {
        let s = ramp_series(100, 3);
        let w = make_windows(&s, 5, 5, &SplitFractions::default()).unwrap();
        let stats = fit_norm(&w.train).unwrap();
        let x = &w.test.inputs[3];
        let back = invert_norm(&apply_norm(x, &stats).unwrap(), &stats).unwrap();
        assert!(back.max_abs_diff(x) < 1e-12);
    }

    #[test]
    fn stats_ignore_val_and_test_rows() {
        let s = ramp_series(300, 2);
        let fr = SplitFractions::default();
        let base = fit_norm(&make_windows(&s, 10, 5, &fr).unwrap().train).unwrap();
        let [train, _, _] = fr.regions(300);
        let mut vals = s.values().clone();
        for v in vals.data_mut()[train.end * 2..].iter_mut() {
            *v = -1e6 * *v + 17.0;
        }
        let perturbed = TimeSeries::new(
            vals,
            s.timestamps().to_vec(),
            s.frequency(),
            s.channels().to_vec(),
        )
        .unwrap();
        let again = fit_norm(&make_windows(&perturbed, 10, 5, &fr).unwrap().train).unwrap();
        assert_eq!(base, again);
    }

    fn sine_only(noise: f64, phi: f64, t_len: usize) -> SyntheticSpec {
        SyntheticSpec {
            length: t_len,
            frequency: Frequency::Hourly,
            start: "2016-07-01 00:00:00".into(),
            channels: vec![ChannelSpec {
                name: "s".into(),
                level: 0.0,
                trend_slope: 0.0,
                ar_phi: phi,
                noise_scale: noise,
                sinusoids: vec![Sinusoid {
                    amplitude: 2.0,
                    period: 24.0,
                    phase: 0.3,
                }],
            }],
        }
    }

    #[test]
    fn noiseless_sinusoid_is_exact() {
        let s = gen_synthetic(1, &sine_only(0.0, 0.0, 50)).unwrap();
        for t in 0..50 {
            let exact = 2.0 * (2.0 * std::f64::consts::PI * t as f64 / 24.0 + 0.3).sin();
            assert_eq!(s.values().at(t, 0), exact);
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = sine_only(0.5, 0.5, 200);
        assert_eq!(
            gen_synthetic(9, &spec).unwrap(),
            gen_synthetic(9, &spec).unwrap()
        );
        assert_ne!(
            gen_synthetic(9, &spec).unwrap(),
            gen_synthetic(10, &spec).unwrap()
        );
    }

    #[test]
    fn explosive_ar_is_rejected() {
        assert!(matches!(
            gen_synthetic(1, &sine_only(1.0, 1.0, 10)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen_synthetic(1, &sine_only(1.0, -1.2, 10)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ar_noise_lag_one_autocorrelation() {
        let mut spec = sine_only(1.0, 0.5, 10_000);
        spec.channels[0].sinusoids.clear();
        let s = gen_synthetic(4, &spec).unwrap();
        let x = s.values().data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!((rho - 0.5).abs() < 0.05, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = gen_synthetic(3, &sine_only(0.4, 0.3, 40)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, s);
    }
}
