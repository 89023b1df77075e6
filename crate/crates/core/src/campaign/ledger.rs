//! Append-only CSV ledger of run records.
//!
//! Columns are fixed; reals are stored with six significant digits. Records are
//! quantized to that precision on append, so what is held in memory is exactly what a
//! later load returns.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 14] = [
    "model",
    "recipe",
    "seed",
    "steps",
    "probe_time_s",
    "train_time_s",
    "eval_loss",
    "bench_mmlu",
    "bench_math",
    "bench_code",
    "selected_layers",
    "trainable_params",
    "status",
    "failure_reason",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatusTag {
    Ok,
    Failed,
}

impl RunStatusTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatusTag::Ok => "ok",
            RunStatusTag::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub recipe: String,
    pub seed: u64,
    pub steps: usize,
    pub probe_time_s: f64,
    pub train_time_s: f64,
    pub eval_loss: f64,
    pub bench_mmlu: Option<f64>,
    pub bench_math: Option<f64>,
    pub bench_code: Option<f64>,
    pub selected_layers: Vec<usize>,
    pub trainable_params: usize,
    pub status: RunStatusTag,
    pub failure_reason: String,
}

pub type RecordKey = (String, String, u64, usize);

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        (self.model.clone(), self.recipe.clone(), self.seed, self.steps)
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatusTag::Ok
    }

    /// A failed record with every measurement blank.
    pub fn failed(model: &str, recipe: &str, seed: u64, steps: usize, reason: impl Into<String>) -> Self {
        RunRecord {
            model: model.to_string(),
            recipe: recipe.to_string(),
            seed,
            steps,
            probe_time_s: f64::NAN,
            train_time_s: f64::NAN,
            eval_loss: f64::NAN,
            bench_mmlu: None,
            bench_math: None,
            bench_code: None,
            selected_layers: Vec::new(),
            trainable_params: 0,
            status: RunStatusTag::Failed,
            failure_reason: reason.into(),
        }
    }

    pub fn bench(&self, name: &str) -> Option<f64> {
        match name {
            "mmlu" => self.bench_mmlu,
            "math" => self.bench_math,
            "code" => self.bench_code,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("record {:?}: {m}", self.key())));
        if self.model.is_empty() || self.recipe.is_empty() {
            return bad("empty model or recipe");
        }
        if self.status == RunStatusTag::Failed && self.failure_reason.trim().is_empty() {
            return bad("failed record without a failure reason");
        }
        if self.status == RunStatusTag::Ok && !self.failure_reason.is_empty() {
            return bad("ok record with a failure reason");
        }
        Ok(())
    }

    fn quantized(&self) -> Self {
        let q = |x: f64| parse_real(&format_real(x)).expect("formatted real parses");
        RunRecord {
            probe_time_s: q(self.probe_time_s),
            train_time_s: q(self.train_time_s),
            eval_loss: q(self.eval_loss),
            bench_mmlu: self.bench_mmlu.map(q),
            bench_math: self.bench_math.map(q),
            bench_code: self.bench_code.map(q),
            ..self.clone()
        }
    }

    fn to_row(&self) -> [String; 14] {
        let opt = |x: Option<f64>| x.map(format_real).unwrap_or_default();
        [
            self.model.clone(),
            self.recipe.clone(),
            self.seed.to_string(),
            self.steps.to_string(),
            format_real(self.probe_time_s),
            format_real(self.train_time_s),
            format_real(self.eval_loss),
            opt(self.bench_mmlu),
            opt(self.bench_math),
            opt(self.bench_code),
            self.selected_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            self.trainable_params.to_string(),
            self.status.as_str().to_string(),
            self.failure_reason.clone(),
        ]
    }

    fn from_row(row: &csv::StringRecord) -> std::result::Result<Self, String> {
        if row.len() != COLUMNS.len() {
            return Err(format!("expected {} fields, found {}", COLUMNS.len(), row.len()));
        }
        let int = |i: usize| row[i].parse::<u64>().map_err(|e| format!("{}: {e} ({:?})", COLUMNS[i], &row[i]));
        let real = |i: usize| parse_real(&row[i]).ok_or_else(|| format!("{}: not a number ({:?})", COLUMNS[i], &row[i]));
        let opt = |i: usize| if row[i].is_empty() { Ok(None) } else { real(i).map(Some) };
        let selected_layers = if row[10].is_empty() {
            Vec::new()
        } else {
            row[10]
                .split(';')
                .map(|s| s.parse::<usize>().map_err(|e| format!("selected_layers: {e} ({s:?})")))
                .collect::<std::result::Result<_, _>>()?
        };
        let status = match &row[12] {
            "ok" => RunStatusTag::Ok,
            "failed" => RunStatusTag::Failed,
            other => return Err(format!("status: unknown value {other:?}")),
        };
        let record = RunRecord {
            model: row[0].to_string(),
            recipe: row[1].to_string(),
            seed: int(2)?,
            steps: int(3)? as usize,
            probe_time_s: real(4)?,
            train_time_s: real(5)?,
            eval_loss: real(6)?,
            bench_mmlu: opt(7)?,
            bench_math: opt(8)?,
            bench_code: opt(9)?,
            selected_layers,
            trainable_params: int(11)? as usize,
            status,
            failure_reason: row[13].to_string(),
        };
        record.validate().map_err(|e| e.to_string())?;
        Ok(record)
    }
}

/// Six significant digits, shortest form that parses back to the same value.
pub fn format_real(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("scientific notation parses");
    format!("{rounded}")
}

pub fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    path: Option<PathBuf>,
    records: Vec<RunRecord>,
    keys: HashSet<RecordKey>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Open the ledger at `path`, creating it with a header row when absent or empty.
    pub fn open(path: &Path) -> Result<Self> {
        if path.exists() && fs::metadata(path)?.len() > 0 {
            return Ledger::load(path);
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, format!("{}\n", COLUMNS.join(",")))?;
        Ok(Ledger { path: Some(path.to_path_buf()), ..Ledger::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |line: u64, message: String| Error::Ledger { path: path.to_path_buf(), line, message };
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
        let mut ledger = Ledger { path: Some(path.to_path_buf()), ..Ledger::default() };
        let mut rows = reader.records();
        match rows.next() {
            Some(header) => {
                let header = header.map_err(|e| err(1, e.to_string()))?;
                if header.iter().ne(COLUMNS) {
                    return Err(err(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
                }
            }
            None => return Err(err(1, "missing header row".into())),
        }
        for row in rows {
            let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = row.position().map_or(0, |p| p.line());
            let record = RunRecord::from_row(&row).map_err(|m| err(line, m))?;
            if !ledger.keys.insert(record.key()) {
                return Err(err(line, format!("duplicate key {:?}", record.key())));
            }
            ledger.records.push(record);
        }
        Ok(ledger)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.keys.contains(key)
    }

    pub fn get(&self, key: &RecordKey) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.key() == *key)
    }

    /// Validate, quantize and durably append one record.
    pub fn append(&mut self, record: RunRecord) -> Result<()> {
        record.validate()?;
        let record = record.quantized();
        if self.keys.contains(&record.key()) {
            return Err(Error::DuplicateKey(format!("{:?}", record.key())));
        }
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().append(true).open(path)?;
            file.write_all(&encode_rows(std::slice::from_ref(&record), false)?)?;
            file.sync_data()?;
        }
        self.keys.insert(record.key());
        self.records.push(record);
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        encode_rows(&self.records, true)
    }
}

fn encode_rows(records: &[RunRecord], header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    if header {
        w.write_record(COLUMNS)?;
    }
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(seed: u64, recipe: &str) -> RunRecord {
        RunRecord {
            model: "L12-d128".into(),
            recipe: recipe.into(),
            seed,
            steps: 200,
            probe_time_s: 0.123456789,
            train_time_s: 61.2345678,
            eval_loss: 3.25159265,
            bench_mmlu: Some(0.255),
            bench_math: Some(0.0),
            bench_code: None,
            selected_layers: vec![0, 3, 7],
            trainable_params: 12345,
            status: RunStatusTag::Ok,
            failure_reason: String::new(),
        }
    }

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(0.123456789), "0.123457");
        assert_eq!(format_real(61.2345678), "61.2346");
        assert_eq!(format_real(1.0), "1");
        assert_eq!(format_real(1234567.0), "1234570");
        assert_eq!(format_real(2.5e-9), "0.0000000025");
        assert!(parse_real(&format_real(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn append_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let mut l = Ledger::open(&path).unwrap();
        l.append(sample(42, "standard")).unwrap();
        l.append(RunRecord::failed("L12-d128", "selective", 42, 200, "non-finite loss at step 3, \"quoted\"")).unwrap();
        let back = Ledger::load(&path).unwrap();
        assert_eq!(back.records().len(), 2);
        assert_eq!(back.records()[0], l.records()[0]);
        assert_eq!(back.records()[1].failure_reason, l.records()[1].failure_reason);
        assert!(back.records()[1].eval_loss.is_nan());
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&COLUMNS.join(",")));
        assert!(!text.contains('\r'));
        assert_eq!(fs::read(&path).unwrap(), l.to_csv_bytes().unwrap());
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut l = Ledger::in_memory();
        l.append(sample(42, "standard")).unwrap();
        assert!(matches!(l.append(sample(42, "standard")), Err(Error::DuplicateKey(_))));
        l.append(sample(123, "standard")).unwrap();
    }

    #[test]
    fn failed_record_needs_reason() {
        let mut l = Ledger::in_memory();
        assert!(l.append(RunRecord::failed("m", "standard", 1, 1, " ")).is_err());
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut l = Ledger::open(&path).unwrap();
        l.append(sample(42, "standard")).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("L12-d128,selective,42,200,0.1,1,abc,,,,,,ok,\n");
        fs::write(&path, text).unwrap();
        match Ledger::load(&path) {
            Err(Error::Ledger { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("eval_loss"), "{message}");
            }
            other => panic!("expected ledger error, got {other:?}"),
        }
    }

    #[test]
    fn eighty_one_rows_with_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("master.csv");
        let mut l = Ledger::open(&path).unwrap();
        for i in 0..81u64 {
            let r = if i % 9 == 0 {
                RunRecord::failed("m", "standard", i, 200, "fp16 NaN")
            } else {
                sample(i, if i % 2 == 0 { "standard" } else { "selective" })
            };
            l.append(r).unwrap();
        }
        let back = Ledger::load(&path).unwrap();
        assert_eq!(back.len(), 81);
        assert_eq!(back.records().iter().filter(|r| !r.is_ok()).count(), 9);
    }
}
