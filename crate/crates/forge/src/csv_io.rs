//! Telemetry CSV. Floats are written in shortest round-trip form, with
//! `nan`, `inf` and `-inf` for the non-finite values; flags are `0`/`1`.

use std::io::{Read, Write};
use std::path::Path;

use sdc_forge_core::telemetry::{StepTelemetry, CSV_HEADER};

use crate::error::ForgeError;

pub fn fmt_f32(x: f32) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        x.to_string()
    }
}

pub fn parse_f32(s: &str) -> Option<f32> {
    match s.trim() {
        "nan" => Some(f32::NAN),
        "inf" => Some(f32::INFINITY),
        "-inf" => Some(f32::NEG_INFINITY),
        t => t.parse().ok().filter(|v: &f32| v.is_finite()),
    }
}

fn flag(b: bool) -> &'static str {
    if b { "1" } else { "0" }
}

fn row(r: &StepTelemetry) -> [String; 12] {
    [
        r.step.to_string(),
        fmt_f32(r.train_loss),
        fmt_f32(r.grad_norm_pre),
        fmt_f32(r.grad_norm_post),
        fmt_f32(r.max_attn_logit),
        fmt_f32(r.r_t),
        fmt_f32(r.delta_r),
        fmt_f32(r.delta_g),
        fmt_f32(r.lr),
        flag(r.fault_active).into(),
        flag(r.detected).into(),
        flag(r.recomputed).into(),
    ]
}

/// Streaming writer; the header goes out on creation.
pub struct TelemetryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(w: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(CSV_HEADER)?;
        Ok(TelemetryWriter { inner })
    }

    pub fn push(&mut self, r: &StepTelemetry) -> csv::Result<()> {
        self.inner.write_record(row(r))
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_records(path: &Path, records: &[StepTelemetry]) -> Result<(), ForgeError> {
    let file = std::fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
    let to_io = |e: csv::Error| ForgeError::io(path, e.into());
    let mut w = TelemetryWriter::new(std::io::BufWriter::new(file)).map_err(to_io)?;
    for r in records {
        w.push(r).map_err(to_io)?;
    }
    w.finish().map_err(|e| ForgeError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<StepTelemetry>, ForgeError> {
    let file = std::fs::File::open(path).map_err(|e| ForgeError::io(path, e))?;
    read_records_from(file, path)
}

/// Parse telemetry from any reader; `path` only labels errors.
pub fn read_records_from<R: Read>(input: R, path: &Path) -> Result<Vec<StepTelemetry>, ForgeError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut out = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ForgeError::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !saw_header {
            if rec.iter().ne(CSV_HEADER) {
                return Err(ForgeError::parse(path, line, "unexpected header"));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != CSV_HEADER.len() {
            return Err(ForgeError::parse(
                path,
                line,
                format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            ));
        }
        let float = |i: usize| {
            parse_f32(&rec[i]).ok_or_else(|| ForgeError::parse(path, line, format!("{}: bad number `{}`", CSV_HEADER[i], &rec[i])))
        };
        let boolean = |i: usize| match &rec[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(ForgeError::parse(path, line, format!("{}: bad flag `{other}`", CSV_HEADER[i]))),
        };
        out.push(StepTelemetry {
            step: rec[0]
                .parse()
                .map_err(|_| ForgeError::parse(path, line, format!("step: bad integer `{}`", &rec[0])))?,
            train_loss: float(1)?,
            grad_norm_pre: float(2)?,
            grad_norm_post: float(3)?,
            max_attn_logit: float(4)?,
            r_t: float(5)?,
            delta_r: float(6)?,
            delta_g: float(7)?,
            lr: float(8)?,
            fault_active: boolean(9)?,
            detected: boolean(10)?,
            recomputed: boolean(11)?,
        });
    }
    if !saw_header {
        return Err(ForgeError::parse(path, 1, "missing header"));
    }
    Ok(out)
}
