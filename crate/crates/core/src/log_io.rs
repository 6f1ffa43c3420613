//! JSON-lines interaction logs.
//!
//! Line 1 is a header `{"n_items": n, "format_version": 1}`; every following
//! line is one event tagged by `"type"` (`"organic"` or `"bandit"`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::types::{
    validate_event, Action, BanditEvent, Context, Event, InteractionLog, OrganicEvent,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

impl LogIoError {
    /// True for content problems (bad JSON, bad field, bad value) as opposed to I/O.
    pub fn is_validation(&self) -> bool {
        !matches!(self, LogIoError::Io(_))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n_items: usize,
    format_version: u32,
}

pub fn write_log<W: Write>(log: &InteractionLog, writer: W) -> Result<(), LogIoError> {
    let mut w = BufWriter::new(writer);
    let header = Header {
        n_items: log.n_items,
        format_version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for e in &log.events {
        // serde_json prints the shortest decimal that parses back to the same f64
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log_file(log: &InteractionLog, path: impl AsRef<Path>) -> Result<(), LogIoError> {
    write_log(log, File::create(path)?)
}

pub fn read_log<R: Read>(reader: R) -> Result<InteractionLog, LogIoError> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(LogIoError::Malformed {
                line: 1,
                message: "missing header record".into(),
            })
        }
    };
    let header = parse_header(&header_line)?;
    let mut log = InteractionLog::new(header.n_items);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = parse_event(&line, line_no)?;
        validate_event(&event, log.n_items).map_err(|m| LogIoError::Malformed {
            line: line_no,
            message: m,
        })?;
        log.events.push(event);
    }
    log.validate()
        .map_err(|e| LogIoError::Validation(e.to_string()))?;
    Ok(log)
}

pub fn read_log_file(path: impl AsRef<Path>) -> Result<InteractionLog, LogIoError> {
    read_log(File::open(path)?)
}

fn parse_header(line: &str) -> Result<Header, LogIoError> {
    let obj = parse_object(line, 1)?;
    let n_items = get_uint(&obj, "n_items", 1)? as usize;
    let version = get_uint(&obj, "format_version", 1)?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(field_err(
            1,
            "format_version",
            format!("unsupported version {version}"),
        ));
    }
    if n_items == 0 {
        return Err(field_err(1, "n_items", "must be positive".into()));
    }
    Ok(Header {
        n_items,
        format_version: FORMAT_VERSION,
    })
}

fn parse_event(line: &str, line_no: usize) -> Result<Event, LogIoError> {
    let obj = parse_object(line, line_no)?;
    let kind = obj
        .get("type")
        .ok_or_else(|| field_err(line_no, "type", "missing".into()))?
        .as_str()
        .ok_or_else(|| field_err(line_no, "type", "expected a string".into()))?;
    let user_id = get_uint(&obj, "user_id", line_no)?;
    let t = get_uint(&obj, "t", line_no)?;
    match kind {
        "organic" => Ok(Event::Organic(OrganicEvent {
            user_id,
            t,
            item: get_uint(&obj, "item", line_no)? as usize,
        })),
        "bandit" => {
            let propensity = obj
                .get("propensity")
                .ok_or_else(|| field_err(line_no, "propensity", "missing".into()))?
                .as_f64()
                .ok_or_else(|| field_err(line_no, "propensity", "expected a number".into()))?;
            if !(propensity > 0.0 && propensity <= 1.0) {
                return Err(field_err(
                    line_no,
                    "propensity",
                    format!("{propensity} outside (0, 1]"),
                ));
            }
            let click = get_uint(&obj, "click", line_no)?;
            if click > 1 {
                return Err(field_err(
                    line_no,
                    "click",
                    format!("{click} is not 0 or 1"),
                ));
            }
            let context = obj
                .get("context")
                .ok_or_else(|| field_err(line_no, "context", "missing".into()))?
                .as_array()
                .ok_or_else(|| field_err(line_no, "context", "expected an array".into()))?
                .iter()
                .map(|v| {
                    v.as_u64()
                        .and_then(|c| u32::try_from(c).ok())
                        .ok_or_else(|| {
                            field_err(line_no, "context", format!("entry {v} is not a count"))
                        })
                })
                .collect::<Result<Vec<u32>, _>>()?;
            Ok(Event::Bandit(BanditEvent {
                user_id,
                t,
                context: Context(context),
                action: Action(get_uint(&obj, "action", line_no)? as usize),
                propensity,
                click: click as u8,
            }))
        }
        other => Err(field_err(
            line_no,
            "type",
            format!("unknown event type {other:?}"),
        )),
    }
}

fn parse_object(line: &str, line_no: usize) -> Result<Map<String, Value>, LogIoError> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(LogIoError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(LogIoError::Malformed {
            line: line_no,
            message: e.to_string(),
        }),
    }
}

fn get_uint(obj: &Map<String, Value>, field: &str, line: usize) -> Result<u64, LogIoError> {
    obj.get(field)
        .ok_or_else(|| field_err(line, field, "missing".into()))?
        .as_u64()
        .ok_or_else(|| field_err(line, field, "expected a non-negative integer".into()))
}

fn field_err(line: usize, field: &str, message: String) -> LogIoError {
    LogIoError::Field {
        line,
        field: field.to_string(),
        message,
    }
}
