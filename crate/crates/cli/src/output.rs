use std::io::Write;

use kinetra::Result;
use serde_json::{json, Map, Value};

use crate::config::{Format, RunConfig};

struct Section {
    name: String,
    csv: Vec<u8>,
    json: Value,
}

/// Collects named reports and writes them at the end, either one file per
/// report under `out` or all of them to stdout.
pub struct Emitter {
    command: &'static str,
    config: Value,
    format: Format,
    out: Option<std::path::PathBuf>,
    sections: Vec<Section>,
}

impl Emitter {
    pub fn new(command: &'static str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(cfg)?,
            format: cfg.format,
            out: cfg.out.clone(),
            sections: Vec::new(),
        })
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        csv: impl FnOnce(&mut Vec<u8>) -> Result<()>,
        json: Value,
    ) -> Result<()> {
        let mut buf = Vec::new();
        if self.format == Format::Csv {
            csv(&mut buf)?;
        }
        self.sections.push(Section {
            name: name.into(),
            csv: buf,
            json,
        });
        Ok(())
    }

    /// A flat `key,value` report.
    pub fn add_pairs(&mut self, name: impl Into<String>, rows: &[(&str, f64)]) -> Result<()> {
        let json = Value::Object(
            rows.iter()
                .map(|(k, v)| (k.to_string(), json!(v)))
                .collect(),
        );
        self.add(
            name,
            |out| {
                writeln!(out, "key,value")?;
                for (k, v) in rows {
                    writeln!(out, "{k},{v}")?;
                }
                Ok(())
            },
            json,
        )
    }

    /// A serializable report with scalar fields, written as `key,value` rows.
    pub fn add_flat<T: serde::Serialize>(
        &mut self,
        name: impl Into<String>,
        report: &T,
    ) -> Result<()> {
        let json = serde_json::to_value(report)?;
        let rows: Vec<(String, String)> = match &json {
            Value::Object(m) => m
                .iter()
                .map(|(k, v)| {
                    let s = match v {
                        Value::Null => String::new(),
                        Value::Number(n) => n.to_string(),
                        Value::Bool(b) => b.to_string(),
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    (k.clone(), s)
                })
                .collect(),
            _ => Vec::new(),
        };
        self.add(
            name,
            |out| {
                writeln!(out, "key,value")?;
                for (k, v) in &rows {
                    writeln!(out, "{k},{v}")?;
                }
                Ok(())
            },
            json,
        )
    }

    fn header(&self) -> String {
        format!("# kinetra {} {}", self.command, self.config)
    }

    pub fn finish(self) -> Result<()> {
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                for s in &self.sections {
                    let (ext, body) = match self.format {
                        Format::Csv => ("csv", self.csv_body(s)),
                        Format::Json => ("json", self.json_body(s.json.clone())),
                    };
                    std::fs::write(dir.join(format!("{}.{ext}", s.name)), body)?;
                }
            }
            None => {
                let body = match self.format {
                    Format::Csv => {
                        let mut all = Vec::new();
                        for s in &self.sections {
                            if self.sections.len() > 1 {
                                writeln!(all, "# report {}", s.name)?;
                            }
                            all.extend(self.csv_body(s));
                        }
                        all
                    }
                    Format::Json => {
                        let report = if self.sections.len() == 1 {
                            self.sections[0].json.clone()
                        } else {
                            Value::Object(
                                self.sections
                                    .iter()
                                    .map(|s| (s.name.clone(), s.json.clone()))
                                    .collect::<Map<_, _>>(),
                            )
                        };
                        self.json_body(report)
                    }
                };
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(&body)?;
                stdout.flush()?;
            }
        }
        Ok(())
    }

    fn csv_body(&self, s: &Section) -> Vec<u8> {
        let mut body = format!("{}\n", self.header()).into_bytes();
        body.extend_from_slice(&s.csv);
        body
    }

    fn json_body(&self, report: Value) -> Vec<u8> {
        let doc = json!({ "command": self.command, "config": self.config, "report": report });
        let mut body = serde_json::to_vec_pretty(&doc).unwrap_or_default();
        body.push(b'\n');
        body
    }
}
