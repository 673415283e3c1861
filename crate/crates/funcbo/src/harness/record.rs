//! Versioned on-disk formats: per-iteration CSV records, dataset files,
//! parameter checkpoints, and the JSON run summary.
//!
//! Floats are written with Rust's shortest-round-trip `Display`, so every
//! file is byte-reproducible from `(config, seed)` and parses back to the
//! identical bits. Summaries are written atomically (temp file + rename):
//! an aborted run leaves either no summary or a complete one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::funcid::{Dataset, IterRecord};
use crate::losses::Label;
use crate::models::ParamVector;
use crate::numkit::Mat;
use crate::oracle::OracleReport;
use crate::{Error, Result};

pub const RECORD_HEADER: &str =
    "iter,outer_loss,inner_loss,adjoint_loss,grad_norm,grad_bias,hvp_dim,inner_steps,adjoint_steps,wall_ms,eval_metric";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Render records as CSV with the exact column contract; optional columns
/// are empty when absent.
pub fn records_to_csv(records: &[IterRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.outer_loss,
            r.inner_loss,
            cell(r.adjoint_loss),
            r.grad_norm,
            cell(r.grad_bias),
            r.hvp_dim,
            r.inner_steps,
            r.adjoint_steps,
            cell(r.wall_ms),
            cell(r.eval_metric),
        ));
    }
    out
}

pub fn write_records(path: &Path, records: &[IterRecord]) -> Result<()> {
    std::fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Dataset file header: `FUNCBO-DATA v1 <task> <n> <dims...>` followed by
/// one whitespace-separated record per line. The record layout per task:
/// `iv`/`quad`: x, then treatment, then outcome; `rl_toy`: `s a reward s'`.
pub struct DatasetFile {
    pub task: String,
    /// Trailing header integers; meaning depends on the task
    /// (`iv`/`quad`: x-dim, treatment-dim, outcome-dim; `rl_toy`:
    /// n_states, n_actions).
    pub dims: Vec<usize>,
    pub data: Dataset,
}

pub fn save_dataset(path: &Path, task: &str, dims: &[usize], data: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("FUNCBO-DATA v1 {task} {}", data.len()));
    for d in dims {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        let mut fields: Vec<String> = Vec::new();
        match (task, data.label(i)) {
            ("rl_toy", Label::Transition { reward, next_state }) => {
                let (n_states, n_actions) = (dims[0], dims[1]);
                let x = data.x(i);
                let s = (0..n_states).position(|k| x[k] == 1.0).ok_or(Error::Format {
                    path: path.display().to_string(),
                    reason: "row is not a one-hot state/action pair".into(),
                })?;
                let a = (0..n_actions)
                    .position(|k| x[n_states + k] == 1.0)
                    .ok_or(Error::Format {
                        path: path.display().to_string(),
                        reason: "row is not a one-hot state/action pair".into(),
                    })?;
                fields.push(format!("{s}"));
                fields.push(format!("{a}"));
                fields.push(format!("{reward}"));
                fields.push(format!("{next_state}"));
            }
            (_, Label::Iv { treatment, outcome }) => {
                for v in data.x(i) {
                    fields.push(format!("{v}"));
                }
                for v in treatment {
                    fields.push(format!("{v}"));
                }
                for v in outcome {
                    fields.push(format!("{v}"));
                }
            }
            (task, _) => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("label kind does not match task '{task}'"),
                })
            }
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "empty file".into(),
    })?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() < 4 || tok[0] != "FUNCBO-DATA" || tok[1] != "v1" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("bad header '{header}'"),
        });
    }
    let task = tok[2].to_string();
    let n: usize = tok[3].parse().map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: format!("bad sample count in '{header}'"),
    })?;
    let dims: Vec<usize> = tok[4..]
        .iter()
        .map(|t| {
            t.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("bad dimension '{t}'"),
            })
        })
        .collect::<Result<_>>()?;

    let parse_floats = |line: &str| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("bad number '{t}'"),
                })
            })
            .collect()
    };

    let mut xs_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut labels: Vec<Label> = Vec::with_capacity(n);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        if task == "rl_toy" {
            let (n_states, n_actions) = match dims[..] {
                [s, a] => (s, a),
                _ => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: "rl_toy header needs exactly n_states n_actions".into(),
                    })
                }
            };
            let f = parse_floats(line)?;
            if f.len() != 4 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("expected 's a r next', got {} fields", f.len()),
                });
            }
            let (s, a, next) = (f[0] as usize, f[1] as usize, f[3] as usize);
            if s >= n_states || a >= n_actions || next >= n_states {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("transition indices out of range in '{line}'"),
                });
            }
            xs_rows.push(crate::tasks::mdp::encode_sa(s, a, n_states, n_actions));
            labels.push(Label::Transition {
                reward: f[2],
                next_state: next,
            });
        } else {
            let (d_x, d_t, d_o) = match dims[..] {
                [x, t, o] => (x, t, o),
                _ => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: "header needs exactly x-dim treatment-dim outcome-dim".into(),
                    })
                }
            };
            let f = parse_floats(line)?;
            if f.len() != d_x + d_t + d_o {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("expected {} fields, got {}", d_x + d_t + d_o, f.len()),
                });
            }
            xs_rows.push(f[..d_x].to_vec());
            labels.push(Label::Iv {
                treatment: f[d_x..d_x + d_t].to_vec(),
                outcome: f[d_x + d_t..].to_vec(),
            });
        }
    }
    if xs_rows.len() != n {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("header says {n} records, file has {}", xs_rows.len()),
        });
    }
    let data = Dataset::new(Mat::from_rows(&xs_rows)?, labels)?;
    Ok(DatasetFile { task, dims, data })
}

/// Checkpoint: `FUNCBO-CKPT v1 <kind> <widths> <activations>` then one
/// decimal float per line in parameter-layout order. `widths` is
/// comma-separated; linear models use `feature_dim,out_dim` with
/// activation `-`.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    widths: &[usize],
    activations: &str,
    params: &ParamVector,
) -> Result<()> {
    let widths_s: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
    let mut out = format!("FUNCBO-CKPT v1 {kind} {} {activations}\n", widths_s.join(","));
    for v in params.as_slice() {
        out.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<usize>, String, ParamVector)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "empty file".into(),
    })?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 5 || tok[0] != "FUNCBO-CKPT" || tok[1] != "v1" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("bad header '{header}'"),
        });
    }
    let widths: Vec<usize> = tok[3]
        .split(',')
        .map(|t| {
            t.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("bad width '{t}'"),
            })
        })
        .collect::<Result<_>>()?;
    let mut vals = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        vals.push(line.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            reason: format!("bad parameter '{line}'"),
        })?);
    }
    Ok((tok[2].to_string(), widths, tok[4].to_string(), ParamVector::from_vec(vals)))
}

/// End-of-run summary; serialized as pretty JSON with sorted keys so two
/// identical runs produce identical bytes.
#[derive(Debug, serde::Serialize)]
pub struct RunSummary {
    pub version: &'static str,
    pub task: String,
    pub method: String,
    pub seed: u64,
    /// Echo of the parsed config pairs.
    pub config: BTreeMap<String, String>,
    /// Final metrics by name (outer/inner loss, gradient norm, task metric).
    pub final_metrics: BTreeMap<String, f64>,
    pub oracle_checks: Vec<OracleReport>,
    /// Total wall time; absent unless wall-time recording was requested.
    pub wall_ms_total: Option<f64>,
    /// Build identifier baked in at compile time.
    pub build: String,
}

impl RunSummary {
    pub fn build_id() -> String {
        option_env!("FUNCBO_BUILD_ID").unwrap_or("dev").to_string()
    }
}

/// Atomic write: serialize next to the target and rename over it.
pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("summary serialization failed: {e}"),
    })?;
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_summary_value(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("bad summary JSON: {e}"),
    })
}
