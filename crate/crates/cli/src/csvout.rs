//! CSV emission. Every file opens with a schema comment and a header line;
//! appends that do not match the existing schema abort before writing.

use std::io::Write;
use std::path::Path;

use revcal_core::{Error, Result};

pub struct Schema {
    /// Version comment, first line of the file.
    pub tag: &'static str,
    /// Column header, second line.
    pub header: &'static str,
}

pub const RESULTS: Schema = Schema {
    tag: "# revcal-results v1",
    header: "model,bits,scenario,calibrater,accuracy,n",
};

pub const ATTACK: Schema = Schema {
    tag: "# revcal-attack v1",
    header: "model,mode,direction,budget,steps,pre_accuracy,post_accuracy,flip_rate,n",
};

pub const TRANSFER: Schema = Schema {
    tag: "# revcal-transfer v1",
    header: "main,calibrater,accuracy,delta",
};

pub const TRAIN_LOG: Schema = Schema {
    tag: "# revcal-train-log v1",
    header: "epoch,mean_loss,lr,accuracy",
};

pub const TRACE: Schema = Schema {
    tag: "# revcal-trace v1",
    header: "step,mean_true_prob",
};

pub const SYNTHETIC: Schema = Schema {
    tag: "# revcal-synthetic v1",
    header: "task,variant,accuracy,n",
};

/// Fixed-precision float cell, stable across runs.
pub fn cell(v: f64) -> String {
    format!("{v:.6}")
}

/// Appends rows, creating the file with its schema lines if needed. An
/// existing file must open with exactly the same two lines.
pub fn append(path: &Path, schema: &Schema, rows: &[String]) -> Result<()> {
    let mut text = String::new();
    if path.exists() {
        let existing = std::fs::read_to_string(path)?;
        let mut lines = existing.lines();
        let tag = lines.next().unwrap_or("");
        let header = lines.next().unwrap_or("");
        if tag != schema.tag || header != schema.header {
            return Err(Error::format(format!(
                "{} does not match schema \"{}\"; refusing to append",
                path.display(),
                schema.tag
            )));
        }
        if !existing.ends_with('\n') {
            text.push('\n');
        }
    } else {
        text.push_str(schema.tag);
        text.push('\n');
        text.push_str(schema.header);
        text.push('\n');
    }
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Writes a file from scratch, replacing any previous contents.
pub fn write_fresh(path: &Path, schema: &Schema, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + 64);
    text.push_str(schema.tag);
    text.push('\n');
    text.push_str(schema.header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
