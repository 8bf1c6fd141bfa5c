//! Session persistence: a CSV per session plus a JSON sidecar holding the
//! configuration and every applied command, enough to replay the run.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use hydrolab::engine::{ControllerSetup, EngineError, InitialConditions, LoopEngine};
use hydrolab::plant::Rig;
use hydrolab::series::{LogRow, TimeSeries, CSV_HEADER};
use serde::{Deserialize, Serialize};

use crate::protocol::Command;

/// Everything needed to rebuild the loop at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub dt: f64,
    pub rig: Rig,
    pub control: ControllerSetup,
    pub initial: InitialConditions,
}

impl LoopRecord {
    pub fn engine(&self) -> Result<LoopEngine, EngineError> {
        LoopEngine::with_initial(self.rig, self.control, self.dt, self.initial)
    }
}

/// A command applied at the boundary before step `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledCommand {
    pub step: u64,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: String,
    pub csv: String,
    pub config: LoopRecord,
    pub commands: Vec<ScheduledCommand>,
}

impl Sidecar {
    pub fn read(path: &Path) -> io::Result<Sidecar> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Rebuild `steps` rows from a configuration and command schedule.
pub fn replay(config: &LoopRecord, commands: &[ScheduledCommand], steps: u64) -> Result<TimeSeries, EngineError> {
    let mut engine = config.engine()?;
    let mut pending = commands.iter().peekable();
    let mut rows = Vec::with_capacity(steps as usize);
    for k in 0..steps {
        while let Some(sc) = pending.next_if(|sc| sc.step <= k) {
            if let Some(action) = sc.command.to_action() {
                engine.apply(&action)?;
            }
        }
        rows.push(engine.step()?);
    }
    Ok(TimeSeries { rows })
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Path of the `n`-th log of a session: `run.csv`, `run-1.csv`, `run-2.csv`...
pub fn rotated_path(base: &Path, n: u32) -> PathBuf {
    if n == 0 {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-{n}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{n}"),
    };
    base.with_file_name(name)
}

pub struct SessionLog {
    base: PathBuf,
    generation: u32,
    path: PathBuf,
    out: BufWriter<File>,
    sidecar: Sidecar,
    rows: u64,
    unflushed: u32,
}

const FLUSH_EVERY_ROWS: u32 = 1000;

impl SessionLog {
    pub fn create(base: &Path, config: LoopRecord) -> io::Result<SessionLog> {
        Self::create_generation(base, 0, config)
    }

    fn create_generation(base: &Path, generation: u32, config: LoopRecord) -> io::Result<SessionLog> {
        let path = rotated_path(base, generation);
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        let log = SessionLog {
            base: base.to_path_buf(),
            generation,
            sidecar: Sidecar {
                version: env!("CARGO_PKG_VERSION").to_string(),
                csv: path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                config,
                commands: Vec::new(),
            },
            path,
            out,
            rows: 0,
            unflushed: 0,
        };
        log.write_sidecar()?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn append(&mut self, row: &LogRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.rows += 1;
        self.unflushed += 1;
        if self.unflushed >= FLUSH_EVERY_ROWS {
            self.flush()?;
        }
        Ok(())
    }

    pub fn record(&mut self, step: u64, command: Command) -> io::Result<()> {
        self.sidecar.commands.push(ScheduledCommand { step, command });
        self.write_sidecar()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.unflushed = 0;
        self.out.flush()
    }

    /// Close this file and continue in the next generation.
    pub fn rotate(&mut self, config: LoopRecord) -> io::Result<()> {
        self.flush()?;
        let next = Self::create_generation(&self.base, self.generation + 1, config)?;
        *self = next;
        Ok(())
    }

    fn write_sidecar(&self) -> io::Result<()> {
        let text = serde_json::to_string_pretty(&self.sidecar).map_err(io::Error::other)?;
        fs::write(sidecar_path(&self.path), text + "\n")
    }
}
