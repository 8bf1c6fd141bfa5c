//! Named plant configurations.
//!
//! Presets are stored in the scenario grammar restricted to `plant` and
//! `control` lines. `HYDROLAB_PRESET_DIR/<name>.plant` takes precedence over
//! the built-in set.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::ControllerSetup;
use crate::plant::Rig;
use crate::scenario::{parse_preset_text, ParseError, PlantSpec};

pub const PRESET_DIR_ENV: &str = "HYDROLAB_PRESET_DIR";
pub const PRESET_EXTENSION: &str = "plant";

pub const BUILTIN: [(&str, &str); 5] = [
    (
        "paper_default",
        concat!(
            "plant { C=0.5063 R=2000 hmax=1 qmax=0.0005 outflow=linear travel=25 deadtime=0 }\n",
            "control pid kp=48 ki=2.6666666666666665 kd=216 sp=70 hyst=10\n"
        ),
    ),
    (
        "paper_like_delay",
        concat!(
            "plant { C=0.5063 R=2000 hmax=1 qmax=0.0005 outflow=linear travel=25 deadtime=4 }\n",
            "control pid kp=48 ki=2.6666666666666665 kd=216 sp=70 hyst=10\n"
        ),
    ),
    (
        "paper_no_delay",
        concat!(
            "plant { C=0.5063 R=2000 hmax=1 qmax=0.0005 outflow=linear travel=0 deadtime=0 }\n",
            "control pid kp=48 ki=2.6666666666666665 kd=216 sp=70 hyst=10\n"
        ),
    ),
    (
        "fopdt_test",
        concat!(
            "# K=1 %/%, tau=10 s, dead time 2 s in percent-of-span units\n",
            "plant { C=0.005 R=2000 hmax=1 qmax=0.0003373419093143168 outflow=linear travel=0 deadtime=2 }\n",
            "control p kp=1 sp=50 hyst=10\n"
        ),
    ),
    (
        "geometric_consistent",
        concat!(
            "# C equals the cross-section of a 0.15 m diameter tank\n",
            "plant { C=0.017671458676442587 R=2000 hmax=1 qmax=0.0005 outflow=linear travel=25 deadtime=0 }\n",
            "control pid kp=48 ki=2.6666666666666665 kd=216 sp=70 hyst=10\n"
        ),
    ),
];

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("unknown preset `{0}`")]
    Unknown(String),
    #[error("preset `{name}`: {source}")]
    Parse { name: String, source: ParseError },
    #[error("preset `{name}`: a preset must define an inline plant")]
    NotInline { name: String },
    #[error("preset `{}`: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub rig: Rig,
    pub control: ControllerSetup,
}

#[derive(Debug, Clone, Default)]
pub struct PresetLibrary {
    dir: Option<PathBuf>,
}

impl PresetLibrary {
    /// Built-in presets only.
    pub fn builtin() -> Self {
        PresetLibrary { dir: None }
    }

    /// Built-ins plus an override directory.
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        PresetLibrary { dir: Some(dir.into()) }
    }

    /// Honours `HYDROLAB_PRESET_DIR` when set and non-empty.
    pub fn from_env() -> Self {
        match std::env::var_os(PRESET_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::with_dir(dir),
            _ => Self::builtin(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn resolve(&self, name: &str) -> Result<Preset, PresetError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{name}.{PRESET_EXTENSION}"));
            match fs::read_to_string(&path) {
                Ok(text) => return parse_preset(name, &text),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(source) => return Err(PresetError::Io { path, source }),
            }
        }
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PresetError::Unknown(name.to_string()))?;
        parse_preset(name, text)
    }

    /// Built-in names followed by any extra names found in the override directory.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = BUILTIN.iter().map(|(n, _)| n.to_string()).collect();
        if let Some(entries) = self.dir.as_ref().and_then(|d| fs::read_dir(d).ok()) {
            let mut extra: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == PRESET_EXTENSION))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .filter(|n| !names.contains(n))
                .collect();
            extra.sort();
            names.extend(extra);
        }
        names
    }
}

pub fn parse_preset(name: &str, text: &str) -> Result<Preset, PresetError> {
    let (plant, control) = parse_preset_text(text).map_err(|source| PresetError::Parse {
        name: name.to_string(),
        source,
    })?;
    let PlantSpec::Inline(plant) = plant else {
        return Err(PresetError::NotInline { name: name.to_string() });
    };
    Ok(Preset {
        name: name.to_string(),
        rig: plant.to_rig(),
        control: control.unwrap_or_default(),
    })
}
