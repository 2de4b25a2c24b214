use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use homcirc::netlist::DeviceKind;
use homcirc::solver::Trajectory;
use serde::Serialize;

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub netlist: Option<String>,
    pub builtin: Option<String>,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
}

pub struct OutDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<(), CliError> {
        manifest.outputs = std::mem::take(&mut self.written);
        manifest.outputs.push("manifest.json".into());
        self.write_json("manifest.json", &manifest)
    }
}

/// `t,u_*,i_*,v_*,sigma_*,phi_*` with sigma for capacitors/memristors and
/// phi for inductors/memristors.
pub fn trajectory_csv(tr: &Trajectory) -> String {
    let m = tr.ids.len();
    let sigma: Vec<usize> = (0..m)
        .filter(|&k| matches!(tr.kinds[k], DeviceKind::Capacitor | DeviceKind::Memristor))
        .collect();
    let phi: Vec<usize> = (0..m)
        .filter(|&k| matches!(tr.kinds[k], DeviceKind::Inductor | DeviceKind::Memristor))
        .collect();
    let mut s = String::from("t");
    for prefix in ["u", "i", "v"] {
        for id in &tr.ids {
            let _ = write!(s, ",{prefix}_{id}");
        }
    }
    for &k in &sigma {
        let _ = write!(s, ",sigma_{}", tr.ids[k]);
    }
    for &k in &phi {
        let _ = write!(s, ",phi_{}", tr.ids[k]);
    }
    s.push('\n');
    for (j, t) in tr.times.iter().enumerate() {
        let _ = write!(s, "{t}");
        let out = &tr.outputs[j];
        for v in tr.states[j].iter().chain(&out.i).chain(&out.v) {
            let _ = write!(s, ",{v}");
        }
        for &k in &sigma {
            let _ = write!(s, ",{}", out.sigma[k]);
        }
        for &k in &phi {
            let _ = write!(s, ",{}", out.phi[k]);
        }
        s.push('\n');
    }
    s
}
