//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.txt      training configuration, model keys included
//! <dir>/manifest.txt    one `name shape file` line per parameter
//! <dir>/<name>.dkt      DKT1 tensors
//! ```
//! Shapes are written as `d0x d1x ...` joined by `x` (`16x8x3x3`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dkgh_core::model::DkghNet;
use dkgh_core::nn::Module;
use dkgh_core::Real;

use crate::config::TrainConfig;
use crate::dkt;
use crate::error::{Error, IoContext, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save<T: Real>(dir: &Path, net: &DkghNet<T>, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = String::new();
    for (name, t) in net.named_params() {
        let file = format!("{name}.dkt");
        dkt::write(&dir.join(&file), t)?;
        writeln!(manifest, "{name} {} {file}", shape_str(t.shape())).unwrap();
    }
    let mut cfg = cfg.clone();
    cfg.model = net.config().clone();
    let c = dir.join(CONFIG_FILE);
    fs::write(&c, cfg.to_kv()).at(&c)?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest).at(&m)
}

/// Training configuration stored with a checkpoint.
pub fn load_config(dir: &Path) -> Result<TrainConfig> {
    TrainConfig::load(&dir.join(CONFIG_FILE))
}

/// Rebuilds the network from its stored configuration and overwrites every
/// parameter. Names, shapes and dtype must all agree with the manifest.
pub fn load<T: Real>(dir: &Path) -> Result<(DkghNet<T>, TrainConfig)> {
    let cfg = load_config(dir)?;
    let mut net = DkghNet::<T>::new(cfg.model.clone())?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).at(&mpath)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(Error::parse(&mpath, Some(i + 1), "expected `name shape file`"));
        }
        entries.push((i + 1, cols[0].to_string(), cols[1].to_string(), cols[2].to_string()));
    }
    let expected = net.named_params().len();
    if entries.len() != expected {
        return Err(Error::parse(
            &mpath,
            None,
            format!("{} parameters listed, configuration defines {expected}", entries.len()),
        ));
    }
    let mut index = 0;
    let mut failure = None;
    net.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let (line, ref stored, ref shape, ref file) = entries[index];
        index += 1;
        let result = (|| {
            if *stored != name {
                return Err(Error::parse(&mpath, Some(line), format!("expected parameter `{name}`, found `{stored}`")));
            }
            if *shape != shape_str(t.shape()) {
                return Err(Error::parse(
                    &mpath,
                    Some(line),
                    format!("`{name}` has shape {shape}, configuration needs {}", shape_str(t.shape())),
                ));
            }
            let loaded = dkt::read::<T>(&dir.join(file))?;
            if loaded.shape() != t.shape() {
                return Err(Error::parse(dir.join(file), None, format!("shape {:?} disagrees with manifest", loaded.shape())));
            }
            t.data_mut().copy_from_slice(loaded.data());
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((net, cfg)),
    }
}
