//! Checkpoint files: parameters as consecutive EDT1 dumps in name order,
//! with a text manifest beside them.
//!
//! Manifest layout:
//! ```text
//! spec kind=mlp data_dim=2 ...
//! <name> <dims joined by 'x', or '-' for a scalar> <byte offset>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use super::{build_denoiser, DenoiserModel, DenoiserNetSpec};
use crate::engine::{read_edt_from, write_edt_to};
use crate::error::{Error, Result};

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    let mut manifest = format!("spec {}\n", model.spec());
    for (name, t) in model.params() {
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
        };
        let _ = writeln!(manifest, "{name} {dims} {}", body.len());
        write_edt_to(&mut body, t)?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, body)?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let mpath = manifest_path(path);
    if !path.exists() || !mpath.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let manifest = std::fs::read_to_string(&mpath)?;
    let body = std::fs::read(path)?;
    let mut lines = manifest.lines();
    let spec_line = lines.next().ok_or_else(|| parse_err(1, "empty manifest"))?;
    let spec: DenoiserNetSpec = spec_line
        .strip_prefix("spec ")
        .ok_or_else(|| parse_err(1, "manifest must start with `spec`"))?
        .parse()?;
    let mut model = build_denoiser(&spec)?;
    let mut params = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, offset] = parts[..] else {
            return Err(parse_err(lineno, format!("expected `name dims offset`, got {line:?}")));
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad offset {offset:?}")))?;
        let shape: Vec<usize> = if dims == "-" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| parse_err(lineno, format!("bad dims {dims:?}"))))
                .collect::<Result<_>>()?
        };
        let slice = body
            .get(offset..)
            .ok_or_else(|| parse_err(lineno, format!("offset {offset} beyond checkpoint end")))?;
        let t = read_edt_from(&mut Cursor::new(slice))?;
        if t.shape() != shape.as_slice() {
            return Err(parse_err(
                lineno,
                format!("{name}: manifest shape {shape:?} but stored {:?}", t.shape()),
            ));
        }
        params.insert(name.to_string(), t);
    }
    model.set_params(params)?;
    Ok(model)
}
