use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::json;

use super::model::{NetConfig, Networks};
use super::params::Group;
use crate::container::{read_container, write_container};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FENETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, nets: &Networks) -> Result<()> {
    let header = json!({ "net": nets.config });
    let names: Vec<(String, &Tensor)> = Group::ALL
        .iter()
        .flat_map(|&grp| {
            let group = nets.params.group(grp);
            group
                .names()
                .iter()
                .zip(group.tensors())
                .map(move |(n, t)| (format!("{}/{n}", grp.name()), t))
        })
        .collect();
    let arrays: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, MAGIC, CHECKPOINT_VERSION, &header, &arrays)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Networks> {
    let mut c = read_container(&mut BufReader::new(File::open(path)?), MAGIC)?;
    if c.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            c.version
        )));
    }
    let config: NetConfig = serde_json::from_value(c.header["net"].clone())
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut nets = Networks::new(config, 0)?;
    for grp in Group::ALL {
        let names: Vec<String> = nets.params.group(grp).names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = c.take(&format!("{}/{name}", grp.name()))?;
            let slot = &mut nets.params.group_mut(grp).tensors_mut()[i];
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    if let Some((name, _)) = c.arrays.first() {
        return Err(Error::Format(format!("unexpected array {name}")));
    }
    Ok(nets)
}
