//! Parameter checkpoint container.
//!
//! `<stem>.manifest` holds one line per group: `name<TAB>f64<TAB>d0xd1..<TAB>trainable`.
//! `<stem>.bin` holds the values of every group, in manifest order, as
//! row-major little-endian `f64`.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

pub fn write_entries<'a>(
    dir: &Path,
    stem: &str,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor, bool)>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (name, tensor, trainable) in entries {
        let shape: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\tf64\t{}\t{trainable}\n", shape.join("x")));
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(format!("{stem}.manifest"));
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(format!("{stem}.bin"));
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_entries(dir: &Path, stem: &str) -> Result<Vec<Entry>> {
    let mpath = dir.join(format!("{stem}.manifest"));
    let bpath = dir.join(format!("{stem}.bin"));
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut offset = 0;
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let bad = |msg: &str| Error::parse(&mpath, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, trainable] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        if dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let trainable: bool = trainable.parse().map_err(|_| bad("bad trainable flag"))?;
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > blob.len() {
            return Err(Error::parse(&bpath, "value file shorter than manifest"));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset = end;
        entries.push(Entry {
            name: name.to_string(),
            tensor: Tensor::new(shape, data)?,
            trainable,
        });
    }
    if offset != blob.len() {
        return Err(Error::parse(&bpath, "value file longer than manifest"));
    }
    Ok(entries)
}

impl ParamStore {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_entries(
            dir,
            stem,
            self.iter().map(|(_, g)| (g.name.as_str(), &g.tensor, g.trainable)),
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in read_entries(dir, stem)? {
            store.add(e.name, e.tensor, e.trainable)?;
        }
        Ok(store)
    }
}
