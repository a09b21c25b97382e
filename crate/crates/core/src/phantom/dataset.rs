//! On-disk dataset format.
//!
//! One `.usc` file per core (little-endian): magic "USC1", u32 version=1,
//! u32 T/H/W, T*H*W f32 frames row-major, then three H*W u8 masks in the
//! order needle, prostate, lesion. A `cores.jsonl` manifest lists one
//! [`CoreRecord`] JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Mask;

use super::{Cineloop, CoreRecord};

const MAGIC: &[u8; 4] = b"USC1";
const VERSION: u32 = 1;
const MANIFEST: &str = "cores.jsonl";

/// Serialize one cineloop.
pub fn write_core_file(cine: &Cineloop, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));

    out(MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    out(&(cine.frame_count() as u32).to_le_bytes())?;
    out(&(cine.height() as u32).to_le_bytes())?;
    out(&(cine.width() as u32).to_le_bytes())?;
    for &v in cine.frames_flat() {
        out(&v.to_le_bytes())?;
    }
    for mask in [&cine.needle, &cine.prostate, &cine.lesion] {
        for &b in mask.values() {
            out(&[u8::from(b)])?;
        }
    }
    Ok(())
}

/// Parse one cineloop, validating structure and value ranges.
pub fn read_core_file(path: &Path) -> Result<Cineloop> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingCoreFile {
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
    let bad = |offset: u64, what: &str| Error::BadFormat {
        path: path.to_path_buf(),
        offset,
        what: what.into(),
    };

    if bytes.len() < 20 {
        return Err(bad(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if t < 2 || h == 0 || w == 0 || t.saturating_mul(h).saturating_mul(w) > (1 << 30) {
        return Err(bad(8, &format!("implausible dimensions {t}x{h}x{w}")));
    }
    let frame_bytes = t * h * w * 4;
    let mask_bytes = h * w;
    let expect = 20 + frame_bytes + 3 * mask_bytes;
    if bytes.len() < expect {
        return Err(bad(bytes.len() as u64, "truncated file"));
    }
    if bytes.len() > expect {
        return Err(bad(expect as u64, "trailing bytes"));
    }

    let mut frames = Vec::with_capacity(t * h * w);
    for chunk in bytes[20..20 + frame_bytes].chunks_exact(4) {
        frames.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut masks = Vec::with_capacity(3);
    for m in 0..3 {
        let off = 20 + frame_bytes + m * mask_bytes;
        let mut data = Vec::with_capacity(mask_bytes);
        for (i, &b) in bytes[off..off + mask_bytes].iter().enumerate() {
            match b {
                0 => data.push(false),
                1 => data.push(true),
                other => {
                    return Err(bad((off + i) as u64, &format!("mask byte {other} not 0/1")))
                }
            }
        }
        masks.push(Mask::from_vec(h, w, data)?);
    }
    let lesion = masks.pop().unwrap();
    let prostate = masks.pop().unwrap();
    let needle = masks.pop().unwrap();
    Cineloop::new(t, h, w, frames, needle, prostate, lesion)
}

/// Incremental dataset writer: core files stream to disk as they are
/// added, the manifest lands in `finish`.
pub struct DatasetWriter {
    root: PathBuf,
    records: Vec<CoreRecord>,
}

impl DatasetWriter {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(DatasetWriter {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn add(&mut self, record: CoreRecord, cine: &Cineloop) -> Result<()> {
        write_core_file(cine, &self.root.join(&record.path))?;
        self.records.push(record);
        Ok(())
    }

    pub fn finish(self) -> Result<Dataset> {
        let path = self.root.join(MANIFEST);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| {
                Error::io(&path, std::io::Error::new(std::io::ErrorKind::Other, e))
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            root: self.root,
            records: self.records,
        })
    }
}

/// Write a complete dataset directory.
pub fn write_dataset(cores: &[(Cineloop, CoreRecord)], dir: &Path) -> Result<Dataset> {
    let mut writer = DatasetWriter::create(dir)?;
    for (cine, record) in cores {
        writer.add(record.clone(), cine)?;
    }
    writer.finish()
}

/// A dataset on disk: parsed manifest plus lazy access to cineloops.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub records: Vec<CoreRecord>,
}

/// Parse the manifest and verify every referenced core file exists.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CoreRecord = serde_json::from_str(&line).map_err(|e| Error::BadFormat {
            path: manifest.clone(),
            offset: lineno as u64,
            what: format!("manifest line does not parse: {e}"),
        })?;
        records.push(record);
    }
    let ds = Dataset {
        root: dir.to_path_buf(),
        records,
    };
    for r in &ds.records {
        let p = ds.root.join(&r.path);
        if !p.is_file() {
            return Err(Error::MissingCoreFile { path: p });
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_cineloop(&self, record: &CoreRecord) -> Result<Cineloop> {
        read_core_file(&self.root.join(&record.path))
    }

    pub fn find_core(&self, core_id: u64) -> Result<&CoreRecord> {
        self.records
            .iter()
            .find(|r| r.core_id == core_id)
            .ok_or(Error::UnknownCore(core_id))
    }

    /// Load every cineloop, parallel over cores, in record order.
    pub fn load_all(&self) -> Result<Vec<Cineloop>> {
        use rayon::prelude::*;
        self.records
            .par_iter()
            .map(|r| self.load_cineloop(r))
            .collect()
    }

    pub fn patient_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.patient_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
