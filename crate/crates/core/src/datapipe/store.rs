//! On-disk dataset: `manifest.jsonl` with one row per triplet, one tensor
//! container per triplet under `samples/`, and an optional `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Origin, PipelineReport, Triplet};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_tensors, save_tensors};

pub const MANIFEST: &str = "manifest.jsonl";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub origin: Origin,
    pub prompt: String,
    pub frames: usize,
    pub tensors: String,
}

pub fn write_dataset(dir: &Path, triplets: &[Triplet], report: Option<&PipelineReport>) -> Result<()> {
    fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(f);
    for (id, t) in triplets.iter().enumerate() {
        t.validate()?;
        let rel = format!("samples/{id:06}.sgt");
        let tensors = BTreeMap::from([
            ("subject".to_string(), t.subject.clone()),
            ("identity".to_string(), t.identity.clone()),
            ("video".to_string(), t.video.clone()),
        ]);
        save_tensors(dir.join(&rel), &tensors)?;
        let row =
            ManifestRow { id, origin: t.origin, prompt: t.prompt.clone(), frames: t.video.shape()[0], tensors: rel };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    if let Some(r) = report {
        let p = dir.join(REPORT);
        fs::write(&p, serde_json::to_vec_pretty(r)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Triplet>> {
    let manifest = dir.join(MANIFEST);
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
        let mut tensors = load_tensors(dir.join(&row.tensors))?;
        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| Error::Data(format!("{} lacks tensor {name}", row.tensors)))
        };
        let t = Triplet {
            subject: take("subject")?,
            identity: take("identity")?,
            video: take("video")?,
            prompt: row.prompt,
            origin: row.origin,
        };
        t.validate()?;
        if t.video.shape()[0] != row.frames {
            return Err(Error::Data(format!("{}: manifest says {} frames", row.tensors, row.frames)));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn read_report(dir: &Path) -> Result<PipelineReport> {
    let p = dir.join(REPORT);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{generate_real_set, run_pipeline, PipelineConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { n_subjects: 8, ..Default::default() };
        let (mut set, report) = run_pipeline(&cfg, 4).unwrap();
        set.extend(generate_real_set(3, 8, 4).unwrap());
        write_dataset(dir.path(), &set, Some(&report)).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), set);
        assert_eq!(read_report(dir.path()).unwrap(), report);
    }

    #[test]
    fn missing_sample_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_real_set(2, 4, 1).unwrap();
        write_dataset(dir.path(), &set, None).unwrap();
        fs::remove_file(dir.path().join("samples/000001.sgt")).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
