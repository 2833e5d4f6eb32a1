//! On-disk corpus layout.
//!
//! ```text
//! DIR/manifest.json
//! DIR/volumes/<volume_id>.vol
//! DIR/train.jsonl  DIR/dev.jsonl  DIR/test.jsonl
//! ```
//!
//! A volume file is the magic `CTVQVOL1`, little-endian `u32` slice count,
//! height and width, `N·H·W` little-endian `f32` pixels (slice-major,
//! row-major), then a `u32` length and that many bytes of JSON facts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{
    generate_questions, generate_volume, volume_rng, QaItem, QuestionType, Split, SynthConfig, Volume,
    VolumeFacts,
};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"CTVQVOL1";
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let facts = serde_json::to_vec(&v.facts)?;
    let mut out = Vec::with_capacity(8 + 12 + v.pixels.len() * 4 + 4 + facts.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in [v.n_slices, v.height, v.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in &v.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(facts.len() as u32).to_le_bytes());
    out.extend_from_slice(&facts);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated {what}: expected {n} bytes, found {available}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses a volume file; `id` becomes the volume id.
pub fn decode_volume(id: &str, bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(VOLUME_MAGIC.len(), "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let n = r.u32("slice count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let count = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 8,
            detail: format!("dimensions {n}x{h}x{w} overflow"),
        })?;
    let raw = r.take(count * 4, "pixel data")?;
    let pixels = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let facts_len = r.u32("facts length")? as usize;
    let facts_at = r.pos;
    let facts_raw = r.take(facts_len, "facts")?;
    let facts: VolumeFacts = serde_json::from_slice(facts_raw).map_err(|e| Error::Format {
        offset: facts_at,
        detail: format!("facts JSON: {e}"),
    })?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    facts.validate(n)?;
    Ok(Volume {
        id: id.to_string(),
        n_slices: n,
        height: h,
        width: w,
        pixels,
        facts,
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

/// Reads a volume file; the id is the file stem.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string();
    decode_volume(&id, &bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split: Split,
    pub volumes: usize,
    pub questions: usize,
    pub counts_per_type: BTreeMap<QuestionType, usize>,
    pub volume_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_seed: u64,
    pub config: SynthConfig,
    pub splits: Vec<SplitManifest>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub volumes: Vec<Volume>,
    pub items: Vec<QaItem>,
}

impl SplitData {
    pub fn volume_index(&self) -> BTreeMap<&str, usize> {
        self.volumes
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect()
    }

    fn manifest(&self, split: Split) -> SplitManifest {
        let mut counts: BTreeMap<QuestionType, usize> =
            QuestionType::ALL.iter().map(|&k| (k, 0)).collect();
        for item in &self.items {
            *counts.entry(item.question_type).or_default() += 1;
        }
        SplitManifest {
            split,
            volumes: self.volumes.len(),
            questions: self.items.len(),
            counts_per_type: counts,
            volume_ids: self.volumes.iter().map(|v| v.id.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub generator_seed: u64,
    pub config: SynthConfig,
    pub splits: BTreeMap<Split, SplitData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        &self.splits[&split]
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            generator_seed: self.generator_seed,
            config: self.config.clone(),
            splits: self.splits.iter().map(|(&s, d)| d.manifest(s)).collect(),
        }
    }
}

/// Generates every split. Volume `i` of a split is seeded independently of
/// every other volume.
pub fn generate_dataset(seed: u64, config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.train_volumes,
            Split::Dev => config.dev_volumes,
            Split::Test => config.test_volumes,
        };
        let mut data = SplitData::default();
        for i in 0..count {
            let mut rng = volume_rng(seed, split, i);
            let v = generate_volume(format!("{split}-{i:05}"), &mut rng, config);
            data.items.extend(generate_questions(&v)?);
            data.volumes.push(v);
        }
        splits.insert(split, data);
    }
    Ok(Dataset {
        generator_seed: seed,
        config: config.clone(),
        splits,
    })
}

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("volumes").join(format!("{id}.vol"))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("volumes"))?;
    for (split, data) in &ds.splits {
        for v in &data.volumes {
            write_volume(&volume_path(dir, &v.id), v)?;
        }
        let mut f = fs::File::create(dir.join(format!("{split}.jsonl")))?;
        for item in &data.items {
            serde_json::to_writer(&mut f, item)?;
            f.write_all(b"\n")?;
        }
    }
    let manifest = serde_json::to_string_pretty(&ds.manifest())?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version(format!(
            "dataset format {} is not supported (expected {DATASET_FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

pub fn read_items(path: &Path) -> Result<Vec<QaItem>> {
    let f = fs::File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        items.push(item);
    }
    Ok(items)
}

/// Loads the requested splits and checks them against the manifest.
pub fn load_dataset(dir: &Path, which: &[Split]) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut splits = BTreeMap::new();
    for sm in &manifest.splits {
        if !which.contains(&sm.split) {
            continue;
        }
        let volumes = sm
            .volume_ids
            .iter()
            .map(|id| {
                let path = volume_path(dir, id);
                let bytes = fs::read(&path)?;
                decode_volume(id, &bytes)
            })
            .collect::<Result<Vec<_>>>()?;
        let items = read_items(&dir.join(format!("{}.jsonl", sm.split)))?;
        let data = SplitData { volumes, items };
        let recount = data.manifest(sm.split);
        if &recount != sm {
            return Err(Error::Data(format!(
                "{} split does not match its manifest: manifest has {} volumes/{} questions {:?}, files have {} volumes/{} questions {:?}",
                sm.split,
                sm.volumes,
                sm.questions,
                sm.counts_per_type,
                recount.volumes,
                recount.questions,
                recount.counts_per_type
            )));
        }
        let known = data.volume_index();
        if let Some(item) = data.items.iter().find(|it| !known.contains_key(it.volume_id.as_str())) {
            return Err(Error::Data(format!(
                "{} question refers to unknown volume '{}'",
                sm.split, item.volume_id
            )));
        }
        splits.insert(sm.split, data);
    }
    for s in which {
        if !splits.contains_key(s) {
            return Err(Error::Data(format!("dataset has no {s} split")));
        }
    }
    Ok(Dataset {
        generator_seed: manifest.generator_seed,
        config: manifest.config,
        splits,
    })
}
