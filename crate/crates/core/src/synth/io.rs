//! Dataset directories.
//!
//! ```text
//! <dir>/labels.csv            clip_id,hr_bpm,fps
//! <dir>/clips/<id>.physclip   "PHYSCLIP", u32 T, H, W (LE), T·H·W·3 RGB bytes
//! <dir>/bvp/<id>.csv          frame,bvp[,hr_inst]
//! <dir>/synth_meta.csv        generator draws (synthetic sets only)
//! <dir>/synth_config.json     generator settings and seed (synthetic sets only)
//! ```
//!
//! Pre-cropped real recordings can be stored in the same layout; the
//! `hr_inst` column and the synthetic files are optional when reading.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_clip, Clip, SynthConfig, SynthMeta};
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"PHYSCLIP";

pub fn write_physclip<W: Write>(mut w: W, clip: &Clip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    for v in [clip.frames, clip.height, clip.width] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&clip.rgb)?;
    Ok(())
}

/// Reads `(T, H, W, rgb)` from a clip container.
pub fn read_physclip<R: Read>(mut r: R) -> Result<([usize; 3], Vec<u8>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Format("bad clip magic".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut rgb = vec![0u8; dims.iter().product::<usize>() * 3];
    r.read_exact(&mut rgb)?;
    Ok((dims, rgb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub clip_id: String,
    pub hr_bpm: f64,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BvpRow {
    frame: usize,
    bvp: f64,
    #[serde(default)]
    hr_inst: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub clip_id: String,
    pub hr_bpm: f64,
    pub hr_drift: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub motion_px: f64,
    pub illumination_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub clips: usize,
    pub config: SynthConfig,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writer for a dataset directory; clips are streamed one at a time.
pub struct DatasetWriter {
    root: PathBuf,
    labels: csv::Writer<File>,
    meta: Option<csv::Writer<File>>,
}

impl DatasetWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(root.join("clips"))?;
        std::fs::create_dir_all(root.join("bvp"))?;
        let labels = csv::Writer::from_path(root.join("labels.csv")).map_err(csv_err)?;
        Ok(Self { root, labels, meta: None })
    }

    pub fn push(&mut self, clip: &Clip) -> Result<()> {
        let mut f = BufWriter::new(File::create(self.root.join("clips").join(format!("{}.physclip", clip.id)))?);
        write_physclip(&mut f, clip)?;
        f.flush()?;
        let mut bvp = csv::Writer::from_path(self.root.join("bvp").join(format!("{}.csv", clip.id))).map_err(csv_err)?;
        for (frame, (&b, &h)) in clip.bvp.iter().zip(&clip.hr_inst).enumerate() {
            bvp.serialize(BvpRow { frame, bvp: b, hr_inst: Some(h) }).map_err(csv_err)?;
        }
        bvp.flush()?;
        self.labels.serialize(LabelRow { clip_id: clip.id.clone(), hr_bpm: clip.hr, fps: clip.fps }).map_err(csv_err)?;
        if let Some(m) = clip.meta {
            if self.meta.is_none() {
                self.meta = Some(csv::Writer::from_path(self.root.join("synth_meta.csv")).map_err(csv_err)?);
            }
            let row = MetaRow {
                clip_id: clip.id.clone(),
                hr_bpm: clip.hr,
                hr_drift: m.hr_drift,
                amplitude: m.amplitude,
                noise_sigma: m.noise_sigma,
                motion_px: m.motion_px,
                illumination_drift: m.illumination_drift,
            };
            self.meta.as_mut().expect("opened above").serialize(row).map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.labels.flush()?;
        if let Some(m) = self.meta.as_mut() {
            m.flush()?;
        }
        Ok(())
    }
}

/// Writes clips into `dir`, creating it if needed.
pub fn write_clips<'a>(dir: impl AsRef<Path>, clips: impl IntoIterator<Item = &'a Clip>) -> Result<()> {
    let mut w = DatasetWriter::create(dir)?;
    for clip in clips {
        w.push(clip)?;
    }
    w.finish()
}

/// Generates `count` clips with `seed` into `dir` together with the
/// generator settings.
pub fn generate_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, seed: u64, count: usize) -> Result<()> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let mut w = DatasetWriter::create(dir)?;
    let manifest = SynthManifest { seed, clips: count, config: cfg.clone() };
    std::fs::write(dir.join("synth_config.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for i in 0..count {
        w.push(&generate_clip(cfg, seed, i))?;
    }
    w.finish()
}

/// A dataset directory opened for on-demand clip loading.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub labels: Vec<LabelRow>,
    pub meta: Vec<Option<MetaRow>>,
}

impl DatasetDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut rdr = csv::Reader::from_path(root.join("labels.csv")).map_err(csv_err)?;
        let labels: Vec<LabelRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        let mut meta = vec![None; labels.len()];
        let meta_path = root.join("synth_meta.csv");
        if meta_path.exists() {
            let mut rdr = csv::Reader::from_path(meta_path).map_err(csv_err)?;
            for row in rdr.deserialize::<MetaRow>() {
                let row = row.map_err(csv_err)?;
                if let Some(i) = labels.iter().position(|l| l.clip_id == row.clip_id) {
                    meta[i] = Some(row);
                }
            }
        }
        Ok(Self { root, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Clip> {
        let label = self.labels.get(index).ok_or_else(|| Error::Config(format!("no clip at index {index}")))?;
        let id = &label.clip_id;
        let f = File::open(self.root.join("clips").join(format!("{id}.physclip")))?;
        let ([frames, height, width], rgb) = read_physclip(BufReader::new(f))?;
        let mut rdr = csv::Reader::from_path(self.root.join("bvp").join(format!("{id}.csv"))).map_err(csv_err)?;
        let rows: Vec<BvpRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        if rows.len() != frames {
            return Err(Error::Format(format!("clip {id}: {frames} frames but {} BVP samples", rows.len())));
        }
        Ok(Clip {
            id: id.clone(),
            fps: label.fps,
            frames,
            height,
            width,
            rgb,
            bvp: rows.iter().map(|r| r.bvp).collect(),
            hr_inst: rows.iter().map(|r| r.hr_inst.unwrap_or(label.hr_bpm)).collect(),
            hr: label.hr_bpm,
            meta: self.meta[index].as_ref().map(|m| SynthMeta {
                hr_drift: m.hr_drift,
                amplitude: m.amplitude,
                noise_sigma: m.noise_sigma,
                motion_px: m.motion_px,
                illumination_drift: m.illumination_drift,
            }),
        })
    }

    pub fn load_all(&self) -> Result<Vec<Clip>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
