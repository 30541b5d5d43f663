//! Dataset sources: native on-disk layout, ICVL-style text annotations,
//! procedural synthetic hands, and in-memory caches.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::CameraIntrinsics;
use super::frame::{RawDepth, Sample};
use super::hand::{synth_generate, HandModel, SynthSettings};
use crate::error::{Error, Result};

/// Random-access collection of samples; items are produced on demand.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn joints(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Native,
    Icvl,
    Synth,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "icvl" => Ok(Self::Icvl),
            "synth" => Ok(Self::Synth),
            _ => Err(Error::Config(format!(
                "unknown dataset format {s:?} (expected native, icvl or synth)"
            ))),
        }
    }
}

fn joint_mismatch(found: usize, expected: usize, origin: &str) -> Error {
    Error::Validation(format!(
        "{origin} has {found} joints but the configuration expects {expected}"
    ))
}

/// Contents of `meta.json` in a native split directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeMeta {
    pub intrinsics: CameraIntrinsics,
    pub joints: usize,
    pub cube: f64,
    pub count: usize,
}

pub fn read_depth_png(path: &Path) -> Result<RawDepth> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(decode_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Data(format!(
            "{}: expected 16-bit grayscale, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = buf[..w * h * 2]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32)
        .collect();
    RawDepth::new(w, h, depth)
}

pub fn write_depth_png(path: &Path, raw: &RawDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut enc = png::Encoder::new(BufWriter::new(file), raw.width as u32, raw.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(enc_err)?;
    let bytes: Vec<u8> = raw
        .depth
        .iter()
        .flat_map(|&d| (d.round().clamp(0.0, u16::MAX as f32) as u16).to_be_bytes())
        .collect();
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn parse_floats<'a>(
    tokens: impl Iterator<Item = &'a str>,
    path: &Path,
    line: usize,
) -> Result<Vec<f64>> {
    tokens
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid number {t:?}"),
            })
        })
        .collect()
}

fn triples(values: &[f64]) -> Vec<[f64; 3]> {
    values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Native split directory: `meta.json`, `depth/%06d.png`, `labels.csv`.
pub struct NativeDataset {
    dir: PathBuf,
    meta: NativeMeta,
    labels: Vec<(usize, Vec<[f64; 3]>)>,
    out_size: usize,
}

impl NativeDataset {
    /// `joints = None` accepts whatever count `meta.json` declares.
    pub fn open(dir: &Path, joints: Option<usize>, out_size: usize) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: NativeMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        meta.intrinsics.validate()?;
        let joints = joints.unwrap_or(meta.joints);
        if meta.joints != joints {
            return Err(joint_mismatch(meta.joints, joints, &meta_path.display().to_string()));
        }
        let labels_path = dir.join("labels.csv");
        let file = File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&labels_path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let first = parts.next().unwrap_or_default();
            let index = first.trim().parse::<usize>().map_err(|_| Error::Parse {
                path: labels_path.clone(),
                line: i + 1,
                message: format!("invalid sample index {first:?}"),
            })?;
            let values = parse_floats(parts, &labels_path, i + 1)?;
            if values.len() % 3 != 0 {
                return Err(Error::Parse {
                    path: labels_path.clone(),
                    line: i + 1,
                    message: format!("{} coordinates is not a multiple of 3", values.len()),
                });
            }
            if values.len() / 3 != joints {
                return Err(joint_mismatch(
                    values.len() / 3,
                    joints,
                    &format!("{} line {}", labels_path.display(), i + 1),
                ));
            }
            labels.push((index, triples(&values)));
        }
        if !labels.is_empty() && labels.len() != meta.count {
            return Err(Error::Validation(format!(
                "{} lists {} samples but meta.json declares {}",
                labels_path.display(),
                labels.len(),
                meta.count
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            labels,
            out_size,
        })
    }

    pub fn meta(&self) -> &NativeMeta {
        &self.meta
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.dir.join("depth").join(format!("{index:06}.png"))
    }
}

impl SampleSource for NativeDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn joints(&self) -> usize {
        self.meta.joints
    }

    fn get(&self, i: usize) -> Result<Sample> {
        let (index, joints) = self
            .labels
            .get(i)
            .ok_or_else(|| Error::Validation(format!("sample {i} out of range")))?;
        let raw = read_depth_png(&self.depth_path(*index))?;
        Sample::from_world(&raw, joints, self.meta.cube, &self.meta.intrinsics, self.out_size)
    }
}

/// Writes a native split. Depth is stored rounded to whole millimetres.
pub fn write_native<'a>(
    dir: &Path,
    intrinsics: &CameraIntrinsics,
    cube: f64,
    records: impl IntoIterator<Item = (&'a RawDepth, &'a [[f64; 3]])>,
) -> Result<usize> {
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let labels_path = dir.join("labels.csv");
    let file = File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut labels = BufWriter::new(file);
    let mut count = 0;
    let mut joints = 0;
    for (i, (raw, pose)) in records.into_iter().enumerate() {
        write_depth_png(&depth_dir.join(format!("{i:06}.png")), raw)?;
        let mut line = i.to_string();
        for p in pose {
            for v in p {
                line.push(',');
                line.push_str(&v.to_string());
            }
        }
        writeln!(labels, "{line}").map_err(|e| Error::io(&labels_path, e))?;
        joints = pose.len();
        count += 1;
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    let meta = NativeMeta {
        intrinsics: *intrinsics,
        joints,
        cube,
        count,
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(count)
}

/// `labels.txt` with lines `path u1 v1 z1 ... uN vN zN`; paths are relative
/// to the annotation file and coordinates are original pixels and mm.
pub struct IcvlDataset {
    root: PathBuf,
    entries: Vec<(PathBuf, Vec<[f64; 3]>)>,
    intrinsics: CameraIntrinsics,
    cube: f64,
    out_size: usize,
    joints: usize,
}

impl IcvlDataset {
    /// `joints = None` takes the count from the first annotation line.
    pub fn open(
        annotations: &Path,
        joints: Option<usize>,
        intrinsics: CameraIntrinsics,
        cube: f64,
        out_size: usize,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let file = File::open(annotations).map_err(|e| Error::io(annotations, e))?;
        let mut entries = Vec::new();
        let mut expected = joints;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(annotations, e))?;
            let mut tokens = line.split_whitespace();
            let Some(path) = tokens.next() else { continue };
            let values = parse_floats(tokens, annotations, i + 1)?;
            if values.len() % 3 != 0 {
                return Err(Error::Parse {
                    path: annotations.to_path_buf(),
                    line: i + 1,
                    message: format!("{} coordinates is not a multiple of 3", values.len()),
                });
            }
            let n = values.len() / 3;
            match expected {
                Some(e) if e != n => {
                    return Err(joint_mismatch(n, e, &format!("{} line {}", annotations.display(), i + 1)));
                }
                None => expected = Some(n),
                _ => {}
            }
            entries.push((PathBuf::from(path), triples(&values)));
        }
        Ok(Self {
            root: annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
            intrinsics,
            cube,
            out_size,
            joints: expected.unwrap_or(0),
        })
    }
}

impl SampleSource for IcvlDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn joints(&self) -> usize {
        self.joints
    }

    fn get(&self, i: usize) -> Result<Sample> {
        let (path, uvz) = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Validation(format!("sample {i} out of range")))?;
        let raw = read_depth_png(&self.root.join(path))?;
        let world = super::camera::uvz_to_xyz(uvz, &self.intrinsics)?;
        Sample::from_world(&raw, &world, self.cube, &self.intrinsics, self.out_size)
    }
}

/// Procedural hands; sample `i` depends only on `(seed, stream + i)`.
pub struct SynthDataset {
    pub model: HandModel,
    pub settings: SynthSettings,
    pub seed: u64,
    pub stream: u64,
    pub count: usize,
}

impl SynthDataset {
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream + index as u64);
        rng
    }

    pub fn generate_raw(&self, index: usize) -> Result<(RawDepth, Vec<[f64; 3]>)> {
        let (_, pose) = synth_generate(&self.model, &self.settings, &mut self.rng_for(index))?;
        let raw = super::hand::render_capsules(
            &self.model.capsules(&pose),
            &self.settings.intrinsics,
            self.settings.raw_size,
            self.settings.raw_size,
        );
        Ok((raw, self.model.joints(&pose)))
    }
}

impl SampleSource for SynthDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn joints(&self) -> usize {
        super::hand::SYNTH_JOINTS
    }

    fn get(&self, i: usize) -> Result<Sample> {
        if i >= self.count {
            return Err(Error::Validation(format!("sample {i} out of range")));
        }
        synth_generate(&self.model, &self.settings, &mut self.rng_for(i)).map(|(s, _)| s)
    }
}

/// Fully materialized samples.
pub struct MemoryDataset {
    pub samples: Vec<Sample>,
    joints: usize,
}

impl MemoryDataset {
    pub fn new(samples: Vec<Sample>, joints: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.joints() != joints) {
            return Err(joint_mismatch(s.joints(), joints, "in-memory sample"));
        }
        Ok(Self { samples, joints })
    }

    /// Loads every sample of `source`, in parallel over disjoint indices.
    pub fn materialize(source: &dyn SampleSource) -> Result<Self> {
        let samples = (0..source.len())
            .into_par_iter()
            .map(|i| source.get(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, source.joints())
    }
}

impl SampleSource for MemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn joints(&self) -> usize {
        self.joints
    }

    fn get(&self, i: usize) -> Result<Sample> {
        self.samples
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("sample {i} out of range")))
    }
}

/// Keeps a subset of joints, in the listed order.
pub struct SelectJoints {
    inner: Box<dyn SampleSource>,
    indices: Vec<usize>,
}

impl SelectJoints {
    pub fn new(inner: Box<dyn SampleSource>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("joint subset is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= inner.joints()) {
            return Err(Error::Validation(format!(
                "joint subset index {bad} is out of range for {} joints",
                inner.joints()
            )));
        }
        Ok(Self { inner, indices })
    }
}

impl SampleSource for SelectJoints {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn joints(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        Ok(self.inner.get(i)?.select_joints(&self.indices))
    }
}

/// Options shared by the on-disk loaders.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Expected joint count of the files; `None` accepts what they declare.
    pub joints: Option<usize>,
    pub out_size: usize,
    pub intrinsics: CameraIntrinsics,
    pub cube: f64,
}

/// Opens `root` in the given format. Native roots are split directories;
/// ICVL roots contain `labels.txt` or are the annotation file itself.
pub fn load_dataset(root: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<Box<dyn SampleSource>> {
    match format {
        DatasetFormat::Native => Ok(Box::new(NativeDataset::open(root, opts.joints, opts.out_size)?)),
        DatasetFormat::Icvl => {
            let ann = if root.is_dir() { root.join("labels.txt") } else { root.to_path_buf() };
            Ok(Box::new(IcvlDataset::open(
                &ann,
                opts.joints,
                opts.intrinsics,
                opts.cube,
                opts.out_size,
            )?))
        }
        DatasetFormat::Synth => Err(Error::Config(
            "synthetic datasets are generated, not loaded from a path".into(),
        )),
    }
}
