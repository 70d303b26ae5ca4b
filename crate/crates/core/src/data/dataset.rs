//! Sample generation, on-disk layout and manifest I/O.
//!
//! A dataset directory holds `labelspace.tsv`, `manifest.tsv` and one PPM
//! per sample under `images/<split>/`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use super::render::{render_image, RenderSpec};
use super::vocab::{LabelSpace, Pair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#caila-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABELSPACE_FILE: &str = "labelspace.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::ValSeen,
        Split::ValUnseen,
        Split::TestSeen,
        Split::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    /// Whether samples of this split carry unseen labels.
    pub fn is_unseen(self) -> bool {
        matches!(self, Split::ValUnseen | Split::TestUnseen)
    }

    fn pairs(self, ls: &LabelSpace) -> &[Pair] {
        if self.is_unseen() {
            ls.unseen()
        } else {
            ls.seen()
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown split `{s}`")))
    }
}

/// Evaluation stage: validation or test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Val,
    Test,
}

impl Stage {
    pub fn splits(self) -> [Split; 2] {
        match self {
            Stage::Val => [Split::ValSeen, Split::ValUnseen],
            Stage::Test => [Split::TestSeen, Split::TestUnseen],
        }
    }
}

/// Images per pair for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::ValSeen | Split::ValUnseen => self.val,
            Split::TestSeen | Split::TestUnseen => self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `hw × hw × 3`, values on the 8-bit grid `k / 255`.
    pub image: Tensor,
    pub pair: Pair,
    pub split: Split,
}

/// All samples of one dataset plus its label space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labelspace: LabelSpace,
    pub image_hw: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Seen then unseen samples of an evaluation stage.
    pub fn stage(&self, stage: Stage) -> Vec<&Sample> {
        let [s, u] = stage.splits();
        self.split(s).chain(self.split(u)).collect()
    }

    /// Checks that every label agrees with its split.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            let ok = if s.split.is_unseen() {
                self.labelspace.is_unseen(s.pair)
            } else {
                self.labelspace.is_seen(s.pair)
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "{} sample labeled {} violates the label space",
                    s.split,
                    self.labelspace.vocab().pair_name(s.pair)
                )));
            }
            if s.image.shape() != [self.image_hw, self.image_hw, 3] {
                return Err(Error::dim("dataset", s.image.shape(), &[self.image_hw, self.image_hw, 3]));
            }
        }
        Ok(())
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample render seed.
pub fn sample_seed(seed: u64, split: Split, pair: Pair, k: usize) -> u64 {
    let mut h = mix(seed);
    for v in [split as u64, pair.attr as u64, pair.obj as u64, k as u64] {
        h = mix(h ^ v);
    }
    h
}

fn quantize(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
}

/// Renders every sample in memory.
pub fn synthesize(spec: &RenderSpec, labelspace: &LabelSpace, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    if counts.train == 0 {
        return Err(Error::Config("train count per pair must be at least 1".into()));
    }
    let vocab = spec.vocab()?;
    if &vocab != labelspace.vocab() {
        return Err(Error::Contract("render spec and label space disagree on the vocabulary".into()));
    }
    let mut samples = Vec::new();
    for split in Split::ALL {
        for &pair in split.pairs(labelspace) {
            for k in 0..counts.get(split) {
                let mut image = render_image(pair.attr, pair.obj, spec, sample_seed(seed, split, pair, k))?;
                quantize(&mut image);
                samples.push(Sample { image, pair, split });
            }
        }
    }
    Ok(Dataset {
        labelspace: labelspace.clone(),
        image_hw: spec.image_hw,
        samples,
    })
}

fn image_path(split: Split, pair: Pair, k: usize) -> String {
    format!("images/{split}/{:03}_{:03}_{k:04}.ppm", pair.attr, pair.obj)
}

/// Renders the dataset and writes it under `out`. Returns the in-memory copy.
pub fn generate_dataset(
    out: &Path,
    spec: &RenderSpec,
    labelspace: &LabelSpace,
    counts: SplitCounts,
    seed: u64,
) -> Result<Dataset> {
    let data = synthesize(spec, labelspace, counts, seed)?;
    for split in Split::ALL {
        let dir = out.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let vocab = labelspace.vocab();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut k = 0;
    let mut prev = None;
    for s in &data.samples {
        if prev == Some((s.split, s.pair)) {
            k += 1;
        } else {
            k = 0;
        }
        prev = Some((s.split, s.pair));
        let rel = image_path(s.split, s.pair, k);
        write_ppm(&out.join(&rel), &s.image)?;
        manifest.push_str(&format!(
            "{rel}\t{}\t{}\t{}\n",
            vocab.attributes()[s.pair.attr],
            vocab.objects()[s.pair.obj],
            s.split
        ));
    }
    write_file(&out.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_file(&out.join(LABELSPACE_FILE), labelspace.to_text().as_bytes())?;
    Ok(data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::dim("write_ppm", img.shape(), &[0, 0, 3]));
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    write_file(path, &buf)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: image::ImageError| Error::Format(format!("{}: {e}", path.display()));
    let dec = PnmDecoder::new(std::io::Cursor::new(bytes)).map_err(bad)?;
    if dec.color_type() != image::ColorType::Rgb8 {
        return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
    }
    let (w, h) = dec.dimensions();
    let mut raw = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut raw).map_err(bad)?;
    let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Loads a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let labelspace = LabelSpace::load(&dir.join(LABELSPACE_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!(
            "{}: missing `{MANIFEST_HEADER}` header",
            manifest_path.display()
        )));
    }
    let vocab = labelspace.vocab();
    let mut samples = Vec::new();
    let mut image_hw = None;
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, a, o, split] = fields[..] else {
            return Err(Error::Format(format!(
                "{} line {}: expected 4 tab-separated fields",
                manifest_path.display(),
                n + 2
            )));
        };
        let pair = vocab.pair(a, o)?;
        let split: Split = split.parse()?;
        let path: PathBuf = dir.join(rel);
        let image = read_ppm(&path)?;
        let hw = image.shape()[0];
        if image.shape()[1] != hw || *image_hw.get_or_insert(hw) != hw {
            return Err(Error::Format(format!("{}: inconsistent image size", path.display())));
        }
        samples.push(Sample { image, pair, split });
    }
    let data = Dataset {
        labelspace,
        image_hw: image_hw.ok_or_else(|| Error::Format("manifest lists no images".into()))?,
        samples,
    };
    data.validate()?;
    Ok(data)
}
