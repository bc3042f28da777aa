//! On-disk datasets: `<root>/images/<split>/*.png` with same-stem masks under
//! `<root>/masks/<split>/`, an optional `cases.csv`, and the synthetic
//! phantom generator that writes this layout.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage};
use pccl_core::data::{self, Sample, SplitSpec};
use pccl_core::image::Image;
use pccl_core::phantom::{self, PhantomConfig};
use pccl_core::{MaskMap, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mask pixels above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
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
            .ok_or_else(|| Error::Usage(format!("unknown split {s:?}, expected train, val or test")))
    }
}

pub fn image_dir(root: &Path, split: Split) -> PathBuf {
    root.join("images").join(split.as_str())
}

pub fn mask_dir(root: &Path, split: Split) -> PathBuf {
    root.join("masks").join(split.as_str())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads one image as 1 (grayscale) or 3 (colour) `[0, 1]` channels.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = if img.color().has_color() {
        Image::from_u8_interleaved(3, h, w, img.to_rgb8().as_raw())
    } else {
        Image::from_u8_interleaved(1, h, w, img.to_luma8().as_raw())
    };
    Ok(out?)
}

/// Reads an 8-bit mask and binarises it at [`MASK_THRESHOLD`].
pub fn read_mask(path: &Path) -> Result<MaskMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| (v > MASK_THRESHOLD) as u8).collect();
    Ok(MaskMap::binary(h, w, data)?)
}

/// Every sample of `split`, sorted by id. Each image needs a mask.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let images = image_dir(root, split);
    let masks = mask_dir(root, split);
    let stems = png_stems(&images)?;
    let missing: Vec<&str> =
        stems.iter().filter(|s| !masks.join(format!("{s}.png")).exists()).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no mask for {} image(s): {}",
            masks.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    stems
        .into_iter()
        .map(|stem| {
            let image = read_image(&images.join(format!("{stem}.png")))?;
            let mask = read_mask(&masks.join(format!("{stem}.png")))?;
            Ok(Sample::new(stem, image, Some(mask))?)
        })
        .collect()
}

/// `stem → case id` from `<root>/cases.csv`, if present. A header row
/// starting with `stem` is skipped.
pub fn read_cases(root: &Path) -> Result<Option<HashMap<String, String>>> {
    let path = root.join("cases.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut cases = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if row.len() != 2 {
            return Err(Error::Dataset(format!("{} line {}: expected stem,case", path.display(), i + 1)));
        }
        if i == 0 && &row[0] == "stem" {
            continue;
        }
        cases.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(Some(cases))
}

/// Preprocessed training, validation and test sets for one run.
pub struct Prepared {
    pub labelled: Vec<Sample>,
    pub unlabelled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads all three splits, resizes them to the configured input size and
/// splits the training set into labelled and unlabelled parts.
pub fn prepare(root: &Path, config: &TrainConfig) -> Result<Prepared> {
    if !root.is_dir() {
        return Err(Error::Usage(format!("dataset root {} is not a directory", root.display())));
    }
    let load = |split| -> Result<Vec<Sample>> {
        load_dataset(root, split)?.iter().map(|s| Ok(data::preprocess(s, config.input_size)?)).collect()
    };
    let train = load(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset(format!("{} holds no training images", image_dir(root, Split::Train).display())));
    }
    let case_ids = if config.group_by_case {
        let cases = read_cases(root)?
            .ok_or_else(|| Error::Dataset(format!("group_by_case needs {}", root.join("cases.csv").display())))?;
        let ids = train
            .iter()
            .map(|s| {
                cases.get(&s.id).cloned().ok_or_else(|| Error::Dataset(format!("cases.csv has no entry for {}", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(ids)
    } else {
        None
    };
    let spec = SplitSpec {
        labelled_fraction: config.labelled_fraction,
        seed: config.seed,
        group_by_case: config.group_by_case,
    };
    let (labelled, unlabelled) = data::split_labelled(train, &spec, case_ids.as_deref())?;
    Ok(Prepared { labelled, unlabelled, val: load(Split::Val)?, test: load(Split::Test)? })
}

/// Split sizes written by [`synth_generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SynthSummary {
    /// Apportions `n` images in the ratio 200 : 40 : 100.
    pub fn for_count(n: usize) -> Self {
        let train = (n as f64 * 200.0 / 340.0).round() as usize;
        let val = ((n as f64 * 40.0 / 340.0).round() as usize).min(n - train);
        Self { train, val, test: n - train - val }
    }
}

fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `n` grayscale phantoms with exact masks under `out` in the
/// dataset layout. Identical arguments give identical bytes.
pub fn synth_generate(n: usize, size: usize, seed: u64, out: &Path, cfg: &PhantomConfig) -> Result<SynthSummary> {
    if n == 0 {
        return Err(Error::Usage("synth needs at least one image".into()));
    }
    if size < 8 {
        return Err(Error::Usage(format!("synth image size must be at least 8, got {size}")));
    }
    let summary = SynthSummary::for_count(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = std::iter::repeat_n(Split::Train, summary.train)
        .chain(std::iter::repeat_n(Split::Val, summary.val))
        .chain(std::iter::repeat_n(Split::Test, summary.test));
    for split in Split::ALL {
        for dir in [image_dir(out, split), mask_dir(out, split)] {
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        }
    }
    for (i, split) in splits.enumerate() {
        let p = phantom::generate(size, cfg, &mut rng);
        let stem = format!("phantom_{i:04}.png");
        let image = GrayImage::from_raw(size as u32, size as u32, p.image).expect("size² pixels");
        let mask = GrayImage::from_raw(size as u32, size as u32, p.mask.iter().map(|&m| m * 255).collect())
            .expect("size² pixels");
        write_png(&image, &image_dir(out, split).join(&stem))?;
        write_png(&mask, &mask_dir(out, split).join(&stem))?;
    }
    Ok(summary)
}
