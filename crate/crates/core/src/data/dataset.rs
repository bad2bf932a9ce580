//! In-memory datasets and their on-disk layout:
//! `<root>/<domain>/{train,val,test}/<id>.clra` plus `<root>/<domain>/manifest.txt`,
//! and `<root>/domains.txt` listing the domains in generation order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

use super::container::{write_atomic, Array, Container};
use super::preprocess::{preprocess, resize_nearest};
use super::synth::DomainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
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
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split '{s}'"))),
        }
    }
}

/// One preprocessed slice with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// `size × size` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: DomainSpec,
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn domain_id(&self) -> &str {
        &self.domain.domain_id
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// `[N, 1, size, size]` batch of the given samples.
    pub fn images(&self, samples: &[&Sample]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(samples.len() * self.size * self.size);
        for s in samples {
            data.extend_from_slice(&s.image);
        }
        Tensor::new(vec![samples.len(), 1, self.size, self.size], data)
    }

    pub fn labels(&self, samples: &[&Sample]) -> Result<LabelMap> {
        let mut data = Vec::with_capacity(samples.len() * self.size * self.size);
        for s in samples {
            data.extend_from_slice(&s.mask);
        }
        LabelMap::new([samples.len(), self.size, self.size], data)
    }

    fn sample_container(&self, s: &Sample) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("domain_id", self.domain_id())?;
        c.set_meta("sample_id", &s.id)?;
        c.push_f32("image", Tensor::new(vec![1, self.size, self.size], s.image.clone())?)?;
        c.push(
            "mask",
            Array::I32 {
                shape: vec![self.size, self.size],
                data: s.mask.iter().map(|&v| v as i32).collect(),
            },
        )?;
        Ok(c)
    }

    /// Writes the domain directory under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(self.domain_id());
        for split in Split::ALL {
            fs::create_dir_all(dir.join(split.as_str()))?;
        }
        let mut manifest = format!(
            "# domain {}\n# size {}\n# spec {}\n",
            self.domain_id(),
            self.size,
            self.domain.describe()
        );
        for s in &self.samples {
            let path = dir.join(s.split.as_str()).join(format!("{}.clra", s.id));
            self.sample_container(s)?.save(&path)?;
            manifest.push_str(&format!("{} {}\n", s.id, s.split));
        }
        write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
    }

    pub fn load(root: &Path, domain_id: &str) -> Result<Self> {
        let dir = root.join(domain_id);
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut size = None;
        let mut domain = None;
        let mut samples = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("# size ") {
                size = Some(rest.trim().parse::<usize>().map_err(|_| Error::Format("bad size line".into()))?);
            } else if let Some(rest) = line.strip_prefix("# spec ") {
                domain = Some(DomainSpec::parse(domain_id, rest)?);
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                let (id, split) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad manifest line '{line}'")))?;
                let split: Split = split.trim().parse()?;
                let c = Container::load(&dir.join(split.as_str()).join(format!("{id}.clra")))?;
                if c.meta("sample_id")? != id || c.meta("domain_id")? != domain_id {
                    return Err(Error::Format(format!("sample file {id} does not match manifest")));
                }
                let image = c.f32("image")?.data().to_vec();
                let (_, mask) = c.i32("mask")?;
                let mask = mask
                    .iter()
                    .map(|&v| u32::try_from(v).map_err(|_| Error::Format(format!("negative label in {id}"))))
                    .collect::<Result<Vec<u32>>>()?;
                samples.push(Sample {
                    id: id.to_string(),
                    split,
                    image,
                    mask,
                });
            }
        }
        let size = size.ok_or_else(|| Error::Format("manifest lacks size".into()))?;
        let domain = domain.unwrap_or_else(|| DomainSpec::new(domain_id, 1.0, 1.0, 0.0, 0.0, 0.0));
        if samples.iter().any(|s| s.image.len() != size * size || s.mask.len() != size * size) {
            return Err(Error::Format(format!("sample size does not match {size}x{size}")));
        }
        Ok(Self { domain, size, samples })
    }
}

/// `<root>/domains.txt`: domain ids, source first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteIndex {
    pub domains: Vec<String>,
}

impl SuiteIndex {
    pub fn path(root: &Path) -> PathBuf {
        root.join("domains.txt")
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut s = String::new();
        for d in &self.domains {
            s.push_str(d);
            s.push('\n');
        }
        write_atomic(&Self::path(root), s.as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let s = fs::read_to_string(Self::path(root))?;
        let domains: Vec<String> = s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if domains.is_empty() {
            return Err(Error::Format("empty domain index".into()));
        }
        Ok(Self { domains })
    }

    pub fn source(&self) -> &str {
        &self.domains[0]
    }

    pub fn targets(&self) -> &[String] {
        &self.domains[1..]
    }
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()))
}

/// Reads `<dir>/images/<id>.png` with matching `<dir>/masks/<id>.png`
/// (non-zero mask pixels are foreground). Black slices are dropped, the
/// rest min-max scaled and resized to `size`. Sorted ids are split 80:10:10.
pub fn load_external_slices(dir: &Path, domain_id: &str, size: usize) -> Result<Dataset> {
    let mut ids: Vec<String> = fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .flatten()
        })
        .collect();
    ids.sort();
    let mut kept = Vec::new();
    for id in ids {
        let (h, w, raw) = read_gray(&dir.join("images").join(format!("{id}.png")))?;
        let (mh, mw, mraw) = read_gray(&dir.join("masks").join(format!("{id}.png")))?;
        if (h, w) != (mh, mw) {
            return Err(Error::Shape {
                op: "load_external_slices",
                detail: format!("{id}: image {h}x{w}, mask {mh}x{mw}"),
            });
        }
        let Some(image) = preprocess(&raw, h, w, size)? else {
            continue;
        };
        let labels: Vec<u32> = mraw.iter().map(|&v| u32::from(v > 0.0)).collect();
        let mask = resize_nearest(&labels, h, w, size, size)?;
        kept.push((id, image, mask));
    }
    if kept.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable slices in {}", dir.display())));
    }
    let n = kept.len();
    let n_train = (n * 8).div_ceil(10);
    let n_val = (n - n_train) / 2;
    let samples = kept
        .into_iter()
        .enumerate()
        .map(|(i, (id, image, mask))| Sample {
            id,
            split: if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            },
            image,
            mask,
        })
        .collect();
    Ok(Dataset {
        domain: DomainSpec::new(domain_id, 1.0, 1.0, 0.0, 0.0, 0.0),
        size,
        samples,
    })
}
