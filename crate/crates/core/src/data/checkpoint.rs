//! Base-model and per-domain adapter checkpoints on top of the container.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{InjectionSelector, UNet, UNetConfig};

use super::container::{sha256_hex, Array, Container};

/// Identifies what a base checkpoint contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseInfo {
    pub config: UNetConfig,
    pub seed: u64,
    /// `source` after pretraining, `source+esh` once the ESH is trained.
    pub stage: String,
}

pub fn base_to_container(model: &UNet<f32>, info: &BaseInfo) -> Result<Container> {
    if model.adapter_count() > 0 {
        return Err(Error::InvalidArgument(
            "base checkpoints hold plain models; merge or drop adapters first".into(),
        ));
    }
    let mut c = Container::new();
    c.set_meta("kind", "base")?;
    c.set_meta("config", &model.config().to_meta())?;
    c.set_meta("seed", &info.seed.to_string())?;
    c.set_meta("stage", &info.stage)?;
    let mut tensors = model.state_tensors();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, t) in tensors {
        c.push_f32(name, t)?;
    }
    Ok(c)
}

/// Saves a base checkpoint and returns its SHA-256 (hex of the file bytes).
pub fn save_base(model: &UNet<f32>, info: &BaseInfo, path: &Path) -> Result<String> {
    let bytes = base_to_container(model, info)?.save(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn base_from_bytes(bytes: &[u8]) -> Result<(UNet<f32>, BaseInfo, String)> {
    let c = Container::from_bytes(bytes)?;
    if c.meta("kind")? != "base" {
        return Err(Error::Format("not a base checkpoint".into()));
    }
    let config = UNetConfig::from_meta(&c.meta("config")?)?;
    let seed = parse_u64(&c.meta("seed")?)?;
    let stage = c.meta("stage")?;
    let mut tensors = BTreeMap::new();
    for (name, arr) in c.into_entries() {
        if name.starts_with("meta.") {
            continue;
        }
        match arr {
            Array::F32(t) => {
                tensors.insert(name, t);
            }
            _ => return Err(Error::Format(format!("{name}: base tensors must be f32"))),
        }
    }
    let mut model = UNet::build(config, seed)?;
    model.load_state_tensors(tensors)?;
    Ok((model, BaseInfo { config, seed, stage }, sha256_hex(bytes)))
}

/// Loads a base checkpoint; also returns the file's SHA-256.
pub fn load_base(path: &Path) -> Result<(UNet<f32>, BaseInfo, String)> {
    base_from_bytes(&std::fs::read(path)?)
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse().map_err(|_| Error::Format(format!("bad integer '{s}'")))
}

/// Per-domain adaptation result: adapter factors and BN running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub base_checksum: String,
    pub domain_id: String,
    pub rank: usize,
    /// Textual selector (`1`, `1-2`, `all`, ...).
    pub selector: String,
    pub seed: u64,
    pub adabn: bool,
    /// Conv path → (X, Y).
    pub factors: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
    /// BN path → (running mean, running var).
    pub bn_stats: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdapterCheckpoint {
    /// Captures the adapters and BN statistics of an adapted model.
    pub fn capture(
        model: &UNet<f32>,
        base_checksum: &str,
        domain_id: &str,
        selector: &InjectionSelector,
        rank: usize,
        seed: u64,
        adabn: bool,
    ) -> Self {
        let factors = model
            .adapters()
            .into_iter()
            .map(|(p, a)| (p, (a.x.clone(), a.y.clone())))
            .collect();
        let bn_stats = model.bn_stats().into_iter().map(|(p, m, v)| (p, (m, v))).collect();
        Self {
            base_checksum: base_checksum.to_string(),
            domain_id: domain_id.to_string(),
            rank,
            selector: selector.describe(model.config().depth),
            seed,
            adabn,
            factors,
            bn_stats,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "adapter")?;
        c.set_meta("base_checksum", &self.base_checksum)?;
        c.set_meta("domain_id", &self.domain_id)?;
        c.set_meta("rank", &self.rank.to_string())?;
        c.set_meta("selector", &self.selector)?;
        c.set_meta("seed", &self.seed.to_string())?;
        c.set_meta("adabn", if self.adabn { "on" } else { "off" })?;
        for (p, (x, y)) in &self.factors {
            c.push_f32(format!("{p}.lora_x"), x.clone())?;
            c.push_f32(format!("{p}.lora_y"), y.clone())?;
        }
        for (p, (m, v)) in &self.bn_stats {
            c.push_f32(format!("{p}.running_mean"), m.clone())?;
            c.push_f32(format!("{p}.running_var"), v.clone())?;
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "adapter" {
            return Err(Error::Format("not an adapter checkpoint".into()));
        }
        let mut xs = BTreeMap::new();
        let mut ys = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for (name, arr) in c.entries() {
            if name.starts_with("meta.") {
                continue;
            }
            let Array::F32(t) = arr else {
                return Err(Error::Format(format!("{name}: adapter tensors must be f32")));
            };
            let (path, field) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::Format(format!("unexpected entry {name}")))?;
            let slot = match field {
                "lora_x" => &mut xs,
                "lora_y" => &mut ys,
                "running_mean" => &mut means,
                "running_var" => &mut vars,
                _ => {
                    return Err(Error::Format(format!(
                        "unexpected entry {name}; adapter checkpoints carry only factors and BN statistics"
                    )))
                }
            };
            slot.insert(path.to_string(), t.clone());
        }
        let factors = pair_up(xs, ys, "adapter factors")?;
        let bn_stats = pair_up(means, vars, "BN statistics")?;
        Ok(Self {
            base_checksum: c.meta("base_checksum")?,
            domain_id: c.meta("domain_id")?,
            rank: parse_u64(&c.meta("rank")?)? as usize,
            selector: c.meta("selector")?,
            seed: parse_u64(&c.meta("seed")?)?,
            adabn: c.meta("adabn")? == "on",
            factors,
            bn_stats,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.factors.values().map(|(x, y)| x.len() + y.len()).sum()
    }

    /// Rebuilds the adapted model on top of `base`. Fails unless
    /// `base_checksum` matches the checkpoint's recorded base.
    pub fn apply(&self, base: &UNet<f32>, base_checksum: &str) -> Result<UNet<f32>> {
        if base_checksum != self.base_checksum {
            return Err(Error::Checksum(format!(
                "adapter for {} expects base {}, got {}",
                self.domain_id, self.base_checksum, base_checksum
            )));
        }
        let mut model = base.clone();
        let selector = InjectionSelector::parse(&self.selector, model.config().depth)?;
        model.inject_convlora(&selector, self.rank, self.seed)?;
        let mut params = BTreeMap::new();
        for (p, (x, y)) in &self.factors {
            params.insert(format!("{p}.lora_x"), x.clone());
            params.insert(format!("{p}.lora_y"), y.clone());
        }
        if model.adapter_count() != self.factors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} adapters, selector {} yields {}",
                self.factors.len(),
                self.selector,
                model.adapter_count()
            )));
        }
        model.set_params(&params)?;
        for (p, (m, v)) in &self.bn_stats {
            model.set_bn_stats(p, m.clone(), v.clone())?;
        }
        model.freeze_all();
        model.set_eval();
        Ok(model)
    }
}

fn pair_up(
    mut a: BTreeMap<String, Tensor<f32>>,
    mut b: BTreeMap<String, Tensor<f32>>,
    what: &str,
) -> Result<BTreeMap<String, (Tensor<f32>, Tensor<f32>)>> {
    let mut out = BTreeMap::new();
    let keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    for k in keys {
        if out.contains_key(&k) {
            continue;
        }
        match (a.remove(&k), b.remove(&k)) {
            (Some(x), Some(y)) => {
                out.insert(k, (x, y));
            }
            _ => return Err(Error::Format(format!("incomplete {what} for {k}"))),
        }
    }
    Ok(out)
}
