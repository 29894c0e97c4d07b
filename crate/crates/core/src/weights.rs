//! Parameter inventory and initialization for the whole network.

use std::path::Path;

use tensorlab::{qmvw, ParamStore, SplitMix64, Tensor};

use crate::config::RunConfig;
use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform with variance `2/fan_in`, for layers followed by ReLU.
    He,
    /// Uniform with variance `1/fan_in`.
    Lecun,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: Init,
}

#[derive(Default)]
pub(crate) struct SpecList(pub Vec<ParamSpec>);

impl SpecList {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in,
            init,
        });
    }

    /// `{name}.w` as `out×in×3×3` (or `out×in` when `k == 1`) and a zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) {
        let shape: Vec<usize> = if k == 3 { vec![cout, cin, 3, 3] } else { vec![cout, cin] };
        self.push(format!("{name}.w"), &shape, cin * k * k, init);
        self.push(format!("{name}.b"), &[cout], 1, Init::Zeros);
    }

    /// `{name}.w` as `in×out` and a zero bias.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize, init: Init) {
        self.push(format!("{name}.w"), &[din, dout], din, init);
        self.push(format!("{name}.b"), &[dout], 1, Init::Zeros);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.g"), &[d], 1, Init::Ones);
        self.push(format!("{name}.b"), &[d], 1, Init::Zeros);
    }
}

pub(crate) fn all_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let mut s = SpecList::default();
    crate::segnet::specs(cfg, &mut s);
    crate::querymod::specs(cfg, &mut s);
    s.0
}

/// All network parameters in a [`ParamStore`].
///
/// Names are prefixed by owner: `enc`, `key`, `menc`, `dec`, `head`, `base`,
/// `sim`, `qcim`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub store: ParamStore,
}

impl NetWeights {
    /// Random initialization; identical `(cfg, seed)` give identical weights.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        for spec in all_specs(cfg) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::He | Init::Lecun => {
                    let var = if spec.init == Init::He { 2.0 } else { 1.0 } / spec.fan_in as f64;
                    let a = (3.0 * var).sqrt();
                    rng.tensor(&spec.shape, -a, a)
                }
            };
            store.insert(spec.name, t);
        }
        Ok(Self { store })
    }

    /// Wraps a store after checking it holds exactly the parameters `cfg` needs.
    pub fn from_store(store: ParamStore, cfg: &RunConfig) -> Result<Self> {
        let specs = all_specs(cfg);
        for spec in &specs {
            match store.get(&spec.name) {
                None => return input(format!("weights lack parameter `{}`", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return input(format!(
                        "parameter `{}` has shape {:?}, config expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ))
                }
                Some(_) => {}
            }
        }
        if store.len() != specs.len() {
            let extra = store
                .names()
                .find(|n| !specs.iter().any(|s| s.name == *n))
                .unwrap_or_default()
                .to_string();
            return input(format!("weights hold unexpected parameter `{extra}`"));
        }
        Ok(Self { store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(qmvw::save(&self.store, path)?)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        Self::from_store(qmvw::load(path)?, cfg)
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}
