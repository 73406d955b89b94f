//! Experiment configuration: flat `key = value` text files, a canonical
//! serialized form, and a stable hash recorded in every output.

use crate::data::{NoiseKind, NoiseSpec};
use crate::error::ConfigError;
use crate::optim::{OptimizerKind, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureId {
    /// Two graph convolutions with a stride-2 max pool in between and a
    /// global mean pool before the classifier.
    Updown2,
    /// One graph convolution, global mean pool, classifier.
    Updown1,
    /// Two graph convolutions with batch norm, flattened classifier input.
    Mnist2,
}

impl ArchitectureId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::Updown2 => "updown2",
            ArchitectureId::Updown1 => "updown1",
            ArchitectureId::Mnist2 => "mnist2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    L3 { orders: Vec<usize>, shared: bool },
    Cheb { degree: usize },
    Gcn,
    Gat { heads: usize, head_dim: usize },
    EdgeNet { taps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphSpec {
    Ring { n: usize },
    Chain { n: usize },
    Grid { h: usize, w: usize },
}

impl GraphSpec {
    pub fn build(&self) -> Result<crate::graph::Graph, crate::error::GraphError> {
        match *self {
            GraphSpec::Ring { n } => crate::graph::Graph::ring(n),
            GraphSpec::Chain { n } => crate::graph::Graph::chain(n),
            GraphSpec::Grid { h, w } => crate::graph::Graph::grid(h, w),
        }
    }

    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        match *self {
            GraphSpec::Grid { h, w } => Some((h, w)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    UpDown {
        n_train: usize,
        n_test: usize,
        threshold: f64,
        bump_std: f64,
        seed: u64,
    },
    Mnist {
        dir: String,
        factor: usize,
        noise: Option<NoiseSpec>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureId,
    pub layer: LayerKind,
    pub graph: GraphSpec,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub epochs: usize,
    pub reg_lambda: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("arch", self.architecture.as_str().into());
        match &self.layer {
            LayerKind::L3 { orders, shared } => {
                kv("layer", "l3net".into());
                kv(
                    "orders",
                    orders
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                kv("shared_basis", shared.to_string());
            }
            LayerKind::Cheb { degree } => {
                kv("layer", "cheb".into());
                kv("cheb_degree", degree.to_string());
            }
            LayerKind::Gcn => kv("layer", "gcn".into()),
            LayerKind::Gat { heads, head_dim } => {
                kv("layer", "gat".into());
                kv("heads", heads.to_string());
                kv("head_dim", head_dim.to_string());
            }
            LayerKind::EdgeNet { taps } => {
                kv("layer", "edgenet".into());
                kv("taps", taps.to_string());
            }
        }
        match self.graph {
            GraphSpec::Ring { n } => {
                kv("graph", "ring".into());
                kv("nodes", n.to_string());
            }
            GraphSpec::Chain { n } => {
                kv("graph", "chain".into());
                kv("nodes", n.to_string());
            }
            GraphSpec::Grid { h, w } => {
                kv("graph", "grid".into());
                kv("grid_h", h.to_string());
                kv("grid_w", w.to_string());
            }
        }
        match &self.dataset {
            DatasetSpec::UpDown {
                n_train,
                n_test,
                threshold,
                bump_std,
                seed,
            } => {
                kv("dataset", "updown".into());
                kv("n_train", n_train.to_string());
                kv("n_test", n_test.to_string());
                kv("threshold", threshold.to_string());
                kv("bump_std", bump_std.to_string());
                kv("data_seed", seed.to_string());
            }
            DatasetSpec::Mnist { dir, factor, noise } => {
                kv("dataset", "mnist".into());
                kv("mnist_dir", dir.clone());
                kv("factor", factor.to_string());
                match noise {
                    None => kv("noise", "none".into()),
                    Some(spec) => {
                        match spec.kind {
                            NoiseKind::Gaussian { std } => {
                                kv("noise", "gaussian".into());
                                kv("noise_std", std.to_string());
                            }
                            NoiseKind::Missing { noise_level } => {
                                kv("noise", "missing".into());
                                kv("noise_level", noise_level.to_string());
                            }
                            NoiseKind::Permutation => kv("noise", "permutation".into()),
                        }
                        kv("noise_seed", spec.seed.to_string());
                    }
                }
            }
        }
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
        );
        kv("lr", format!("{}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        match self.schedule {
            Schedule::Constant => kv("schedule", "constant".into()),
            Schedule::Step { at_epoch, factor } => {
                kv("schedule", "step".into());
                kv("step_epoch", at_epoch.to_string());
                kv("step_factor", factor.to_string());
            }
            Schedule::Plateau {
                patience,
                factor,
                min_delta,
            } => {
                kv("schedule", "plateau".into());
                kv("patience", patience.to_string());
                kv("plateau_factor", factor.to_string());
                kv("min_delta", min_delta.to_string());
            }
        }
        kv("epochs", self.epochs.to_string());
        kv("reg_lambda", format!("{}", self.reg_lambda));
        kv("seed", self.seed.to_string());
        s
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = std::collections::BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Parse {
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &'static str| -> Result<&String, ConfigError> {
            map.get(k).ok_or(ConfigError::Missing(k))
        };
        let parse_num = |k: &'static str, v: &str| -> Result<f64, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: k.into(),
                msg: format!("not a number: {v}"),
            })
        };
        let parse_usize = |k: &'static str, v: &str| -> Result<usize, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: k.into(),
                msg: format!("not an integer: {v}"),
            })
        };
        let parse_u64 = |k: &'static str, v: &str| -> Result<u64, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: k.into(),
                msg: format!("not an integer: {v}"),
            })
        };

        let architecture = match get("arch")?.as_str() {
            "updown2" => ArchitectureId::Updown2,
            "updown1" => ArchitectureId::Updown1,
            "mnist2" => ArchitectureId::Mnist2,
            other => return Err(ConfigError::UnknownArchitecture(other.into())),
        };
        let layer = match get("layer")?.as_str() {
            "l3net" => {
                let orders_s = get("orders")?;
                let orders = orders_s
                    .split(';')
                    .map(|t| parse_usize("orders", t.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                if orders.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: "orders".into(),
                        msg: "need at least one order".into(),
                    });
                }
                let shared = map
                    .get("shared_basis")
                    .map(|v| v == "true")
                    .unwrap_or(false);
                LayerKind::L3 { orders, shared }
            }
            "cheb" => LayerKind::Cheb {
                degree: parse_usize("cheb_degree", get("cheb_degree")?)?,
            },
            "gcn" => LayerKind::Gcn,
            "gat" => LayerKind::Gat {
                heads: parse_usize("heads", get("heads")?)?,
                head_dim: parse_usize("head_dim", get("head_dim")?)?,
            },
            "edgenet" => LayerKind::EdgeNet {
                taps: parse_usize("taps", get("taps")?)?,
            },
            other => return Err(ConfigError::UnknownLayer(other.into())),
        };
        let graph = match get("graph")?.as_str() {
            "ring" => GraphSpec::Ring {
                n: parse_usize("nodes", get("nodes")?)?,
            },
            "chain" => GraphSpec::Chain {
                n: parse_usize("nodes", get("nodes")?)?,
            },
            "grid" => GraphSpec::Grid {
                h: parse_usize("grid_h", get("grid_h")?)?,
                w: parse_usize("grid_w", get("grid_w")?)?,
            },
            other => {
                return Err(ConfigError::BadValue {
                    key: "graph".into(),
                    msg: format!("unknown graph kind {other}"),
                })
            }
        };
        let dataset = match get("dataset")?.as_str() {
            "updown" => DatasetSpec::UpDown {
                n_train: parse_usize("n_train", get("n_train")?)?,
                n_test: parse_usize("n_test", get("n_test")?)?,
                threshold: map
                    .get("threshold")
                    .map(|v| parse_num("threshold", v))
                    .transpose()?
                    .unwrap_or(0.1),
                bump_std: map
                    .get("bump_std")
                    .map(|v| parse_num("bump_std", v))
                    .transpose()?
                    .unwrap_or(1.5),
                seed: map
                    .get("data_seed")
                    .map(|v| parse_u64("data_seed", v))
                    .transpose()?
                    .unwrap_or(0),
            },
            "mnist" => {
                let noise = match map.get("noise").map(String::as_str) {
                    None | Some("none") => None,
                    Some("gaussian") => Some(NoiseSpec {
                        kind: NoiseKind::Gaussian {
                            std: parse_num("noise_std", get("noise_std")?)?,
                        },
                        seed: parse_u64("noise_seed", get("noise_seed")?)?,
                    }),
                    Some("missing") => Some(NoiseSpec {
                        kind: NoiseKind::Missing {
                            noise_level: parse_num("noise_level", get("noise_level")?)?,
                        },
                        seed: parse_u64("noise_seed", get("noise_seed")?)?,
                    }),
                    Some("permutation") => Some(NoiseSpec {
                        kind: NoiseKind::Permutation,
                        seed: parse_u64("noise_seed", get("noise_seed")?)?,
                    }),
                    Some(other) => {
                        return Err(ConfigError::BadValue {
                            key: "noise".into(),
                            msg: format!("unknown noise kind {other}"),
                        })
                    }
                };
                DatasetSpec::Mnist {
                    dir: get("mnist_dir")?.clone(),
                    factor: parse_usize("factor", get("factor")?)?,
                    noise,
                }
            }
            other => {
                return Err(ConfigError::BadValue {
                    key: "dataset".into(),
                    msg: format!("unknown dataset {other}"),
                })
            }
        };
        let optimizer = match map.get("optimizer").map(String::as_str) {
            None | Some("adam") => OptimizerKind::Adam,
            Some("sgd") => OptimizerKind::Sgd,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "optimizer".into(),
                    msg: format!("unknown optimizer {other}"),
                })
            }
        };
        let schedule = match map.get("schedule").map(String::as_str) {
            None | Some("constant") => Schedule::Constant,
            Some("step") => Schedule::Step {
                at_epoch: parse_usize("step_epoch", get("step_epoch")?)?,
                factor: parse_num("step_factor", get("step_factor")?)?,
            },
            Some("plateau") => Schedule::Plateau {
                patience: parse_usize("patience", get("patience")?)?,
                factor: parse_num("plateau_factor", get("plateau_factor")?)?,
                min_delta: map
                    .get("min_delta")
                    .map(|v| parse_num("min_delta", v))
                    .transpose()?
                    .unwrap_or(1e-4),
            },
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "schedule".into(),
                    msg: format!("unknown schedule {other}"),
                })
            }
        };
        let reg_lambda = map
            .get("reg_lambda")
            .map(|v| parse_num("reg_lambda", v))
            .transpose()?
            .unwrap_or(0.0);
        if reg_lambda < 0.0 {
            return Err(ConfigError::BadValue {
                key: "reg_lambda".into(),
                msg: format!("negative weight {reg_lambda}"),
            });
        }
        Ok(Self {
            architecture,
            layer,
            graph,
            dataset,
            optimizer,
            lr: parse_num("lr", get("lr")?)?,
            batch_size: parse_usize("batch_size", get("batch_size")?)?,
            schedule,
            epochs: parse_usize("epochs", get("epochs")?)?,
            reg_lambda,
            seed: map
                .get("seed")
                .map(|v| parse_u64("seed", v))
                .transpose()?
                .unwrap_or(0),
        })
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
