//! Prefix parameters in their two forms: the trainable reparametrized
//! set (embedding plus a small MLP) and the deployed per-layer key/value
//! activations that are all an inference server ever needs.
//!
//! Both forms serialize: deployed activations as the portable prefix
//! file, the trainable set as a companion used to resume or initialize
//! further training. Each carries the digest of the backbone it was
//! trained against, so prefixes cannot silently cross backbones.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Array;
use crate::{PktError, Result};

const PREFIX_MAGIC: &[u8; 4] = b"PKTP";
const REPARAM_MAGIC: &[u8; 4] = b"PKTR";
const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_PREFIX_LEN: usize = 8;
pub const DEFAULT_K_REPARAM: usize = 512;

/// Trainable prefix parameters: per-position embedding P' and a one
/// hidden layer MLP (tanh) expanding each position to key and value rows
/// for every backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamPrefix {
    /// [L, d_model]
    pub p_prime: Array,
    /// [d_model, k_reparam]
    pub w1: Array,
    /// [k_reparam]
    pub b1: Array,
    /// [k_reparam, 2 * n_layers * d_model]
    pub w2: Array,
    /// [2 * n_layers * d_model]
    pub b2: Array,
}

impl ReparamPrefix {
    /// Normal(0, 0.2) initialization: wide enough that fresh prefix rows
    /// compete with content keys and values for attention, so gradients
    /// reach the prefix from the first step.
    pub fn init(
        n_layers: usize,
        d_model: usize,
        l_prefix: usize,
        k_reparam: usize,
        seed: u64,
    ) -> Result<ReparamPrefix> {
        if n_layers == 0 || d_model == 0 || l_prefix == 0 || k_reparam == 0 {
            return Err(PktError::Config(
                "prefix dims (layers, d_model, length, reparam width) must be positive".into(),
            ));
        }
        let out_dim = 2 * n_layers * d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ReparamPrefix {
            p_prime: Array::zeros(vec![l_prefix, d_model]),
            w1: Array::zeros(vec![d_model, k_reparam]),
            b1: Array::zeros(vec![k_reparam]),
            w2: Array::zeros(vec![k_reparam, out_dim]),
            b2: Array::zeros(vec![out_dim]),
        };
        p.p_prime.fill_normal(&mut rng, 0.2);
        p.w1.fill_normal(&mut rng, 0.2);
        p.w2.fill_normal(&mut rng, 0.2);
        Ok(p)
    }

    pub fn l_prefix(&self) -> usize {
        self.p_prime.rows()
    }

    pub fn d_model(&self) -> usize {
        self.p_prime.cols()
    }

    pub fn k_reparam(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.b2.len() / (2 * self.d_model())
    }

    /// Order: p_prime, w1, b1, w2, b2.
    pub fn param_list(&self) -> Vec<&Array> {
        vec![&self.p_prime, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn param_list_mut(&mut self) -> Vec<&mut Array> {
        vec![
            &mut self.p_prime,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn trainable_count(&self) -> usize {
        self.param_list().iter().map(|a| a.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundReparam {
        BoundReparam {
            p_prime: g.param(self.p_prime.clone()),
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    /// Run the MLP outside any training graph and split the output into
    /// per-layer key/value rows. This is the artifact that ships.
    pub fn deploy(&self) -> Result<DeployedPrefix> {
        let mut g = Graph::new();
        let bound = BoundReparam {
            p_prime: g.constant(self.p_prime.clone()),
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        };
        let nodes = materialize_prefix(&mut g, &bound, self.n_layers(), self.d_model())?;
        let layers = nodes
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        Ok(DeployedPrefix { layers })
    }
}

pub struct BoundReparam {
    pub p_prime: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl BoundReparam {
    /// Order matches [`ReparamPrefix::param_list`].
    pub fn node_list(&self) -> Vec<NodeId> {
        vec![self.p_prime, self.w1, self.b1, self.w2, self.b2]
    }
}

/// Expand bound reparam parameters into per-layer (key rows, value rows)
/// nodes inside the given graph, so gradients flow back through the MLP.
pub fn materialize_prefix(
    g: &mut Graph,
    bound: &BoundReparam,
    n_layers: usize,
    d_model: usize,
) -> Result<Vec<(NodeId, NodeId)>> {
    let hidden = g.matmul(bound.p_prime, bound.w1)?;
    let hidden = g.add_bias(hidden, bound.b1)?;
    let hidden = g.tanh(hidden);
    let out = g.matmul(hidden, bound.w2)?;
    let out = g.add_bias(out, bound.b2)?;
    if g.value(out).cols() != 2 * n_layers * d_model {
        return Err(PktError::Shape {
            op: "materialize_prefix",
            detail: format!(
                "MLP output width {} does not cover {n_layers} layers of {d_model} dims",
                g.value(out).cols()
            ),
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let k = g.slice_cols(out, 2 * l * d_model, d_model)?;
        let v = g.slice_cols(out, (2 * l + 1) * d_model, d_model)?;
        layers.push((k, v));
    }
    Ok(layers)
}

/// Per-layer key/value activation rows, the only parameters a deployed
/// persona needs on top of the shared backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedPrefix {
    /// One ([L, d_model] key rows, [L, d_model] value rows) pair per layer.
    pub layers: Vec<(Array, Array)>,
}

impl DeployedPrefix {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn l_prefix(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].0.cols()
    }

    pub fn element_count(&self) -> usize {
        self.layers.iter().map(|(k, v)| k.len() + v.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
            .collect()
    }

    /// Prefix file bytes: magic, version, backbone digest, dims, then
    /// floats ordered layer by layer, keys before values, position-major.
    pub fn save(&self, path: &Path, backbone_digest: &[u8; 32]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PREFIX_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(backbone_digest);
        for v in [self.n_layers(), self.l_prefix(), self.d_model()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (k, v) in &self.layers {
            for &x in k.data().iter().chain(v.data()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Load and verify against the digest of the backbone in use.
    pub fn load(path: &Path, backbone_digest: &[u8; 32]) -> Result<DeployedPrefix> {
        let buf = std::fs::read(path)?;
        let header = 4 + 4 + 32 + 3 * 4;
        if buf.len() < header {
            return Err(PktError::Data(format!("prefix file too short: {} bytes", buf.len())));
        }
        if &buf[0..4] != PREFIX_MAGIC {
            return Err(PktError::Data("not a prefix file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PktError::Data(format!("unsupported prefix version {version}")));
        }
        if &buf[8..40] != backbone_digest {
            return Err(PktError::Data(
                "prefix was trained against a different backbone (digest mismatch)".into(),
            ));
        }
        let dim_at = |i: usize| -> usize {
            u32::from_le_bytes(buf[40 + 4 * i..44 + 4 * i].try_into().unwrap()) as usize
        };
        let (n_layers, l_prefix, d_model) = (dim_at(0), dim_at(1), dim_at(2));
        if n_layers == 0 || l_prefix == 0 || d_model == 0 {
            return Err(PktError::Data("prefix file has zero dimension".into()));
        }
        let expect = header + 2 * n_layers * l_prefix * d_model * 8;
        if buf.len() != expect {
            return Err(PktError::Data(format!(
                "prefix file is {} bytes, dims imply {expect}",
                buf.len()
            )));
        }
        let mut offset = header;
        let mut read_block = |rows: usize, cols: usize| -> Array {
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in buf[offset..offset + rows * cols * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset += rows * cols * 8;
            Array::new(vec![rows, cols], data).expect("dims checked")
        };
        let layers = (0..n_layers)
            .map(|_| {
                (
                    read_block(l_prefix, d_model),
                    read_block(l_prefix, d_model),
                )
            })
            .collect();
        Ok(DeployedPrefix { layers })
    }
}

impl ReparamPrefix {
    /// Companion training-state file so personalized runs can start from
    /// the source prefix's trainable parameters, not just its activations.
    pub fn save(&self, path: &Path, backbone_digest: &[u8; 32]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(REPARAM_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(backbone_digest);
        for v in [
            self.l_prefix(),
            self.d_model(),
            self.k_reparam(),
            self.b2.len(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for arr in self.param_list() {
            for &x in arr.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, backbone_digest: &[u8; 32]) -> Result<ReparamPrefix> {
        let buf = std::fs::read(path)?;
        let header = 4 + 4 + 32 + 4 * 4;
        if buf.len() < header {
            return Err(PktError::Data(format!(
                "training-state file too short: {} bytes",
                buf.len()
            )));
        }
        if &buf[0..4] != REPARAM_MAGIC {
            return Err(PktError::Data("not a prefix training-state file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PktError::Data(format!(
                "unsupported training-state version {version}"
            )));
        }
        if &buf[8..40] != backbone_digest {
            return Err(PktError::Data(
                "prefix training state belongs to a different backbone (digest mismatch)".into(),
            ));
        }
        let dim_at = |i: usize| -> usize {
            u32::from_le_bytes(buf[40 + 4 * i..44 + 4 * i].try_into().unwrap()) as usize
        };
        let (l_prefix, d_model, k_reparam, out_dim) =
            (dim_at(0), dim_at(1), dim_at(2), dim_at(3));
        if out_dim == 0 || out_dim % (2 * d_model.max(1)) != 0 {
            return Err(PktError::Data(format!(
                "training-state output width {out_dim} does not divide into layers of {d_model}"
            )));
        }
        let mut p = ReparamPrefix {
            p_prime: Array::zeros(vec![l_prefix, d_model]),
            w1: Array::zeros(vec![d_model, k_reparam]),
            b1: Array::zeros(vec![k_reparam]),
            w2: Array::zeros(vec![k_reparam, out_dim]),
            b2: Array::zeros(vec![out_dim]),
        };
        let mut offset = header;
        for arr in p.param_list_mut() {
            let need = arr.len() * 8;
            if offset + need > buf.len() {
                return Err(PktError::Data("training-state file truncated".into()));
            }
            for (i, chunk) in buf[offset..offset + need].chunks_exact(8).enumerate() {
                arr.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            offset += need;
        }
        if offset != buf.len() {
            return Err(PktError::Data("training-state file has trailing bytes".into()));
        }
        Ok(p)
    }
}

/// Deployed float count for given dims; the per-persona storage cost.
pub fn deployed_count(n_layers: usize, l_prefix: usize, d_model: usize) -> usize {
    2 * n_layers * l_prefix * d_model
}
