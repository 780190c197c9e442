//! The three 6-block architectures (ordinary, exactly equivariant,
//! approximately equivariant) with shared macro-structure.
//!
//! Blocks 1-5 convolve with kernel size equal to the incoming sequence
//! length, symmetrically padded with stride 2 so the sequence halves each
//! block; block 1 has no nonlinearity. Blocks 2-5 add a skip connection in
//! which the block input is downsampled by a non-trainable averaging kernel
//! of matching size and padding, then LayerNorm, then swish. Block 6 is a
//! dense layer over channel and time indices, tanh, and a final contraction
//! to the output (a vector readout for localization, a pooled scalar logit
//! for detection).

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::dihedral::GROUP_ORDER;
use crate::error::{Error, Result};
use crate::layers;
use crate::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ordinary,
    Exact,
    Approximate,
}

impl Variant {
    pub fn is_equivariant(self) -> bool {
        !matches!(self, Variant::Ordinary)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordinary" => Ok(Variant::Ordinary),
            "exact" => Ok(Variant::Exact),
            "approx" | "approximate" => Ok(Variant::Approximate),
            other => Err(Error::InvalidArgument(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Locate,
    Detect,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "locate" => Ok(Task::Locate),
            "detect" => Ok(Task::Detect),
            other => Err(Error::InvalidArgument(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture selector plus hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub task: Task,
    /// Widths of the five convolutional blocks plus the block-6 hidden size.
    pub channel_widths: [usize; 6],
    pub input_length: usize,
    pub dropout: f64,
    pub use_bias: bool,
    /// Feed the diagonal (self-interaction) adjacency entries to the model.
    pub include_diagonal: bool,
    pub seed: u64,
}

impl ModelSpec {
    /// Default widths targeting the full-scale parameter budgets
    /// (~366k equivariant, ~371k ordinary).
    pub fn full_scale(variant: Variant, task: Task, seed: u64) -> Self {
        let channel_widths = match variant {
            Variant::Ordinary => [32, 40, 48, 56, 64, 64],
            _ => [12, 16, 20, 20, 24, 64],
        };
        Self {
            variant,
            task,
            channel_widths,
            input_length: 158,
            dropout: 0.05,
            use_bias: true,
            include_diagonal: false,
            seed,
        }
    }

    /// Small widths for desk-scale experiments on a single CPU core.
    pub fn desk_scale(variant: Variant, task: Task, seed: u64) -> Self {
        let channel_widths = match variant {
            Variant::Ordinary => [8, 8, 8, 8, 8, 32],
            _ => [2, 3, 3, 4, 4, 16],
        };
        Self {
            variant,
            task,
            channel_widths,
            input_length: 158,
            dropout: 0.05,
            use_bias: true,
            include_diagonal: false,
            seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Locate => 2,
            Task::Detect => 1,
        }
    }
}

/// Geometry of one convolutional block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
    pub l_in: usize,
    pub l_out: usize,
}

/// Padding that halves the sequence at stride 2 with kernel size = length.
fn halving_pad(l: usize) -> usize {
    (l - 2 + (l % 2)).div_ceil(2)
}

fn halving_plan(input_length: usize, widths: &[usize; 6], c0: usize) -> Result<Vec<BlockGeom>> {
    let mut plan = Vec::with_capacity(5);
    let mut l = input_length;
    let mut c_in = c0;
    for &c_out in widths[..5].iter() {
        if l < 2 {
            return Err(Error::InvalidArgument(format!(
                "input length {} too short for five halving blocks",
                input_length
            )));
        }
        let kernel = l;
        let pad = halving_pad(l);
        let l_out = l.div_ceil(2);
        plan.push(BlockGeom {
            c_in,
            c_out,
            kernel,
            pad,
            l_in: l,
            l_out,
        });
        l = l_out;
        c_in = c_out;
    }
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

pub struct Model {
    spec: ModelSpec,
    plan: Vec<BlockGeom>,
    params: Vec<Param>,
}

/// Node ids of one recorded forward pass.
pub struct ForwardPass {
    pub output: NodeId,
    /// One node per parameter, in declaration order.
    pub param_nodes: Vec<NodeId>,
}

const STRIDE: usize = 2;

impl Model {
    /// Assemble a model and initialize its parameters from `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                spec.dropout
            )));
        }
        let c0 = if spec.variant.is_equivariant() { 1 } else { 16 };
        let plan = halving_plan(spec.input_length, &spec.channel_widths, c0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        let equivariant = spec.variant.is_equivariant();
        let approx = spec.variant == Variant::Approximate;

        let push_kernel = |params: &mut Vec<Param>, name: String, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let limit = (3.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<Scalar> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            params.push(Param {
                name,
                value: Tensor::new(shape.to_vec(), data).expect("shape/data agree"),
            });
        };

        for (i, b) in plan.iter().enumerate() {
            let block = i + 1;
            if equivariant {
                if block == 1 {
                    push_kernel(
                        &mut params,
                        format!("block{block}.kernel"),
                        &[b.c_out, b.c_in, 4, 4, b.kernel],
                        b.c_in * 16 * b.kernel,
                        &mut rng,
                    );
                } else {
                    push_kernel(
                        &mut params,
                        format!("block{block}.kernel"),
                        &[b.c_out, b.c_in, GROUP_ORDER, b.kernel],
                        b.c_in * GROUP_ORDER * b.kernel,
                        &mut rng,
                    );
                }
            } else {
                push_kernel(
                    &mut params,
                    format!("block{block}.kernel"),
                    &[b.c_out, b.c_in, b.kernel],
                    b.c_in * b.kernel,
                    &mut rng,
                );
            }
            if spec.use_bias {
                params.push(Param {
                    name: format!("block{block}.bias"),
                    value: Tensor::zeros(&[b.c_out]),
                });
            }
            if block >= 2 {
                params.push(Param {
                    name: format!("block{block}.ln_gamma"),
                    value: Tensor::full(&[b.c_out], 1.0),
                });
                params.push(Param {
                    name: format!("block{block}.ln_beta"),
                    value: Tensor::zeros(&[b.c_out]),
                });
            }
            if approx {
                params.push(Param {
                    name: format!("block{block}.omega_raw"),
                    value: Tensor::zeros(&[GROUP_ORDER]),
                });
            }
        }

        let t_final = plan[4].l_out;
        let c5 = spec.channel_widths[4];
        let hidden = spec.channel_widths[5];
        let dense_in = c5 * t_final;
        push_kernel(
            &mut params,
            "block6.w1".into(),
            &[hidden, dense_in],
            dense_in,
            &mut rng,
        );
        if spec.use_bias {
            params.push(Param {
                name: "block6.b1".into(),
                value: Tensor::zeros(&[hidden]),
            });
        }
        let out_dim = spec.output_dim();
        push_kernel(
            &mut params,
            "block6.w2".into(),
            &[out_dim, hidden],
            hidden,
            &mut rng,
        );
        if spec.use_bias {
            params.push(Param {
                name: "block6.b2".into(),
                value: Tensor::zeros(&[out_dim]),
            });
        }
        if approx {
            params.push(Param {
                name: "readout.omega_raw".into(),
                value: Tensor::zeros(&[GROUP_ORDER]),
            });
        }

        Ok(Self { spec, plan, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &[BlockGeom] {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of symmetry-breaking weight arrays (approximate variant only).
    pub fn omega_layer_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.ends_with("omega_raw"))
            .count()
    }

    /// Sequence lengths entering each block plus the final length.
    pub fn sequence_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.plan.iter().map(|b| b.l_in).collect();
        s.push(self.plan[4].l_out);
        s
    }

    /// Convert a `[4, 4, T]` adjacency signal to the model input layout,
    /// zeroing the diagonal self-interaction entries unless configured in.
    pub fn prepare_input(&self, adjacency: &Tensor) -> Result<Tensor> {
        let shape = adjacency.shape().to_vec();
        if shape.len() != 3 || shape[0] != 4 || shape[1] != 4 {
            return Err(Error::Shape(format!(
                "adjacency must be [4, 4, T], got {:?}",
                shape
            )));
        }
        let t_len = shape[2];
        if t_len != self.spec.input_length {
            return Err(Error::InvalidArgument(format!(
                "input length {} does not match model input length {}",
                t_len, self.spec.input_length
            )));
        }
        let mut data = adjacency.data().to_vec();
        if !self.spec.include_diagonal {
            for r in 0..4 {
                for t in 0..t_len {
                    data[(r * 4 + r) * t_len + t] = 0.0;
                }
            }
        }
        if self.spec.variant.is_equivariant() {
            Tensor::new(vec![1, 4, 4, t_len], data)
        } else {
            Tensor::new(vec![16, t_len], data)
        }
    }

    /// Record a forward pass on `graph`. `rng` drives channel dropout and is
    /// only consumed in train mode.
    pub fn forward(
        &self,
        graph: &mut Graph,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_nodes.push(graph.param(p.value.clone()));
        }
        let node_of = |name: &str| -> NodeId {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("parameter {name} exists by construction"));
            param_nodes[idx]
        };
        let approx = self.spec.variant == Variant::Approximate;
        let equivariant = self.spec.variant.is_equivariant();

        let mut x = graph.constant(input.clone());
        for (i, b) in self.plan.iter().enumerate() {
            let block = i + 1;
            let kernel = node_of(&format!("block{block}.kernel"));
            let mut y = if equivariant {
                if block == 1 {
                    layers::lift(graph, x, kernel, STRIDE, b.pad)?
                } else {
                    layers::group_conv(graph, x, kernel, STRIDE, b.pad)?
                }
            } else {
                graph.conv1d(x, kernel, STRIDE, b.pad)?
            };
            if approx {
                let raw = node_of(&format!("block{block}.omega_raw"));
                let omega = layers::symmetry_weights(graph, raw)?;
                y = layers::apply_symmetry_weights(graph, y, omega, 1)?;
            }
            if self.spec.use_bias {
                y = graph.add_bias(y, node_of(&format!("block{block}.bias")))?;
            }
            if block >= 2 {
                // skip path: block input through a fixed averaging kernel
                let skip = if equivariant {
                    let avg = graph.constant(layers::average_group_kernel(
                        b.c_out, b.c_in, b.kernel,
                    ));
                    let flat = graph.reshape(x, &[b.c_in * GROUP_ORDER, b.l_in])?;
                    let s = graph.conv1d(flat, avg, STRIDE, b.pad)?;
                    graph.reshape(s, &[b.c_out, GROUP_ORDER, b.l_out])?
                } else {
                    let avg = graph.constant(layers::average_kernel(b.c_out, b.c_in, b.kernel));
                    graph.conv1d(x, avg, STRIDE, b.pad)?
                };
                y = graph.add(y, skip)?;
                let gamma = node_of(&format!("block{block}.ln_gamma"));
                let beta = node_of(&format!("block{block}.ln_beta"));
                y = graph.layer_norm(y, gamma, beta)?;
                y = graph.swish(y);
                if mode == Mode::Train && self.spec.dropout > 0.0 {
                    y = graph.dropout_channels(y, self.spec.dropout, rng)?;
                }
            }
            x = y;
        }

        // block 6
        let t_final = self.plan[4].l_out;
        let c5 = self.spec.channel_widths[4];
        let _hidden = self.spec.channel_widths[5];
        let w1 = node_of("block6.w1");
        let w2 = node_of("block6.w2");
        let out_dim = self.spec.output_dim();

        let output = if equivariant {
            // per-group dense with shared weights: [C, 8, T] -> [(C T), 8]
            let mut map = Vec::with_capacity(c5 * t_final * GROUP_ORDER);
            for c in 0..c5 {
                for t in 0..t_final {
                    for sigma in 0..GROUP_ORDER {
                        map.push((c * GROUP_ORDER + sigma) * t_final + t);
                    }
                }
            }
            let cols = graph.index_map(x, Rc::new(map), &[c5 * t_final, GROUP_ORDER])?;
            let mut h = graph.matmul(w1, cols)?;
            if self.spec.use_bias {
                h = graph.add_bias(h, node_of("block6.b1"))?;
            }
            h = graph.tanh(h);
            match self.spec.task {
                Task::Locate => {
                    let mut v = graph.matmul(w2, h)?; // [2, 8]
                    if self.spec.use_bias {
                        v = graph.add_bias(v, node_of("block6.b2"))?;
                    }
                    if approx {
                        let raw = node_of("readout.omega_raw");
                        let omega = layers::symmetry_weights(graph, raw)?;
                        v = layers::apply_symmetry_weights(graph, v, omega, 1)?;
                    }
                    layers::vector_head(graph, v)?
                }
                Task::Detect => {
                    let feat = if approx {
                        let raw = node_of("readout.omega_raw");
                        let omega = layers::symmetry_weights(graph, raw)?;
                        layers::apply_symmetry_weights(graph, h, omega, 1)?
                    } else {
                        h
                    };
                    let b2 = if self.spec.use_bias {
                        node_of("block6.b2")
                    } else {
                        graph.constant(Tensor::zeros(&[1]))
                    };
                    layers::scalar_head(graph, feat, w2, b2)?
                }
            }
        } else {
            let flat = graph.reshape(x, &[c5 * t_final, 1])?;
            let mut h = graph.matmul(w1, flat)?;
            if self.spec.use_bias {
                h = graph.add_bias(h, node_of("block6.b1"))?;
            }
            h = graph.tanh(h);
            let mut o = graph.matmul(w2, h)?;
            if self.spec.use_bias {
                o = graph.add_bias(o, node_of("block6.b2"))?;
            }
            graph.reshape(o, &[out_dim])?
        };

        Ok(ForwardPass {
            output,
            param_nodes,
        })
    }

    /// Deterministic (eval-mode) forward returning the output values.
    pub fn predict(&self, adjacency: &Tensor) -> Result<Vec<Scalar>> {
        let input = self.prepare_input(adjacency)?;
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut graph, &input, Mode::Eval, &mut rng)?;
        Ok(graph.value(pass.output).data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Byte layout (all integers little-endian):
//   magic  b"PWCK"
//   u32    format version (1)
//   u32    header length in bytes
//   []     JSON header: { spec, params: [{name, shape}], rng: {seed, word_pos}? }
//   []     parameter data, f64 little-endian, in header order
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"PWCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    params: Vec<ParamMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
}

/// Serialize a model (and optionally the training RNG state) to `path`.
pub fn save_checkpoint(model: &Model, rng: Option<&ChaCha8Rng>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        rng: rng.map(RngState::capture),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in model.params() {
        for &v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a model checkpoint; returns the model and the stored RNG state.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<RngState>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a platewave checkpoint".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    file.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut model = Model::build(header.spec)?;
    if model.params().len() != header.params.len() {
        return Err(Error::Data("checkpoint parameter list mismatch".into()));
    }
    for (p, meta) in model.params_mut().iter_mut().zip(&header.params) {
        if p.name != meta.name || p.value.shape() != meta.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint parameter {} does not match model layout",
                meta.name
            )));
        }
        let n = p.value.len();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            p.value.data_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok((model, header.rng))
}
