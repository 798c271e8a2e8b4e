//! Network architectures: image encoder with its prediction head, global and
//! joint input models, graph and MLP policies, the value function, and the
//! Gaussian action head.

pub mod checkpoint;
pub mod init;
mod variant;

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{gaussian_log_density, Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::env::{GrayImage, IMAGE_SIZE};
use crate::error::{contract_err, dim_err, Result};
use crate::graph::{gcn_layer, mean_pool, RobotGraph};
use crate::rng;
pub use variant::{PolicyKind, Variant};

pub const CONV1_FILTERS: usize = 6;
pub const CONV2_FILTERS: usize = 16;
pub const KERNEL: usize = 5;
/// Flattened width after the second pooling stage: 16 · 22 · 22.
pub const FLAT_FEATURES: usize = 7744;
/// Width of the image feature vector (output of the first dense layer).
pub const IMAGE_FEATURES: usize = 128;
pub const HEAD_HIDDEN: usize = 84;
pub const GLOBAL_WIDTH: usize = 128;
pub const JOINT_WIDTH: usize = 32;
pub const HIDDEN: usize = 256;
/// Width of a raw numeric target.
pub const TARGET_WIDTH: usize = 2;

const HIDDEN_GAIN: f64 = SQRT_2;
const POLICY_OUT_GAIN: f64 = 0.01;
const VALUE_OUT_GAIN: f64 = 1.0;

/// Weight and bias of one dense (or convolution) layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub conv1: Dense,
    pub conv2: Dense,
    pub fc1: Dense,
    pub head_fc: Dense,
    pub head_out: Dense,
}

#[derive(Clone, Debug)]
pub enum PolicyLayout {
    Graph {
        gcn1: Dense,
        gcn2: Dense,
        /// One entry for pooled and shared heads, one per node otherwise.
        heads: Vec<Dense>,
    },
    Mlp {
        hidden1: Dense,
        hidden2: Dense,
        out: Dense,
    },
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: Option<EncoderLayout>,
    pub global_input: Option<Dense>,
    pub joint_input: Option<Dense>,
    pub policy: PolicyLayout,
    pub value: [Dense; 3],
    pub log_sigma: ParamId,
}

/// Action means, state values and the shared log standard deviation for a
/// batch, all living on one tape.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `B × n`
    pub mean: Var,
    /// `B × 1`
    pub value: Var,
    pub log_sigma: Var,
}

/// A complete agent: architecture, kinematic graph and every parameter.
#[derive(Clone, Debug)]
pub struct Agent {
    variant: Variant,
    n_joints: usize,
    joint_dim: usize,
    seed: u64,
    graph: RobotGraph,
    layout: Layout,
    pub params: ParamStore,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// Dense layer stored `in × out`, initialized like an `out × in` layer
    /// with (semi-)orthogonal rows.
    fn dense(&mut self, name: &str, inputs: usize, outputs: usize, gain: f64) -> Result<Dense> {
        let w = init::semi_orthogonal(outputs, inputs, gain, self.rng);
        let w = init::transpose(&w, outputs, inputs);
        self.add(name, Tensor::new(&[inputs, outputs], w)?, outputs)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<Dense> {
        let w = init::semi_orthogonal(c_out, c_in * KERNEL * KERNEL, HIDDEN_GAIN, self.rng);
        self.add(name, Tensor::new(&[c_out, c_in, KERNEL, KERNEL], w)?, c_out)
    }

    fn add(&mut self, name: &str, weight: Tensor, outputs: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.store.add(format!("{name}.weight"), weight)?,
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?,
        })
    }
}

impl Agent {
    /// Fresh agent with orthogonal weights, zero biases and `log σ = 0`,
    /// deterministic in `seed`.
    pub fn new(variant: Variant, n_joints: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        if n_joints == 0 || joint_dim == 0 {
            return contract_err("agent needs at least one joint and one joint feature");
        }
        if !variant.has_input_models() && variant.uses_images() && joint_dim > JOINT_WIDTH {
            return contract_err(format!("raw joint states wider than {JOINT_WIDTH}"));
        }
        let graph = RobotGraph::new(n_joints)?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };

        let encoder = if variant.uses_images() {
            Some(EncoderLayout {
                conv1: b.conv("encoder.conv1", 1, CONV1_FILTERS)?,
                conv2: b.conv("encoder.conv2", CONV1_FILTERS, CONV2_FILTERS)?,
                fc1: b.dense("encoder.fc1", FLAT_FEATURES, IMAGE_FEATURES, HIDDEN_GAIN)?,
                head_fc: b.dense("encoder.head_fc", IMAGE_FEATURES, HEAD_HIDDEN, HIDDEN_GAIN)?,
                head_out: b.dense("encoder.head_out", HEAD_HIDDEN, TARGET_WIDTH, HIDDEN_GAIN)?,
            })
        } else {
            None
        };

        let global_in = if variant.uses_images() {
            IMAGE_FEATURES
        } else {
            TARGET_WIDTH
        };
        let (global_input, joint_input) = if variant.has_input_models() {
            let g = b.dense("global_input", global_in, GLOBAL_WIDTH, HIDDEN_GAIN)?;
            let j = if variant.uses_joint_states() {
                Some(b.dense("joint_input", joint_dim, JOINT_WIDTH, HIDDEN_GAIN)?)
            } else {
                None
            };
            (Some(g), j)
        } else {
            (None, None)
        };

        // Width of the flat vector the MLP policy and the value function see.
        let flat_width = match variant {
            Variant::Mlp => TARGET_WIDTH + n_joints * joint_dim,
            Variant::CnnMlpImg => GLOBAL_WIDTH,
            _ => GLOBAL_WIDTH + JOINT_WIDTH * n_joints,
        };

        let policy = match variant.policy_kind() {
            PolicyKind::Mlp => PolicyLayout::Mlp {
                hidden1: b.dense("policy.hidden1", flat_width, HIDDEN, HIDDEN_GAIN)?,
                hidden2: b.dense("policy.hidden2", HIDDEN, HIDDEN, HIDDEN_GAIN)?,
                out: b.dense("policy.out", HIDDEN, n_joints, POLICY_OUT_GAIN)?,
            },
            kind => {
                let gcn1 = b.dense("policy.gcn1", GLOBAL_WIDTH + JOINT_WIDTH, HIDDEN, HIDDEN_GAIN)?;
                let gcn2 = b.dense("policy.gcn2", HIDDEN, HIDDEN, HIDDEN_GAIN)?;
                let heads = match kind {
                    PolicyKind::GraphPooled => {
                        vec![b.dense("policy.out", HIDDEN, n_joints, POLICY_OUT_GAIN)?]
                    }
                    PolicyKind::GraphNodeShared => {
                        vec![b.dense("policy.node_head", HIDDEN, 1, POLICY_OUT_GAIN)?]
                    }
                    _ => (0..n_joints)
                        .map(|i| b.dense(&format!("policy.node_head{i}"), HIDDEN, 1, POLICY_OUT_GAIN))
                        .collect::<Result<_>>()?,
                };
                PolicyLayout::Graph { gcn1, gcn2, heads }
            }
        };

        let value = [
            b.dense("value.hidden1", flat_width, HIDDEN, HIDDEN_GAIN)?,
            b.dense("value.hidden2", HIDDEN, HIDDEN, HIDDEN_GAIN)?,
            b.dense("value.out", HIDDEN, 1, VALUE_OUT_GAIN)?,
        ];
        let log_sigma = store.add("log_sigma", Tensor::scalar(0.0))?;

        Ok(Self {
            variant,
            n_joints,
            joint_dim,
            seed,
            graph,
            layout: Layout {
                encoder,
                global_input,
                joint_input,
                policy,
                value,
                log_sigma,
            },
            params: store,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn graph(&self) -> &RobotGraph {
        &self.graph
    }

    /// Swap in another graph over the same number of nodes, e.g. a
    /// relabelled one.
    pub fn set_graph(&mut self, graph: RobotGraph) -> Result<()> {
        if graph.nodes() != self.n_joints {
            return dim_err(format!("graph has {} nodes for {} joints", graph.nodes(), self.n_joints));
        }
        self.graph = graph;
        Ok(())
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Width of the per-sample global input: encoder features or target.
    pub fn global_input_width(&self) -> usize {
        if self.variant.uses_images() {
            IMAGE_FEATURES
        } else {
            TARGET_WIDTH
        }
    }

    /// Encoder parameters (trained only by the auxiliary loss).
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("encoder.")
    }

    /// Everything optimized by the policy loss: input models, policy,
    /// value function and `log σ`.
    pub fn policy_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("encoder."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn log_sigma(&self) -> f64 {
        self.params.value(self.layout.log_sigma).item()
    }

    fn dense(&self, tape: &mut Tape, x: Var, layer: Dense, act: Activation) -> Result<Var> {
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        Ok(tape.activation(y, act))
    }

    fn encoder_layout(&self) -> Result<&EncoderLayout> {
        match &self.layout.encoder {
            Some(e) => Ok(e),
            None => contract_err(format!("variant {} has no image encoder", self.variant)),
        }
    }

    /// `B × 1 × 100 × 100` images → `B × 128` features (first dense layer,
    /// after ReLU).
    pub fn encode_features(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        self.encode_traced(tape, images, &mut Vec::new())
    }

    /// [`encode_features`](Self::encode_features) that also records the
    /// shape after every stage (conv, pool, flatten, dense).
    pub fn encode_traced(
        &self,
        tape: &mut Tape,
        images: Var,
        trace: &mut Vec<(&'static str, Vec<usize>)>,
    ) -> Result<Var> {
        let enc = self.encoder_layout()?;
        match *tape.value(images).shape() {
            [_, 1, IMAGE_SIZE, IMAGE_SIZE] => {}
            ref s => return dim_err(format!("encoder expects B×1×100×100 images, got {s:?}")),
        }
        let batch = tape.value(images).shape()[0];
        let mut x = images;
        for (conv, names) in [(enc.conv1, ["conv1", "pool1"]), (enc.conv2, ["conv2", "pool2"])] {
            let k = tape.param(&self.params, conv.weight);
            let b = tape.param(&self.params, conv.bias);
            let c = tape.conv2d(x, k, b)?;
            trace.push((names[0], tape.value(c).shape().to_vec()));
            let r = tape.relu(c);
            x = tape.max_pool2x2(r)?;
            trace.push((names[1], tape.value(x).shape().to_vec()));
        }
        let flat = tape.reshape(x, &[batch, FLAT_FEATURES])?;
        trace.push(("flatten", tape.value(flat).shape().to_vec()));
        let features = self.dense(tape, flat, enc.fc1, Activation::Relu)?;
        trace.push(("fc1", tape.value(features).shape().to_vec()));
        Ok(features)
    }

    /// Features plus the auxiliary `B × 2` target-coordinate prediction.
    pub fn encode(&self, tape: &mut Tape, images: Var) -> Result<(Var, Var)> {
        let features = self.encode_features(tape, images)?;
        let prediction = self.predict_target(tape, features)?;
        Ok((features, prediction))
    }

    /// Prediction head: `tanh(out(relu(fc(features))))`.
    pub fn predict_target(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let enc = self.encoder_layout()?;
        let h = self.dense(tape, features, enc.head_fc, Activation::Relu)?;
        self.dense(tape, h, enc.head_out, Activation::Tanh)
    }

    /// Inference-only feature extraction for a batch of rendered frames.
    pub fn image_features(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let batch = images.len();
        if batch == 0 {
            return contract_err("no images to encode");
        }
        let mut tape = Tape::new();
        let x = tape.constant(images_tensor(images)?);
        let f = self.encode_features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }

    /// Policy and value heads for a batch.
    ///
    /// `global` is `B × 128` encoder features for image variants or `B × 2`
    /// normalized targets otherwise; `joints` is `(B·n) × d` raw per-joint
    /// features (ignored by the image-only variant).
    pub fn forward(&self, tape: &mut Tape, global: Var, joints: Var) -> Result<PolicyOutput> {
        let (batch, gw) = tape.value(global).dims2()?;
        if gw != self.global_input_width() {
            return dim_err(format!(
                "{} expects global input width {}, got {gw}",
                self.variant,
                self.global_input_width()
            ));
        }
        let (jrows, jd) = tape.value(joints).dims2()?;
        if jrows != batch * self.n_joints || jd != self.joint_dim {
            return dim_err(format!(
                "joint input {jrows}×{jd} does not match {batch} samples of {}×{}",
                self.n_joints, self.joint_dim
            ));
        }
        let n = self.n_joints;

        // Input models (or their raw stand-ins).
        let (u, q) = match self.variant {
            Variant::Mlp => (global, joints),
            Variant::CnnGnNoInputModels => {
                let pad = tape.constant(Tensor::zeros(&[batch * n, JOINT_WIDTH - jd]));
                (global, tape.concat_cols(&[joints, pad])?)
            }
            _ => {
                let g = self.layout.global_input.expect("input models");
                let u = self.dense(tape, global, g, Activation::Tanh)?;
                let q = match self.layout.joint_input {
                    Some(j) => self.dense(tape, joints, j, Activation::Tanh)?,
                    None => joints,
                };
                (u, q)
            }
        };

        let flat = match self.variant {
            Variant::CnnMlpImg => u,
            _ => {
                let width = tape.value(q).shape()[1] * n;
                let q_flat = tape.reshape(q, &[batch, width])?;
                tape.concat_cols(&[u, q_flat])?
            }
        };

        let mean = match &self.layout.policy {
            PolicyLayout::Mlp {
                hidden1,
                hidden2,
                out,
            } => {
                let h = self.dense(tape, flat, *hidden1, Activation::Relu)?;
                let h = self.dense(tape, h, *hidden2, Activation::Relu)?;
                self.dense(tape, h, *out, Activation::Identity)?
            }
            PolicyLayout::Graph { gcn1, gcn2, heads } => {
                let u_nodes = tape.repeat_rows(u, n)?;
                let v = tape.concat_cols(&[u_nodes, q])?;
                let h = self.gcn(tape, v, *gcn1)?;
                let h = self.gcn(tape, h, *gcn2)?;
                match self.variant.policy_kind() {
                    PolicyKind::GraphPooled => {
                        let g = mean_pool(tape, h, &self.graph)?;
                        self.dense(tape, g, heads[0], Activation::Identity)?
                    }
                    PolicyKind::GraphNodeShared => {
                        let per_node = self.dense(tape, h, heads[0], Activation::Identity)?;
                        tape.reshape(per_node, &[batch, n])?
                    }
                    _ => {
                        let cols = heads
                            .iter()
                            .enumerate()
                            .map(|(i, head)| {
                                let rows = tape.select_node(h, n, i)?;
                                self.dense(tape, rows, *head, Activation::Identity)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        tape.concat_cols(&cols)?
                    }
                }
            }
        };

        let [v1, v2, v3] = self.layout.value;
        let hv = self.dense(tape, flat, v1, Activation::Relu)?;
        let hv = self.dense(tape, hv, v2, Activation::Relu)?;
        let value = self.dense(tape, hv, v3, Activation::Identity)?;
        let log_sigma = tape.param(&self.params, self.layout.log_sigma);
        Ok(PolicyOutput {
            mean,
            value,
            log_sigma,
        })
    }

    fn gcn(&self, tape: &mut Tape, v: Var, layer: Dense) -> Result<Var> {
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        gcn_layer(tape, v, &self.graph, w, b, Activation::Relu)
    }
}

/// Stack frames into a `B × 1 × 100 × 100` tensor.
pub fn images_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        data.extend(img.to_f64());
    }
    Tensor::new(&[images.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Draw `a = μ + σ·ε` (or return `μ` when `deterministic`) together with its
/// log density under `N(μ, σ²)`.
pub fn sample_action<R: Rng>(
    mean: &[f64],
    log_sigma: f64,
    deterministic: bool,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let action: Vec<f64> = if deterministic {
        mean.to_vec()
    } else {
        let sigma = log_sigma.exp();
        mean.iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let lp = gaussian_log_density(&action, mean, log_sigma);
    (action, lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(agent: &Agent, batch: usize, tape: &mut Tape) -> (Var, Var) {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let gw = agent.global_input_width();
        let g: Vec<f64> = (0..batch * gw).map(|_| r.gen_range(-1.0..1.0)).collect();
        let jn = batch * agent.n_joints() * agent.joint_dim();
        let j: Vec<f64> = (0..jn).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = tape.constant(Tensor::new(&[batch, gw], g).unwrap());
        let j = tape
            .constant(Tensor::new(&[batch * agent.n_joints(), agent.joint_dim()], j).unwrap());
        (g, j)
    }

    #[test]
    fn parameter_shapes_per_variant() {
        let a = Agent::new(Variant::CnnGn, 2, 2, 0).unwrap();
        let shape = |name: &str| a.params.value(a.params.id(name).unwrap()).shape().to_vec();
        assert_eq!(shape("encoder.conv1.weight"), vec![6, 1, 5, 5]);
        assert_eq!(shape("encoder.conv2.weight"), vec![16, 6, 5, 5]);
        assert_eq!(shape("encoder.fc1.weight"), vec![7744, 128]);
        assert_eq!(shape("encoder.head_fc.weight"), vec![128, 84]);
        assert_eq!(shape("encoder.head_out.weight"), vec![84, 2]);
        assert_eq!(shape("global_input.weight"), vec![128, 128]);
        assert_eq!(shape("joint_input.weight"), vec![2, 32]);
        assert_eq!(shape("policy.gcn1.weight"), vec![160, 256]);
        assert_eq!(shape("policy.gcn2.weight"), vec![256, 256]);
        assert_eq!(shape("policy.out.weight"), vec![256, 2]);
        assert_eq!(shape("value.hidden1.weight"), vec![192, 256]);
        assert_eq!(shape("value.out.weight"), vec![256, 1]);

        let gn = Agent::new(Variant::Gn, 6, 4, 0).unwrap();
        assert!(gn.params.id("encoder.conv1.weight").is_none());
        assert_eq!(gn.params.value(gn.params.id("global_input.weight").unwrap()).shape(), &[2, 128]);
        assert_eq!(gn.params.value(gn.params.id("value.hidden1.weight").unwrap()).shape(), &[320, 256]);

        let mlp = Agent::new(Variant::Mlp, 2, 2, 0).unwrap();
        assert!(mlp.params.id("global_input.weight").is_none());
        assert_eq!(mlp.params.value(mlp.params.id("policy.hidden1.weight").unwrap()).shape(), &[6, 256]);

        let ded = Agent::new(Variant::GnNodeDedicated, 6, 4, 0).unwrap();
        assert!(ded.params.id("policy.node_head5.weight").is_some());
    }

    #[test]
    fn zero_parameters_give_zero_means() {
        for variant in Variant::ALL {
            let mut agent = Agent::new(variant, 3, 2, 1).unwrap();
            for id in agent.params.ids().collect::<Vec<_>>() {
                agent.params.get_mut(id).value.data_mut().fill(0.0);
            }
            let mut tape = Tape::new();
            let (g, j) = inputs(&agent, 4, &mut tape);
            let out = agent.forward(&mut tape, g, j).unwrap();
            assert_eq!(tape.value(out.mean).shape(), &[4, 3], "{variant}");
            assert!(tape.value(out.mean).data().iter().all(|&m| m == 0.0), "{variant}");
            assert!(tape.value(out.value).data().iter().all(|&v| v == 0.0), "{variant}");
        }
    }

    #[test]
    fn wrong_input_widths_are_rejected() {
        let agent = Agent::new(Variant::Gn, 2, 2, 0).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::zeros(&[1, 128]));
        let j = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(agent.forward(&mut tape, g, j), Err(crate::Error::Dimension(_))));
        let g = tape.constant(Tensor::zeros(&[1, 2]));
        let j = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(agent.forward(&mut tape, g, j).is_err());
    }

    #[test]
    fn numeric_variant_has_no_encoder() {
        let agent = Agent::new(Variant::Mlp, 2, 2, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 100, 100]));
        assert!(matches!(agent.encode(&mut tape, x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn deterministic_sampling_returns_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (a, lp) = sample_action(&[0.3, -0.2], 0.4, true, &mut r);
        assert_eq!(a, vec![0.3, -0.2]);
        assert_eq!(lp, gaussian_log_density(&a, &[0.3, -0.2], 0.4));
        let (tiny, _) = sample_action(&[0.3, -0.2], -20.0, false, &mut r);
        assert!((tiny[0] - 0.3).abs() < 1e-6 && (tiny[1] + 0.2).abs() < 1e-6);
    }
}
