//! The weight-sharing supernetwork and the joint weight/architecture search.
//!
//! Every admissible candidate of every superblock owns its own weights. A
//! training forward pass draws one Gumbel-Softmax sample per superblock and
//! feeds the sample-weighted sum of all active candidate outputs to the next
//! superblock. The loss is `L = L_P + alpha * L_E`, where `L_P` is pixel-wise
//! cross-entropy and `L_E` the expected cost under the plain softmax of the
//! logits, divided by its value at initialization.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost_model::{expected_cost, CostMetric, CostTable, ASPP_DILATIONS};
use crate::error::{Error, Result};
use crate::gumbel::{self, derive_rng, AnnealShape, TemperatureSchedule, ThetaMatrix};
use crate::search_space::{export_search_space, ArchPath, DecoderKind, MacroArch, CANDIDATES, NUM_CANDIDATES, SKIP_INDEX};
use crate::tensor::{BatchStats, Graph, NodeId, Scalar, Sgd, Tensor};
use crate::toy::ToyDataset;

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

const INIT_STREAM: u64 = 0x1417;
const GUMBEL_STREAM: u64 = 0x6a3b;
const SHUFFLE_STREAM: u64 = 0x5f0e;

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running averages (inference).
    Running,
}

/// Running mean and unbiased variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBnSlot {
    conv: ConvSlot,
    scale: usize,
    shift: usize,
    stats: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
struct BlockSlots {
    expand: Option<ConvBnSlot>,
    depthwise: ConvBnSlot,
    project: ConvBnSlot,
    residual: bool,
}

#[derive(Clone, Copy, Debug)]
struct ClassifierSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum DecoderSlots {
    LrAspp { cbr: ConvBnSlot, gate: ConvSlot },
    DepthwiseAspp { pointwise: ConvBnSlot, atrous: Vec<ConvBnSlot>, pool: ConvBnSlot, project: ConvBnSlot },
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvBnSlot,
    /// `[superblock][candidate]`; `None` for skip and inadmissible entries.
    blocks: Vec<Vec<Option<BlockSlots>>>,
    head: Option<ConvBnSlot>,
    decoder: DecoderSlots,
    classifier: ClassifierSlot,
    low_classifier: ClassifierSlot,
}

/// Allocates parameter tensors while the layout is being built.
struct Builder<T, R> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    rng: R,
}

impl<T: Scalar, R: Rng> Builder<T, R> {
    fn tensor(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    /// He-normal weights for a ReLU network.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize, groups: usize) -> ConvSlot {
        let fan_in = (c_in / groups) * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn([c_out, c_in / groups, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::cast_from(z * std)
        });
        ConvSlot {
            weight: self.tensor(format!("{name}.weight"), w),
            stride,
            dilation,
            groups,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize, groups: usize, relu: bool) -> ConvBnSlot {
        let conv = self.conv(name, c_in, c_out, k, stride, dilation, groups);
        let scale = self.tensor(format!("{name}.bn.scale"), Tensor::full([1, 1, 1, c_out], T::one()));
        let shift = self.tensor(format!("{name}.bn.shift"), Tensor::zeros([1, 1, 1, c_out]));
        self.stats.push(RunningStats {
            mean: vec![T::zero(); c_out],
            var: vec![T::one(); c_out],
        });
        self.stat_names.push(format!("{name}.bn"));
        ConvBnSlot {
            conv,
            scale,
            shift,
            stats: self.stats.len() - 1,
            relu,
        }
    }

    fn classifier(&mut self, name: &str, c_in: usize, classes: usize) -> ClassifierSlot {
        let conv = self.conv(name, c_in, classes, 1, 1, 1, 1);
        let bias = self.tensor(format!("{name}.bias"), Tensor::zeros([1, 1, 1, classes]));
        ClassifierSlot { weight: conv.weight, bias }
    }
}

/// The supernetwork: macro-architecture, shared weights and logits.
#[derive(Clone, Debug)]
pub struct Supernet<T> {
    arch: MacroArch,
    pub theta: ThetaMatrix,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    layout: Layout,
}

impl<T: Scalar> Supernet<T> {
    /// Allocates weights for every admissible candidate with seeded
    /// He-normal initialization and zero logits.
    pub fn new(arch: &MacroArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            stats: Vec::new(),
            stat_names: Vec::new(),
            rng: derive_rng(seed, INIT_STREAM, 0),
        };
        let s = arch.stem;
        let stem = b.conv_bn("stem", s.c_in, s.c_out, s.kernel, s.stride, 1, 1, true);
        let mut blocks = Vec::with_capacity(arch.num_superblocks());
        for sb in &arch.superblocks {
            let mut row = Vec::with_capacity(NUM_CANDIDATES);
            for (j, cand) in CANDIDATES.iter().enumerate() {
                if cand.is_skip || !sb.is_admissible(j) {
                    row.push(None);
                    continue;
                }
                let name = format!("sb{:02}.{}", sb.index, cand.mnemonic());
                let hidden = cand.hidden_channels(sb.c_in);
                let g = cand.groups;
                let expand = (cand.expansion > 1).then(|| b.conv_bn(&format!("{name}.expand"), sb.c_in, hidden, 1, 1, 1, g, true));
                let depthwise = b.conv_bn(&format!("{name}.depthwise"), hidden, hidden, cand.kernel, sb.stride, cand.dilation, hidden, true);
                let project = b.conv_bn(&format!("{name}.project"), hidden, sb.c_out, 1, 1, 1, g, false);
                row.push(Some(BlockSlots {
                    expand,
                    depthwise,
                    project,
                    residual: sb.has_residual(),
                }));
            }
            blocks.push(row);
        }
        let mut c = arch.superblocks.last().map_or(s.c_out, |sb| sb.c_out);
        let head = arch.head.map(|h| {
            let slot = b.conv_bn("head", h.c_in, h.c_out, 1, 1, 1, 1, true);
            c = h.c_out;
            slot
        });
        let d = arch.decoder.internal_channels;
        let decoder = match arch.decoder.kind {
            DecoderKind::LrAspp => DecoderSlots::LrAspp {
                cbr: b.conv_bn("decoder.cbr", c, d, 1, 1, 1, 1, true),
                gate: b.conv("decoder.gate", c, d, 1, 1, 1, 1),
            },
            DecoderKind::DepthwiseAspp => DecoderSlots::DepthwiseAspp {
                pointwise: b.conv_bn("decoder.pointwise", c, d, 1, 1, 1, 1, true),
                atrous: ASPP_DILATIONS
                    .iter()
                    .map(|&r| b.conv_bn(&format!("decoder.atrous{r}"), c, c, 3, 1, r, c, true))
                    .collect(),
                pool: b.conv_bn("decoder.pool", c, d, 1, 1, 1, 1, true),
                project: b.conv_bn("decoder.project", 2 * d + ASPP_DILATIONS.len() * c, d, 1, 1, 1, 1, true),
            },
        };
        let classes = arch.decoder.num_classes;
        let classifier = b.classifier("decoder.classifier", d, classes);
        let tap_c = arch.superblocks[arch.low_level_tap].c_out;
        let low_classifier = b.classifier("decoder.low_classifier", tap_c, classes);
        Ok(Supernet {
            arch: arch.clone(),
            theta: ThetaMatrix::for_arch(arch),
            params: b.params,
            names: b.names,
            stats: b.stats,
            stat_names: b.stat_names,
            layout: Layout {
                stem,
                blocks,
                head,
                decoder,
                classifier,
                low_classifier,
            },
        })
    }

    pub fn arch(&self) -> &MacroArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    /// Indices of the parameter tensors owned by candidate `j` of superblock
    /// `i` (empty for skip).
    pub fn candidate_params(&self, i: usize, j: usize) -> Vec<usize> {
        let Some(Some(block)) = self.layout.blocks.get(i).and_then(|r| r.get(j)) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for slot in block.expand.iter().chain([&block.depthwise, &block.project]) {
            out.extend([slot.conv.weight, slot.scale, slot.shift]);
        }
        out
    }

    /// Gumbel-Softmax mixture of the active candidates of superblock `i`,
    /// recorded on `g`. `bound` supplies graph nodes for chosen parameter
    /// indices; all other weights enter as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn superblock_graph(&self, g: &mut Graph<T>, i: usize, input: NodeId, logits: NodeId, noise: &[T], t: T, bound: &[(usize, NodeId)], norm: NormMode) -> Result<NodeId> {
        let mut pass = Pass::new(self, g, norm, false);
        for &(p, id) in bound {
            pass.bind(p, id)?;
        }
        pass.superblock_soft(input, i, logits, noise, t)
    }

    /// Value-level superblock forward with a fresh Gumbel sample.
    pub fn superblock_forward<R: Rng + ?Sized>(&self, input: &Tensor<T>, i: usize, t: f64, rng: &mut R, norm: NormMode) -> Result<Tensor<T>> {
        self.check_superblock(i)?;
        let noise: Vec<T> = gumbel::gumbel_noise(NUM_CANDIDATES, rng).into_iter().map(T::cast_from).collect();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let logits = g.constant(theta_row(&self.theta, i));
        let out = self.superblock_graph(&mut g, i, x, logits, &noise, T::cast_from(t), &[], norm)?;
        Ok(g.value(out).clone())
    }

    /// Output of one candidate block of superblock `i` on its own.
    pub fn block_forward(&self, input: &Tensor<T>, i: usize, j: usize, norm: NormMode) -> Result<Tensor<T>> {
        self.check_superblock(i)?;
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut pass = Pass::new(self, &mut g, norm, false);
        let out = pass.block(x, i, j)?;
        Ok(g.value(out).clone())
    }

    fn check_superblock(&self, i: usize) -> Result<()> {
        if i >= self.arch.num_superblocks() {
            return Err(Error::InvalidArgument(format!(
                "superblock {i} out of range (0..{})",
                self.arch.num_superblocks()
            )));
        }
        Ok(())
    }

    /// Full-resolution logits of a discrete path with running statistics.
    pub fn predict_path(&self, images: &Tensor<T>, path: &ArchPath) -> Result<Tensor<T>> {
        self.arch.validate_path(path)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut pass = Pass::new(self, &mut g, NormMode::Running, false);
        let out = pass.network(x, &Selection::Hard(path))?;
        Ok(g.value(out).clone())
    }

    /// Full-resolution logits of a Gumbel-Softmax mixture with running
    /// statistics.
    pub fn predict_soft<R: Rng + ?Sized>(&self, images: &Tensor<T>, t: f64, rng: &mut R) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let n = self.arch.num_superblocks();
        let noise: Vec<Vec<T>> = (0..n)
            .map(|_| gumbel::gumbel_noise(NUM_CANDIDATES, rng).into_iter().map(T::cast_from).collect())
            .collect();
        let logits: Vec<NodeId> = (0..n).map(|i| g.constant(theta_row(&self.theta, i))).collect();
        let mut pass = Pass::new(self, &mut g, NormMode::Running, false);
        let sel = Selection::Soft {
            logits: &logits,
            noise: &noise,
            t: T::cast_from(t),
        };
        let out = pass.network(x, &sel)?;
        Ok(g.value(out).clone())
    }

    /// Writes every parameter and running statistic in a little-endian
    /// container: magic, count, then (name, shape, f32 data) records.
    pub fn write_weights<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        let records = self.records();
        out.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, shape, data) in records {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            for d in shape {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn records(&self) -> Vec<(String, [usize; 4], Vec<T>)> {
        let mut out: Vec<_> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (n.clone(), p.shape(), p.data().to_vec()))
            .collect();
        for (n, s) in self.stat_names.iter().zip(&self.stats) {
            out.push((format!("{n}.mean"), [1, 1, 1, s.mean.len()], s.mean.clone()));
            out.push((format!("{n}.var"), [1, 1, 1, s.var.len()], s.var.clone()));
        }
        out
    }

    /// Restores weights written by [`Supernet::write_weights`]; names and
    /// shapes must match this network exactly.
    pub fn read_weights<R: Read>(&mut self, mut input: R) -> Result<()> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Container("not a weights archive (bad magic)".into()));
        }
        let count = read_u32(&mut input)? as usize;
        let expected = self.params.len() + 2 * self.stats.len();
        if count != expected {
            return Err(Error::Container(format!("archive holds {count} tensors, network needs {expected}")));
        }
        let targets = self.records();
        let mut loaded = Vec::with_capacity(count);
        for (name, shape, _) in &targets {
            let len = read_u32(&mut input)? as usize;
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            let got = String::from_utf8(buf).map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut input)? as usize;
            }
            if &got != name || dims != *shape {
                return Err(Error::Container(format!(
                    "expected tensor {name} {shape:?}, found {got} {dims:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; 4 * n];
            input.read_exact(&mut raw)?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::cast_from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            loaded.push(data);
        }
        let mut it = loaded.into_iter();
        for p in &mut self.params {
            p.data_mut().copy_from_slice(&it.next().expect("count checked"));
        }
        for s in &mut self.stats {
            s.mean = it.next().expect("count checked");
            s.var = it.next().expect("count checked");
        }
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 8] = b"HWNASWT1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn theta_row<T: Scalar>(theta: &ThetaMatrix, i: usize) -> Tensor<T> {
    Tensor::vector(theta.row(i).iter().map(|&v| T::cast_from(v)).collect())
}

enum Selection<'a, T> {
    Soft { logits: &'a [NodeId], noise: &'a [Vec<T>], t: T },
    Hard(&'a ArchPath),
}

/// One forward pass over a [`Supernet`].
struct Pass<'n, 'g, T> {
    net: &'n Supernet<T>,
    g: &'g mut Graph<T>,
    nodes: Vec<Option<NodeId>>,
    norm: NormMode,
    /// Register unbound weights as differentiable leaves.
    trainable: bool,
    batch_stats: Vec<(usize, BatchStats<T>)>,
    evaluations: u64,
}

impl<'n, 'g, T: Scalar> Pass<'n, 'g, T> {
    fn new(net: &'n Supernet<T>, g: &'g mut Graph<T>, norm: NormMode, trainable: bool) -> Self {
        Pass {
            net,
            g,
            nodes: vec![None; net.params.len()],
            norm,
            trainable,
            batch_stats: Vec::new(),
            evaluations: 0,
        }
    }

    fn bind(&mut self, param: usize, id: NodeId) -> Result<()> {
        let want = self.net.params.get(param).map(Tensor::shape);
        if want != Some(self.g.shape(id)) {
            return Err(Error::Shape(format!("binding for parameter {param} has the wrong shape")));
        }
        self.nodes[param] = Some(id);
        Ok(())
    }

    fn p(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let value = self.net.params[idx].clone();
        let id = if self.trainable { self.g.param(value) } else { self.g.constant(value) };
        self.nodes[idx] = Some(id);
        id
    }

    fn conv(&mut self, x: NodeId, slot: ConvSlot) -> Result<NodeId> {
        let w = self.p(slot.weight);
        self.g.conv2d_same(x, w, slot.stride, slot.dilation, slot.groups)
    }

    fn conv_bn(&mut self, x: NodeId, slot: &ConvBnSlot) -> Result<NodeId> {
        let y = self.conv(x, slot.conv)?;
        let scale = self.p(slot.scale);
        let shift = self.p(slot.shift);
        let y = match self.norm {
            NormMode::Batch => {
                let (y, st) = self.g.batchnorm_train(y, scale, shift)?;
                self.batch_stats.push((slot.stats, st));
                y
            }
            NormMode::Running => {
                let rs = &self.net.stats[slot.stats];
                self.g.batchnorm_eval(y, scale, shift, &rs.mean, &rs.var)?
            }
        };
        Ok(if slot.relu { self.g.relu(y) } else { y })
    }

    fn classify(&mut self, x: NodeId, slot: ClassifierSlot) -> Result<NodeId> {
        let w = self.p(slot.weight);
        let y = self.g.conv2d(x, w, 1, 1, 1, 0)?;
        let b = self.p(slot.bias);
        self.g.bias_add(y, b)
    }

    fn block(&mut self, x: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let sb = &self.net.arch.superblocks[i];
        if self.g.shape(x)[1] != sb.c_in {
            return Err(Error::Shape(format!(
                "superblock {i} expects {} input channels, got {}",
                sb.c_in,
                self.g.shape(x)[1]
            )));
        }
        if j == SKIP_INDEX && sb.is_admissible(j) {
            return self.g.channel_pad(x, sb.c_out);
        }
        let block = self.net.layout.blocks[i]
            .get(j)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidPath {
                index: i,
                reason: format!("candidate {j} is not admissible"),
            })?;
        self.evaluations += 1;
        let mut h = x;
        if let Some(e) = &block.expand {
            h = self.conv_bn(h, e)?;
        }
        h = self.conv_bn(h, &block.depthwise)?;
        h = self.conv_bn(h, &block.project)?;
        if block.residual {
            h = self.g.add(h, x)?;
        }
        Ok(h)
    }

    fn superblock_soft(&mut self, x: NodeId, i: usize, logits: NodeId, noise: &[T], t: T) -> Result<NodeId> {
        let mask = self.net.theta.mask(i);
        let y = self.g.masked_softmax(logits, noise, mask, t)?;
        let mut outs = Vec::new();
        for j in 0..NUM_CANDIDATES {
            if mask[j] {
                outs.push((j, self.block(x, i, j)?));
            }
        }
        self.g.mix(&outs, y)
    }

    fn network(&mut self, images: NodeId, sel: &Selection<'_, T>) -> Result<NodeId> {
        let [_, _, h, w] = self.g.shape(images);
        let div = self.net.arch.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not a multiple of the output stride {div}")));
        }
        let layout = &self.net.layout;
        let mut x = self.conv_bn(images, &layout.stem)?;
        let mut tap = None;
        for i in 0..self.net.arch.num_superblocks() {
            x = match sel {
                Selection::Soft { logits, noise, t } => self.superblock_soft(x, i, logits[i], &noise[i], *t)?,
                Selection::Hard(path) => self.block(x, i, path.choices[i])?,
            };
            if i == self.net.arch.low_level_tap {
                tap = Some(x);
            }
        }
        let tap = tap.expect("tap index validated with the architecture");
        if let Some(head) = &layout.head {
            x = self.conv_bn(x, head)?;
        }
        let features = match &layout.decoder {
            DecoderSlots::LrAspp { cbr, gate } => {
                let a = self.conv_bn(x, cbr)?;
                let pooled = self.g.global_avg_pool(x);
                let gz = self.conv(pooled, *gate)?;
                let gs = self.g.sigmoid(gz);
                self.g.channel_mul(a, gs)?
            }
            DecoderSlots::DepthwiseAspp { pointwise, atrous, pool, project } => {
                let [_, _, fh, fw] = self.g.shape(x);
                let mut parts = vec![self.conv_bn(x, pointwise)?];
                for slot in atrous {
                    parts.push(self.conv_bn(x, slot)?);
                }
                let pooled = self.g.global_avg_pool(x);
                let pb = self.conv_bn(pooled, pool)?;
                parts.push(self.g.upsample(pb, fh, fw)?);
                let cat = self.g.concat(&parts)?;
                self.conv_bn(cat, project)?
            }
        };
        let [_, _, th, tw] = self.g.shape(tap);
        let [_, _, fh, fw] = self.g.shape(features);
        let features = if (fh, fw) == (th, tw) { features } else { self.g.upsample(features, th, tw)? };
        let high = self.classify(features, layout.classifier)?;
        let low = self.classify(tap, layout.low_classifier)?;
        let logits = self.g.add(high, low)?;
        self.g.upsample(logits, h, w)
    }
}

/// JSON-configurable search hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Weight of the resource loss.
    pub alpha: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_w")]
    pub lr_w: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::lr_theta")]
    pub lr_theta: f64,
    /// Epochs at the start that update weights only.
    pub warmup_epochs: usize,
    #[serde(default = "defaults::prune_threshold")]
    pub prune_threshold: f64,
    #[serde(default = "defaults::enabled")]
    pub prune: bool,
    /// Keep the weights fixed and train only the logits.
    #[serde(default)]
    pub freeze_weights: bool,
    pub seed: u64,
    #[serde(default = "defaults::t_start")]
    pub temperature_start: f64,
    #[serde(default = "defaults::t_end")]
    pub temperature_end: f64,
    #[serde(default)]
    pub anneal: AnnealShape,
}

mod defaults {
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr_w() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn lr_theta() -> f64 {
        0.01
    }
    pub fn prune_threshold() -> f64 {
        0.005
    }
    pub fn enabled() -> bool {
        true
    }
    pub fn t_start() -> f64 {
        5.0
    }
    pub fn t_end() -> f64 {
        1.0
    }
}

impl SearchConfig {
    /// Defaults with a warmup of 20% of the epochs.
    pub fn new(alpha: f64, epochs: usize, steps_per_epoch: usize, seed: u64) -> Self {
        SearchConfig {
            alpha,
            epochs,
            steps_per_epoch,
            batch_size: defaults::batch_size(),
            lr_w: defaults::lr_w(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            lr_theta: defaults::lr_theta(),
            warmup_epochs: epochs / 5,
            prune_threshold: defaults::prune_threshold(),
            prune: true,
            freeze_weights: false,
            seed,
            temperature_start: defaults::t_start(),
            temperature_end: defaults::t_end(),
            anneal: AnnealShape::Linear,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SearchConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite nonnegative number, got {}", self.alpha));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        for (name, v) in [("lr_w", self.lr_w), ("lr_theta", self.lr_theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return bad(format!("prune_threshold must be in [0, 1), got {}", self.prune_threshold));
        }
        self.schedule().validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Per-step schedule reaching the end temperature on the last step.
    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.temperature_start,
            end: self.temperature_end,
            total_steps: self.total_steps().saturating_sub(1),
            shape: self.anneal,
        }
    }
}

/// Loss components of one step or one epoch average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// `task + alpha * resource`.
    pub total: f64,
    pub task: f64,
    /// Expected cost divided by its initial value.
    pub resource: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossRecord,
    pub temperature: f64,
    pub candidate_evaluations: u64,
}

/// Removal of one candidate from the supernetwork.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    /// Number of training steps completed at removal.
    pub step: usize,
    pub superblock: usize,
    pub candidate: usize,
    pub mnemonic: String,
    pub probability: f64,
}

/// Everything a search produces except the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub space: serde_json::Value,
    pub metric: CostMetric,
    pub cost_table: Vec<Vec<f64>>,
    /// Expected cost of the initial distribution; divides `L_E`.
    pub cost_normalizer: f64,
    pub theta: ThetaMatrix,
    pub probabilities: Vec<Vec<f64>>,
    pub argmax_path: ArchPath,
    pub final_expected_cost: f64,
    pub trajectory: Vec<EpochRecord>,
    pub prune_events: Vec<PruneEvent>,
    pub candidate_evaluations: u64,
}

impl SearchResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn cost_table(&self) -> Result<CostTable> {
        CostTable::new(self.metric, self.cost_table.clone(), None)
    }
}

/// Gradient of `sum_ij p_ij c_ij / norm` with respect to the logits, where
/// `p` is the masked softmax of each row.
pub fn resource_gradient(theta: &ThetaMatrix, table: &CostTable, norm: f64) -> Vec<Vec<f64>> {
    (0..theta.rows())
        .map(|i| {
            let p = theta.probs_row(i);
            let mean: f64 = p.iter().enumerate().map(|(j, pj)| pj * table.get(i, j)).sum();
            p.iter()
                .enumerate()
                .map(|(j, pj)| if theta.is_active(i, j) { pj * (table.get(i, j) - mean) / norm } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Adam on the architecture logits; inactive entries keep their state.
#[derive(Clone, Debug)]
struct ThetaAdam {
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl ThetaAdam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(rows: usize, lr: f64) -> Self {
        ThetaAdam {
            lr,
            m: vec![vec![0.0; NUM_CANDIDATES]; rows],
            v: vec![vec![0.0; NUM_CANDIDATES]; rows],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut ThetaMatrix, grad: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, row) in grad.iter().enumerate() {
            for (j, &gij) in row.iter().enumerate() {
                if !theta.is_active(i, j) {
                    continue;
                }
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gij;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gij * gij;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                theta.set_logit(i, j, theta.row(i)[j] - update);
            }
        }
    }
}

/// Mutable search state: network, optimizers and counters.
pub struct Searcher<T> {
    pub net: Supernet<T>,
    config: SearchConfig,
    table: CostTable,
    cost_normalizer: f64,
    sgd: Sgd<T>,
    adam: ThetaAdam,
    steps_done: usize,
    evaluations: u64,
}

impl<T: Scalar> Searcher<T> {
    pub fn new(net: Supernet<T>, table: CostTable, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        table.check_arch(net.arch())?;
        let e0 = expected_cost(&net.theta, &table)?;
        let cost_normalizer = if e0 > 0.0 { e0 } else { 1.0 };
        let sgd = Sgd::new(
            net.params.iter(),
            T::cast_from(config.lr_w),
            T::cast_from(config.momentum),
            T::cast_from(config.weight_decay),
        );
        let adam = ThetaAdam::new(net.theta.rows(), config.lr_theta);
        Ok(Searcher {
            net,
            config,
            table,
            cost_normalizer,
            sgd,
            adam,
            steps_done: 0,
            evaluations: 0,
        })
    }

    pub fn cost_normalizer(&self) -> f64 {
        self.cost_normalizer
    }

    /// Candidate-block forward evaluations so far (skips excluded).
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Normalized expected cost of the current distribution.
    pub fn resource_loss(&self) -> Result<f64> {
        Ok(expected_cost(&self.net.theta, &self.table)? / self.cost_normalizer)
    }

    /// One forward/backward pass followed by simultaneous updates of the
    /// weights and, when `update_theta`, the logits.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], step: usize, temperature: f64, update_theta: bool) -> Result<LossRecord> {
        let n = self.net.arch.num_superblocks();
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let noise: Vec<Vec<T>> = (0..n)
            .map(|i| {
                let mut rng = derive_rng(self.config.seed, GUMBEL_STREAM ^ step as u64, i as u64);
                gumbel::gumbel_noise(NUM_CANDIDATES, &mut rng).into_iter().map(T::cast_from).collect()
            })
            .collect();
        let logits: Vec<NodeId> = (0..n).map(|i| g.param(theta_row(&self.net.theta, i))).collect();
        let mut pass = Pass::new(&self.net, &mut g, NormMode::Batch, !self.config.freeze_weights);
        let sel = Selection::Soft {
            logits: &logits,
            noise: &noise,
            t: T::cast_from(temperature),
        };
        let out = pass.network(x, &sel)?;
        let nodes = std::mem::take(&mut pass.nodes);
        let batch_stats = std::mem::take(&mut pass.batch_stats);
        self.evaluations += pass.evaluations;
        let ce = g.cross_entropy_2d(out, labels, None)?;
        let task = g.value(ce).item().as_f64();
        let resource = self.resource_loss()?;
        let total = task + self.config.alpha * resource;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                total,
                task,
                resource,
            });
        }
        let mut grads = g.backward(ce)?;
        if !self.config.freeze_weights {
            let wgrads: Vec<Option<Vec<T>>> = nodes.iter().map(|id| id.and_then(|id| grads.take(id))).collect();
            self.sgd.step(&mut self.net.params, &wgrads)?;
        }
        let m = T::cast_from(BN_MOMENTUM);
        for (idx, st) in batch_stats {
            let rs = &mut self.net.stats[idx];
            for (r, b) in rs.mean.iter_mut().zip(&st.mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in rs.var.iter_mut().zip(&st.var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        if update_theta {
            let mut grad = resource_gradient(&self.net.theta, &self.table, self.cost_normalizer);
            for (i, id) in logits.iter().enumerate() {
                let a = self.config.alpha;
                let task_grad = grads.get(*id);
                for (j, gij) in grad[i].iter_mut().enumerate() {
                    let tg = task_grad.map_or(0.0, |v| v[j].as_f64());
                    *gij = tg + a * *gij;
                }
            }
            self.adam.step(&mut self.net.theta, &grad);
        }
        self.steps_done += 1;
        Ok(LossRecord { total, task, resource })
    }

    /// Deactivates every candidate whose probability is below `threshold`,
    /// never emptying a superblock.
    pub fn prune(&mut self, threshold: f64, epoch: usize) -> Vec<PruneEvent> {
        prune(&mut self.net.theta, threshold, epoch, self.steps_done)
    }
}

/// Deactivates candidates with probability below `threshold`; each row
/// keeps at least its most probable candidate.
pub fn prune(theta: &mut ThetaMatrix, threshold: f64, epoch: usize, step: usize) -> Vec<PruneEvent> {
    let mut events = Vec::new();
    for i in 0..theta.rows() {
        let p = theta.probs_row(i);
        let mut order: Vec<usize> = (0..NUM_CANDIDATES).filter(|&j| theta.is_active(i, j) && p[j] < threshold).collect();
        // Lowest probability first so a refusal keeps the strongest one.
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
        for j in order {
            if theta.deactivate(i, j) {
                events.push(PruneEvent {
                    epoch,
                    step,
                    superblock: i,
                    candidate: j,
                    mnemonic: CANDIDATES[j].mnemonic(),
                    probability: p[j],
                });
            } else {
                log::warn!("superblock {i}: refusing to prune its last candidate {j} (p = {:.4})", p[j]);
            }
        }
    }
    events
}

/// Runs warmup, joint training and per-epoch pruning on `train`.
pub fn search<T: Scalar>(config: &SearchConfig, arch: &MacroArch, table: &CostTable, train: &ToyDataset) -> Result<(SearchResult, Supernet<T>)> {
    search_from(Supernet::<T>::new(arch, config.seed)?, config, table, train)
}

/// [`search`] starting from an existing supernetwork, e.g. one whose logits
/// were masked to hold some superblocks fixed.
pub fn search_from<T: Scalar>(net: Supernet<T>, config: &SearchConfig, table: &CostTable, train: &ToyDataset) -> Result<(SearchResult, Supernet<T>)> {
    let arch = net.arch().clone();
    let arch = &arch;
    let mut s = Searcher::new(net, table.clone(), config.clone())?;
    let (trajectory, prune_events) = run_epochs(&mut s, train, true)?;
    let theta = s.net.theta.clone();
    let result = SearchResult {
        config: config.clone(),
        space: serde_json::from_str(&export_search_space(arch))?,
        metric: table.metric,
        cost_table: table.costs.clone(),
        cost_normalizer: s.cost_normalizer(),
        probabilities: theta.probs(),
        argmax_path: theta.argmax_path(),
        final_expected_cost: expected_cost(&theta, table)?,
        theta,
        trajectory,
        prune_events,
        candidate_evaluations: s.evaluations(),
    };
    Ok((result, s.net))
}

/// Trains the weights of a single discrete path; the logits stay fixed and
/// every other candidate is masked out.
pub fn train_path<T: Scalar>(config: &SearchConfig, arch: &MacroArch, path: &ArchPath, train: &ToyDataset) -> Result<(Supernet<T>, Vec<EpochRecord>)> {
    arch.validate_path(path)?;
    let mut net = Supernet::<T>::new(arch, config.seed)?;
    let masks = path
        .choices
        .iter()
        .map(|&c| (0..NUM_CANDIDATES).map(|j| j == c).collect())
        .collect();
    net.theta = ThetaMatrix::new(vec![vec![0.0; NUM_CANDIDATES]; arch.num_superblocks()], masks)?;
    let zero = CostTable::new(CostMetric::Macs, vec![vec![0.0; NUM_CANDIDATES]; arch.num_superblocks()], None)?;
    let mut s = Searcher::new(net, zero, config.clone())?;
    let (trajectory, _) = run_epochs(&mut s, train, false)?;
    Ok((s.net, trajectory))
}

fn run_epochs<T: Scalar>(s: &mut Searcher<T>, train: &ToyDataset, joint: bool) -> Result<(Vec<EpochRecord>, Vec<PruneEvent>)> {
    let config = s.config.clone();
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let schedule = config.schedule();
    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut prune_events = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut round = 0u64;
    for epoch in 0..config.epochs {
        let update_theta = joint && epoch >= config.warmup_epochs;
        let evals_before = s.evaluations();
        let mut sum = LossRecord {
            total: 0.0,
            task: 0.0,
            resource: 0.0,
        };
        let mut t = schedule.start;
        for _ in 0..config.steps_per_epoch {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                if cursor == order.len() {
                    shuffle(&mut order, config.seed, round);
                    round += 1;
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let (images, labels) = train.batch::<T>(&batch);
            let step = s.steps_done();
            t = schedule.anneal(step)?;
            let loss = s.train_step(&images, &labels, step, t, update_theta)?;
            sum.total += loss.total;
            sum.task += loss.task;
            sum.resource += loss.resource;
        }
        let k = config.steps_per_epoch as f64;
        let mean = LossRecord {
            total: sum.total / k,
            task: sum.task / k,
            resource: sum.resource / k,
        };
        log::info!(
            "epoch {epoch}: L={:.4} L_P={:.4} L_E={:.4} t={t:.3} path={}",
            mean.total,
            mean.task,
            mean.resource,
            s.net.theta.argmax_path().to_compact()
        );
        trajectory.push(EpochRecord {
            epoch,
            loss: mean,
            temperature: t,
            candidate_evaluations: s.evaluations() - evals_before,
        });
        if joint && config.prune {
            prune_events.extend(s.prune(config.prune_threshold, epoch));
        }
    }
    Ok((trajectory, prune_events))
}

fn shuffle(order: &mut [usize], seed: u64, round: u64) {
    order.shuffle(&mut derive_rng(seed, SHUFFLE_STREAM, round));
}
