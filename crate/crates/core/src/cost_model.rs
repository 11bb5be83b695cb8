//! MAC, parameter, memory-traffic and latency accounting.
//!
//! Every network component is lowered to a list of [`ConvLayer`]s; MACs,
//! parameters and traffic are all read off that one inventory so the three
//! metrics can never disagree about which layers exist.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::ThetaMatrix;
use crate::search_space::{
    ArchPath, CandidateSpec, DecoderKind, MacroArch, SuperblockSpec, CANDIDATES, NUM_CANDIDATES,
};

/// Default accounting resolution (height, width).
pub const DEFAULT_RESOLUTION: (usize, usize) = (1024, 2048);

/// Dilation rates of the depthwise atrous branches in the ASPP decoder.
pub const ASPP_DILATIONS: [usize; 3] = [2, 4, 6];

/// A bias-free convolution with optional normalization and optional bias,
/// applied to an `in_h x in_w` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub groups: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub norm: bool,
    pub bias: bool,
}

impl ConvLayer {
    fn new(c_in: usize, c_out: usize, kernel: usize, groups: usize, stride: usize, dims: (usize, usize)) -> Self {
        ConvLayer {
            c_in,
            c_out,
            kernel,
            groups,
            stride,
            in_h: dims.0,
            in_w: dims.1,
            norm: true,
            bias: false,
        }
    }

    fn classifier(c_in: usize, c_out: usize, dims: (usize, usize)) -> Self {
        ConvLayer {
            norm: false,
            bias: true,
            ..Self::new(c_in, c_out, 1, 1, 1, dims)
        }
    }

    fn plain(c_in: usize, c_out: usize, dims: (usize, usize)) -> Self {
        ConvLayer {
            norm: false,
            ..Self::new(c_in, c_out, 1, 1, 1, dims)
        }
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.in_h / self.stride, self.in_w / self.stride)
    }

    pub fn weights(&self) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel) as u64
    }

    pub fn macs(&self) -> u64 {
        let (h, w) = self.out_dims();
        (h * w) as u64 * self.weights()
    }

    pub fn params(&self) -> u64 {
        let mut p = self.weights();
        if self.norm {
            p += 2 * self.c_out as u64;
        }
        if self.bias {
            p += self.c_out as u64;
        }
        p
    }

    /// Input, output and weight elements moved by this layer.
    pub fn traffic_elements(&self) -> u64 {
        let (h, w) = self.out_dims();
        (self.in_h * self.in_w * self.c_in + h * w * self.c_out) as u64 + self.weights()
    }
}

/// Layer inventory of one candidate block. Skip has no layers.
pub fn block_layers(candidate: &CandidateSpec, block: &SuperblockSpec, input_dims: (usize, usize)) -> Result<Vec<ConvLayer>> {
    check_candidate(candidate, block)?;
    if input_dims.0 % block.stride != 0 || input_dims.1 % block.stride != 0 {
        return Err(Error::Shape(format!(
            "superblock {}: {}x{} not divisible by stride {}",
            block.index, input_dims.0, input_dims.1, block.stride
        )));
    }
    if candidate.is_skip {
        return Ok(Vec::new());
    }
    let hidden = candidate.hidden_channels(block.c_in);
    let mut layers = Vec::with_capacity(3);
    if candidate.expansion > 1 {
        layers.push(ConvLayer::new(block.c_in, hidden, 1, candidate.groups, 1, input_dims));
    }
    layers.push(ConvLayer::new(hidden, hidden, candidate.kernel, hidden, block.stride, input_dims));
    let out = (input_dims.0 / block.stride, input_dims.1 / block.stride);
    layers.push(ConvLayer::new(hidden, block.c_out, 1, candidate.groups, 1, out));
    Ok(layers)
}

fn check_candidate(candidate: &CandidateSpec, block: &SuperblockSpec) -> Result<()> {
    let j = candidate.index();
    if !block.is_admissible(j) {
        return Err(Error::InvalidPath {
            index: block.index,
            reason: format!("candidate {candidate} is not admissible here"),
        });
    }
    if !candidate.is_skip && (block.c_in % candidate.groups != 0 || block.c_out % candidate.groups != 0) {
        return Err(Error::Superblock {
            index: block.index,
            reason: format!("channels not divisible by {} groups", candidate.groups),
        });
    }
    Ok(())
}

pub fn block_macs(candidate: &CandidateSpec, block: &SuperblockSpec, input_dims: (usize, usize)) -> Result<u64> {
    Ok(block_layers(candidate, block, input_dims)?.iter().map(ConvLayer::macs).sum())
}

pub fn block_params(candidate: &CandidateSpec, block: &SuperblockSpec) -> Result<u64> {
    let dims = (block.stride, block.stride);
    Ok(block_layers(candidate, block, dims)?.iter().map(ConvLayer::params).sum())
}

/// Memory traffic in elements. A skip reads its input once.
pub fn block_traffic(candidate: &CandidateSpec, block: &SuperblockSpec, input_dims: (usize, usize)) -> Result<u64> {
    if candidate.is_skip {
        check_candidate(candidate, block)?;
        return Ok((input_dims.0 * input_dims.1 * block.c_in) as u64);
    }
    Ok(block_layers(candidate, block, input_dims)?
        .iter()
        .map(ConvLayer::traffic_elements)
        .sum())
}

pub fn stem_layers(arch: &MacroArch, input_dims: (usize, usize)) -> Vec<ConvLayer> {
    let s = arch.stem;
    vec![ConvLayer::new(s.c_in, s.c_out, s.kernel, 1, s.stride, input_dims)]
}

/// Head conv plus decoder layers, in execution order.
pub fn decoder_layers(arch: &MacroArch, input_dims: (usize, usize)) -> Vec<ConvLayer> {
    let final_dims = arch.dims_before(arch.num_superblocks(), input_dims);
    let tap = &arch.superblocks[arch.low_level_tap];
    let tap_dims = arch.dims_before(arch.low_level_tap + 1, input_dims);
    let mut layers = Vec::new();
    let mut c = arch.superblocks.last().map_or(arch.stem.c_out, |s| s.c_out);
    if let Some(head) = arch.head {
        layers.push(ConvLayer::new(c, head.c_out, 1, 1, 1, final_dims));
        c = head.c_out;
    }
    let d = arch.decoder.internal_channels;
    let classes = arch.decoder.num_classes;
    match arch.decoder.kind {
        DecoderKind::LrAspp => {
            layers.push(ConvLayer::new(c, d, 1, 1, 1, final_dims));
            // Gate branch runs on the pooled 1x1 map and feeds a sigmoid.
            layers.push(ConvLayer::plain(c, d, (1, 1)));
        }
        DecoderKind::DepthwiseAspp => {
            layers.push(ConvLayer::new(c, d, 1, 1, 1, final_dims));
            for _ in ASPP_DILATIONS {
                layers.push(ConvLayer::new(c, c, 3, c, 1, final_dims));
            }
            layers.push(ConvLayer::new(c, d, 1, 1, 1, (1, 1)));
            layers.push(ConvLayer::new(2 * d + ASPP_DILATIONS.len() * c, d, 1, 1, 1, final_dims));
        }
    }
    layers.push(ConvLayer::classifier(d, classes, tap_dims));
    layers.push(ConvLayer::classifier(tap.c_out, classes, tap_dims));
    layers
}

/// Cost metric of a whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMetric {
    Macs,
    Params,
}

/// MACs, parameters and traffic of one named stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub stage: String,
    pub macs: u64,
    pub params: u64,
    pub traffic: u64,
}

fn sum_stage(stage: String, layers: &[ConvLayer]) -> StageCost {
    StageCost {
        stage,
        macs: layers.iter().map(ConvLayer::macs).sum(),
        params: layers.iter().map(ConvLayer::params).sum(),
        traffic: layers.iter().map(ConvLayer::traffic_elements).sum(),
    }
}

fn check_dims(arch: &MacroArch, input_dims: (usize, usize)) -> Result<()> {
    let div = arch.required_divisor();
    if input_dims.0 == 0 || input_dims.1 == 0 || input_dims.0 % div != 0 || input_dims.1 % div != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} must be positive multiples of the output stride {div}",
            input_dims.0, input_dims.1
        )));
    }
    Ok(())
}

/// Per-stage costs: stem, one row per superblock, then the decoder.
pub fn network_breakdown(path: &ArchPath, arch: &MacroArch, input_dims: (usize, usize)) -> Result<Vec<StageCost>> {
    arch.validate_path(path)?;
    check_dims(arch, input_dims)?;
    let mut stages = vec![sum_stage("stem".into(), &stem_layers(arch, input_dims))];
    for (i, sb) in arch.superblocks.iter().enumerate() {
        let dims = arch.dims_before(i, input_dims);
        let cand = path.candidate(i);
        let layers = block_layers(&cand, sb, dims)?;
        let mut cost = sum_stage(format!("sb{i:02}:{cand}"), &layers);
        cost.traffic = block_traffic(&cand, sb, dims)?;
        stages.push(cost);
    }
    stages.push(sum_stage("decoder".into(), &decoder_layers(arch, input_dims)));
    Ok(stages)
}

/// Stem plus head/decoder cost; the path-independent part of every network.
pub fn fixed_cost(arch: &MacroArch, input_dims: (usize, usize), metric: NetworkMetric) -> u64 {
    let layers: Vec<ConvLayer> = stem_layers(arch, input_dims)
        .into_iter()
        .chain(decoder_layers(arch, input_dims))
        .collect();
    match metric {
        NetworkMetric::Macs => layers.iter().map(ConvLayer::macs).sum(),
        NetworkMetric::Params => layers.iter().map(ConvLayer::params).sum(),
    }
}

/// Total MACs or parameters of the network selected by `path`.
pub fn network_cost(path: &ArchPath, arch: &MacroArch, input_dims: (usize, usize), metric: NetworkMetric) -> Result<u64> {
    let dims = match metric {
        NetworkMetric::Macs => input_dims,
        NetworkMetric::Params => {
            let d = arch.required_divisor();
            (d, d)
        }
    };
    let stages = network_breakdown(path, arch, dims)?;
    Ok(stages
        .iter()
        .map(|s| match metric {
            NetworkMetric::Macs => s.macs,
            NetworkMetric::Params => s.params,
        })
        .sum())
}

/// MACs per byte of memory traffic over the whole network.
pub fn arithmetic_intensity(path: &ArchPath, arch: &MacroArch, input_dims: (usize, usize), bytes_per_element: usize) -> Result<f64> {
    if bytes_per_element == 0 {
        return Err(Error::InvalidArgument("bytes_per_element must be positive".into()));
    }
    let stages = network_breakdown(path, arch, input_dims)?;
    let macs: u64 = stages.iter().map(|s| s.macs).sum();
    let traffic: u64 = stages.iter().map(|s| s.traffic).sum();
    Ok(macs as f64 / (traffic as f64 * bytes_per_element as f64))
}

/// Unit of a cost table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Macs,
    LatencyMs,
}

impl CostMetric {
    pub fn label(&self) -> &'static str {
        match self {
            CostMetric::Macs => "macs",
            CostMetric::LatencyMs => "latency_ms",
        }
    }
}

/// Per-(superblock, candidate) cost lookup table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub metric: CostMetric,
    pub costs: Vec<Vec<f64>>,
    /// Input resolution the table was built for, when known.
    pub resolution: Option<(usize, usize)>,
}

impl CostTable {
    pub fn new(metric: CostMetric, costs: Vec<Vec<f64>>, resolution: Option<(usize, usize)>) -> Result<Self> {
        for (i, row) in costs.iter().enumerate() {
            if row.len() != NUM_CANDIDATES {
                return Err(Error::Dimension(format!(
                    "cost row {i} has {} entries, expected {NUM_CANDIDATES}",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "cost ({i}, {j}) = {} is not a finite nonnegative number",
                    row[j]
                )));
            }
        }
        Ok(CostTable {
            metric,
            costs,
            resolution,
        })
    }

    pub fn rows(&self) -> usize {
        self.costs.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i][j]
    }

    pub fn check_arch(&self, arch: &MacroArch) -> Result<()> {
        if self.rows() != arch.num_superblocks() {
            return Err(Error::Dimension(format!(
                "cost table has {} rows, space has {} superblocks",
                self.rows(),
                arch.num_superblocks()
            )));
        }
        Ok(())
    }

    /// Sum of the entries selected by `path`.
    pub fn path_cost(&self, path: &ArchPath) -> Result<f64> {
        if path.len() != self.rows() {
            return Err(Error::PathLength {
                expected: self.rows(),
                found: path.len(),
            });
        }
        Ok(path.choices.iter().enumerate().map(|(i, &j)| self.costs[i][j]).sum())
    }

    pub fn scaled(&self, factor: f64) -> CostTable {
        CostTable {
            metric: self.metric,
            costs: self
                .costs
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
            resolution: self.resolution,
        }
    }

    /// Cheapest admissible path; ties go to the lowest candidate index.
    pub fn min_cost_path(&self, theta: &ThetaMatrix) -> ArchPath {
        let choices = (0..self.rows())
            .map(|i| {
                (0..NUM_CANDIDATES)
                    .filter(|&j| theta.is_active(i, j))
                    .min_by(|&a, &b| self.costs[i][a].total_cmp(&self.costs[i][b]).then(a.cmp(&b)))
                    .expect("theta rows always have an active entry")
            })
            .collect();
        ArchPath::new(choices)
    }

    /// Writes `superblock,candidate,<metric>` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["superblock", "candidate", self.metric.label()])?;
        for (i, row) in self.costs.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), format_cost(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn format_cost(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

/// `costs(i, j)` = MACs of candidate j at superblock i. Inadmissible entries
/// (a skip that cannot be placed) are recorded as 0 and never selected.
pub fn build_mac_table(arch: &MacroArch, input_dims: (usize, usize)) -> Result<CostTable> {
    check_dims(arch, input_dims)?;
    let costs = arch
        .superblocks
        .iter()
        .enumerate()
        .map(|(i, sb)| {
            let dims = arch.dims_before(i, input_dims);
            CANDIDATES
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if sb.is_admissible(j) {
                        block_macs(c, sb, dims).map(|m| m as f64)
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CostTable::new(CostMetric::Macs, costs, Some(input_dims))
}

#[derive(Debug, Deserialize)]
struct LatencyRow {
    superblock: i64,
    candidate: i64,
    latency_ms: f64,
}

/// Parses a `superblock,candidate,latency_ms` CSV covering every pair once.
pub fn load_latency_table<R: Read>(input: R, arch: &MacroArch) -> Result<CostTable> {
    let rows = arch.num_superblocks();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["superblock", "candidate", "latency_ms"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::LatencyTable(format!(
            "header must be `{}`, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (line, rec) in reader.deserialize::<LatencyRow>().enumerate() {
        let rec = rec.map_err(|e| Error::LatencyTable(format!("row {}: {e}", line + 2)))?;
        if rec.superblock < 0 || rec.superblock as usize >= rows {
            return Err(Error::LatencyTable(format!(
                "superblock index {} out of range 0..{rows}",
                rec.superblock
            )));
        }
        if rec.candidate < 0 || rec.candidate as usize >= NUM_CANDIDATES {
            return Err(Error::LatencyTable(format!(
                "candidate index {} out of range 0..{NUM_CANDIDATES}",
                rec.candidate
            )));
        }
        if !rec.latency_ms.is_finite() || rec.latency_ms < 0.0 {
            return Err(Error::LatencyTable(format!(
                "negative or non-finite latency {} at ({}, {})",
                rec.latency_ms, rec.superblock, rec.candidate
            )));
        }
        let key = (rec.superblock as usize, rec.candidate as usize);
        if seen.insert(key, rec.latency_ms).is_some() {
            return Err(Error::LatencyTable(format!("duplicate pair ({}, {})", key.0, key.1)));
        }
    }
    let mut costs = vec![vec![0.0; NUM_CANDIDATES]; rows];
    for (i, row) in costs.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = *seen
                .get(&(i, j))
                .ok_or_else(|| Error::LatencyTable(format!("missing pair ({i}, {j})")))?;
        }
    }
    CostTable::new(CostMetric::LatencyMs, costs, None)
}

/// Compute/bandwidth roofline used as a synthetic latency source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RooflineModel {
    /// MACs per second.
    pub peak_mac_rate: f64,
    /// Bytes per second.
    pub memory_bandwidth: f64,
    pub bytes_per_element: usize,
}

impl Default for RooflineModel {
    /// Embedded-GPU scale constants with half-precision storage.
    fn default() -> Self {
        RooflineModel {
            peak_mac_rate: 5.0e11,
            memory_bandwidth: 6.0e10,
            bytes_per_element: 2,
        }
    }
}

impl RooflineModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_mac_rate > 0.0
            && self.peak_mac_rate.is_finite()
            && self.memory_bandwidth > 0.0
            && self.memory_bandwidth.is_finite()
            && self.bytes_per_element > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("roofline constants must be positive: {self:?}")))
        }
    }

    /// Latency in milliseconds of work with the given MACs and traffic elements.
    pub fn latency_ms(&self, macs: u64, traffic_elements: u64) -> f64 {
        let compute = macs as f64 / self.peak_mac_rate;
        let memory = traffic_elements as f64 * self.bytes_per_element as f64 / self.memory_bandwidth;
        compute.max(memory) * 1e3
    }
}

/// Roofline latency for every (superblock, candidate) pair.
pub fn synth_latency_table(arch: &MacroArch, model: &RooflineModel, input_dims: (usize, usize)) -> Result<CostTable> {
    model.validate()?;
    check_dims(arch, input_dims)?;
    let costs = arch
        .superblocks
        .iter()
        .enumerate()
        .map(|(i, sb)| {
            let dims = arch.dims_before(i, input_dims);
            CANDIDATES
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if !sb.is_admissible(j) {
                        return Ok(0.0);
                    }
                    let macs = block_macs(c, sb, dims)?;
                    let traffic = block_traffic(c, sb, dims)?;
                    Ok(model.latency_ms(macs, traffic))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CostTable::new(CostMetric::LatencyMs, costs, Some(input_dims))
}

/// Total roofline latency of a network, stage by stage.
pub fn network_latency_ms(path: &ArchPath, arch: &MacroArch, model: &RooflineModel, input_dims: (usize, usize)) -> Result<f64> {
    model.validate()?;
    Ok(network_breakdown(path, arch, input_dims)?
        .iter()
        .map(|s| model.latency_ms(s.macs, s.traffic))
        .sum())
}

/// Expected cost `sum_i sum_j p(i, j) C(i, j)` under the softmax of `theta`.
pub fn expected_cost(theta: &ThetaMatrix, table: &CostTable) -> Result<f64> {
    if theta.rows() != table.rows() || theta.cols() != NUM_CANDIDATES && theta.rows() > 0 {
        return Err(Error::Dimension(format!(
            "theta is {}x{}, cost table is {}x{NUM_CANDIDATES}",
            theta.rows(),
            theta.cols(),
            table.rows()
        )));
    }
    Ok((0..theta.rows())
        .map(|i| {
            theta
                .probs_row(i)
                .iter()
                .zip(&table.costs[i])
                .map(|(p, c)| p * c)
                .sum::<f64>()
        })
        .sum())
}
