//! End-to-end acceptance criteria. Each test writes one `PASS`/`FAIL` line
//! straight to stderr (bypassing libtest capture) and then asserts.

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use hwnas::cost_model::{
    build_mac_table, expected_cost, network_cost, network_latency_ms, synth_latency_table, CostTable, NetworkMetric,
    RooflineModel,
};
use hwnas::gumbel::{derive_rng, gumbel_noise, probs, sample_categorical, sample_gumbel_softmax, ThetaMatrix};
use hwnas::pareto::{pareto_frontier, ParetoPoint};
use hwnas::search_space::{builtin_path, builtin_space, ArchPath, CANDIDATES, NUM_CANDIDATES, SKIP_INDEX};
use hwnas::supernet::{search, search_from, NormMode, SearchConfig, SearchResult, Searcher, Supernet};
use hwnas::tensor::gradcheck::{check_gradients_sampled, op_suite, random_signed};
use hwnas::tensor::{Graph, NodeId, Tensor};
use hwnas::toy::{self, toy_space, DECISIVE_SUPERBLOCK};

const FULL_RES: (usize, usize) = (1024, 2048);
const TOY_RES: (usize, usize) = (32, 32);

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion:>2} {verdict}  {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn rel(actual: f64, expected: f64) -> f64 {
    (actual - expected).abs() / expected.abs()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// (path, MACs in G, params in M) as published for each built-in network.
const PUBLISHED: [(&str, f64, f64); 6] = [
    ("mac_small", 3.01, 0.30),
    ("mac_large", 9.39, 0.73),
    ("mac_xlarge", 21.84, 1.80),
    ("lat_small", 4.47, 0.48),
    ("lat_large", 19.57, 1.90),
    ("lat_xlarge", 32.73, 3.00),
];

fn builtin_cost(name: &str, metric: NetworkMetric) -> u64 {
    let space = builtin_space(hwnas::search_space::builtin_path_space(name).unwrap()).unwrap();
    network_cost(&builtin_path(name).unwrap(), &space, FULL_RES, metric).unwrap()
}

#[test]
fn criterion_01_mac_reproduction() {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, gmacs, _) in PUBLISHED {
        let err = rel(builtin_cost(name, NetworkMetric::Macs) as f64 / 1e9, gmacs);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 <= 0.10 && secs < 1.0;
    report(1, "MAC reproduction", pass, &format!("worst {:.1}% ({}), limit 10%, {secs:.3} s", 100.0 * worst.0, worst.1));
    assert!(pass);
}

#[test]
fn criterion_02_parameter_reproduction() {
    let mut worst: (f64, &str) = (0.0, "");
    for (name, _, mparams) in PUBLISHED {
        let err = rel(builtin_cost(name, NetworkMetric::Params) as f64 / 1e6, mparams);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let pass = worst.0 <= 0.15;
    report(2, "parameter reproduction", pass, &format!("worst {:.1}% ({}), limit 15%", 100.0 * worst.0, worst.1));
    assert!(pass);
}

#[test]
fn criterion_03_mac_ordering() {
    let pairs: Vec<(String, u64, u64)> = ["small", "large", "xlarge"]
        .iter()
        .map(|size| {
            let lat = builtin_cost(&format!("lat_{size}"), NetworkMetric::Macs);
            let mac = builtin_cost(&format!("mac_{size}"), NetworkMetric::Macs);
            (size.to_string(), lat, mac)
        })
        .collect();
    let pass = pairs.iter().all(|(_, lat, mac)| lat > mac);
    let detail: Vec<String> = pairs.iter().map(|(s, l, m)| format!("{s} {l} > {m}")).collect();
    report(3, "MAC ordering", pass, &detail.join(", "));
    assert!(pass);
}

/// Finite-difference check of one superblock's mixed forward pass with
/// random logits, noise, temperature and two bound candidates.
fn superblock_check(config: u64) -> f64 {
    let mut rng = derive_rng(0xacce, 4, config);
    let arch = toy_space();
    let net = Supernet::<f64>::new(&arch, config).unwrap();
    let i = rng.gen_range(0..arch.num_superblocks());
    let side = TOY_RES.0 / 2 / if i == 0 { 1 } else { 2 };
    let input = random_signed(&mut rng, [2, 16, side, side]);
    let logits = Tensor::vector((0..NUM_CANDIDATES).map(|_| rng.gen_range(-1.5..1.5)).collect());
    let noise = gumbel_noise(NUM_CANDIDATES, &mut rng);
    let t = rng.gen_range(0.5..5.0);
    let real: Vec<usize> = (0..SKIP_INDEX).collect();
    let a = real[rng.gen_range(0..real.len())];
    let b = loop {
        let b = real[rng.gen_range(0..real.len())];
        if b != a {
            break b;
        }
    };
    let bound_params: Vec<usize> = [a, b].iter().flat_map(|&j| net.candidate_params(i, j)).collect();
    let mut inputs = vec![input, logits];
    inputs.extend(bound_params.iter().map(|&p| net.params()[p].clone()));
    check_gradients_sampled(
        &inputs,
        |g, ids| {
            let bound: Vec<(usize, NodeId)> = bound_params.iter().copied().zip(ids[2..].iter().copied()).collect();
            net.superblock_graph(g, i, ids[0], ids[1], &noise, t, &bound, NormMode::Batch)
        },
        3,
        config,
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn criterion_04_gradient_suite() {
    let start = Instant::now();
    let ops = op_suite(0x9ad, 10).unwrap();
    let (worst_op, worst_err) = ops
        .iter()
        .map(|(op, r)| (*op, r.max_rel_err))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let sb_err = (0..10).map(superblock_check).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_err < 1e-4 && sb_err < 1e-4 && secs < 120.0;
    report(
        4,
        "gradient suite",
        pass,
        &format!(
            "{} ops x 10 configs worst {worst_err:.1e} ({worst_op}); superblock x 10 worst {sb_err:.1e}; limit 1e-4; {secs:.1} s",
            ops.len()
        ),
    );
    assert!(pass);
}

/// Direct nested-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, dilation: usize, groups: usize, pad: usize) -> Vec<f64> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cpg, k, _] = w.shape();
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let opg = c_out / groups;
    assert_eq!(cpg * groups, c_in);
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for co in 0..c_out {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at([b, g * cpg + ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn criterion_05_convolution_oracle() {
    let mut rng = derive_rng(0xc0, 5, 0);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for cand in CANDIDATES.iter().filter(|c| !c.is_skip) {
        for trial in 0..4 {
            let stride = 1 + trial % 2;
            let c_in = cand.groups * rng.gen_range(1..=4);
            let hidden = cand.hidden_channels(c_in);
            let c_out = cand.groups * rng.gen_range(1..=4);
            let h = stride * rng.gen_range(3..=7);
            let w = stride * rng.gen_range(3..=7);
            let n = rng.gen_range(1..=2);
            // Every conv the candidate block is built from.
            let mut layers = vec![(hidden, hidden, cand.kernel, stride, cand.dilation, hidden)];
            if cand.expansion > 1 {
                layers.push((c_in, hidden, 1, 1, 1, cand.groups));
            }
            layers.push((hidden, c_out, 1, 1, 1, cand.groups));
            for (ci, co, k, s, d, g) in layers {
                let x = random_signed(&mut rng, [n, ci, h, w]);
                let wt = random_signed(&mut rng, [co, ci / g, k, k]);
                let pad = d * (k - 1) / 2;
                let mut graph = Graph::<f64>::new();
                let xi = graph.constant(x.clone());
                let wi = graph.constant(wt.clone());
                let y = graph.conv2d(xi, wi, s, d, g, pad).unwrap();
                let expected = naive_conv(&x, &wt, s, d, g, pad);
                let got = graph.value(y).data();
                assert_eq!(got.len(), expected.len());
                for (a, b) in got.iter().zip(&expected) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    let pass = worst <= 1e-10;
    report(5, "convolution oracle", pass, &format!("12 candidates, {cases} convs, max |diff| {worst:.1e}, limit 1e-10"));
    assert!(pass);
}

#[test]
fn criterion_06_gumbel_statistics() {
    const DRAWS: usize = 100_000;
    let mut rng = derive_rng(0x6b, 6, 0);
    let row: Vec<f64> = (0..NUM_CANDIDATES).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mask = vec![true; NUM_CANDIDATES];
    let p = probs(&row, &mask).unwrap();
    let mut counts = vec![0usize; NUM_CANDIDATES];
    let mut sharp = 0usize;
    for _ in 0..DRAWS {
        let y = sample_gumbel_softmax(&row, &mask, 1.0, &mut rng).unwrap();
        let arg = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        counts[arg] += 1;
        let cold = sample_gumbel_softmax(&row, &mask, 0.05, &mut rng).unwrap();
        if cold.iter().cloned().fold(f64::MIN, f64::max) > 0.99 {
            sharp += 1;
        }
    }
    let freq_err = counts
        .iter()
        .zip(&p)
        .map(|(&c, &pj)| (c as f64 / DRAWS as f64 - pj).abs())
        .fold(0.0, f64::max);
    let sharp_rate = sharp as f64 / DRAWS as f64;
    let freq_ok = freq_err <= 0.01;
    let sharp_ok = sharp_rate >= 0.95;
    report(
        6,
        "Gumbel statistics",
        freq_ok && sharp_ok,
        &format!(
            "argmax frequency error {freq_err:.4} (limit 0.01, {}); share of t=0.05 draws with max > 0.99 is {:.1}% (needs 95%, {})",
            if freq_ok { "ok" } else { "fails" },
            100.0 * sharp_rate,
            if sharp_ok { "ok" } else { "fails" }
        ),
    );
    assert!(freq_ok, "argmax frequencies off by {freq_err}");
    assert!(sharp_ok, "only {sharp_rate} of t=0.05 draws exceed 0.99");
}

#[test]
fn criterion_07_expected_cost_oracle() {
    const SAMPLES: usize = 1_000_000;
    let mut worst = 0.0f64;
    for trial in 0..3 {
        let mut rng = derive_rng(0x7e, 7, trial);
        let rows = rng.gen_range(2..=6);
        let logits: Vec<Vec<f64>> = (0..rows).map(|_| (0..NUM_CANDIDATES).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let costs: Vec<Vec<f64>> = (0..rows).map(|_| (0..NUM_CANDIDATES).map(|_| rng.gen_range(0.0..100.0)).collect()).collect();
        let theta = ThetaMatrix::from_logits(logits).unwrap();
        let table = CostTable::new(hwnas::cost_model::CostMetric::Macs, costs.clone(), None).unwrap();
        let exact = expected_cost(&theta, &table).unwrap();
        let p = theta.probs();
        let mut total = 0.0;
        for _ in 0..SAMPLES {
            for (i, row) in p.iter().enumerate() {
                total += costs[i][sample_categorical(row, &mut rng)];
            }
        }
        worst = worst.max(rel(total / SAMPLES as f64, exact));
    }
    let pass = worst <= 0.01;
    report(7, "expected-cost oracle", pass, &format!("3 random tables, 1e6 samples each, worst {:.3}%, limit 1%", 100.0 * worst));
    assert!(pass);
}

#[test]
fn criterion_11_pareto_oracle() {
    let mut rng = derive_rng(0x11, 11, 0);
    let points: Vec<ParetoPoint> = (0..1000)
        .map(|k| {
            // Score grows with cost plus noise, like real accuracy curves.
            let cost: f64 = rng.gen_range(0.0..1.0);
            ParetoPoint {
                path: ArchPath::new(vec![k % NUM_CANDIDATES]),
                cost,
                score: 0.8 * cost.sqrt() + rng.gen_range(0.0..0.2),
            }
        })
        .collect();
    let dominates = |a: &ParetoPoint, b: &ParetoPoint| a.cost <= b.cost && a.score >= b.score && (a.cost < b.cost || a.score > b.score);
    let mut brute: Vec<ParetoPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect();
    brute.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let frontier = pareto_frontier(&points);
    let exact = frontier == brute;
    let idempotent = pareto_frontier(&frontier) == frontier;
    let pass = exact && idempotent;
    report(
        11,
        "Pareto oracle",
        pass,
        &format!("{} frontier points, brute force {} (equal: {exact}), idempotent: {idempotent}", frontier.len(), brute.len()),
    );
    assert!(pass);
}

fn tiny_search_config(seed: u64) -> SearchConfig {
    let mut config = SearchConfig::new(0.5, 3, 4, seed);
    config.batch_size = 4;
    config.warmup_epochs = 1;
    config
}

#[test]
fn criterion_12_determinism() {
    let arch = toy_space();
    let table = build_mac_table(&arch, TOY_RES).unwrap();
    let train = toy::generate(12, 32, 0.5).unwrap();
    let config = tiny_search_config(12);
    let run = || search::<f32>(&config, &arch, &table, &train).unwrap().0.to_json().unwrap();
    let first = run();
    let second = run();
    let pass = first == second;
    report(12, "determinism", pass, &format!("two runs, {} bytes of SearchResult JSON, identical: {pass}", first.len()));
    assert!(pass);
}

/// Logits move fast and the cost term dominates, so rows concentrate within
/// a few epochs.
fn concentrating_config(prune: bool) -> SearchConfig {
    let mut config = SearchConfig::new(2.0, 12, 6, 10);
    config.batch_size = 4;
    config.warmup_epochs = 0;
    config.lr_theta = 0.1;
    config.prune = prune;
    config
}

#[test]
fn criterion_10_pruning_correctness() {
    let arch = toy_space();
    let table = build_mac_table(&arch, TOY_RES).unwrap();
    let train = toy::generate(10, 64, 0.5).unwrap();
    let threshold = concentrating_config(true).prune_threshold;

    let (with, _) = search::<f32>(&concentrating_config(true), &arch, &table, &train).unwrap();
    let (without, _) = search::<f32>(&concentrating_config(false), &arch, &table, &train).unwrap();
    let drop = 1.0 - with.candidate_evaluations as f64 / without.candidate_evaluations as f64;
    let recorded_ok = with.prune_events.iter().all(|e| e.probability < threshold);

    // Independent replay: probabilities are read before every prune call and
    // pruned weights are snapshotted at removal time.
    let config = concentrating_config(true);
    let mut s = Searcher::new(Supernet::<f32>::new(&arch, config.seed).unwrap(), table.clone(), config.clone()).unwrap();
    let schedule = config.schedule();
    let mut frozen: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut premature = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for _ in 0..config.steps_per_epoch {
            let idx: Vec<usize> = (0..config.batch_size).map(|k| (step * config.batch_size + k) % train.len()).collect();
            let (x, y) = train.batch::<f32>(&idx);
            s.train_step(&x, &y, step, schedule.anneal(step).unwrap(), true).unwrap();
            step += 1;
        }
        let before = s.net.theta.probs();
        for e in s.prune(threshold, epoch) {
            if before[e.superblock][e.candidate] >= threshold {
                premature += 1;
            }
            for p in s.net.candidate_params(e.superblock, e.candidate) {
                frozen.push((p, s.net.params()[p].data().to_vec()));
            }
        }
    }
    let moved = frozen.iter().filter(|(p, w)| s.net.params()[*p].data() != w.as_slice()).count();
    let pass = drop >= 0.25 && recorded_ok && premature == 0 && moved == 0 && !frozen.is_empty();
    report(
        10,
        "pruning correctness",
        pass,
        &format!(
            "evaluations {} vs {} without pruning ({:.1}% fewer, needs 25%); {} prune events, none at p >= {threshold}: {}; \
             replay pruned {} tensors, premature removals {premature}, tensors changed after removal {moved}",
            with.candidate_evaluations,
            without.candidate_evaluations,
            100.0 * drop,
            with.prune_events.len(),
            recorded_ok && premature == 0,
            frozen.len()
        ),
    );
    assert!(pass);
}

/// Argmax path of a toy search with the given objective table.
fn toy_search(config: &SearchConfig, table: &CostTable, pin_first: Option<usize>) -> SearchResult {
    let arch = toy_space();
    let train = toy::generate(0, toy::DEFAULT_TRAIN_SIZE, toy::DEFAULT_DIFFICULTY).unwrap();
    let mut net = Supernet::<f32>::new(&arch, config.seed).unwrap();
    if let Some(j) = pin_first {
        let mut masks = net.theta.masks().to_vec();
        masks[0] = (0..NUM_CANDIDATES).map(|k| k == j).collect();
        net.theta = ThetaMatrix::new(net.theta.logits().to_vec(), masks).unwrap();
    }
    search_from(net, config, table, &train).unwrap().0
}

#[test]
fn criterion_08_latency_vs_mac_divergence() {
    let start = Instant::now();
    let arch = toy_space();
    let roofline = RooflineModel::default();
    let mac_table = build_mac_table(&arch, TOY_RES).unwrap();
    let lat_table = synth_latency_table(&arch, &roofline, TOY_RES).unwrap();
    let measure = |path: &ArchPath| {
        (
            network_cost(path, &arch, TOY_RES, NetworkMetric::Macs).unwrap() as f64,
            network_latency_ms(path, &arch, &roofline, TOY_RES).unwrap(),
        )
    };
    let mut by_objective = Vec::new();
    for table in [&mac_table, &lat_table] {
        let picks: Vec<ArchPath> = (0..3)
            .map(|seed| toy_search(&SearchConfig::new(1.0, 30, 16, seed), table, None).argmax_path)
            .collect();
        let (macs, lat): (Vec<f64>, Vec<f64>) = picks.iter().map(measure).unzip();
        let names: Vec<String> = picks.iter().map(ArchPath::to_compact).collect();
        by_objective.push((median(macs), median(lat), names));
    }
    let (mac_macs, mac_lat, mac_names) = &by_objective[0];
    let (lat_macs, lat_lat, lat_names) = &by_objective[1];
    let pass = lat_macs >= mac_macs && lat_lat <= mac_lat;
    let strict = lat_macs > mac_macs && lat_lat < mac_lat;
    report(
        8,
        "latency vs MAC divergence",
        pass,
        &format!(
            "median MACs {lat_macs} (latency search) vs {mac_macs} (MAC search); median latency {lat_lat:.6} vs {mac_lat:.6} ms; \
             strict: {strict}; MAC picks {mac_names:?}, latency picks {lat_names:?}; {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_planted_optimum() {
    let start = Instant::now();
    let arch = toy_space();
    let table = build_mac_table(&arch, TOY_RES).unwrap();
    // Only the decisive superblock is searched; the first is pinned to a plain block.
    let pinned = CANDIDATES.iter().position(|c| c.mnemonic() == "k3_d1_e1_g1").unwrap();
    let free: Vec<String> = (0..5)
        .map(|seed| {
            let r = toy_search(&SearchConfig::new(0.0, 60, 16, seed), &table, Some(pinned));
            CANDIDATES[r.argmax_path.choices[DECISIVE_SUPERBLOCK]].mnemonic()
        })
        .collect();
    let enlarging = free
        .iter()
        .filter(|m| CANDIDATES.iter().any(|c| &c.mnemonic() == *m && c.enlarges_receptive_field()))
        .count();

    let cheapest = table.path_cost(&table.min_cost_path(&ThetaMatrix::for_arch(&arch))).unwrap();
    let costly: Vec<(String, bool)> = (0..5)
        .map(|seed| {
            let path = toy_search(&SearchConfig::new(10.0, 20, 16, seed), &table, None).argmax_path;
            (path.to_compact(), table.path_cost(&path).unwrap() == cheapest)
        })
        .collect();
    let minimal = costly.iter().filter(|(_, m)| *m).count();
    let pass = enlarging >= 4 && minimal >= 4;
    report(
        9,
        "planted optimum",
        pass,
        &format!(
            "alpha=0: {enlarging}/5 seeds enlarge the receptive field {free:?}; alpha=10: {minimal}/5 seeds reach the minimum cost {cheapest} {:?}; {:.0} s",
            costly.iter().map(|(p, _)| p).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
