#![allow(dead_code)]

use otfeat::nnet::{Activation, ClassifierParams, GeneratorParams};
use otfeat::numerics::{cosine_distance, cost_matrix, MassDistribution, Matrix, RngState};
use otfeat::transport::{ot_loss_grad_centroids, sinkhorn, SinkhornConfig, TransportPlan};

/// Random marginal with entries `w_i / sum(w)` for integer weights in `1..=9`.
pub fn rational_marginal(rng: &mut RngState, n: usize) -> MassDistribution {
    let w: Vec<f64> = (0..n).map(|_| (1 + rng.below(9)) as f64).collect();
    let total: f64 = w.iter().sum();
    MassDistribution::new(w.iter().map(|v| v / total).collect()).unwrap()
}

pub fn uniform_cost(rng: &mut RngState, n: usize, k: usize, hi: f64) -> Matrix {
    Matrix::from_vec(n, k, (0..n * k).map(|_| hi * rng.uniform()).collect()).unwrap()
}

pub fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    rng.fill_normal(m.as_mut_slice());
    m
}

/// Exhaustive minimum over the vertices of the transportation polytope.
///
/// A vertex is supported on a spanning tree of the bipartite row/column
/// graph with `n + k - 1` edges; flows on a tree are forced, so every
/// `(n + k - 1)`-subset of cells that forms a spanning tree with nonnegative
/// forced flows is a vertex.
pub fn vertex_enumeration_ot(cost: &Matrix, r: &[f64], c: &[f64]) -> f64 {
    let (n, k) = (cost.rows(), cost.cols());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let edges = n + k - 1;
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..edges).collect();
    loop {
        let chosen: Vec<(usize, usize)> = pick.iter().map(|&p| cells[p]).collect();
        if let Some(flows) = tree_flows(n, k, &chosen, r, c) {
            if flows.iter().all(|&f| f >= -1e-12) {
                let v: f64 = chosen
                    .iter()
                    .zip(&flows)
                    .map(|(&(i, j), f)| f * cost.get(i, j))
                    .sum();
                best = best.min(v);
            }
        }
        // next combination
        let mut i = edges;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] != i + cells.len() - edges {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..edges {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// Forced flows on a spanning tree by repeated leaf elimination; `None` when
/// the cells do not form a spanning tree.
fn tree_flows(n: usize, k: usize, cells: &[(usize, usize)], r: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    let nodes = n + k;
    let mut supply: Vec<f64> = r.iter().chain(c.iter()).copied().collect();
    let mut degree = vec![0usize; nodes];
    for &(i, j) in cells {
        degree[i] += 1;
        degree[n + j] += 1;
    }
    let mut alive = vec![true; cells.len()];
    let mut flows = vec![0.0; cells.len()];
    for _ in 0..cells.len() {
        let leaf = (0..nodes).find(|&v| degree[v] == 1)?;
        let e = (0..cells.len()).find(|&e| {
            alive[e] && (cells[e].0 == leaf || n + cells[e].1 == leaf)
        })?;
        let (i, j) = cells[e];
        let other = if i == leaf { n + j } else { i };
        flows[e] = supply[leaf];
        supply[other] -= supply[leaf];
        supply[leaf] = 0.0;
        alive[e] = false;
        degree[leaf] -= 1;
        degree[other] -= 1;
    }
    // A spanning tree consumes every node; a forest with a cycle elsewhere
    // would have stalled above.
    if degree.iter().any(|&d| d != 0) || supply.iter().any(|s| s.abs() > 1e-9) {
        return None;
    }
    Some(flows)
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;
const H: f64 = FD_STEP;

pub fn flatten(g: &GeneratorParams) -> Vec<f64> {
    g.layers
        .iter()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
        .collect()
}

pub fn unflatten(template: &GeneratorParams, flat: &[f64]) -> GeneratorParams {
    let mut g = template.clone();
    let mut at = 0;
    for l in &mut g.layers {
        let n = l.weight.as_slice().len();
        l.weight.as_mut_slice().copy_from_slice(&flat[at..at + n]);
        at += n;
        let b = l.bias.len();
        l.bias.copy_from_slice(&flat[at..at + b]);
        at += b;
    }
    g
}

fn sum_weighted(out: &Matrix, up: &Matrix) -> f64 {
    out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
}

pub fn generator_case(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let d = 1 + rng.below(16);
    let hidden = [2 * d, 1 + rng.below(2 * d)];
    let act = if seed.is_multiple_of(2) {
        Activation::LeakyRelu { slope: 0.1 }
    } else {
        Activation::Relu
    };
    let gen = GeneratorParams::new_random(d, &hidden, act, &mut rng).unwrap();
    let batch = 1 + rng.below(4);
    let inputs = random_matrix(&mut rng, batch, 2 * d);
    let up = random_matrix(&mut rng, batch, d);
    let (_, cache) = gen.forward_batch(&inputs).unwrap();
    let grads = gen.backward_batch(&cache, &up).unwrap();
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
        .collect();
    let numeric = central_diff(&flatten(&gen), H, |p| {
        sum_weighted(&unflatten(&gen, p).generate(&inputs).unwrap(), &up)
    });
    rel_err(&analytic, &numeric)
}

pub fn classifier_case(seed: u64) -> (f64, f64) {
    let mut rng = RngState::new(seed);
    let d = 2 + rng.below(15);
    let c = 2 + rng.below(6);
    let protos = random_matrix(&mut rng, c, d);
    let cls = ClassifierParams::new(protos.clone(), 5.0, (0..c as u32).collect()).unwrap();
    let x: Vec<f64> = random_matrix(&mut rng, 1, d).into_vec();
    let label = rng.below(c);
    let (_, pg, ig) = cls.loss_and_grad(&x, label).unwrap();
    let num_p = central_diff(protos.as_slice(), H, |p| {
        let m = Matrix::from_vec(c, d, p.to_vec()).unwrap();
        let k = ClassifierParams::new(m, 5.0, (0..c as u32).collect()).unwrap();
        k.loss_and_grad(&x, label).unwrap().0
    });
    let num_x = central_diff(&x, H, |p| cls.loss_and_grad(p, label).unwrap().0);
    (rel_err(pg.as_slice(), &num_p), rel_err(&ig, &num_x))
}

fn fixed_plan_loss(reals: &Matrix, centroids: &Matrix, plan: &TransportPlan) -> f64 {
    let mut v = 0.0;
    for (i, x) in reals.iter_rows().enumerate() {
        for (j, e) in centroids.iter_rows().enumerate() {
            v += plan.entries.get(i, j) * cosine_distance(x, e).unwrap();
        }
    }
    v
}

pub fn ot_case(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let d = 2 + rng.below(15);
    let (n, k) = (2 + rng.below(6), 2 + rng.below(5));
    let reals = random_matrix(&mut rng, n, d);
    let cents = random_matrix(&mut rng, k, d);
    let cost = cost_matrix(&reals, &cents).unwrap();
    let plan = sinkhorn(
        &cost,
        &MassDistribution::uniform(n).unwrap(),
        &MassDistribution::uniform(k).unwrap(),
        &SinkhornConfig::default(),
    )
    .unwrap();
    let g = ot_loss_grad_centroids(&reals, &cents, &plan).unwrap();
    let num = central_diff(cents.as_slice(), H, |p| {
        fixed_plan_loss(&reals, &Matrix::from_vec(k, d, p.to_vec()).unwrap(), &plan)
    });
    rel_err(g.as_slice(), &num)
}


/// Checks the structural invariants of a clustering of `points`.
pub fn check_cluster(points: &Matrix, res: &otfeat::clustering::ClusterResult) -> Result<(), String> {
    let k = res.centroids.rows();
    let m = points.rows();
    if res.assignment.len() != m || res.counts.len() != k || res.mass.len() != k {
        return Err("length mismatch".into());
    }
    if res.counts.iter().sum::<usize>() != m {
        return Err("counts do not sum to the point count".into());
    }
    if let Some(a) = res.assignment.iter().find(|&&a| a >= k) {
        return Err(format!("assignment {a} out of range"));
    }
    let total: f64 = res.mass.weights().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(format!("mass sums to {total}"));
    }
    for j in 0..k {
        if res.mass[j] != res.counts[j] as f64 / m as f64 {
            return Err(format!("mass[{j}] is not counts/M"));
        }
        if res.counts[j] == 0 {
            continue;
        }
        let members: Vec<usize> = (0..m).filter(|&i| res.assignment[i] == j).collect();
        if members.len() != res.counts[j] {
            return Err(format!("count {j} disagrees with assignment"));
        }
        for t in 0..points.cols() {
            let mean = members.iter().map(|&i| points.get(i, t)).sum::<f64>() / members.len() as f64;
            if (mean - res.centroids.get(j, t)).abs() > 1e-9 * (1.0 + mean.abs()) {
                return Err(format!("centroid {j} is not the mean of its members"));
            }
        }
    }
    let direct: f64 = (0..m)
        .map(|i| otfeat::numerics::squared_distance(points.row(i), res.centroids.row(res.assignment[i])))
        .sum();
    if (direct - res.inertia).abs() > 1e-9 * (1.0 + direct) {
        return Err("inertia disagrees with assignment".into());
    }
    Ok(())
}

/// Lloyd inertia never increases between assignment steps.
pub fn inertia_monotone(res: &otfeat::clustering::ClusterResult) -> bool {
    let mut seq = res.inertia_history.clone();
    seq.push(res.inertia);
    seq.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12)
}

/// Random clustering instance: a few Gaussian blobs plus background noise.
pub fn blob_points(rng: &mut RngState, m: usize, d: usize, blobs: usize) -> Matrix {
    let centres = random_matrix(rng, blobs, d);
    let mut pts = Matrix::zeros(m, d);
    for i in 0..m {
        let b = rng.below(blobs);
        for t in 0..d {
            pts.set(i, t, 3.0 * centres.get(b, t) + rng.normal());
        }
    }
    pts
}

/// Two tight blobs 10 apart; returns points and the two sample means.
pub fn two_blobs(rng: &mut RngState, per_blob: usize) -> (Matrix, [Vec<f64>; 2]) {
    let mut pts = Matrix::zeros(2 * per_blob, 2);
    let mut means = [vec![0.0; 2], vec![0.0; 2]];
    for i in 0..2 * per_blob {
        let b = i % 2;
        let p = [10.0 * b as f64 + 0.01 * rng.normal(), 0.01 * rng.normal()];
        pts.row_mut(i).copy_from_slice(&p);
        for t in 0..2 {
            means[b][t] += p[t] / per_blob as f64;
        }
    }
    (pts, means)
}

/// A small, fast experiment over a reduced dataset.
pub fn tiny_experiment() -> otfeat::pipeline::ExperimentConfig {
    use otfeat::dataio::DatasetSpec;
    use otfeat::pipeline::{ExperimentConfig, StageConfig};
    ExperimentConfig {
        dataset: DatasetSpec {
            dim: 8,
            base_classes: 4,
            novel_classes: 2,
            train_per_base_class: 30,
            pool_per_class: 6,
            test_per_class: 10,
            ..DatasetSpec::default()
        },
        stage: StageConfig {
            base_iterations: 40,
            gen_iterations: 8,
            finetune_iterations: 15,
            t_gen: 4,
            t_finetune: 8,
            k_centroids: 8,
            batch_real: 16,
            ..StageConfig::default()
        },
        shots: vec![1, 2],
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    }
}

pub const TINY_CLI_CONFIG: &str = r#"{
  "dataset": {"dim": 8, "base_classes": 4, "novel_classes": 2, "train_per_base_class": 30,
              "pool_per_class": 6, "test_per_class": 10},
  "stage": {"base_iterations": 40, "gen_iterations": 8, "finetune_iterations": 15,
            "t_gen": 4, "t_finetune": 8, "k_centroids": 8, "batch_real": 16}
}
"#;

pub fn otfeat(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_otfeat"))
        .args(args)
        .output()
        .expect("spawn otfeat")
}

/// Runs synth-data, base-train, gen-train, finetune and eval in `dir` and
/// returns every file produced, keyed by name.
pub fn cli_sequence(dir: &std::path::Path, config: &str, seed: u64) -> std::collections::BTreeMap<String, Vec<u8>> {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let (cfg, data, base, gen, ft, report) =
        (p("config.json"), p("data"), p("base.json"), p("gen.json"), p("ft.json"), p("report.json"));
    let s = seed.to_string();
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth-data", "--seed", &s, "--out", &data, "--config", &cfg],
        vec!["base-train", "--seed", &s, "--dataset", &data, "--out", &base, "--config", &cfg],
        vec!["gen-train", "--seed", &s, "--dataset", &data, "--checkpoint", &base, "--out", &gen, "--config", &cfg],
        vec!["finetune", "--seed", &s, "--dataset", &data, "--checkpoint", &gen, "--out", &ft,
             "--shots", "2", "--variant", "augmented", "--config", &cfg],
        vec!["eval", "--dataset", &data, "--checkpoint", &ft, "--out", &report, "--config", &cfg],
    ];
    for args in steps {
        let out = otfeat(&args);
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut files = std::collections::BTreeMap::new();
    collect(dir, dir, &mut files);
    files
}

fn collect(root: &std::path::Path, at: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
    for e in std::fs::read_dir(at).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            let key = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(key, std::fs::read(&path).unwrap());
        }
    }
}
