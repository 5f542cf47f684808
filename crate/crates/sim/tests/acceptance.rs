//! End-to-end acceptance criteria. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (past the test harness capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedaudio_core::corruption::{gen_transition_matrix, inject_awgn, measure_snr, q_stats, resample_label};
use fedaudio_core::fl::{fedavg_aggregate, fedopt_step, n_sampled, FedConfig, Optimizer, RoundRecord, ServerState};
use fedaudio_core::metrics::{round_to_target, MetricKind};
use fedaudio_core::model::{self, Batch, ModelArch, ParamVector};
use fedaudio_core::partition::{dirichlet_assign, mean_client_entropy, DirichletSpec};
use fedaudio_core::{AudioClip, FeatureMatrix, LabelErrorSpec, NoiseSpec};
use fedaudio_sim::{run_experiment, ExperimentConfig, PoolExecutor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

fn worst_gradient_error(arch: &ModelArch, inputs: &[FeatureMatrix], targets: Vec<usize>, seed: u64) -> f64 {
    let mut params = model::init_params(arch, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in params.layout().to_vec() {
        if t.name.contains("bias") {
            for v in &mut params.values_mut()[t.range()] {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
    let batch = Batch::new(inputs.iter().collect(), targets).unwrap();
    let (_, grad) = model::loss_and_grad(&params, arch, &batch).unwrap();
    let loss = |p: &ParamVector| model::loss_and_grad(p, arch, &batch).unwrap().0;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grad.values()[i];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn random_matrix(r: &mut ChaCha8Rng, frames: usize, dims: usize) -> FeatureMatrix {
    FeatureMatrix::new(frames, dims, (0..frames * dims).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mlp = ModelArch::mlp(6, 8, 3);
    let inputs: Vec<_> = (0..4).map(|i| random_matrix(&mut r, 3 + i, 6)).collect();
    let e_mlp = worst_gradient_error(&mlp, &inputs, vec![0, 1, 2, 1], 2);
    let cg = ModelArch::ConvGru { input_dims: 12, conv_channels: (3, 4), gru_hidden: 5, dense_hidden: 6, n_classes: 3 };
    let inputs = vec![random_matrix(&mut r, 14, 12), random_matrix(&mut r, 18, 12)];
    let e_cg = worst_gradient_error(&cg, &inputs, vec![2, 0], 3);
    let took = start.elapsed();
    report(
        1,
        e_mlp < 1e-4 && e_cg < 1e-4 && took < Duration::from_secs(30),
        &format!("max rel err mlp {e_mlp:.2e}, conv_gru {e_cg:.2e}, {:.1}s", took.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_fedavg_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let template = model::init_params(&ModelArch::mlp(10, 12, 4), 0).unwrap();
    let mut updates: Vec<(ParamVector, usize)> = (0..7)
        .map(|_| {
            let mut p = ParamVector::zeros_like(&template);
            p.values_mut().iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
            (p, r.random_range(1..500))
        })
        .collect();
    let agg = fedavg_aggregate(&updates).unwrap();
    let total: usize = updates.iter().map(|u| u.1).sum();
    let mut oracle_err = 0.0f64;
    for i in 0..template.len() {
        let expect: f64 = updates.iter().map(|(p, n)| p.values()[i] * *n as f64).sum::<f64>() / total as f64;
        oracle_err = oracle_err.max((agg.values()[i] - expect).abs());
    }
    let mut order_err = 0.0f64;
    for _ in 0..10 {
        updates.shuffle(&mut r);
        let again = fedavg_aggregate(&updates).unwrap();
        order_err = agg.values().iter().zip(again.values()).fold(order_err, |m, (a, b)| m.max((a - b).abs()));
    }
    report(
        2,
        oracle_err <= 1e-12 && order_err <= 1e-12,
        &format!("oracle diff {oracle_err:.1e}, reorder diff {order_err:.1e}"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_fedopt_fixpoint() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let arch = ModelArch::mlp(10, 12, 4);
    let fresh = ServerState::new(model::init_params(&arch, 1).unwrap());
    let cfg = FedConfig::new(Optimizer::FedOpt, 1, 1.0, 0.1, 0);
    let identical = |a: &ServerState, b: &ServerState| {
        a.global_params.values().iter().zip(b.global_params.values()).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    // Repeated zero deltas from a fresh server keep both moments at zero.
    let mut state = fresh.clone();
    let mut zero_delta = true;
    for _ in 0..5 {
        let next = fedopt_step(&state, &state.global_params, &cfg).unwrap();
        zero_delta &= identical(&next, &fresh);
        state = next;
    }
    // With server_lr = 0, any delta and any moment history.
    let frozen_cfg = FedConfig { server_lr: 0.0, ..cfg };
    let mut state = fresh.clone();
    let mut frozen = true;
    for _ in 0..5 {
        let mut moved = state.global_params.clone();
        moved.values_mut().iter_mut().for_each(|v| *v += r.random_range(-5.0..5.0));
        let next = fedopt_step(&state, &moved, &frozen_cfg).unwrap();
        frozen &= identical(&next, &fresh);
        state = next;
    }
    report(3, zero_delta && frozen, &format!("zero delta identical: {zero_delta}, server_lr 0 identical: {frozen}"));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_q_generator() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut checked, mut bad) = (0, Vec::new());
    while checked < 1000 {
        let k = r.random_range(2..=20);
        let spec = LabelErrorSpec {
            error_ratio: r.random_range(0.001..0.999),
            error_sparsity: r.random_range(0.0..1.0),
            seed: r.random(),
        };
        if spec.validate(k).is_err() {
            continue;
        }
        checked += 1;
        let q = gen_transition_matrix(k, &spec).unwrap();
        let rows_ok = (0..k).all(|i| (q.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let diag_ok = (0..k).all(|i| q.get(i, i) == 1.0 - spec.error_ratio);
        let (ratios, sparsity) = q_stats(&q);
        let cells = (k * (k - 1)) as f64;
        let sparsity_ok = (sparsity - spec.error_sparsity).abs() <= 1.0 / cells;
        let stats_ok = ratios.iter().all(|x| (x - spec.error_ratio).abs() <= 1e-12)
            && sparsity == spec.zero_budget(k) as f64 / cells;
        if !(rows_ok && diag_ok && sparsity_ok && stats_ok) {
            bad.push(format!("K={k} {spec:?}"));
        }
    }
    report(4, bad.is_empty(), &format!("{} of {checked} specs violated {:?}", bad.len(), bad.first()));
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_label_noise_statistics() {
    let k = 6;
    let q = gen_transition_matrix(k, &LabelErrorSpec { error_ratio: 0.35, error_sparsity: 0.4, seed: 5 }).unwrap();
    let n = 100_000;
    let mut worst = 0.0f64;
    for c in 0..k {
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[resample_label(&q, c, 55, "client", c * n + i)] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            worst = worst.max((count as f64 / n as f64 - q.get(c, j)).abs());
        }
    }
    report(5, worst < 0.01, &format!("L-inf {worst:.4} over {k} classes x {n} samples"));
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_snr_fidelity() {
    let sine =
        AudioClip::new((0..16_000).map(|t| 0.5 * (2.0 * PI * 440.0 * t as f64 / 16_000.0).sin()).collect(), 16_000)
            .unwrap();
    let mut worst = 0.0f64;
    for target in [10.0, 20.0, 30.0] {
        for seed in 0..20 {
            let noisy = inject_awgn(&sine, &NoiseSpec { snr_db: target, seed }).unwrap();
            worst = worst.max((measure_snr(&sine, &noisy).unwrap() - target).abs());
        }
    }
    report(6, worst <= 0.1, &format!("max |measured - target| {worst:.2e} dB"));
}

// ---------------------------------------------------------------- experiments

const BASE: &str = r#"
n_seeds = 3
targets = [0.8]

[dataset]
kind = "synthetic"
n_classes = 4
n_speakers = 20
clips_per_speaker_per_class = 5
clip_seconds = 1.0
sample_rate = 16000

[fed]
rounds = 100
sample_ratio = 0.5
client_lr = 0.05
"#;

struct Runs {
    trials: Vec<Vec<RoundRecord>>,
    dir: PathBuf,
    took: Duration,
}

impl Runs {
    fn final_acc(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.last().unwrap().test_accuracy).collect()
    }

    fn mean_final_acc(&self) -> f64 {
        let v = self.final_acc();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn median_final_acc(&self) -> f64 {
        median(self.final_acc())
    }

    /// Per-seed rounds to 80% accuracy; a target never reached counts as infinite.
    fn rounds_to_80(&self) -> Vec<f64> {
        self.trials
            .iter()
            .map(|t| round_to_target(t, 0.8, MetricKind::Accuracy).rounds.map_or(f64::INFINITY, |r| r as f64))
            .collect()
    }

    fn median_rounds(&self) -> f64 {
        median(self.rounds_to_80())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn experiment(name: &str, body: &str) -> Runs {
    experiment_in(name, name, body)
}

fn experiment_in(name: &str, dir_name: &str, body: &str) -> Runs {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(dir_name);
    let _ = std::fs::remove_dir_all(&dir);
    let text = format!("experiment_id = \"{name}\"\noutput_dir = \"{}\"\n{body}", dir.display());
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let start = Instant::now();
    let out = run_experiment(&cfg, &PoolExecutor::from_env()).unwrap();
    Runs { trials: out.records(), dir, took: start.elapsed() }
}

macro_rules! cached {
    ($fn:ident, $name:expr, $body:expr) => {
        fn $fn() -> &'static Runs {
            static CELL: OnceLock<Runs> = OnceLock::new();
            CELL.get_or_init(|| experiment($name, &String::from($body)))
        }
    };
}

cached!(clean, "clean", BASE);
cached!(snr30, "snr30", format!("{BASE}\n[corruption]\nsnr_db = 30.0\n"));
cached!(snr10, "snr10", format!("{BASE}\n[corruption]\nsnr_db = 10.0\n"));
cached!(le01, "le0.1", format!("{BASE}\n[corruption]\nerror_ratio = 0.1\nerror_sparsity = 0.4\n"));
cached!(le03, "le0.3", format!("{BASE}\n[corruption]\nerror_ratio = 0.3\nerror_sparsity = 0.4\n"));
cached!(le05, "le0.5", format!("{BASE}\n[corruption]\nerror_ratio = 0.5\nerror_sparsity = 0.4\n"));
cached!(
    combined,
    "combined",
    format!("{BASE}\n[corruption]\nsnr_db = 10.0\nerror_ratio = 0.3\nerror_sparsity = 0.4\n")
);

fn dirichlet_body(alpha: f64) -> String {
    BASE.replace("n_seeds = 3", "n_seeds = 5").replace("rounds = 100", "rounds = 10")
        + &format!("\n[partition]\nscheme = \"dirichlet\"\nalpha = {alpha}\nn_clients = 10\n")
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_dirichlet_heterogeneity() {
    let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
    let entropy = |alpha: f64| {
        (0..5)
            .map(|seed| {
                let a = dirichlet_assign(&labels, 4, &DirichletSpec::new(20, alpha, seed)).unwrap();
                mean_client_entropy(&labels, &a, 4)
            })
            .sum::<f64>()
            / 5.0
    };
    let (h01, h05) = (entropy(0.1), entropy(0.5));
    let a01 = experiment("alpha0.1", &dirichlet_body(0.1));
    let a05 = experiment("alpha0.5", &dirichlet_body(0.5));
    let (acc01, acc05) = (a01.mean_final_acc(), a05.mean_final_acc());
    report(
        7,
        h01 < h05 && acc01 < acc05,
        &format!("entropy a=0.1 {h01:.3} < a=0.5 {h05:.3}; 10-round accuracy a=0.1 {acc01:.4} < a=0.5 {acc05:.4}"),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_clean_run() {
    let c = clean();
    let accs = c.final_acc();
    let pass = accs.iter().all(|&a| a >= 0.9) && c.took < Duration::from_secs(300);
    report(8, pass, &format!("final accuracy {} over 3 seeds, {:.1}s", fmt(&accs), c.took.as_secs_f64()));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_noise_trend() {
    let (c, s30, s10) = (clean(), snr30(), snr10());
    let (ac, a30, a10) = (c.median_final_acc(), s30.median_final_acc(), s10.median_final_acc());
    let (rc, r10) = (c.median_rounds(), s10.median_rounds());
    let pass = a10 < ac && r10 > rc && ac >= a30 && a30 >= a10;
    report(
        9,
        pass,
        &format!(
            "median accuracy clean {ac:.4} >= 30dB {a30:.4} >= 10dB {a10:.4}; rounds to 80% clean {rc} < 10dB {r10}"
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_label_error_trend() {
    let runs = [le01(), le03(), le05()];
    let acc: Vec<f64> = runs.iter().map(|r| r.median_final_acc()).collect();
    let rounds: Vec<f64> = runs.iter().map(|r| r.median_rounds()).collect();
    let monotone = acc.windows(2).all(|w| w[0] >= w[1]) && rounds.windows(2).all(|w| w[0] <= w[1]);
    let both = combined().median_final_acc();
    let alone = (snr10().median_final_acc(), le03().median_final_acc());
    let pass = monotone && both <= alone.0 && both <= alone.1;
    report(
        10,
        pass,
        &format!(
            "median accuracy {} and rounds {} at ratios 0.1/0.3/0.5; combined {both:.4} vs 10dB {:.4}, ratio 0.3 {:.4}",
            fmt(&acc),
            fmt(&rounds),
            alone.0,
            alone.1
        ),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_determinism() {
    let first = combined();
    let again = experiment_in(
        "combined",
        "combined-rerun",
        &format!("{BASE}\n[corruption]\nsnr_db = 10.0\nerror_ratio = 0.3\nerror_sparsity = 0.4\n"),
    );
    let a = std::fs::read(first.dir.join("summary.csv")).unwrap();
    let b = std::fs::read(again.dir.join("summary.csv")).unwrap();
    let dirichlet = dirichlet_body(0.5).replace("rounds = 10", "rounds = 3");
    let x = experiment_in("det", "det-a", &dirichlet);
    let y = experiment_in("det", "det-b", &dirichlet);
    let c = std::fs::read(x.dir.join("summary.csv")).unwrap();
    let d = std::fs::read(y.dir.join("summary.csv")).unwrap();
    report(
        11,
        a == b && c == d && first.trials == again.trials,
        &format!("summary CSV byte-identical on rerun: corrupted {}, dirichlet {}", a == b, c == d),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_sampled_client_counts() {
    let (m5, m10, m20) = (n_sampled(2112, 0.05), n_sampled(2112, 0.10), n_sampled(2112, 0.20));
    let small = n_sampled(3, 0.05);
    report(
        12,
        m5 == 106 && m20 == 424 && (m10 == 211 || m10 == 212) && small == 1,
        &format!(
            "n=2112: 5% -> {m5} (want 106), 10% -> {m10} (211 or 212), 20% -> {m20} (want 424); n=3 at 5% -> {small}"
        ),
    );
}
