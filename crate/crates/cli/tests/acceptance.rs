//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its pinned tolerance. Run with
//! `cargo test -p sdkit-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdkit::codec::{decode_coeff, encode_coeff, encode_layer, form_from_parts, layer_size_report};
use sdkit::cost::{memory_compute_ratio, UnitEnergy};
use sdkit::decompose::{
    sd_decompose, EvolutionTrace, SdConfig, SdForm, SparsityMode,
};
use sdkit::mat::Mat;
use sdkit::quant::{ExponentSet, Pow2Matrix, Pow2Value};
use sdkit::rebuild::{count_flops, forward_trace, rebuild, softmax_metrics, Batch, LayerDims, ToyLayer};
use sdkit::reshape::{Provenance, ReshapedMatrix};
use sdkit::tensor_io::{container_bytes, Container, TensorKind, WeightTensor};
use sdkit::train::{
    adaptation_experiment, backprop, finetune_experiment, grads_factored, random_dense_net,
    SignConvention, TrainConfig,
};

fn provenance(rows: usize, cols: usize) -> Provenance {
    Provenance {
        tensor: "block".into(),
        kind: TensorKind::Dense2d,
        shape: vec![1, rows * cols],
        filter: 0,
        block: 0,
        row_offset: 0,
        total_rows: rows,
        pad: 0,
    }
}

fn block(values: Mat) -> ReshapedMatrix {
    let (rows, cols) = (values.rows(), values.cols());
    ReshapedMatrix { values, provenance: provenance(rows, cols) }
}

fn random_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
    Mat::from_vec(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_feasible(rng: &mut ChaCha8Rng, m: usize, r: usize, p: ExponentSet, density: f64) -> Pow2Matrix {
    let mut c = Pow2Matrix::zeros(m, r);
    for i in 0..m {
        for j in 0..r {
            if !rng.gen_bool(density) {
                continue;
            }
            c.set(
                i,
                j,
                Pow2Value::non_zero(
                    if rng.gen_bool(0.5) { 1 } else { -1 },
                    rng.gen_range(p.p_min..=p.p_max),
                ),
            );
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Criterion 1
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_energy_constant_lock() {
    let ratio = memory_compute_ratio(&UnitEnergy::default());
    assert!(ratio >= 9.5, "ratio {ratio} below 9.5");
    assert!((ratio - 9.51).abs() < 0.01, "ratio {ratio} not ~9.51");
    println!("criterion 1 (energy-constant lock, ratio {ratio:.4} >= 9.5): PASS");
}

// ---------------------------------------------------------------------------
// Criteria 2 + 3 share one 200-matrix decomposition sweep
// ---------------------------------------------------------------------------

struct SuiteRun {
    form: SdForm,
    trace: EvolutionTrace,
    rows: usize,
    keep: f64,
    mode: SparsityMode,
    pset: ExponentSet,
    w_norm: f64,
}

fn feasibility_suite() -> &'static Vec<SuiteRun> {
    static SUITE: OnceLock<Vec<SuiteRun>> = OnceLock::new();
    SUITE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let thetas = [0.0, 4e-3, 0.05];
        let keeps = [1.0, 0.5, 0.25];
        let modes =
            [SparsityMode::Element, SparsityMode::Vector, SparsityMode::ElementVector];
        let psets = [
            ExponentSet::new(-7, 0).unwrap(),
            ExponentSet::new(-4, 0).unwrap(),
            ExponentSet::new(-9, -2).unwrap(),
        ];
        (0..200)
            .map(|i| {
                let rows = rng.gen_range(4..=128);
                let w = random_mat(&mut rng, rows, 3);
                let w_norm = w.frobenius_norm();
                let mode = modes[i % modes.len()];
                let keep = keeps[(i / 3) % keeps.len()];
                let cfg = SdConfig {
                    theta: thetas[(i / 9) % thetas.len()],
                    vector_keep: keep,
                    sparsity_mode: mode,
                    pset: psets[(i / 27) % psets.len()],
                    ..SdConfig::default()
                };
                let (form, trace) = sd_decompose(&block(w), &cfg).expect("decompose succeeds");
                SuiteRun { form, trace, rows, keep, mode, pset: cfg.pset, w_norm }
            })
            .collect()
    })
}

#[test]
fn criterion_02_feasibility_suite() {
    let runs = feasibility_suite();
    assert_eq!(runs.len(), 200);
    for run in runs {
        assert!(
            run.form.c_e.is_feasible(run.pset),
            "coefficient outside the power-of-2 set"
        );
        if matches!(run.mode, SparsityMode::Vector | SparsityMode::ElementVector) {
            let bound = (run.rows as f64 * run.keep).ceil() as usize;
            let live = run.form.c_e.count_nonzero_rows();
            assert!(live <= bound, "{live} live rows exceed keep bound {bound}");
        }
    }
    println!("criterion 2 (feasibility on 200 random matrices up to 128x3): PASS");
}

#[test]
fn criterion_03_least_squares_monotonicity() {
    // Relative bound 1e-9 per fit step; the absolute term 1e-10 * ||W|| is
    // the numerical floor for residuals that are already at machine level.
    let runs = feasibility_suite();
    let mut checks = 0usize;
    for run in runs {
        for check in &run.trace.fit_checks {
            assert!(
                check.after <= check.before * (1.0 + 1e-9) + 1e-10 * run.w_norm,
                "{:?} fit increased the residual: {} -> {}",
                check.stage,
                check.before,
                check.after
            );
            checks += 1;
        }
    }
    assert!(checks > 200 * 2, "expected at least two fit checks per run");
    println!("criterion 3 (residual monotonicity over {checks} fit steps, rel 1e-9): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_planted_recovery() {
    // Identity: fixed point of all three steps, error ~0.
    let cfg = SdConfig { theta: 0.1, ..SdConfig::default() };
    let (form, _) = sd_decompose(&block(Mat::eye(4)), &cfg).unwrap();
    assert!(form.recon_error.unwrap() <= 1e-9);
    assert!(form.iterations_used <= 2);

    // Scale folding: 2*I recovers exactly with the scale in the basis.
    let (form, _) = sd_decompose(&block(Mat::eye(3).scale(2.0)), &SdConfig::default()).unwrap();
    assert!(form.recon_error.unwrap() <= 1e-9);

    // Planted orthonormal power-of-2 columns.
    let mut w = Mat::zeros(4, 3);
    for i in 0..4 {
        w.set(i, 0, 0.5);
        w.set(i, 1, if i % 2 == 0 { 0.5 } else { -0.5 });
    }
    let (form, _) = sd_decompose(&block(w), &SdConfig::default()).unwrap();
    assert!(
        form.recon_error.unwrap() <= 1e-9,
        "planted error {}",
        form.recon_error.unwrap()
    );
    println!("criterion 4 (planted recovery, Frobenius error <= 1e-9): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5
// ---------------------------------------------------------------------------

fn entropy_and_avg(c: &Pow2Matrix, p: ExponentSet) -> Option<(f64, f64)> {
    let enc = encode_coeff(c, p).unwrap();
    if enc.nonzeros == 0 {
        return None;
    }
    let mut freqs = std::collections::BTreeMap::new();
    for v in c.data() {
        if let Pow2Value::NonZero { sign, exp } = v {
            let key = (*sign, *exp);
            *freqs.entry(key).or_insert(0u64) += 1;
        }
    }
    let total = enc.nonzeros as f64;
    let entropy: f64 = freqs
        .values()
        .map(|&f| {
            let q = f as f64 / total;
            -q * q.log2()
        })
        .sum();
    Some((entropy, enc.code_bits as f64 / total))
}

#[test]
fn criterion_05_codec_round_trip() {
    // 1000 randomized feasible matrices.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    for _ in 0..1000 {
        let m = rng.gen_range(1..=64);
        let r = rng.gen_range(1..=4);
        let pmin = rng.gen_range(-9..=-1);
        let p = ExponentSet::new(pmin, pmin + rng.gen_range(0..=7)).unwrap();
        let density = rng.gen_range(0.0..=1.0);
        let c = random_feasible(&mut rng, m, r, p, density);
        let enc = encode_coeff(&c, p).unwrap();
        let back =
            decode_coeff(&enc.bitmap, &enc.codebook, &enc.payload, enc.payload_bits, (m, r), p)
                .unwrap();
        assert_eq!(back, c, "round trip mismatch");
        if let Some((entropy, avg)) = entropy_and_avg(&c, p) {
            assert!(avg <= entropy + 1.0 + 1e-12, "avg {avg} vs entropy {entropy}");
        }
    }

    // Exhaustive over all 2x2 feasible matrices with |P| = 2: each cell is
    // one of {0, +-2^-2, +-2^-1}.
    let p = ExponentSet::new(-2, -1).unwrap();
    let cell_values = [
        Pow2Value::Zero,
        Pow2Value::non_zero(1, -2),
        Pow2Value::non_zero(-1, -2),
        Pow2Value::non_zero(1, -1),
        Pow2Value::non_zero(-1, -1),
    ];
    let mut count = 0usize;
    for a in 0..5 {
        for b in 0..5 {
            for c_ in 0..5 {
                for d in 0..5 {
                    let c = Pow2Matrix::from_vec(
                        2,
                        2,
                        vec![cell_values[a], cell_values[b], cell_values[c_], cell_values[d]],
                    );
                    let enc = encode_coeff(&c, p).unwrap();
                    let back = decode_coeff(
                        &enc.bitmap,
                        &enc.codebook,
                        &enc.payload,
                        enc.payload_bits,
                        (2, 2),
                        p,
                    )
                    .unwrap();
                    assert_eq!(back, c);
                    if let Some((entropy, avg)) = entropy_and_avg(&c, p) {
                        assert!(avg <= entropy + 1.0 + 1e-12);
                    }
                    count += 1;
                }
            }
        }
    }
    assert_eq!(count, 625);
    println!("criterion 5 (codec identity: 1000 random + 625 exhaustive, Huffman <= H+1): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 6
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_shift_add_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5F1F);
    for _ in 0..1000 {
        let m = rng.gen_range(1..=16);
        let r = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=5);
        let p = ExponentSet::default();
        let density = rng.gen_range(0.2..0.9);
        let c = random_feasible(&mut rng, m, r, p, density);
        let b = Mat::from_vec(r, n, (0..r * n).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let fast = rebuild(&c, &b).unwrap();
        let naive = c.to_mat().matmul(&b);
        for (x, y) in fast.data().iter().zip(naive.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "shift-add {x} != naive {y}");
        }
    }
    println!("criterion 6 (shift-add == naive multiply, bit-for-bit, 1000 pairs): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 7
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD5);
    let h = 1e-4;
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-3);

    // Backprop vs. central finite differences on 50 random nets. Batches
    // whose pre-activations sit within 10*h of a ReLU kink are redrawn so
    // the finite-difference probe stays on one linear piece.
    let mut nets = 0usize;
    let mut attempts = 0usize;
    while nets < 50 {
        attempts += 1;
        assert!(attempts < 500, "could not find kink-free instances");
        let dims = [
            rng.gen_range(3..=5),
            rng.gen_range(4..=6),
            rng.gen_range(2..=4),
        ];
        let net = random_dense_net(&dims, rng.gen()).unwrap();
        let rows = 6;
        let x = Mat::from_vec(
            rows,
            dims[0],
            (0..rows * dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let y: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..dims[2])).collect();
        let batch = Batch { x, y };
        let trace = forward_trace(&net, &batch.x).unwrap();
        let margin = trace.preacts[0].data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin < 10.0 * h {
            continue;
        }
        nets += 1;
        let grads = backprop(&net, &batch).unwrap();
        for li in 0..net.layers.len() {
            let w = net.layers[li].weight().unwrap();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let probe = |delta: f64| -> f64 {
                        let mut probe_net = net.clone();
                        if let ToyLayer::Dense(l) = &mut probe_net.layers[li] {
                            l.w.set(i, j, l.w.get(i, j) + delta);
                        }
                        let t = forward_trace(&probe_net, &batch.x).unwrap();
                        softmax_metrics(&t.logits, &batch.y).unwrap().0
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let a = grads.weights[li].get(i, j);
                    assert!(rel(a, fd) <= 1e-4, "net {nets} layer {li} ({i},{j}): {a} vs {fd}");
                }
            }
        }
    }

    // Factored gradients vs. finite differences through W = C_e * B on a
    // quadratic objective, 50 instances.
    for _ in 0..50 {
        let (m, r, n) = (rng.gen_range(2..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let p = ExponentSet::default();
        let c = random_feasible(&mut rng, m, r, p, 0.7);
        let b = random_mat(&mut rng, r, n);
        let t = random_mat(&mut rng, m, n);
        let loss = |c_num: &Mat, b: &Mat| -> f64 {
            c_num.matmul(b).sub(&t).data().iter().map(|v| v * v).sum()
        };
        let c_num = c.to_mat();
        let d_w = c_num.matmul(&b).sub(&t).scale(2.0);
        let (d_b, d_c) = grads_factored(&d_w, &c_num, &b);
        for i in 0..r {
            for j in 0..n {
                let mut bp = b.clone();
                bp.set(i, j, bp.get(i, j) + h);
                let mut bm = b.clone();
                bm.set(i, j, bm.get(i, j) - h);
                let fd = (loss(&c_num, &bp) - loss(&c_num, &bm)) / (2.0 * h);
                assert!(rel(d_b.get(i, j), fd) <= 1e-4);
            }
        }
        for i in 0..m {
            for j in 0..r {
                let mut cp = c_num.clone();
                cp.set(i, j, cp.get(i, j) + h);
                let mut cm = c_num.clone();
                cm.set(i, j, cm.get(i, j) - h);
                let fd = (loss(&cp, &b) - loss(&cm, &b)) / (2.0 * h);
                assert!(rel(d_c.get(i, j), fd) <= 1e-4);
            }
        }
    }
    println!("criterion 7 (gradients match central differences within 1e-4, 50+50 nets): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_training_invariants() {
    let sd_cfg = SdConfig { theta: 7e-3, ..SdConfig::default() };
    let cfg = TrainConfig {
        epochs: 30,
        seed: 8,
        swa_start_epoch: Some(15),
        ..TrainConfig::default()
    };
    let (trainer, outcome) = finetune_experiment(8, &sd_cfg, &cfg, true).unwrap();

    assert_eq!(outcome.stats.mask_violations_total, 0, "frozen-mask violations");
    assert!(outcome.stats.feasible_after_every_step, "infeasible coefficients mid-run");
    assert!(
        outcome.stats.max_abs_counter <= cfg.theta_c,
        "counter {} exceeded theta_c",
        outcome.stats.max_abs_counter
    );
    assert!(outcome.metrics.iter().all(|m| m.mask_violations == 0));
    assert!(outcome.stats.steps >= 30, "expected at least one step per epoch");

    // The serialized coefficient training state holds integers and
    // booleans only: no real-valued shadow of C_e exists.
    fn assert_no_floats(v: &serde_json::Value) {
        match v {
            serde_json::Value::Number(n) => {
                assert!(n.is_i64() || n.is_u64(), "real-valued number in training state: {n}")
            }
            serde_json::Value::Array(a) => a.iter().for_each(assert_no_floats),
            serde_json::Value::Object(o) => o.values().for_each(assert_no_floats),
            _ => {}
        }
    }
    let state = trainer.coeff_state_json();
    assert_no_floats(&state);
    assert!(!state["layers"].as_array().unwrap().is_empty());
    println!("criterion 8 (30-epoch run: zero violations, feasible, counters bounded, discrete state): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 9
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_adaptation_efficacy() {
    let sd_cfg = SdConfig { theta: 7e-3, ..SdConfig::default() };
    let base = TrainConfig {
        epochs: 20,
        swa_start_epoch: Some(10),
        theta_c: 7,
        theta_g: 5e-3,
        sign_convention: SignConvention::Paper,
        ..TrainConfig::default()
    };

    let mut sd_accs = Vec::new();
    let mut dense_accs = Vec::new();
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for seed in 0..5u64 {
        let cfg = TrainConfig { seed, ..base };
        let out = adaptation_experiment(seed, &sd_cfg, &cfg).unwrap();
        sd_accs.push(out.sd_test_accuracy);
        dense_accs.push(out.dense_test_accuracy);
        curves.push(
            out.sd
                .metrics
                .iter()
                .filter(|m| m.split == "test")
                .map(|m| m.accuracy)
                .collect(),
        );
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let sd_median = median(sd_accs.clone());
    let dense_median = median(dense_accs.clone());
    assert!(
        sd_median >= 0.95 * dense_median,
        "SD median {sd_median} below 95% of dense median {dense_median}"
    );

    // Epoch-1 jump vs. average later gain, on the mean test curve.
    let epochs = curves[0].len();
    let mean_curve: Vec<f64> = (0..epochs)
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / curves.len() as f64)
        .collect();
    let jump = mean_curve[1] - mean_curve[0];
    let later = (mean_curve[epochs - 1] - mean_curve[1]) / (epochs - 2) as f64;
    assert!(
        jump > later,
        "epoch-1 jump {jump} does not exceed later per-epoch gain {later}"
    );
    println!(
        "criterion 9 (adaptation: SD median {sd_median:.4} >= 0.95 * dense {dense_median:.4}; jump {jump:.3} > {later:.4}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_accounting_cross_check() {
    // The 2x2 worked example, bit for bit.
    let mut c = Pow2Matrix::zeros(2, 2);
    c.set(0, 0, Pow2Value::non_zero(1, -1));
    c.set(1, 1, Pow2Value::non_zero(-1, -1));
    let form = form_from_parts(c, Mat::eye(2), ExponentSet::default(), provenance(2, 2));
    let enc = encode_layer(&form).unwrap();
    assert_eq!(enc.bitmap, vec![0x90]);
    assert_eq!(enc.payload, vec![0x40]);
    let report = layer_size_report(&enc);
    assert_eq!(report.original_bits, 128);
    assert_eq!(report.bitmap_bits, 8);
    assert_eq!(report.payload_bits, 8);
    assert_eq!(report.codebook_bits, 40);
    assert_eq!(report.basis_bits, 64);
    assert_eq!(report.header_bits, 144);
    assert_eq!(report.encoded_bits(), 8 * enc.to_bytes().len() as u64);
    assert!(report.compression_rate < 1.0);
    assert_eq!(report.avg_bits_per_nonzero, 1.0);

    // The conv FLOPs closed form, exactly.
    let dims = LayerDims::Conv { m: 64, c: 64, r: 3, s: 3, e: 32, f: 32 };
    let flops = count_flops(&dims, 1.0, 32, 32, None);
    assert_eq!(flops.equivalent_flops, 75_497_472.0);
    println!("criterion 10 (2x2 size accounting exact; conv FLOPs 75,497,472 exact): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 11
// ---------------------------------------------------------------------------

fn fixture_path(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut make = |name: &str, kind, shape: Vec<usize>| {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        WeightTensor::new(name, kind, shape, data).unwrap()
    };
    let container = Container::new(vec![
        make("conv1", TensorKind::Conv4d, vec![4, 3, 3, 3]),
        make("fc1", TensorKind::Dense2d, vec![8, 10]),
        make("head", TensorKind::Dense2d, vec![3, 8]),
    ]);
    let path = dir.join("fixture.sdtc");
    fs::write(&path, container_bytes(&container).unwrap()).unwrap();
    path
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let dir = std::env::temp_dir().join("sdkit-acceptance-det");
    fs::create_dir_all(&dir).unwrap();
    let input = fixture_path(&dir);
    let config = dir.join("layers.json");
    fs::write(&config, br#"{"head": {"skip": true}, "fc1": {"keep": 0.75}}"#).unwrap();

    let run = |tag: &str, threads: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let model = dir.join(format!("model-{tag}.sdm1"));
        let report = dir.join(format!("report-{tag}.json"));
        let verify_report = dir.join(format!("verify-{tag}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_sdkit"))
            .args(["decompose", "--threads", threads, "--input"])
            .arg(&input)
            .arg("--output")
            .arg(&model)
            .arg("--layer-config")
            .arg(&config)
            .arg("--report")
            .arg(&report)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let status = Command::new(env!("CARGO_BIN_EXE_sdkit"))
            .args(["verify", "--threads", threads, "--input"])
            .arg(&input)
            .arg("--model")
            .arg(&model)
            .arg("--report")
            .arg(&verify_report)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        (
            fs::read(&model).unwrap(),
            fs::read(&report).unwrap(),
            fs::read(&verify_report).unwrap(),
        )
    };

    let (m1, r1, v1) = run("a", "1");
    let (m2, r2, v2) = run("b", "1");
    let (m3, r3, v3) = run("c", "4");
    assert_eq!(m1, m2, "model bytes differ across runs");
    assert_eq!(m1, m3, "model bytes differ across thread counts");
    assert_eq!(r1, r2, "reports differ across runs");
    assert_eq!(r1, r3, "reports differ across thread counts");
    assert_eq!(v1, v2, "verify reports differ across runs");
    assert_eq!(v1, v3, "verify reports differ across thread counts");
    println!("criterion 11 (byte-identical model + reports across runs and thread counts): PASS");
}
