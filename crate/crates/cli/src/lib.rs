//! Command implementations behind the `sdkit` binary.
//!
//! Subcommands: `decompose`, `encode`, `decode`, `verify`, `stats`,
//! `train-sim`. Every command is deterministic given its flags and seed;
//! reports are single JSON documents and training traces are JSON lines.
//!
//! Exit codes: 0 success, 1 validation/feasibility, 2 I/O or corruption,
//! 3 numerical failure.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use sdkit::codec::{
    self, model_size_report, read_model, write_model, CodecError, SdModelFile,
};
use sdkit::cost::{estimate_layer, estimate_model, memory_compute_ratio, ActivationSpec, CostReport, ExecMode, SdCostInputs, UnitEnergy};
use sdkit::decompose::{
    decompose_model, DecomposeError, LayerConfigMap, ModelOptions, SdConfig, SdForm, SdLayerGroup,
    SdModel, SdModelLayer, SparsityMode,
};
use sdkit::quant::{ExponentSet, FixedPointMatrix, Pow2Matrix, Pow2Value};
use sdkit::rebuild::{count_flops, rebuild_group_tensor, FlopsReport, LayerDims, RebuildCount};
use sdkit::reshape::Provenance;
use sdkit::tensor_io::{load_container, IoError, TensorKind};
use sdkit::train::{
    adaptation_experiment, finetune_experiment, metrics_to_jsonl, SignConvention, TrainConfig,
    TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

// ---------------------------------------------------------------------------
// Exit-code mapping
// ---------------------------------------------------------------------------

fn io_exit(e: &IoError) -> i32 {
    match e {
        IoError::Format(_) | IoError::Validation(_) => EXIT_VALIDATION,
        IoError::Corrupt(_) | IoError::Io(_) => EXIT_IO,
    }
}

fn codec_exit(e: &CodecError) -> i32 {
    match e {
        CodecError::Infeasible(_) | CodecError::Validation(_) => EXIT_VALIDATION,
        CodecError::Corrupt(_) => EXIT_IO,
    }
}

fn decompose_exit(e: &DecomposeError) -> i32 {
    match e {
        DecomposeError::Config(_) | DecomposeError::Validation(_) => EXIT_VALIDATION,
        DecomposeError::Numerical { .. } => EXIT_NUMERIC,
    }
}

fn train_exit(e: &TrainError) -> i32 {
    match e {
        TrainError::Parameter(_) => EXIT_VALIDATION,
        TrainError::Internal(_) | TrainError::Numerical(_) => EXIT_NUMERIC,
    }
}

macro_rules! try_or_exit {
    ($expr:expr, $map:expr) => {
        match $expr {
            Ok(v) => v,
            Err(e) => {
                eprintln!("sdkit: {e}");
                return $map(&e);
            }
        }
    };
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<(), std::io::Error> {
    fs::write(path, bytes)
}

// ---------------------------------------------------------------------------
// Shared flags
// ---------------------------------------------------------------------------

/// Decomposition parameters shared by `decompose`.
#[derive(Debug, Clone, Args)]
pub struct SdFlags {
    /// Element-sparsity threshold.
    #[arg(long, default_value_t = 4e-3)]
    pub theta: f64,
    /// Convergence tolerance on the quantization difference.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iter: usize,
    /// Smallest permitted exponent.
    #[arg(long, default_value_t = -7, allow_negative_numbers = true)]
    pub pmin: i32,
    /// Largest permitted exponent.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub pmax: i32,
    /// Row-keep fraction (enables vector sparsity when below 1).
    #[arg(long)]
    pub keep: Option<f64>,
    /// Basis width for FC layers.
    #[arg(long, default_value_t = 3)]
    pub fc_width: usize,
    /// Slice height for tall reshaped matrices.
    #[arg(long, default_value_t = 64)]
    pub block_rows: usize,
    /// Channel-pruning threshold on batch-norm scales.
    #[arg(long)]
    pub channel_threshold: Option<f64>,
}

impl SdFlags {
    pub fn to_options(&self, overrides: LayerConfigMap) -> Result<ModelOptions, DecomposeError> {
        let pset = ExponentSet::new(self.pmin, self.pmax)
            .map_err(|e| DecomposeError::Config(e.to_string()))?;
        let mut cfg = SdConfig {
            theta: self.theta,
            tol: self.tol,
            max_iter: self.max_iter,
            pset,
            ..SdConfig::default()
        };
        if let Some(keep) = self.keep {
            cfg.vector_keep = keep;
            cfg.sparsity_mode = SparsityMode::ElementVector;
        }
        Ok(ModelOptions {
            cfg,
            fc_basis_width: self.fc_width,
            block_rows: self.block_rows,
            channel_threshold: self.channel_threshold,
            overrides,
        })
    }
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Input tensor container (SDTC).
    #[arg(long)]
    pub input: PathBuf,
    /// Output model file (SDM1).
    #[arg(long)]
    pub output: PathBuf,
    /// Per-layer config JSON keyed by layer name.
    #[arg(long)]
    pub layer_config: Option<PathBuf>,
    /// Where to write the JSON report (stdout summary prints regardless).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub sd: SdFlags,
}

#[derive(Debug, Serialize)]
struct DecomposeLayerReport {
    name: String,
    mode: String,
    blocks: usize,
    recon_error: f64,
    sparsity: f64,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct DecomposeReport {
    layers: Vec<DecomposeLayerReport>,
    failures: Vec<String>,
}

fn group_summary(group: &SdLayerGroup) -> (f64, f64, usize) {
    let mut sq = 0.0;
    let mut zeros = 0usize;
    let mut cells = 0usize;
    let mut iterations = 0usize;
    for f in &group.forms {
        if let Some(e) = f.recon_error {
            sq += e * e;
        }
        cells += f.c_e.data().len();
        zeros += f.c_e.data().len() - f.c_e.count_nonzero();
        iterations = iterations.max(f.iterations_used);
    }
    let sparsity = if cells == 0 { 0.0 } else { zeros as f64 / cells as f64 };
    (sq.sqrt(), sparsity, iterations)
}

pub fn cmd_decompose(args: &DecomposeArgs) -> i32 {
    let overrides: LayerConfigMap = match &args.layer_config {
        None => LayerConfigMap::new(),
        Some(path) => {
            let bytes = try_or_exit!(fs::read(path), |_e: &std::io::Error| EXIT_IO);
            match serde_json::from_slice(&bytes) {
                Ok(map) => map,
                Err(e) => {
                    eprintln!("sdkit: layer config does not parse: {e}");
                    return EXIT_VALIDATION;
                }
            }
        }
    };
    let options = try_or_exit!(args.sd.to_options(overrides), decompose_exit);
    let container = try_or_exit!(load_container(&args.input), io_exit);
    let outcome = try_or_exit!(decompose_model(&container, &options), decompose_exit);

    let mut report = DecomposeReport { layers: Vec::new(), failures: Vec::new() };
    for layer in &outcome.model.layers {
        match layer {
            SdModelLayer::Sd(group) => {
                let (recon_error, sparsity, iterations) = group_summary(group);
                println!(
                    "layer {}: error {recon_error:.6e} sparsity {sparsity:.4} iterations {iterations}",
                    group.name
                );
                report.layers.push(DecomposeLayerReport {
                    name: group.name.clone(),
                    mode: "sd".into(),
                    blocks: group.forms.len(),
                    recon_error,
                    sparsity,
                    iterations,
                });
            }
            SdModelLayer::Dense(t) => {
                println!("layer {}: kept dense (skip list)", t.name);
                report.layers.push(DecomposeLayerReport {
                    name: t.name.clone(),
                    mode: "dense".into(),
                    blocks: 0,
                    recon_error: 0.0,
                    sparsity: 0.0,
                    iterations: 0,
                });
            }
        }
    }
    for failure in &outcome.failures {
        eprintln!("sdkit: layer {}: {}", failure.layer, failure.error);
        report.failures.push(format!("{}: {}", failure.layer, failure.error));
    }

    let bytes = try_or_exit!(write_model(&outcome.model), codec_exit);
    try_or_exit!(write_file(&args.output, &bytes), |_e: &std::io::Error| EXIT_IO);
    if let Some(path) = &args.report {
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        try_or_exit!(write_file(path, &json), |_e: &std::io::Error| EXIT_IO);
    }
    if !outcome.failures.is_empty() {
        return EXIT_NUMERIC;
    }
    EXIT_OK
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Original tensor container (SDTC).
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to check (SDM1).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct VerifyLayerReport {
    name: String,
    mode: String,
    frobenius_error: f64,
    feasible: bool,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    layers: Vec<VerifyLayerReport>,
    all_feasible: bool,
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    let container = try_or_exit!(load_container(&args.input), io_exit);
    let bytes = try_or_exit!(fs::read(&args.model), |_e: &std::io::Error| EXIT_IO);
    let file = try_or_exit!(read_model(&bytes), codec_exit);

    let mut report = VerifyReport { layers: Vec::new(), all_feasible: true };
    for layer in &file.model.layers {
        let name = layer.name().to_string();
        let Some(original) = container.tensor(&name) else {
            eprintln!("sdkit: layer {name}: not present in the container");
            return EXIT_VALIDATION;
        };
        match layer {
            SdModelLayer::Sd(group) => {
                let feasible = group.forms.iter().all(|f| f.c_e.is_feasible(f.pset));
                let rebuilt = try_or_exit!(rebuild_group_tensor(group), |e: &sdkit::rebuild::RebuildError| {
                    eprintln!("sdkit: layer {name}: rebuild failed");
                    match e {
                        sdkit::rebuild::RebuildError::Validation(_) => EXIT_VALIDATION,
                        sdkit::rebuild::RebuildError::Numeric(_) => EXIT_NUMERIC,
                    }
                });
                if rebuilt.shape != original.shape {
                    eprintln!("sdkit: layer {name}: shape mismatch");
                    return EXIT_VALIDATION;
                }
                let mut sq = 0.0;
                for (a, b) in rebuilt.data.iter().zip(&original.data) {
                    let d = f64::from(*a) - f64::from(*b);
                    sq += d * d;
                }
                let err = sq.sqrt();
                println!("layer {name}: error {err:.6e} feasible {feasible}");
                report.all_feasible &= feasible;
                report.layers.push(VerifyLayerReport {
                    name,
                    mode: "sd".into(),
                    frobenius_error: err,
                    feasible,
                });
            }
            SdModelLayer::Dense(t) => {
                let exact = t.data == original.data && t.shape == original.shape;
                println!("layer {name}: dense passthrough exact {exact}");
                report.all_feasible &= exact;
                report.layers.push(VerifyLayerReport {
                    name,
                    mode: "dense".into(),
                    frobenius_error: 0.0,
                    feasible: exact,
                });
            }
        }
    }
    if let Some(path) = &args.report {
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        try_or_exit!(write_file(path, &json), |_e: &std::io::Error| EXIT_IO);
    }
    if report.all_feasible {
        EXIT_OK
    } else {
        eprintln!("sdkit: feasibility violation");
        EXIT_VALIDATION
    }
}

// ---------------------------------------------------------------------------
// decoded-model JSON (encode / decode)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DecodedBlock {
    filter: usize,
    block: usize,
    row_offset: usize,
    total_rows: usize,
    pad: usize,
    m: usize,
    r: usize,
    n: usize,
    pmin: i32,
    pmax: i32,
    /// Non-zero entries as `[row, col, sign, exponent]`, row-major order.
    entries: Vec<[i64; 4]>,
    basis_q: Vec<i8>,
    basis_delta: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct DecodedLayer {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kept_channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<DecodedBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DecodedModel {
    version: u32,
    layers: Vec<DecodedLayer>,
}

fn decoded_from_model(file: &SdModelFile) -> Result<DecodedModel, CodecError> {
    let mut layers = Vec::new();
    for layer in &file.model.layers {
        match layer {
            SdModelLayer::Sd(group) => {
                let mut blocks = Vec::new();
                for f in &group.forms {
                    let fixed = match &f.basis_fixed {
                        Some(fx) => fx.clone(),
                        None => sdkit::quant::quantize_basis(&f.basis),
                    };
                    let mut entries = Vec::new();
                    for i in 0..f.c_e.rows() {
                        for j in 0..f.c_e.cols() {
                            if let Pow2Value::NonZero { sign, exp } = f.c_e.get(i, j) {
                                entries.push([i as i64, j as i64, i64::from(sign), i64::from(exp)]);
                            }
                        }
                    }
                    blocks.push(DecodedBlock {
                        filter: f.provenance.filter,
                        block: f.provenance.block,
                        row_offset: f.provenance.row_offset,
                        total_rows: f.provenance.total_rows,
                        pad: f.provenance.pad,
                        m: f.c_e.rows(),
                        r: f.c_e.cols(),
                        n: fixed.cols(),
                        pmin: f.pset.p_min,
                        pmax: f.pset.p_max,
                        entries,
                        basis_q: fixed.q().to_vec(),
                        basis_delta: fixed.delta(),
                    });
                }
                layers.push(DecodedLayer {
                    name: group.name.clone(),
                    kind: group.kind,
                    shape: group.shape.clone(),
                    mode: "sd".into(),
                    kept_channels: group.kept_channels.clone(),
                    blocks,
                    data: Vec::new(),
                });
            }
            SdModelLayer::Dense(t) => layers.push(DecodedLayer {
                name: t.name.clone(),
                kind: t.kind,
                shape: t.shape.clone(),
                mode: "dense".into(),
                kept_channels: None,
                blocks: Vec::new(),
                data: t.data.clone(),
            }),
        }
    }
    Ok(DecodedModel { version: codec::MODEL_VERSION, layers })
}

fn model_from_decoded(decoded: &DecodedModel) -> Result<SdModel, CodecError> {
    if decoded.version != codec::MODEL_VERSION {
        return Err(CodecError::Validation(format!(
            "unsupported decoded-model version {}",
            decoded.version
        )));
    }
    let mut layers = Vec::new();
    for layer in &decoded.layers {
        match layer.mode.as_str() {
            "sd" => {
                let mut shape = layer.shape.clone();
                if let Some(kept) = &layer.kept_channels {
                    shape[0] = kept.len();
                }
                let mut forms = Vec::new();
                for b in &layer.blocks {
                    let pset = ExponentSet::new(b.pmin, b.pmax)
                        .map_err(|e| CodecError::Validation(e.to_string()))?;
                    let mut c_e = Pow2Matrix::zeros(b.m, b.r);
                    for e in &b.entries {
                        let (i, j, sign, exp) =
                            (e[0] as usize, e[1] as usize, e[2] as i8, e[3] as i32);
                        if i >= b.m || j >= b.r || (sign != 1 && sign != -1) {
                            return Err(CodecError::Validation(format!(
                                "bad entry {e:?} in layer '{}'",
                                layer.name
                            )));
                        }
                        c_e.set(i, j, Pow2Value::non_zero(sign, exp));
                    }
                    if b.basis_q.len() != b.r * b.n {
                        return Err(CodecError::Validation(format!(
                            "basis length mismatch in layer '{}'",
                            layer.name
                        )));
                    }
                    let fixed =
                        FixedPointMatrix::new(b.r, b.n, b.basis_q.clone(), b.basis_delta);
                    let basis = sdkit::quant::dequantize_basis(&fixed);
                    forms.push(SdForm {
                        c_e,
                        basis,
                        basis_fixed: Some(fixed),
                        scales_folded: true,
                        recon_error: None,
                        iterations_used: 0,
                        pset,
                        provenance: Provenance {
                            tensor: layer.name.clone(),
                            kind: layer.kind,
                            shape: shape.clone(),
                            filter: b.filter,
                            block: b.block,
                            row_offset: b.row_offset,
                            total_rows: b.total_rows,
                            pad: b.pad,
                        },
                    });
                }
                layers.push(SdModelLayer::Sd(SdLayerGroup {
                    name: layer.name.clone(),
                    kind: layer.kind,
                    shape: layer.shape.clone(),
                    kept_channels: layer.kept_channels.clone(),
                    forms,
                }));
            }
            "dense" => {
                let tensor = sdkit::tensor_io::WeightTensor::new(
                    layer.name.clone(),
                    layer.kind,
                    layer.shape.clone(),
                    layer.data.clone(),
                )
                .map_err(|e| CodecError::Validation(e.to_string()))?;
                layers.push(SdModelLayer::Dense(tensor));
            }
            other => {
                return Err(CodecError::Validation(format!("unknown layer mode '{other}'")));
            }
        }
    }
    Ok(SdModel { layers })
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Input model file (SDM1).
    #[arg(long)]
    pub input: PathBuf,
    /// Output decoded-model JSON.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn cmd_decode(args: &DecodeArgs) -> i32 {
    let bytes = try_or_exit!(fs::read(&args.input), |_e: &std::io::Error| EXIT_IO);
    let file = try_or_exit!(read_model(&bytes), codec_exit);
    let decoded = try_or_exit!(decoded_from_model(&file), codec_exit);
    let json = serde_json::to_vec_pretty(&decoded).expect("decoded model serializes");
    try_or_exit!(write_file(&args.output, &json), |_e: &std::io::Error| EXIT_IO);
    EXIT_OK
}

#[derive(Debug, Clone, Args)]
pub struct EncodeArgs {
    /// Input decoded-model JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Output model file (SDM1).
    #[arg(long)]
    pub output: PathBuf,
}

pub fn cmd_encode(args: &EncodeArgs) -> i32 {
    let bytes = try_or_exit!(fs::read(&args.input), |_e: &std::io::Error| EXIT_IO);
    let decoded: DecodedModel = match serde_json::from_slice(&bytes) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("sdkit: decoded model does not parse: {e}");
            return EXIT_VALIDATION;
        }
    };
    let model = try_or_exit!(model_from_decoded(&decoded), codec_exit);
    let out = try_or_exit!(write_model(&model), codec_exit);
    try_or_exit!(write_file(&args.output, &out), |_e: &std::io::Error| EXIT_IO);
    EXIT_OK
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// Input model file (SDM1).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Output feature-map height for conv layers.
    #[arg(long, default_value_t = 32)]
    pub map_e: usize,
    /// Output feature-map width for conv layers.
    #[arg(long, default_value_t = 32)]
    pub map_f: usize,
    #[arg(long, default_value_t = 8)]
    pub act_bits: u32,
    /// Weight bit width used in the SD equivalent-FLOPs scaling.
    #[arg(long, default_value_t = 8)]
    pub sd_weight_bits: u32,
}

#[derive(Debug, Serialize)]
struct StatsLayer {
    name: String,
    mode: String,
    size: sdkit::codec::SizeReport,
    flops_dense: FlopsReport,
    flops_sd: Option<FlopsReport>,
    cost_dense: CostReport,
    cost_sd: Option<CostReport>,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    memory_compute_ratio: f64,
    layers: Vec<StatsLayer>,
    size_totals: sdkit::codec::SizeReport,
    cost_dense_total: CostReport,
    cost_sd_total: CostReport,
    energy_ratio_dense_over_sd: f64,
}

fn layer_dims(kind: TensorKind, shape: &[usize], e: usize, f: usize) -> LayerDims {
    match kind {
        TensorKind::Conv4d => LayerDims::Conv {
            m: shape[0],
            c: shape[1],
            r: shape[2],
            s: shape[3],
            e,
            f,
        },
        TensorKind::Dense2d => LayerDims::Fc { m: shape[0], c: shape[1] },
    }
}

fn activation_spec(dims: &LayerDims, bits: u32) -> ActivationSpec {
    match *dims {
        LayerDims::Conv { c, e, f, m, .. } => ActivationSpec {
            input_count: (c * e * f) as u64,
            output_count: (m * e * f) as u64,
            bits,
        },
        LayerDims::Fc { m, c } => ActivationSpec { input_count: c as u64, output_count: m as u64, bits },
    }
}

pub fn cmd_stats(args: &StatsArgs) -> i32 {
    let bytes = try_or_exit!(fs::read(&args.input), |_e: &std::io::Error| EXIT_IO);
    let file = try_or_exit!(read_model(&bytes), codec_exit);
    let size = try_or_exit!(model_size_report(&file), codec_exit);
    let unit = UnitEnergy::default();

    let mut layers = Vec::new();
    let mut dense_costs = Vec::new();
    let mut sd_costs = Vec::new();
    for (layer, entry) in file.model.layers.iter().zip(&size.layers) {
        let (kind, shape) = match layer {
            SdModelLayer::Sd(g) => (g.kind, g.shape.clone()),
            SdModelLayer::Dense(t) => (t.kind, t.shape.clone()),
        };
        let dims = layer_dims(kind, &shape, args.map_e, args.map_f);
        let act = activation_spec(&dims, args.act_bits);
        let flops_dense = count_flops(&dims, 1.0, 32, 32, None);
        let cost_dense = try_or_exit!(
            estimate_layer(ExecMode::Dense, &dims, None, &act, &unit),
            |_e: &sdkit::cost::CostError| EXIT_VALIDATION
        );
        dense_costs.push(cost_dense);

        let (flops_sd, cost_sd) = match layer {
            SdModelLayer::Sd(group) => {
                let rebuilt = try_or_exit!(rebuild_group_tensor(group), |e: &sdkit::rebuild::RebuildError| {
                    match e {
                        sdkit::rebuild::RebuildError::Validation(_) => EXIT_VALIDATION,
                        sdkit::rebuild::RebuildError::Numeric(_) => EXIT_NUMERIC,
                    }
                });
                let nonzero = rebuilt.data.iter().filter(|v| **v != 0.0).count();
                let density = nonzero as f64 / rebuilt.data.len() as f64;
                let ce_nonzeros: u64 =
                    group.forms.iter().map(|f| f.c_e.count_nonzero() as u64).sum();
                let basis_cols =
                    group.forms.first().map(|f| f.basis.cols() as u64).unwrap_or(0);
                let rebuild_count = RebuildCount { ce_nonzeros, basis_cols };
                let flops = count_flops(
                    &dims,
                    density,
                    args.sd_weight_bits,
                    args.act_bits,
                    Some(rebuild_count),
                );
                let sd_in = SdCostInputs {
                    size: entry.report,
                    ce_nonzeros,
                    basis_cols,
                    density,
                };
                let cost = try_or_exit!(
                    estimate_layer(ExecMode::Sd, &dims, Some(&sd_in), &act, &unit),
                    |_e: &sdkit::cost::CostError| EXIT_VALIDATION
                );
                sd_costs.push(cost);
                (Some(flops), Some(cost))
            }
            SdModelLayer::Dense(_) => {
                sd_costs.push(cost_dense);
                (None, None)
            }
        };
        layers.push(StatsLayer {
            name: entry.name.clone(),
            mode: entry.mode.clone(),
            size: entry.report,
            flops_dense,
            flops_sd,
            cost_dense,
            cost_sd,
        });
    }
    let cost_dense_total = estimate_model(&dense_costs);
    let cost_sd_total = estimate_model(&sd_costs);
    let report = StatsReport {
        memory_compute_ratio: memory_compute_ratio(&unit),
        layers,
        size_totals: size.totals,
        cost_dense_total,
        cost_sd_total,
        energy_ratio_dense_over_sd: if cost_sd_total.total_pj > 0.0 {
            cost_dense_total.total_pj / cost_sd_total.total_pj
        } else {
            0.0
        },
    };
    let json = serde_json::to_string_pretty(&report).expect("stats report serializes");
    println!("{json}");
    if let Some(path) = &args.report {
        try_or_exit!(write_file(path, json.as_bytes()), |_e: &std::io::Error| EXIT_IO);
    }
    EXIT_OK
}

// ---------------------------------------------------------------------------
// train-sim
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct TrainSimArgs {
    /// Task: "finetune" or "adapt".
    #[arg(long, default_value = "adapt")]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Decomposition threshold applied before training.
    #[arg(long, default_value_t = 7e-3)]
    pub theta: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub theta_g: f64,
    #[arg(long, default_value_t = 7)]
    pub theta_c: i32,
    #[arg(long, default_value_t = 0.02)]
    pub lr_b: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_dense: f64,
    /// "paper" (positive gradient switches up) or "descent".
    #[arg(long, default_value = "paper")]
    pub sign_convention: String,
    /// Epoch at which SWA snapshots begin.
    #[arg(long)]
    pub swa_start: Option<usize>,
    /// Metrics trace destination (JSON lines); stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn cmd_train_sim(args: &TrainSimArgs) -> i32 {
    let convention = match args.sign_convention.as_str() {
        "paper" => SignConvention::Paper,
        "descent" => SignConvention::Descent,
        other => {
            eprintln!("sdkit: unknown sign convention '{other}'");
            return EXIT_VALIDATION;
        }
    };
    let sd_cfg = SdConfig { theta: args.theta, ..SdConfig::default() };
    let cfg = TrainConfig {
        theta_g: args.theta_g,
        theta_c: args.theta_c,
        lr_b: args.lr_b,
        lr_dense: args.lr_dense,
        epochs: args.epochs,
        seed: args.seed,
        swa_start_epoch: args.swa_start,
        sign_convention: convention,
        ..TrainConfig::default()
    };
    let (trace, summary) = match args.task.as_str() {
        "adapt" => {
            let out = try_or_exit!(adaptation_experiment(args.seed, &sd_cfg, &cfg), train_exit);
            let summary = serde_json::json!({
                "task": "adapt",
                "seed": args.seed,
                "sd_test_accuracy": out.sd_test_accuracy,
                "dense_test_accuracy": out.dense_test_accuracy,
                "steps": out.sd.stats.steps,
                "mask_violations": out.sd.stats.mask_violations_total,
            });
            (metrics_to_jsonl(&out.sd.metrics), summary)
        }
        "finetune" => {
            let (trainer, out) =
                try_or_exit!(finetune_experiment(args.seed, &sd_cfg, &cfg, true), train_exit);
            let summary = serde_json::json!({
                "task": "finetune",
                "seed": args.seed,
                "sd_test_accuracy": sdkit::train::final_test_accuracy(&out.metrics),
                "steps": out.stats.steps,
                "mask_violations": out.stats.mask_violations_total,
                "max_abs_counter": out.stats.max_abs_counter,
                "feasible_after_every_step": out.stats.feasible_after_every_step,
                "ce_state_is_discrete": trainer.coeff_state_json()["layers"].is_array(),
            });
            (metrics_to_jsonl(&out.metrics), summary)
        }
        other => {
            eprintln!("sdkit: unknown task '{other}'");
            return EXIT_VALIDATION;
        }
    };
    match &args.report {
        Some(path) => {
            try_or_exit!(write_file(path, trace.as_bytes()), |_e: &std::io::Error| EXIT_IO);
        }
        None => print!("{trace}"),
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    EXIT_OK
}
