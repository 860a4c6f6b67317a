//! First-order storage/energy estimates for dense vs. SD execution.
//!
//! The model charges every weight byte one DRAM fetch per inference pass
//! (dense: the f32 tensor; SD: the encoded layer bits), activations one
//! fetch and one write-back at their bit width, one SRAM staging pass over
//! the same bytes, and compute at per-op unit energies. It exists to expose
//! the memory-for-compute trade quantitatively, not to predict silicon
//! numbers: there is no tiling, reuse hierarchy or cycle model here.

use std::fmt;

use serde::Serialize;

use crate::codec::SizeReport;
use crate::rebuild::LayerDims;

/// Unit energy costs, pJ per 8-bit access or operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitEnergy {
    pub dram: f64,
    pub sram_lo: f64,
    pub sram_hi: f64,
    /// Working SRAM point; the published range is tied to unspecified
    /// capacities, so the operating value is a knob inside it.
    pub sram: f64,
    pub mac: f64,
    pub mult: f64,
    pub add: f64,
}

impl Default for UnitEnergy {
    fn default() -> Self {
        UnitEnergy {
            dram: 100.0,
            sram_lo: 1.36,
            sram_hi: 2.45,
            sram: 1.905,
            mac: 0.143,
            mult: 0.124,
            add: 0.019,
        }
    }
}

impl UnitEnergy {
    pub fn validate(&self) -> Result<(), CostError> {
        let ordered = self.dram > self.sram_hi
            && self.sram_hi >= self.sram
            && self.sram >= self.sram_lo
            && self.sram_lo > self.mac
            && self.mac > self.mult
            && self.mult > self.add
            && self.add > 0.0;
        if ordered {
            Ok(())
        } else {
            Err(CostError::Parameter(
                "unit energies must satisfy dram > sram_hi >= sram >= sram_lo > mac > mult > add > 0"
                    .into(),
            ))
        }
    }
}

/// Cheapest-memory-to-MAC energy ratio: `sram_lo / mac`.
pub fn memory_compute_ratio(u: &UnitEnergy) -> f64 {
    u.sram_lo / u.mac
}

/// Execution mode for a layer estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Dense,
    Sd,
}

/// Activation traffic for one layer: element counts and bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationSpec {
    pub input_count: u64,
    pub output_count: u64,
    pub bits: u32,
}

impl ActivationSpec {
    fn bytes(&self) -> f64 {
        (self.input_count + self.output_count) as f64 * f64::from(self.bits) / 8.0
    }
}

/// SD-side inputs for a layer estimate: the encoded size plus rebuild work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdCostInputs {
    pub size: SizeReport,
    pub ce_nonzeros: u64,
    pub basis_cols: u64,
    /// Non-zero fraction of the rebuilt weights.
    pub density: f64,
}

/// Byte, operation and energy totals for one layer or model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub dram_weight_bytes: f64,
    pub dram_activation_bytes: f64,
    pub sram_bytes: f64,
    pub macs: f64,
    pub shift_adds: f64,
    pub dram_pj: f64,
    pub sram_pj: f64,
    pub compute_pj: f64,
    pub total_pj: f64,
}

impl CostReport {
    fn add(&mut self, other: &CostReport) {
        self.dram_weight_bytes += other.dram_weight_bytes;
        self.dram_activation_bytes += other.dram_activation_bytes;
        self.sram_bytes += other.sram_bytes;
        self.macs += other.macs;
        self.shift_adds += other.shift_adds;
        self.dram_pj += other.dram_pj;
        self.sram_pj += other.sram_pj;
        self.compute_pj += other.compute_pj;
        self.total_pj += other.total_pj;
    }
}

/// Estimate one layer. SD mode requires its [`SdCostInputs`].
pub fn estimate_layer(
    mode: ExecMode,
    dims: &LayerDims,
    sd: Option<&SdCostInputs>,
    act: &ActivationSpec,
    u: &UnitEnergy,
) -> Result<CostReport, CostError> {
    u.validate()?;
    let (weight_bytes, macs, shift_adds) = match mode {
        ExecMode::Dense => (dims.weight_count() as f64 * 4.0, dims.dense_macs() as f64, 0.0),
        ExecMode::Sd => {
            let sd = sd.ok_or_else(|| {
                CostError::Parameter("sd mode requires encoded-size inputs".into())
            })?;
            if !(0.0..=1.0).contains(&sd.density) {
                return Err(CostError::Parameter("density must lie in [0, 1]".into()));
            }
            (
                sd.size.encoded_bits() as f64 / 8.0,
                dims.dense_macs() as f64 * sd.density,
                (sd.ce_nonzeros * sd.basis_cols) as f64,
            )
        }
    };
    let act_bytes = act.bytes();
    let dram_pj = (weight_bytes + act_bytes) * u.dram;
    let sram_bytes = weight_bytes + act_bytes;
    let sram_pj = sram_bytes * u.sram;
    let compute_pj = macs * u.mac + shift_adds * u.add;
    Ok(CostReport {
        dram_weight_bytes: weight_bytes,
        dram_activation_bytes: act_bytes,
        sram_bytes,
        macs,
        shift_adds,
        dram_pj,
        sram_pj,
        compute_pj,
        total_pj: dram_pj + sram_pj + compute_pj,
    })
}

/// Sum per-layer estimates into a model total.
pub fn estimate_model(layers: &[CostReport]) -> CostReport {
    let mut total = CostReport::default();
    for l in layers {
        total.add(l);
    }
    total
}

/// Errors from cost estimation.
#[derive(Debug)]
pub enum CostError {
    Parameter(String),
}

impl fmt::Display for CostError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostError::Parameter(m) => write!(f, "parameter error: {m}"),
        }
    }
}

impl std::error::Error for CostError {}
