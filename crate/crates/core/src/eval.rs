//! Reconstruction metrics, weight-error deciles and the toggle ablation.

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, CalibConfig};
use crate::error::{Result, SplitqError};
use crate::layer::{forward_reference, LayerConfig, SplitQLayer};
use crate::mocd::{build_partition, ChannelPartition, MocdConfig};
use crate::quantizer::quantize;
use crate::tensor::{ActivationBatch, Matrix, ModalityTag};
use crate::transform::apply_inv_left;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    /// `NaN` when the batch has no tokens of that modality.
    pub mse_text: f64,
    pub mse_vision: f64,
}

fn rows_mse(diff: &Matrix, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    diff.select_rows(rows).mean_square()
}

/// Output MSE against `X W`, overall and per modality.
pub fn evaluate(layer: &SplitQLayer, batch: &ActivationBatch) -> Result<EvalReport> {
    let y = layer.forward(batch)?;
    let diff = y.sub(&forward_reference(&layer.full_weight(), batch)?)?;
    Ok(EvalReport {
        mse: diff.mean_square(),
        mse_text: rows_mse(&diff, &batch.rows_with(ModalityTag::Text)),
        mse_vision: rows_mse(&diff, &batch.rows_with(ModalityTag::Vision)),
    })
}

/// Dequantized weight each path effectively applies, mapped back to the
/// input channel space: `P Q(P^-1 W)` (with the smoothing branch on the
/// main path). Rows follow the original channel order.
pub fn effective_weight(layer: &SplitQLayer) -> Result<Matrix> {
    let floor = layer.aux_bits_floor();
    let wspec = layer.weight_spec();
    let [w_main, w_text, w_vision] = layer.weights();
    let [p_main, p_text, p_vision] = layer.transforms();

    let wp = apply_inv_left(w_main, p_main)?;
    let q_main = match (layer.cws(), layer.branch_smooth()) {
        (true, Some(b)) => {
            let u = b.u_star(p_main)?;
            let v = b.v_star();
            let aux = wspec.with_floor(floor);
            let resid = quantize(&wp.sub(&u.matmul(&v)?)?, &wspec);
            resid.add(&quantize(&u, &aux).matmul(&quantize(&v, &aux))?)?
        }
        _ => quantize(&wp, &wspec),
    };
    let outlier = |w: &Matrix, p| -> Result<Matrix> {
        let spec = wspec.with_floor(floor);
        Ok(quantize(&apply_inv_left(w, p)?, &spec))
    };
    let parts = [
        (layer.partition().main(), p_main.matrix().matmul(&q_main)?),
        (layer.partition().text(), p_text.matrix().matmul(&outlier(w_text, p_text)?)?),
        (
            layer.partition().vision(),
            p_vision.matrix().matmul(&outlier(w_vision, p_vision)?)?,
        ),
    ];
    let mut out = Matrix::zeros(layer.d_in(), layer.d_out());
    for (rows, m) in &parts {
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(k));
        }
    }
    Ok(out)
}

/// Mean absolute weight quantization error per input channel, sorted
/// ascending and averaged over ten equal-count bins.
pub fn weight_error_deciles(layer: &SplitQLayer) -> Result<Vec<f64>> {
    let d = layer.d_in();
    if d < 10 {
        return Err(SplitqError::config(format!(
            "decile report needs at least 10 channels, layer has {d}"
        )));
    }
    let err = effective_weight(layer)?.sub(&layer.full_weight())?;
    let mut mae: Vec<f64> = (0..d)
        .map(|i| err.row(i).iter().map(|v| v.abs()).sum::<f64>() / layer.d_out() as f64)
        .collect();
    mae.sort_by(f64::total_cmp);
    Ok((0..10)
        .map(|k| {
            let bin = &mae[k * d / 10..(k + 1) * d / 10];
            bin.iter().sum::<f64>() / bin.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Mocd,
    MocdCws,
    MocdCwsMac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Mocd,
        Variant::MocdCws,
        Variant::MocdCwsMac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mocd => "mocd",
            Variant::MocdCws => "mocd+cws",
            Variant::MocdCwsMac => "mocd+cws+mac",
        }
    }

    fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Mocd => (true, false, false),
            Variant::MocdCws => (true, true, false),
            Variant::MocdCwsMac => (true, true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub initial_mse: f64,
    pub mse: f64,
}

/// Builds, calibrates and evaluates one layer per variant. The base layer
/// config supplies bit widths, ranks and the transform init; its toggles are
/// overridden by each variant.
pub fn run_ablation(
    w: &Matrix,
    batch: &ActivationBatch,
    mocd: &MocdConfig,
    layer_cfg: &LayerConfig,
    calib: &CalibConfig,
) -> Result<Vec<AblationRow>> {
    let selected = build_partition(batch, mocd)?;
    Variant::ALL
        .iter()
        .map(|&variant| {
            let (split, cws, mac) = variant.toggles();
            let partition = if split {
                selected.clone()
            } else {
                ChannelPartition::trivial(batch.channels())
            };
            let cfg = LayerConfig {
                cws,
                mac,
                ..layer_cfg.clone()
            };
            let layer = SplitQLayer::build(w, batch, partition, &cfg)?;
            let (layer, trace) = calibrate(&layer, batch, calib)?;
            Ok(AblationRow {
                variant,
                initial_mse: trace.initial_loss(),
                mse: evaluate(&layer, batch)?.mse,
            })
        })
        .collect()
}
