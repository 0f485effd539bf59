//! Calibration of transforms and branch gates against the unquantized
//! output, plus the channel-selection stability report.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::layer::{forward_reference, PathTape, QTape, QuantOp, SplitQLayer, Ste, Tape};
use crate::lowrank::LowRankBranch;
use crate::mocd::{build_partition, jaccard, MocdConfig};
use crate::quantizer::QuantSpec;
use crate::tensor::{ActivationBatch, Matrix};
use crate::transform::{Transform, TransformKind, MAX_SCALE, MIN_SCALE};

/// Upper bound on learnable parameters in finite-difference mode.
pub const FD_MAX_PARAMS: usize = 4096;
/// Largest dense transform that may be learned.
pub const DENSE_MAX_DIM: usize = 32;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub learn_p_main: bool,
    pub learn_p_text: bool,
    pub learn_p_vision: bool,
    pub learn_gates: bool,
    pub grad_mode: GradMode,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 5e-3,
            seed: 0,
            learn_p_main: true,
            learn_p_text: true,
            learn_p_vision: true,
            learn_gates: true,
            grad_mode: GradMode::Analytic,
        }
    }
}

impl CalibConfig {
    pub fn frozen() -> Self {
        Self {
            learn_p_main: false,
            learn_p_text: false,
            learn_p_vision: false,
            learn_gates: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SplitqError::config("steps must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SplitqError::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Per-step losses (mean squared error against `X W`), one entry before each
/// update plus one for the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_step: usize,
}

impl LossTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    Main,
    Text,
    Vision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    /// Log-scales of a diagonal transform.
    Diagonal(Path),
    /// Entries of a dense transform, row-major.
    Dense(Path),
    GateSmooth,
    GateComp,
}

/// Flattened view of the learnable parameters, in the order main, text and
/// vision transforms, then the smoothing and compensation gates.
struct Layout {
    slots: Vec<(Slot, usize)>,
}

fn transform_of(layer: &SplitQLayer, path: Path) -> &Transform {
    match path {
        Path::Main => &layer.p_main,
        Path::Text => &layer.p_text,
        Path::Vision => &layer.p_vision,
    }
}

fn transform_mut(layer: &mut SplitQLayer, path: Path) -> &mut Transform {
    match path {
        Path::Main => &mut layer.p_main,
        Path::Text => &mut layer.p_text,
        Path::Vision => &mut layer.p_vision,
    }
}

impl Layout {
    fn new(layer: &SplitQLayer, cfg: &CalibConfig) -> Result<Self> {
        let mut slots = Vec::new();
        for (on, path) in [
            (cfg.learn_p_main, Path::Main),
            (cfg.learn_p_text, Path::Text),
            (cfg.learn_p_vision, Path::Vision),
        ] {
            let t = transform_of(layer, path);
            if !on || t.dim() == 0 {
                continue;
            }
            match t.kind() {
                TransformKind::Diagonal => slots.push((Slot::Diagonal(path), t.dim())),
                TransformKind::Dense => {
                    if cfg.grad_mode != GradMode::FiniteDifference || t.dim() > DENSE_MAX_DIM {
                        return Err(SplitqError::config(format!(
                            "dense transforms are learnable only with finite differences \
                             at dim <= {DENSE_MAX_DIM}"
                        )));
                    }
                    slots.push((Slot::Dense(path), t.dim() * t.dim()));
                }
            }
        }
        if cfg.learn_gates {
            if let (true, Some(b)) = (layer.cws, &layer.branch_smooth) {
                slots.push((Slot::GateSmooth, b.rank()));
            }
            if let (true, Some(b)) = (layer.mac, &layer.branch_comp) {
                slots.push((Slot::GateComp, b.rank()));
            }
        }
        let layout = Self { slots };
        if cfg.grad_mode == GradMode::FiniteDifference && layout.len() > FD_MAX_PARAMS {
            return Err(SplitqError::config(format!(
                "finite differences over {} parameters (limit {FD_MAX_PARAMS})",
                layout.len()
            )));
        }
        Ok(layout)
    }

    fn len(&self) -> usize {
        self.slots.iter().map(|s| s.1).sum()
    }

    fn read(&self, layer: &SplitQLayer) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &(slot, _) in &self.slots {
            match slot {
                Slot::Diagonal(p) => {
                    let s = transform_of(layer, p).scales().expect("diagonal");
                    out.extend(s.iter().map(|d| d.ln()));
                }
                Slot::Dense(p) => out.extend_from_slice(transform_of(layer, p).matrix().as_slice()),
                Slot::GateSmooth => out.extend_from_slice(&gate(&layer.branch_smooth).gate),
                Slot::GateComp => out.extend_from_slice(&gate(&layer.branch_comp).gate),
            }
        }
        out
    }

    fn write(&self, base: &SplitQLayer, params: &[f64]) -> Result<SplitQLayer> {
        let mut layer = base.clone();
        let mut at = 0;
        for &(slot, n) in &self.slots {
            let v = &params[at..at + n];
            at += n;
            match slot {
                Slot::Diagonal(p) => *transform_mut(&mut layer, p) = Transform::diagonal_from_log(v),
                Slot::Dense(p) => {
                    let dim = transform_of(base, p).dim();
                    *transform_mut(&mut layer, p) = Transform::dense(Matrix::new(dim, dim, v.to_vec())?)?;
                }
                Slot::GateSmooth => gate_mut(&mut layer.branch_smooth).gate = v.to_vec(),
                Slot::GateComp => gate_mut(&mut layer.branch_comp).gate = v.to_vec(),
            }
        }
        Ok(layer)
    }
}

fn gate(b: &Option<LowRankBranch>) -> &LowRankBranch {
    b.as_ref().expect("slot exists only for present branches")
}

fn gate_mut(b: &mut Option<LowRankBranch>) -> &mut LowRankBranch {
    b.as_mut().expect("slot exists only for present branches")
}

/// Smooth stand-in for rounding, `q(x) = x + a sin(x)`, used to check the
/// analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct SmoothSurrogate {
    pub amplitude: f64,
}

impl QuantOp for SmoothSurrogate {
    fn apply(&self, m: &Matrix, _spec: &QuantSpec) -> (Matrix, Matrix) {
        let a = self.amplitude;
        (m.map(|x| x + a * x.sin()), m.map(|x| 1.0 + a * x.cos()))
    }
}

/// The optimised objective: MSE normalised by the mean square of the target.
struct Objective<'a> {
    batch: &'a ActivationBatch,
    target: Matrix,
    norm: f64,
    q: &'a dyn QuantOp,
}

impl<'a> Objective<'a> {
    fn new(layer: &SplitQLayer, batch: &'a ActivationBatch, q: &'a dyn QuantOp) -> Result<Self> {
        let target = forward_reference(&layer.full_weight(), batch)?;
        let ms = target.mean_square();
        Ok(Self {
            batch,
            target,
            norm: if ms > 0.0 { ms } else { 1.0 },
            q,
        })
    }

    fn mse(&self, tape: &Tape) -> Result<f64> {
        Ok(tape.output.sub(&self.target)?.mean_square())
    }

    fn loss(&self, layer: &SplitQLayer) -> Result<f64> {
        self.mse(&layer.forward_with(self.batch, self.q)?)
    }

    /// Raw MSE and the gradient of the normalised objective.
    fn gradient(&self, layer: &SplitQLayer, layout: &Layout, mode: GradMode) -> Result<(f64, Vec<f64>)> {
        match mode {
            GradMode::Analytic => {
                let tape = layer.forward_with(self.batch, self.q)?;
                let mse = self.mse(&tape)?;
                let grad = backward(layer, &tape, &self.target, self.norm, layout)?;
                Ok((mse, grad))
            }
            GradMode::FiniteDifference => {
                let mse = self.loss(layer)?;
                let params = layout.read(layer);
                let mut grad = Vec::with_capacity(params.len());
                let mut probe = params.clone();
                for i in 0..params.len() {
                    let h = FD_STEP * params[i].abs().max(1.0);
                    probe[i] = params[i] + h;
                    let up = self.loss(&layout.write(layer, &probe)?)?;
                    probe[i] = params[i] - h;
                    let down = self.loss(&layout.write(layer, &probe)?)?;
                    probe[i] = params[i];
                    grad.push((up - down) / (2.0 * h) / self.norm);
                }
                Ok((mse, grad))
            }
        }
    }
}

fn matmul_t(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(&b.transpose())
}

fn t_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.transpose().matmul(b)
}

/// Gradient of a quantizer input from the gradient of its output.
fn through(q: &QTape, d_out: &Matrix) -> Result<Matrix> {
    d_out.hadamard(&q.deriv)
}

/// `sum_i dXp_ij X_ij - sum_k dWp_jk W_jk / d_j^2` for `Xp = X diag(d)` and
/// `Wp = diag(d)^-1 W`, with `W` the unscaled weight-side factors.
fn diag_grad(
    d: &[f64],
    x: &Matrix,
    dxp: &Matrix,
    weight_side: &[(&Matrix, &Matrix)],
) -> Vec<f64> {
    let mut g = vec![0.0; d.len()];
    for i in 0..x.rows() {
        for (j, (xv, dv)) in x.row(i).iter().zip(dxp.row(i)).enumerate() {
            g[j] += xv * dv;
        }
    }
    for (w, dw) in weight_side {
        for (j, gj) in g.iter_mut().enumerate() {
            let s: f64 = w.row(j).iter().zip(dw.row(j)).map(|(a, b)| a * b).sum();
            *gj -= s / (d[j] * d[j]);
        }
    }
    g
}

/// Chain rule through `d = clamp(exp(theta))`.
fn log_grad(d: &[f64], dd: Vec<f64>) -> Vec<f64> {
    d.iter()
        .zip(dd)
        .map(|(&dj, g)| {
            if dj <= MIN_SCALE || dj >= MAX_SCALE {
                0.0
            } else {
                dj * g
            }
        })
        .collect()
}

fn gate_grad(dv: &Matrix, v_base: &Matrix) -> Vec<f64> {
    (0..v_base.rows())
        .map(|k| dv.row(k).iter().zip(v_base.row(k)).map(|(a, b)| a * b).sum())
        .collect()
}

fn outlier_grad(path: &PathTape, p: &Transform, w: &Matrix, g: &Matrix) -> Result<Vec<f64>> {
    let dxp = through(&path.act, &matmul_t(g, &path.weight.out)?)?;
    let dwp = through(&path.weight, &t_matmul(&path.act.out, g)?)?;
    let d = p.scales().expect("diagonal");
    Ok(log_grad(d, diag_grad(d, &path.x, &dxp, &[(w, &dwp)])))
}

/// Analytic straight-through gradient of the normalised objective with
/// respect to the parameters in `layout`.
fn backward(
    layer: &SplitQLayer,
    tape: &Tape,
    target: &Matrix,
    norm: f64,
    layout: &Layout,
) -> Result<Vec<f64>> {
    let n = (target.rows() * target.cols()).max(1) as f64;
    let g = tape.output.sub(target)?.scale(2.0 / (n * norm));
    let main = &tape.main;

    // Main path: Y_m = A B + A QU QV (+ MAC on text rows).
    let mut da = matmul_t(&g, &main.weight.out)?;
    let db = t_matmul(&main.act.out, &g)?;
    let d_resid = through(&main.weight, &db)?;
    let mut d_us: Option<Matrix> = None;
    let mut d_vs: Option<Matrix> = None;
    if let (Some(bt), Some(b)) = (&tape.smooth, &layer.branch_smooth) {
        let g_qv = matmul_t(&g, &bt.v.out)?;
        da.add_assign(&matmul_t(&g_qv, &bt.u.out)?)?;
        let mut du = through(&bt.u, &t_matmul(&main.act.out, &g_qv)?)?;
        let mut dv = through(&bt.v, &t_matmul(&main.act.out.matmul(&bt.u.out)?, &g)?)?;
        // Resid = Wp - U* V*.
        let u_star = b.u_star(&layer.p_main)?;
        du.add_assign(&matmul_t(&d_resid, &b.v_star())?.scale(-1.0))?;
        dv.add_assign(&t_matmul(&u_star, &d_resid)?.scale(-1.0))?;
        d_us = Some(du);
        d_vs = Some(dv);
    }
    let mut dxp = through(&main.act, &da)?;
    let mut d_uc: Option<Matrix> = None;
    let mut d_vc: Option<Matrix> = None;
    if let Some(ct) = &tape.comp {
        let gt = g.select_rows(&ct.text_rows);
        let bt = &ct.branch;
        let g_qv = matmul_t(&gt, &bt.v.out)?;
        let dr = through(&ct.residual, &matmul_t(&g_qv, &bt.u.out)?)?;
        d_uc = Some(through(&bt.u, &t_matmul(&ct.residual.out, &g_qv)?)?);
        d_vc = Some(through(
            &bt.v,
            &t_matmul(&ct.residual.out.matmul(&bt.u.out)?, &gt)?,
        )?);
        // R = Xp - Q(Xp) on text rows.
        for (k, &i) in ct.text_rows.iter().enumerate() {
            let mask = main.act.deriv.row(i).to_vec();
            for ((o, r), m) in dxp.row_mut(i).iter_mut().zip(dr.row(k)).zip(mask) {
                *o += r * (1.0 - m);
            }
        }
    }

    let mut grad = Vec::with_capacity(layout.len());
    for &(slot, _) in &layout.slots {
        match slot {
            Slot::Diagonal(Path::Main) => {
                let d = layer.p_main.scales().expect("diagonal");
                let mut side: Vec<(&Matrix, &Matrix)> = vec![(&layer.w_main, &d_resid)];
                if let (Some(b), Some(du)) = (&layer.branch_smooth, &d_us) {
                    side.push((&b.u_basis, du));
                }
                if let (Some(b), Some(du)) = (&layer.branch_comp, &d_uc) {
                    side.push((&b.u_basis, du));
                }
                grad.extend(log_grad(d, diag_grad(d, &main.x, &dxp, &side)));
            }
            Slot::Diagonal(Path::Text) => {
                grad.extend(outlier_grad(&tape.text, &layer.p_text, &layer.w_text, &g)?)
            }
            Slot::Diagonal(Path::Vision) => grad.extend(outlier_grad(
                &tape.vision,
                &layer.p_vision,
                &layer.w_vision,
                &g,
            )?),
            Slot::Dense(_) => {
                return Err(SplitqError::config(
                    "analytic gradients are available for diagonal transforms only",
                ))
            }
            Slot::GateSmooth => {
                let b = gate(&layer.branch_smooth);
                match &d_vs {
                    Some(dv) => grad.extend(gate_grad(dv, &b.v_base)),
                    None => grad.extend(vec![0.0; b.rank()]),
                }
            }
            Slot::GateComp => {
                let b = gate(&layer.branch_comp);
                match &d_vc {
                    Some(dv) => grad.extend(gate_grad(dv, &b.v_base)),
                    None => grad.extend(vec![0.0; b.rank()]),
                }
            }
        }
    }
    Ok(grad)
}

/// Raw MSE of `layer` and the gradient of the normalised objective, using
/// the given quantizer. Exposed for gradient checks.
pub fn objective_gradient(
    layer: &SplitQLayer,
    batch: &ActivationBatch,
    cfg: &CalibConfig,
    q: &dyn QuantOp,
) -> Result<(f64, Vec<f64>)> {
    let layout = Layout::new(layer, cfg)?;
    let obj = Objective::new(layer, batch, q)?;
    obj.gradient(layer, &layout, cfg.grad_mode)
}

/// Same as [`objective_gradient`] with the target shifted by `delta`, so the
/// objective is nonzero even where quantization is exact.
pub fn objective_gradient_shifted(
    layer: &SplitQLayer,
    batch: &ActivationBatch,
    cfg: &CalibConfig,
    q: &dyn QuantOp,
    delta: &Matrix,
) -> Result<(f64, Vec<f64>)> {
    let layout = Layout::new(layer, cfg)?;
    let mut obj = Objective::new(layer, batch, q)?;
    obj.target = obj.target.add(delta)?;
    obj.gradient(layer, &layout, cfg.grad_mode)
}

/// Gradient descent with a cosine-decayed step size on the parameters
/// enabled in `cfg`. Returns the snapshot with the lowest loss.
pub fn calibrate(
    layer: &SplitQLayer,
    batch: &ActivationBatch,
    cfg: &CalibConfig,
) -> Result<(SplitQLayer, LossTrace)> {
    calibrate_with(layer, batch, cfg, &Ste)
}

pub fn calibrate_with(
    layer: &SplitQLayer,
    batch: &ActivationBatch,
    cfg: &CalibConfig,
    q: &dyn QuantOp,
) -> Result<(SplitQLayer, LossTrace)> {
    cfg.validate()?;
    let layout = Layout::new(layer, cfg)?;
    let obj = Objective::new(layer, batch, q)?;
    if layout.len() == 0 {
        let loss = obj.loss(layer)?;
        if !loss.is_finite() {
            return Err(SplitqError::NonFiniteLoss { step: 0 });
        }
        let trace = LossTrace {
            losses: vec![loss; cfg.steps + 1],
            best_loss: loss,
            best_step: 0,
        };
        return Ok((layer.clone(), trace));
    }

    let mut params = layout.read(layer);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, usize, SplitQLayer)> = None;
    for step in 0..=cfg.steps {
        let current = layout.write(layer, &params)?;
        let (loss, grad) = if step < cfg.steps {
            obj.gradient(&current, &layout, cfg.grad_mode)?
        } else {
            (obj.loss(&current)?, Vec::new())
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(SplitqError::NonFiniteLoss { step });
        }
        losses.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, step, current));
        }
        if step == cfg.steps {
            break;
        }
        let lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
        let scale = step_scale(&grad);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * scale * g;
        }
    }
    let (best_loss, best_step, best_layer) = best.expect("at least one step");
    Ok((
        best_layer,
        LossTrace {
            losses,
            best_loss,
            best_step,
        },
    ))
}

fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

/// Divides the gradient by its root mean square, so the step length in
/// parameter space is set by the learning rate alone.
fn step_scale(grad: &[f64]) -> f64 {
    let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        1.0 / rms
    } else {
        0.0
    }
}

/// One row of the stability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub subset_size: usize,
    pub mean_jaccard: f64,
    pub std: f64,
}

/// Jaccard similarity of the outlier channels (`C_t ∪ C_v`) selected on
/// random token subsets against those selected on a reference subset.
/// Subsets of the same size as the token count use every token.
pub fn stability_report(
    batch: &ActivationBatch,
    cfg: &MocdConfig,
    subset_sizes: &[usize],
    reference_size: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<StabilityRow>> {
    let tokens = batch.tokens();
    for &s in subset_sizes.iter().chain([&reference_size]) {
        if s > tokens {
            return Err(SplitqError::config(format!(
                "subset of {s} tokens requested from a batch of {tokens}"
            )));
        }
        if s == 0 {
            return Err(SplitqError::config("subset sizes must be positive"));
        }
    }
    if trials == 0 {
        return Err(SplitqError::config("trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |size: usize| -> Result<ActivationBatch> {
        let mut idx = if size == tokens {
            (0..tokens).collect()
        } else {
            sample(&mut rng, tokens, size).into_vec()
        };
        idx.sort_unstable();
        batch.select_tokens(&idx)
    };
    let reference = build_partition(&draw(reference_size)?, cfg)?.outliers();
    let mut rows = Vec::with_capacity(subset_sizes.len());
    for &size in subset_sizes {
        let mut sims = Vec::with_capacity(trials);
        for _ in 0..trials {
            let sel = build_partition(&draw(size)?, cfg)?.outliers();
            sims.push(jaccard(&sel, &reference));
        }
        let mean = sims.iter().sum::<f64>() / trials as f64;
        let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / trials as f64;
        rows.push(StabilityRow {
            subset_size: size,
            mean_jaccard: mean,
            std: var.sqrt(),
        });
    }
    Ok(rows)
}
