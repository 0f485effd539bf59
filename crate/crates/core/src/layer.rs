//! The split quantized linear layer.
//!
//! Input channels are routed to three paths (main, text outliers, vision
//! outliers), each with its own transform and its own slice of the weight
//! rows. The main path optionally carries a low-rank smoothing branch that is
//! subtracted from the transformed weight before quantization and added back
//! in factored form, and a low-rank compensation branch that corrects the
//! activation quantization residual of text tokens.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::io::{load_matrix, save_matrix};
use crate::lowrank::{build_branch, rank_for_ratio, LowRankBranch};
use crate::mocd::ChannelPartition;
use crate::quantizer::{quantize_masked, QuantSpec, AUX_BITS_FLOOR};
use crate::tensor::{split_columns, ActivationBatch, Matrix, ModalityTag};
use crate::transform::{apply_inv_left, apply_right, init_transform, Transform, TransformKind};

/// A fake-quantization operator together with its elementwise derivative.
pub trait QuantOp {
    fn apply(&self, m: &Matrix, spec: &QuantSpec) -> (Matrix, Matrix);
}

/// Round-to-nearest with the straight-through derivative: 1 inside the
/// clamp range, 0 where clipped. Parameters are recomputed per call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ste;

impl QuantOp for Ste {
    fn apply(&self, m: &Matrix, spec: &QuantSpec) -> (Matrix, Matrix) {
        quantize_masked(m, spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub act_spec: QuantSpec,
    pub weight_spec: QuantSpec,
    pub cws: bool,
    pub mac: bool,
    pub rank_cws: f64,
    pub rank_mac: f64,
    pub transform_kind: TransformKind,
    /// Initialise diagonal transforms from the per-channel activation peaks
    /// instead of the identity.
    pub smooth_init: bool,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self::bits(4, 4).expect("4 bits is valid")
    }
}

impl LayerConfig {
    /// Defaults at the given weight and activation bit widths.
    pub fn bits(wbits: u8, abits: u8) -> Result<Self> {
        Ok(Self {
            act_spec: QuantSpec::activation(abits)?,
            weight_spec: QuantSpec::weight(wbits)?,
            cws: true,
            mac: true,
            rank_cws: 0.02,
            rank_mac: 0.03,
            transform_kind: TransformKind::Diagonal,
            smooth_init: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.act_spec.validate()?;
        self.weight_spec.validate()?;
        for (name, r) in [("rank_cws", self.rank_cws), ("rank_mac", self.rank_mac)] {
            if !(r.is_finite() && r > 0.0 && r <= 1.0) {
                return Err(SplitqError::config(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitQLayer {
    pub(crate) partition: ChannelPartition,
    pub(crate) w_main: Matrix,
    pub(crate) w_text: Matrix,
    pub(crate) w_vision: Matrix,
    pub(crate) p_main: Transform,
    pub(crate) p_text: Transform,
    pub(crate) p_vision: Transform,
    pub(crate) branch_smooth: Option<LowRankBranch>,
    pub(crate) branch_comp: Option<LowRankBranch>,
    pub(crate) act_spec: QuantSpec,
    pub(crate) weight_spec: QuantSpec,
    pub(crate) aux_bits_floor: u8,
    pub(crate) cws: bool,
    pub(crate) mac: bool,
}

/// One recorded quantizer application.
#[derive(Debug, Clone)]
pub(crate) struct QTape {
    pub input: Matrix,
    pub out: Matrix,
    pub deriv: Matrix,
}

impl QTape {
    fn run(q: &dyn QuantOp, input: Matrix, spec: &QuantSpec) -> Self {
        let (out, deriv) = q.apply(&input, spec);
        Self { input, out, deriv }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PathTape {
    pub x: Matrix,
    /// `Q(X P)`.
    pub act: QTape,
    /// `Q(P^-1 W)`, minus the smoothing product on the main path.
    pub weight: QTape,
}

#[derive(Debug, Clone)]
pub(crate) struct BranchTape {
    pub u: QTape,
    pub v: QTape,
}

#[derive(Debug, Clone)]
pub(crate) struct CompTape {
    pub text_rows: Vec<usize>,
    pub residual: QTape,
    pub branch: BranchTape,
}

/// Every intermediate of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub main: PathTape,
    pub smooth: Option<BranchTape>,
    pub comp: Option<CompTape>,
    pub text: PathTape,
    pub vision: PathTape,
    pub output: Matrix,
}

fn check_rows(name: &str, w: &Matrix, rows: usize, d_out: usize) -> Result<()> {
    if w.rows() != rows || w.cols() != d_out {
        return Err(SplitqError::dims(format!(
            "{name} is {:?}, expected ({rows}, {d_out})",
            w.shape()
        )));
    }
    Ok(())
}

fn check_transform(name: &str, p: &Transform, dim: usize) -> Result<()> {
    if p.dim() != dim {
        return Err(SplitqError::dims(format!(
            "{name} has dim {}, path width is {dim}",
            p.dim()
        )));
    }
    Ok(())
}

fn check_branch(name: &str, b: &LowRankBranch, d_main: usize, d_out: usize) -> Result<()> {
    let r = b.rank();
    if b.u_basis.rows() != d_main || b.v_base.cols() != d_out || r > d_main.min(d_out) {
        return Err(SplitqError::dims(format!(
            "{name} of rank {r} with factors {:?} and {:?} on a {d_main}x{d_out} main path",
            b.u_basis.shape(),
            b.v_base.shape()
        )));
    }
    Ok(())
}

/// Adds `src` into the listed rows of `dst`.
fn add_rows(dst: &mut Matrix, rows: &[usize], src: &Matrix) {
    for (k, &i) in rows.iter().enumerate() {
        for (d, s) in dst.row_mut(i).iter_mut().zip(src.row(k)) {
            *d += s;
        }
    }
}

impl SplitQLayer {
    /// Assembles a layer from its parts, checking every shape invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        partition: ChannelPartition,
        weights: [Matrix; 3],
        transforms: [Transform; 3],
        branch_smooth: Option<LowRankBranch>,
        branch_comp: Option<LowRankBranch>,
        act_spec: QuantSpec,
        weight_spec: QuantSpec,
        cws: bool,
        mac: bool,
    ) -> Result<Self> {
        let [w_main, w_text, w_vision] = weights;
        let [p_main, p_text, p_vision] = transforms;
        let layer = Self {
            partition,
            w_main,
            w_text,
            w_vision,
            p_main,
            p_text,
            p_vision,
            branch_smooth,
            branch_comp,
            act_spec,
            weight_spec,
            aux_bits_floor: AUX_BITS_FLOOR,
            cws,
            mac,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.act_spec.validate()?;
        self.weight_spec.validate()?;
        let d_out = self.w_main.cols();
        let p = &self.partition;
        check_rows("w_main", &self.w_main, p.main().len(), d_out)?;
        check_rows("w_text", &self.w_text, p.text().len(), d_out)?;
        check_rows("w_vision", &self.w_vision, p.vision().len(), d_out)?;
        check_transform("p_main", &self.p_main, p.main().len())?;
        check_transform("p_text", &self.p_text, p.text().len())?;
        check_transform("p_vision", &self.p_vision, p.vision().len())?;
        for (name, b) in [
            ("branch_smooth", &self.branch_smooth),
            ("branch_comp", &self.branch_comp),
        ] {
            if let Some(b) = b {
                check_branch(name, b, p.main().len(), d_out)?;
            }
        }
        if self.cws && self.branch_smooth.is_none() {
            return Err(SplitqError::config("weight smoothing enabled without branch_smooth"));
        }
        if self.mac && self.branch_comp.is_none() {
            return Err(SplitqError::config("activation compensation enabled without branch_comp"));
        }
        Ok(())
    }

    /// Splits `w` (`D x D_out`) by the partition, initialises the transforms
    /// from the calibration batch and builds the enabled branches from the
    /// SVD of the main-path weight.
    pub fn build(
        w: &Matrix,
        batch: &ActivationBatch,
        partition: ChannelPartition,
        cfg: &LayerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if w.rows() != partition.dim() || batch.channels() != partition.dim() {
            return Err(SplitqError::dims(format!(
                "weight {:?} and batch width {} for a partition over {} channels",
                w.shape(),
                batch.channels(),
                partition.dim()
            )));
        }
        let (xm, xt, xv) = split_columns(batch.data(), &partition)?;
        let calib = |x: &Matrix| cfg.smooth_init.then_some(x.clone());
        let init = |x: &Matrix| init_transform(x.cols(), cfg.transform_kind, calib(x).as_ref());
        let (p_main, p_text, p_vision) = (init(&xm)?, init(&xt)?, init(&xv)?);
        let w_main = w.select_rows(partition.main());
        let w_text = w.select_rows(partition.text());
        let w_vision = w.select_rows(partition.vision());
        let (d_main, d_out) = w_main.shape();
        let branch = |on: bool, ratio: f64| -> Result<Option<LowRankBranch>> {
            if !on {
                return Ok(None);
            }
            let r = rank_for_ratio(ratio, d_main, d_out);
            build_branch(&w_main, &p_main, r).map(Some)
        };
        let branch_smooth = branch(cfg.cws, cfg.rank_cws)?;
        let branch_comp = branch(cfg.mac, cfg.rank_mac)?;
        Self::from_parts(
            partition,
            [w_main.clone(), w_text, w_vision],
            [p_main, p_text, p_vision],
            branch_smooth,
            branch_comp,
            cfg.act_spec,
            cfg.weight_spec,
            cfg.cws,
            cfg.mac,
        )
    }

    pub fn partition(&self) -> &ChannelPartition {
        &self.partition
    }

    pub fn weights(&self) -> [&Matrix; 3] {
        [&self.w_main, &self.w_text, &self.w_vision]
    }

    pub fn transforms(&self) -> [&Transform; 3] {
        [&self.p_main, &self.p_text, &self.p_vision]
    }

    pub fn branch_smooth(&self) -> Option<&LowRankBranch> {
        self.branch_smooth.as_ref()
    }

    pub fn branch_comp(&self) -> Option<&LowRankBranch> {
        self.branch_comp.as_ref()
    }

    pub fn act_spec(&self) -> QuantSpec {
        self.act_spec
    }

    pub fn weight_spec(&self) -> QuantSpec {
        self.weight_spec
    }

    pub fn aux_bits_floor(&self) -> u8 {
        self.aux_bits_floor
    }

    pub fn cws(&self) -> bool {
        self.cws
    }

    pub fn mac(&self) -> bool {
        self.mac
    }

    pub fn d_in(&self) -> usize {
        self.partition.dim()
    }

    pub fn d_out(&self) -> usize {
        self.w_main.cols()
    }

    /// Replaces both quantizer specs, e.g. with identity specs for exact
    /// cancellation checks.
    pub fn with_specs(mut self, act_spec: QuantSpec, weight_spec: QuantSpec) -> Result<Self> {
        act_spec.validate()?;
        weight_spec.validate()?;
        self.act_spec = act_spec;
        self.weight_spec = weight_spec;
        Ok(self)
    }

    /// Turns the branches off or back on. Enabling requires the branch.
    pub fn with_toggles(mut self, cws: bool, mac: bool) -> Result<Self> {
        self.cws = cws;
        self.mac = mac;
        self.validate()?;
        Ok(self)
    }

    /// The original `D x D_out` weight reassembled from the three slices.
    pub fn full_weight(&self) -> Matrix {
        let mut w = Matrix::zeros(self.d_in(), self.d_out());
        let p = &self.partition;
        for (rows, part) in [
            (p.main(), &self.w_main),
            (p.text(), &self.w_text),
            (p.vision(), &self.w_vision),
        ] {
            for (k, &i) in rows.iter().enumerate() {
                w.row_mut(i).copy_from_slice(part.row(k));
            }
        }
        w
    }

    pub fn forward(&self, batch: &ActivationBatch) -> Result<Matrix> {
        self.forward_with(batch, &Ste).map(|t| t.output)
    }

    fn outlier_path(
        &self,
        q: &dyn QuantOp,
        x: Matrix,
        p: &Transform,
        w: &Matrix,
    ) -> Result<(PathTape, Matrix)> {
        let act_spec = self.act_spec.with_floor(self.aux_bits_floor);
        let weight_spec = self.weight_spec.with_floor(self.aux_bits_floor);
        let act = QTape::run(q, apply_right(&x, p)?, &act_spec);
        let weight = QTape::run(q, apply_inv_left(w, p)?, &weight_spec);
        let y = act.out.matmul(&weight.out)?;
        Ok((PathTape { x, act, weight }, y))
    }

    fn branch_factors(&self, q: &dyn QuantOp, b: &LowRankBranch) -> Result<BranchTape> {
        let spec = self.weight_spec.with_floor(self.aux_bits_floor);
        Ok(BranchTape {
            u: QTape::run(q, b.u_star(&self.p_main)?, &spec),
            v: QTape::run(q, b.v_star(), &spec),
        })
    }

    pub(crate) fn forward_with(&self, batch: &ActivationBatch, q: &dyn QuantOp) -> Result<Tape> {
        self.validate()?;
        let (xm, xt, xv) = split_columns(batch.data(), &self.partition)?;

        let act = QTape::run(q, apply_right(&xm, &self.p_main)?, &self.act_spec);
        let wp = apply_inv_left(&self.w_main, &self.p_main)?;
        let (weight, smooth) = match (&self.branch_smooth, self.cws) {
            (Some(b), true) => {
                let bt = self.branch_factors(q, b)?;
                let resid = wp.sub(&b.u_star(&self.p_main)?.matmul(&b.v_star())?)?;
                (QTape::run(q, resid, &self.weight_spec), Some(bt))
            }
            _ => (QTape::run(q, wp, &self.weight_spec), None),
        };
        let mut y_main = act.out.matmul(&weight.out)?;
        if let Some(bt) = &smooth {
            y_main.add_assign(&act.out.matmul(&bt.u.out)?.matmul(&bt.v.out)?)?;
        }

        let mut comp = None;
        if self.mac {
            let b = self.branch_comp.as_ref().ok_or_else(|| {
                SplitqError::config("activation compensation enabled without branch_comp")
            })?;
            let text_rows = batch.rows_with(ModalityTag::Text);
            if !text_rows.is_empty() {
                let resid = act.input.sub(&act.out)?.select_rows(&text_rows);
                let spec = self.act_spec.with_floor(self.aux_bits_floor);
                let residual = QTape::run(q, resid, &spec);
                let branch = self.branch_factors(q, b)?;
                let corr = residual.out.matmul(&branch.u.out)?.matmul(&branch.v.out)?;
                add_rows(&mut y_main, &text_rows, &corr);
                comp = Some(CompTape {
                    text_rows,
                    residual,
                    branch,
                });
            }
        }

        let (text, y_text) = self.outlier_path(q, xt, &self.p_text, &self.w_text)?;
        let (vision, y_vision) = self.outlier_path(q, xv, &self.p_vision, &self.w_vision)?;
        let mut output = y_main;
        output.add_assign(&y_text)?;
        output.add_assign(&y_vision)?;
        Ok(Tape {
            main: PathTape { x: xm, act, weight },
            smooth,
            comp,
            text,
            vision,
            output,
        })
    }

    /// Writes `manifest.json` and one tensor dump per component into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut put = |name: &str, m: &Matrix| -> Result<String> {
            let file = format!("{name}.spqt");
            save_matrix(dir.join(&file), m)?;
            tensors.push(file.clone());
            Ok(file)
        };
        let weights = WeightFiles {
            main: put("w_main", &self.w_main)?,
            text: put("w_text", &self.w_text)?,
            vision: put("w_vision", &self.w_vision)?,
        };
        let mut transform = |name: &str, p: &Transform| -> Result<TransformEntry> {
            let m = match p.scales() {
                Some(s) => Matrix::new(1, s.len(), s.to_vec())?,
                None => p.matrix(),
            };
            Ok(TransformEntry {
                kind: p.kind(),
                file: put(name, &m)?,
            })
        };
        let transforms = TransformFiles {
            main: transform("p_main", &self.p_main)?,
            text: transform("p_text", &self.p_text)?,
            vision: transform("p_vision", &self.p_vision)?,
        };
        let mut branch = |name: &str, b: &Option<LowRankBranch>| -> Result<Option<BranchFiles>> {
            let Some(b) = b else { return Ok(None) };
            Ok(Some(BranchFiles {
                u_basis: put(&format!("{name}_u_basis"), &b.u_basis)?,
                v_base: put(&format!("{name}_v_base"), &b.v_base)?,
                gate: put(
                    &format!("{name}_gate"),
                    &Matrix::new(1, b.gate.len(), b.gate.clone())?,
                )?,
            }))
        };
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            d_in: self.d_in(),
            d_out: self.d_out(),
            partition: self.partition.clone(),
            act_spec: self.act_spec,
            weight_spec: self.weight_spec,
            aux_bits_floor: self.aux_bits_floor,
            cws: self.cws,
            mac: self.mac,
            weights,
            transforms,
            branch_smooth: branch("branch_smooth", &self.branch_smooth)?,
            branch_comp: branch("branch_comp", &self.branch_comp)?,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|e| {
            SplitqError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", manifest.display()),
            ))
        })?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(SplitqError::Format(format!(
                "manifest format {:?}, expected {MANIFEST_FORMAT:?}",
                m.format
            )));
        }
        if m.version != MANIFEST_VERSION {
            return Err(SplitqError::UnsupportedVersion(m.version));
        }
        if m.aux_bits_floor != AUX_BITS_FLOOR {
            return Err(SplitqError::Format(format!(
                "aux_bits_floor {} is not {AUX_BITS_FLOOR}",
                m.aux_bits_floor
            )));
        }
        let load = |f: &str| load_matrix(dir.join(f));
        let transform = |e: &TransformEntry| -> Result<Transform> {
            let t = load(&e.file)?;
            match e.kind {
                TransformKind::Diagonal if t.rows() == 1 => Transform::diagonal(t.into_vec()),
                TransformKind::Dense => Transform::dense(t),
                _ => Err(SplitqError::Format(format!(
                    "{}: diagonal transform stored as {:?}",
                    e.file,
                    t.shape()
                ))),
            }
        };
        let branch = |b: &Option<BranchFiles>| -> Result<Option<LowRankBranch>> {
            let Some(b) = b else { return Ok(None) };
            let gate = load(&b.gate)?;
            if gate.rows() != 1 {
                return Err(SplitqError::Format(format!("{}: gate must be 1 x r", b.gate)));
            }
            LowRankBranch::new(load(&b.u_basis)?, load(&b.v_base)?, gate.into_vec()).map(Some)
        };
        let layer = Self::from_parts(
            m.partition,
            [
                load(&m.weights.main)?,
                load(&m.weights.text)?,
                load(&m.weights.vision)?,
            ],
            [
                transform(&m.transforms.main)?,
                transform(&m.transforms.text)?,
                transform(&m.transforms.vision)?,
            ],
            branch(&m.branch_smooth)?,
            branch(&m.branch_comp)?,
            m.act_spec,
            m.weight_spec,
            m.cws,
            m.mac,
        )?;
        if layer.d_in() != m.d_in || layer.d_out() != m.d_out {
            return Err(SplitqError::Format(format!(
                "manifest declares {}x{}, tensors are {}x{}",
                m.d_in,
                m.d_out,
                layer.d_in(),
                layer.d_out()
            )));
        }
        Ok(layer)
    }
}

/// Unquantized `X W`.
pub fn forward_reference(w: &Matrix, batch: &ActivationBatch) -> Result<Matrix> {
    batch.data().matmul(w)
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "splitq-layer";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    d_in: usize,
    d_out: usize,
    partition: ChannelPartition,
    act_spec: QuantSpec,
    weight_spec: QuantSpec,
    aux_bits_floor: u8,
    cws: bool,
    mac: bool,
    weights: WeightFiles,
    transforms: TransformFiles,
    branch_smooth: Option<BranchFiles>,
    branch_comp: Option<BranchFiles>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFiles {
    main: String,
    text: String,
    vision: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformEntry {
    kind: TransformKind,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformFiles {
    main: TransformEntry,
    text: TransformEntry,
    vision: TransformEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchFiles {
    u_basis: String,
    v_base: String,
    gate: String,
}
