//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DampError, Result};
use crate::model::{Model, GROUPS};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::train::{build_loss, LossNodes, Objective, StepBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    Sup,
    Sc,
    Idc,
    Im,
    All,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] = [
        LossSelector::Sup,
        LossSelector::Sc,
        LossSelector::Idc,
        LossSelector::Im,
        LossSelector::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSelector::Sup => "L_sup",
            LossSelector::Sc => "L_sc",
            LossSelector::Idc => "L_idc",
            LossSelector::Im => "L_im",
            LossSelector::All => "L_all",
        }
    }

    /// Terms of `nodes` summed into the checked scalar.
    fn terms(self, nodes: &LossNodes) -> Vec<Var> {
        match self {
            LossSelector::Sup => nodes.sup(),
            LossSelector::Sc => nodes.sc(),
            LossSelector::Idc => nodes.idc(),
            LossSelector::Im => nodes.im.into_iter().collect(),
            LossSelector::All => vec![nodes.total],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_tensor: 3,
            floor: 1e-4,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(DampError::Invalid(format!("finite-difference step {} must be positive", self.eps)));
        }
        if !(self.floor > 0.0) {
            return Err(DampError::Invalid("relative-error floor must be positive".into()));
        }
        if self.coords_per_tensor == 0 {
            return Err(DampError::Invalid("at least one coordinate per tensor".into()));
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub coords: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among the checked coordinates.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tol)
    }
}

/// Compares `analytic[i]` with central differences of `f` on sampled
/// coordinates of every tensor in `params`. `group_of` maps a tensor name
/// to its reporting group.
pub fn check_function(
    params: &ParamStore<f64>,
    analytic: &[Matrix<f64>],
    mut f: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    group_of: impl Fn(&str) -> String,
    cfg: &GradCheckConfig,
) -> Result<Vec<GroupReport>> {
    let mut out = check_functions(params, &[analytic.to_vec()], |p| Ok(vec![f(p)?]), group_of, cfg)?;
    Ok(out.remove(0))
}

/// Several scalar functions of the same parameters checked with shared
/// perturbations. `f` returns one value per entry of `analytic`.
pub fn check_functions(
    params: &ParamStore<f64>,
    analytic: &[Vec<Matrix<f64>>],
    mut f: impl FnMut(&ParamStore<f64>) -> Result<Vec<f64>>,
    group_of: impl Fn(&str) -> String,
    cfg: &GradCheckConfig,
) -> Result<Vec<Vec<GroupReport>>> {
    cfg.validate()?;
    for a in analytic {
        if a.len() != params.len() {
            return Err(DampError::Invalid(format!("{} gradients for {} tensors", a.len(), params.len())));
        }
    }
    let outputs = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports: Vec<Vec<GroupReport>> = vec![Vec::new(); outputs];
    let mut work = params.clone();
    for (i, (id, name, value)) in params.iter().enumerate() {
        let n = value.len();
        let picks: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let g = group_of(name);
        let pos = match reports.first().and_then(|r| r.iter().position(|r| r.group == g)) {
            Some(p) => p,
            None => {
                for r in reports.iter_mut() {
                    r.push(GroupReport {
                        group: g.clone(),
                        coords: 0,
                        max_rel_error: 0.0,
                        max_abs_grad: 0.0,
                    });
                }
                reports.first().map_or(0, |r| r.len() - 1)
            }
        };
        for c in picks {
            let orig = value.as_slice()[c];
            work.get_mut(id).as_mut_slice()[c] = orig + cfg.eps;
            let plus = f(&work)?;
            work.get_mut(id).as_mut_slice()[c] = orig - cfg.eps;
            let minus = f(&work)?;
            work.get_mut(id).as_mut_slice()[c] = orig;
            if plus.len() != outputs || minus.len() != outputs {
                return Err(DampError::Invalid(format!("expected {outputs} function values")));
            }
            for (o, rep) in reports.iter_mut().enumerate() {
                let numeric = (plus[o] - minus[o]) / (2.0 * cfg.eps);
                let a = analytic[o][i].as_slice()[c];
                let r = &mut rep[pos];
                r.coords += 1;
                r.max_rel_error = r.max_rel_error.max(relative_error(a, numeric, cfg.floor));
                r.max_abs_grad = r.max_abs_grad.max(a.abs());
            }
        }
    }
    Ok(reports)
}

fn selected_values(tape: &Tape<f64>, nodes: &LossNodes, sels: &[LossSelector]) -> Result<Vec<f64>> {
    sels.iter()
        .map(|&sel| {
            let terms = sel.terms(nodes);
            if terms.is_empty() {
                return Err(DampError::Invalid(format!("{} is not part of this objective", sel.name())));
            }
            Ok(terms.iter().map(|&v| tape.scalar_value(v)).sum())
        })
        .collect()
}

/// Checks one loss against central differences for every trainable group.
pub fn check_loss(
    model: &Model<f64>,
    batch: &StepBatch<f64>,
    obj: &Objective,
    sel: LossSelector,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    Ok(check_losses(model, batch, obj, &[sel], cfg)?.remove(0))
}

/// Checks several losses, sharing one forward pass per perturbation.
/// The target confidence gate is evaluated once at the unperturbed point
/// and held fixed.
pub fn check_losses(
    model: &Model<f64>,
    batch: &StepBatch<f64>,
    obj: &Objective,
    sels: &[LossSelector],
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    cfg.validate()?;
    let mut analytic = Vec::with_capacity(sels.len());
    let mut gate = Vec::new();
    for &sel in sels {
        let mut tape = Tape::new();
        let nodes = build_loss(model, &mut tape, batch, obj, None)?;
        let terms = sel.terms(&nodes);
        if terms.is_empty() {
            return Err(DampError::Invalid(format!("{} is not part of this objective", sel.name())));
        }
        let out = if terms.len() == 1 {
            terms[0]
        } else {
            let weighted: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
            tape.weighted_sum(&weighted)?
        };
        let grads = tape.backward(out)?;
        analytic.push(
            nodes
                .trainable
                .vars()
                .iter()
                .zip(model.params.iter())
                .map(|(&v, (_, _, p))| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
                .collect::<Vec<_>>(),
        );
        gate = nodes.gate;
    }
    let mut probe = model.clone();
    let reports = check_functions(
        &model.params,
        &analytic,
        |p| {
            probe.params.load_from(p)?;
            let mut tape = Tape::new();
            let fixed = Some(gate.as_slice()).filter(|g| !g.is_empty());
            let nodes = build_loss(&probe, &mut tape, batch, obj, fixed)?;
            selected_values(&tape, &nodes, sels)
        },
        |name| Model::<f64>::group_of(name).to_string(),
        cfg,
    )?;
    Ok(sels
        .iter()
        .zip(reports)
        .map(|(sel, groups)| {
            let ordered = GROUPS
                .iter()
                .filter_map(|g| groups.iter().find(|r| r.group == *g).cloned())
                .collect();
            GradCheckReport {
                loss: sel.name().to_string(),
                groups: ordered,
            }
        })
        .collect())
}
