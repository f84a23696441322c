//! Global InfoNCE, multi-positive region-category contrastive loss and
//! patch-to-patch distillation loss, each with a closed-form gradient.
//!
//! Inputs are raw embeddings; rows are L2-normalized here, so every
//! similarity is a cosine. Gradients are returned with respect to the raw
//! rows and the temperature.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub glo: f64,
    pub loc: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            glo: 1.0,
            loc: 1.0,
            dis: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.glo, self.loc, self.dis].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// For each sample i, the indices sharing its label (always including i).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let labels: Vec<&str> = labels.into_iter().collect();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            groups.entry(*l).or_default().push(i);
        }
        let sets = labels.iter().map(|l| groups[l].clone()).collect();
        Self { sets }
    }

    /// Every sample is only its own positive.
    pub fn singletons(n: usize) -> Self {
        Self {
            sets: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.sets[i].contains(&j)
    }
}

/// Loss value plus gradients w.r.t. the two row matrices and τ.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub d_a: Array2<f64>,
    pub d_b: Array2<f64>,
    pub d_tau: f64,
}

fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, min_rows: usize, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < min_rows {
        return Err(Error::invalid(format!(
            "{what} needs at least {min_rows} rows, got {}",
            a.nrows()
        )));
    }
    check_finite(a, what)?;
    check_finite(b, what)
}

/// Unit rows and the original norms.
pub(crate) fn normalize_rows(x: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|n| *n == 0.0) {
        return Err(Error::ZeroNorm(what.into()));
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Gradient w.r.t. raw rows given the gradient w.r.t. the unit rows.
fn through_normalization(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    for ((mut o, u), n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let proj = o.dot(&u);
        o.zip_mut_with(&u, |g, &uv| *g = (*g - proj * uv) / n);
    }
    out
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Converts `dL/dz` for logits `z = S/τ` into gradients on the raw inputs.
fn finish(
    value: f64,
    dz: Array2<f64>,
    z: &Array2<f64>,
    tau: f64,
    (ua, na): (&Array2<f64>, &Array1<f64>),
    (ub, nb): (&Array2<f64>, &Array1<f64>),
) -> LossGrad {
    let d_tau = -(&dz * z).sum() / tau;
    let ds = dz / tau;
    let d_ua = ds.dot(ub);
    let d_ub = ds.t().dot(ua);
    LossGrad {
        value,
        d_a: through_normalization(&d_ua, ua, na),
        d_b: through_normalization(&d_ub, ub, nb),
        d_tau,
    }
}

/// Symmetric image-text InfoNCE over N matched pairs.
pub fn loss_glo(v: ArrayView2<f64>, t: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(loss_glo_grad(v, t, tau)?.value)
}

pub fn loss_glo_grad(v: ArrayView2<f64>, t: ArrayView2<f64>, tau: f64) -> Result<LossGrad> {
    check_tau(tau)?;
    check_pair(v, t, 2, "loss_glo")?;
    let n = v.nrows();
    let (uv, nv) = normalize_rows(v, "loss_glo image rows")?;
    let (ut, nt) = normalize_rows(t, "loss_glo text rows")?;
    let z = uv.dot(&ut.t()) / tau;

    let lr = log_softmax_rows(&z);
    let lc = log_softmax_rows(&z.t().to_owned());
    let i2t = -(0..n).map(|i| lr[[i, i]]).sum::<f64>() / n as f64;
    let t2i = -(0..n).map(|i| lc[[i, i]]).sum::<f64>() / n as f64;
    let value = 0.5 * (i2t + t2i);

    let scale = 0.5 / n as f64;
    let mut dz = lr.mapv(f64::exp) + lc.mapv(f64::exp).t();
    for i in 0..n {
        dz[[i, i]] -= 2.0;
    }
    dz *= scale;
    Ok(finish(value, dz, &z, tau, (&uv, &nv), (&ut, &nt)))
}

/// Multi-positive contrastive loss between M region embeddings and M
/// category-text embeddings. The text-to-region direction uses the same
/// category-equality positive sets.
pub fn loss_loc(vr: ArrayView2<f64>, tc: ArrayView2<f64>, p: &PositiveSets, tau: f64) -> Result<f64> {
    Ok(loss_loc_grad(vr, tc, p, tau)?.value)
}

pub fn loss_loc_grad(vr: ArrayView2<f64>, tc: ArrayView2<f64>, p: &PositiveSets, tau: f64) -> Result<LossGrad> {
    check_tau(tau)?;
    check_pair(vr, tc, 2, "loss_loc")?;
    let m = vr.nrows();
    if p.len() != m {
        return Err(Error::Shape(format!("{} positive sets for {m} rows", p.len())));
    }
    for i in 0..m {
        if p.get(i).is_empty() {
            return Err(Error::invalid(format!("empty positive set for row {i}")));
        }
    }
    let (ur, nr) = normalize_rows(vr, "loss_loc region rows")?;
    let (uc, nc) = normalize_rows(tc, "loss_loc text rows")?;
    let z = ur.dot(&uc.t()) / tau;

    // Region -> category: softmax over texts k for each region i.
    let lr = log_softmax_rows(&z);
    // Category -> region: softmax over regions for each text j (rows of zᵀ).
    let lc = log_softmax_rows(&z.t().to_owned());

    let mut r2c = 0.0;
    let mut c2r = 0.0;
    let mut dz = lr.mapv(f64::exp) + lc.mapv(f64::exp).t();
    for i in 0..m {
        let pos = p.get(i);
        let w = 1.0 / pos.len() as f64;
        for &j in pos {
            r2c -= w * lr[[i, j]];
            c2r -= w * lc[[i, j]];
            // region i -> positive text j
            dz[[i, j]] -= w;
            // text i -> positive region j
            dz[[j, i]] -= w;
        }
    }
    let value = 0.5 * (r2c + c2r) / m as f64;
    dz *= 0.5 / m as f64;
    Ok(finish(value, dz, &z, tau, (&ur, &nr), (&uc, &nc)))
}

/// Mean `1 − cos` between matching rows.
pub fn loss_dis(p_roi: ArrayView2<f64>, p_local: ArrayView2<f64>) -> Result<f64> {
    Ok(loss_dis_grad(p_roi, p_local)?.value)
}

/// `d_tau` is always zero.
pub fn loss_dis_grad(p_roi: ArrayView2<f64>, p_local: ArrayView2<f64>) -> Result<LossGrad> {
    check_pair(p_roi, p_local, 1, "loss_dis")?;
    let m = p_roi.nrows() as f64;
    let (ur, nr) = normalize_rows(p_roi, "loss_dis roi rows")?;
    let (ul, nl) = normalize_rows(p_local, "loss_dis local rows")?;
    let cos: Array1<f64> = ur.rows().into_iter().zip(ul.rows()).map(|(a, b)| a.dot(&b)).collect();
    let value = cos.iter().map(|c| 1.0 - c).sum::<f64>() / m;
    let d_ur = &ul * (-1.0 / m);
    let d_ul = &ur * (-1.0 / m);
    Ok(LossGrad {
        value,
        d_a: through_normalization(&d_ur, &ur, &nr),
        d_b: through_normalization(&d_ul, &ul, &nl),
        d_tau: 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(Stage::S1),
            "s2" => Ok(Stage::S2),
            _ => Err(Error::invalid(format!("unknown stage {s:?}, expected s1 or s2"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub glo: Option<f64>,
    pub loc: Option<f64>,
    pub dis: Option<f64>,
}

/// Effective weights `(glo, loc, dis)` for a stage. Stage one pairs the
/// global loss with distillation, stage two with the region loss; the
/// off-stage term is rejected unless `allow_off_stage` is set.
pub fn stage_weights(
    c: &LossComponents,
    w: &LossWeights,
    stage: Stage,
    allow_off_stage: bool,
) -> Result<(f64, f64, f64)> {
    w.validate()?;
    let (off_name, off_present) = match stage {
        Stage::S1 => ("loc", c.loc.is_some()),
        Stage::S2 => ("dis", c.dis.is_some()),
    };
    if off_present && !allow_off_stage {
        return Err(Error::invalid(format!(
            "L_{off_name} requested in stage {stage} without the off-stage override"
        )));
    }
    for (name, v) in [("glo", c.glo), ("loc", c.loc), ("dis", c.dis)] {
        if v.is_none() {
            log::debug!("stage {stage}: L_{name} absent, contributes 0");
        }
    }
    Ok((w.glo, w.loc, w.dis))
}

pub fn total_loss(c: &LossComponents, w: &LossWeights, stage: Stage, allow_off_stage: bool) -> Result<f64> {
    let (wg, wl, wd) = stage_weights(c, w, stage, allow_off_stage)?;
    Ok(wg * c.glo.unwrap_or(0.0) + wl * c.loc.unwrap_or(0.0) + wd * c.dis.unwrap_or(0.0))
}
