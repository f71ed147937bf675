//! Material laws and their derivatives.
//!
//! Each mesh region carries an electric conductivity law (constant or the
//! five-parameter field-grading law), and constant permittivity, thermal
//! conductivity and volumetric heat capacity. The solver consumes not just
//! the law values but every partial derivative appearing in the adjoint and
//! sensitivity formulas: derivatives with respect to the squared field
//! magnitude, the temperature, and any designated material parameter, plus
//! the differential tensors that linearize the field-dependent laws.
//!
//! All quantities are strict SI: V/m, S/m, F/m, W/(m K), J/(K m^3), K.

use crate::error::{CoreError, Result};
use std::collections::BTreeMap;

pub type Vec2 = [f64; 2];
pub type Tensor2 = [[f64; 2]; 2];

/// Parameters of the field-grading conductivity law
/// sigma(E, theta) = p1 * (1 + p4^((E-p2)/p2)) / (1 + p4^((E-p3)/p2))
///                   * exp(-p5 * (1/theta - 1/theta0)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgmParams {
    /// Baseline conductivity (S/m).
    pub p1: f64,
    /// Transition field strength (V/m).
    pub p2: f64,
    /// Saturation field strength (V/m).
    pub p3: f64,
    /// Steepness (dimensionless).
    pub p4: f64,
    /// Thermal activation (K).
    pub p5: f64,
    /// Reference temperature (K).
    pub theta0: f64,
}

impl FgmParams {
    /// Values the parameters are initially set to in the reference study
    /// (transition and saturation fields read in kV/mm).
    pub fn reference() -> Self {
        FgmParams {
            p1: 1e-10,
            p2: 0.7e6,
            p3: 2.4e6,
            p4: 1864.0,
            p5: 3713.59,
            theta0: 293.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.p1 > 0.0
            && self.p2 > 0.0
            && self.p3 > self.p2
            && self.p4 > 1.0
            && self.p5 >= 0.0
            && self.theta0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Material(format!(
                "invalid FGM parameters (need p1>0, p2>0, p3>p2, p4>1, p5>=0, theta0>0): {self:?}"
            )))
        }
    }

    /// Large-field saturation value sigma(E -> inf, theta0) / p1.
    pub fn saturation_ratio(&self) -> f64 {
        (self.p4.ln() * (self.p3 - self.p2) / self.p2).exp()
    }
}

/// ln(1 + e^x) without overflow.
fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function 1 / (1 + e^-x) without overflow.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Field-grading conductivity, evaluated in log space so that fields up to
/// 1e9 V/m and beyond cannot overflow.
pub fn fgm_sigma(e: f64, theta: f64, p: &FgmParams) -> f64 {
    let l = p.p4.ln();
    let a = l * (e - p.p2) / p.p2;
    let b = l * (e - p.p3) / p.p2;
    let ln_field = log1pexp(a) - log1pexp(b);
    let thermal = -p.p5 * (1.0 / theta - 1.0 / p.theta0);
    p.p1 * (ln_field + thermal).exp()
}

/// Analytic partial derivatives of [`fgm_sigma`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FgmPartials {
    pub sigma: f64,
    /// d sigma / d(E^2); at E = 0 the rank-one term of the differential
    /// tensor vanishes, so the value is reported as 0 there.
    pub dsigma_de2: f64,
    pub dsigma_dtheta: f64,
    /// With respect to p1..p5, in order.
    pub dsigma_dp: [f64; 5],
}

pub fn fgm_partials(e: f64, theta: f64, p: &FgmParams) -> FgmPartials {
    let sigma = fgm_sigma(e, theta, p);
    let l = p.p4.ln();
    let a = (e - p.p2) / p.p2;
    let b = (e - p.p3) / p.p2;
    let sa = logistic(l * a);
    let sb = logistic(l * b);

    let dsigma_de = sigma * l / p.p2 * (sa - sb);
    let dsigma_de2 = if e > 0.0 { dsigma_de / (2.0 * e) } else { 0.0 };
    let dsigma_dtheta = sigma * p.p5 / (theta * theta);
    let dlns_dp2 = -(l / (p.p2 * p.p2)) * (sa * e - sb * (e - p.p3));
    let dlns_dp3 = sb * l / p.p2;
    let dlns_dp4 = (sa * a - sb * b) / p.p4;
    let dlns_dp5 = -(1.0 / theta - 1.0 / p.theta0);

    FgmPartials {
        sigma,
        dsigma_de2,
        dsigma_dtheta,
        dsigma_dp: [
            sigma / p.p1,
            sigma * dlns_dp2,
            sigma * dlns_dp3,
            sigma * dlns_dp4,
            sigma * dlns_dp5,
        ],
    }
}

#[derive(Debug, Clone)]
pub enum SigmaLaw {
    Constant(f64),
    Fgm(FgmParams),
}

/// Material of one mesh region. Permittivity, thermal conductivity and heat
/// capacity are constants; the solver still carries their temperature and
/// parameter derivatives (zero here) through the adjoint and sensitivity
/// assembly, so a law change stays local to this module.
#[derive(Debug, Clone)]
pub struct RegionMaterial {
    pub sigma: SigmaLaw,
    /// Permittivity (F/m).
    pub epsilon: f64,
    /// Thermal conductivity (W/(m K)).
    pub lambda: f64,
    /// Volumetric heat capacity (J/(K m^3)).
    pub c_v: f64,
}

impl RegionMaterial {
    pub fn validate(&self) -> Result<()> {
        match &self.sigma {
            SigmaLaw::Constant(s) if *s < 0.0 => {
                return Err(CoreError::Material(format!(
                    "negative constant conductivity {s}"
                )))
            }
            SigmaLaw::Fgm(p) => p.validate()?,
            _ => {}
        }
        if self.epsilon <= 0.0 || self.lambda <= 0.0 || self.c_v <= 0.0 {
            return Err(CoreError::Material(format!(
                "epsilon, lambda and c_v must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// True when sigma depends on the local field magnitude.
    pub fn field_dependent(&self) -> bool {
        matches!(self.sigma, SigmaLaw::Fgm(_))
    }

    /// True when sigma depends on temperature.
    pub fn theta_dependent(&self) -> bool {
        matches!(&self.sigma, SigmaLaw::Fgm(p) if p.p5 != 0.0)
    }
}

/// All laws and derivatives of one material evaluated at a single
/// (field, temperature) operating point.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaterialState {
    pub sigma: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub c_v: f64,
    pub dsigma_de2: f64,
    pub deps_de2: f64,
    pub dsigma_dtheta: f64,
    pub deps_dtheta: f64,
    pub dlambda_dtheta: f64,
    pub dcv_dtheta: f64,
}

impl MaterialState {
    /// Differential conductivity sigma_d = sigma I + 2 (dsigma/dE^2) E E^T.
    pub fn sigma_d(&self, e_vec: Vec2) -> Tensor2 {
        rank_one_update(self.sigma, self.dsigma_de2, e_vec)
    }

    /// Differential permittivity eps_d = eps I + 2 (deps/dE^2) E E^T.
    pub fn eps_d(&self, e_vec: Vec2) -> Tensor2 {
        rank_one_update(self.epsilon, self.deps_de2, e_vec)
    }
}

fn rank_one_update(iso: f64, dde2: f64, e: Vec2) -> Tensor2 {
    let c = 2.0 * dde2;
    let off = c * e[0] * e[1];
    [
        [iso + c * e[0] * e[0], off],
        [off, iso + c * e[1] * e[1]],
    ]
}

/// Differential tensors (sigma_d, eps_d) of a region material at the given
/// operating point.
pub fn differential_tensors(e_vec: Vec2, theta: f64, mat: &RegionMaterial) -> (Tensor2, Tensor2) {
    let st = evaluate(mat, e_vec, theta);
    (st.sigma_d(e_vec), st.eps_d(e_vec))
}

/// Evaluate every law and derivative of `mat` at one operating point.
pub fn evaluate(mat: &RegionMaterial, e_vec: Vec2, theta: f64) -> MaterialState {
    let e = (e_vec[0] * e_vec[0] + e_vec[1] * e_vec[1]).sqrt();
    let mut st = MaterialState {
        epsilon: mat.epsilon,
        lambda: mat.lambda,
        c_v: mat.c_v,
        ..MaterialState::default()
    };
    match &mat.sigma {
        SigmaLaw::Constant(s) => {
            st.sigma = *s;
        }
        SigmaLaw::Fgm(p) => {
            let fp = fgm_partials(e, theta, p);
            st.sigma = fp.sigma;
            st.dsigma_de2 = fp.dsigma_de2;
            st.dsigma_dtheta = fp.dsigma_dtheta;
        }
    }
    st
}

/// Parameter a sensitivity can be taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamField {
    FgmP1,
    FgmP2,
    FgmP3,
    FgmP4,
    FgmP5,
    Sigma,
    Epsilon,
    Lambda,
    CV,
}

impl ParamField {
    pub fn parse(s: &str) -> Result<ParamField> {
        Ok(match s {
            "p1" => ParamField::FgmP1,
            "p2" => ParamField::FgmP2,
            "p3" => ParamField::FgmP3,
            "p4" => ParamField::FgmP4,
            "p5" => ParamField::FgmP5,
            "sigma" => ParamField::Sigma,
            "epsilon" => ParamField::Epsilon,
            "lambda" => ParamField::Lambda,
            "c_v" => ParamField::CV,
            other => {
                return Err(CoreError::Material(format!(
                    "unknown parameter field '{other}'"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamField::FgmP1 => "p1",
            ParamField::FgmP2 => "p2",
            ParamField::FgmP3 => "p3",
            ParamField::FgmP4 => "p4",
            ParamField::FgmP5 => "p5",
            ParamField::Sigma => "sigma",
            ParamField::Epsilon => "epsilon",
            ParamField::Lambda => "lambda",
            ParamField::CV => "c_v",
        }
    }

    /// Unit of the parameter itself.
    pub fn unit(self) -> &'static str {
        match self {
            ParamField::FgmP1 | ParamField::Sigma => "S/m",
            ParamField::FgmP2 | ParamField::FgmP3 => "V/m",
            ParamField::FgmP4 => "1",
            ParamField::FgmP5 => "K",
            ParamField::Epsilon => "F/m",
            ParamField::Lambda => "W/(m.K)",
            ParamField::CV => "J/(K.m^3)",
        }
    }
}

/// Partial derivatives of the four laws with respect to one parameter,
/// at a fixed operating point.
#[derive(Debug, Clone, Copy, Default)]
pub struct LawPartials {
    pub dsigma: f64,
    pub depsilon: f64,
    pub dlambda: f64,
    pub dcv: f64,
}

/// d(laws)/d(parameter) for a parameter attached to this region's material.
pub fn law_partials(mat: &RegionMaterial, e: f64, theta: f64, field: ParamField) -> LawPartials {
    let mut lp = LawPartials::default();
    match field {
        ParamField::Sigma => lp.dsigma = 1.0,
        ParamField::Epsilon => lp.depsilon = 1.0,
        ParamField::Lambda => lp.dlambda = 1.0,
        ParamField::CV => lp.dcv = 1.0,
        fgm_field => {
            if let SigmaLaw::Fgm(p) = &mat.sigma {
                let fp = fgm_partials(e, theta, p);
                lp.dsigma = match fgm_field {
                    ParamField::FgmP1 => fp.dsigma_dp[0],
                    ParamField::FgmP2 => fp.dsigma_dp[1],
                    ParamField::FgmP3 => fp.dsigma_dp[2],
                    ParamField::FgmP4 => fp.dsigma_dp[3],
                    ParamField::FgmP5 => fp.dsigma_dp[4],
                    _ => unreachable!(),
                };
            }
        }
    }
    lp
}

/// Read or write the nominal value of a parameter on a region material.
pub fn param_value(mat: &RegionMaterial, field: ParamField) -> Result<f64> {
    Ok(match (field, &mat.sigma) {
        (ParamField::Sigma, SigmaLaw::Constant(s)) => *s,
        (ParamField::Epsilon, _) => mat.epsilon,
        (ParamField::Lambda, _) => mat.lambda,
        (ParamField::CV, _) => mat.c_v,
        (ParamField::FgmP1, SigmaLaw::Fgm(p)) => p.p1,
        (ParamField::FgmP2, SigmaLaw::Fgm(p)) => p.p2,
        (ParamField::FgmP3, SigmaLaw::Fgm(p)) => p.p3,
        (ParamField::FgmP4, SigmaLaw::Fgm(p)) => p.p4,
        (ParamField::FgmP5, SigmaLaw::Fgm(p)) => p.p5,
        (f, _) => {
            return Err(CoreError::Material(format!(
                "parameter '{}' does not apply to this material law",
                f.as_str()
            )))
        }
    })
}

pub fn set_param_value(mat: &mut RegionMaterial, field: ParamField, value: f64) -> Result<()> {
    match (field, &mut mat.sigma) {
        (ParamField::Sigma, SigmaLaw::Constant(s)) => *s = value,
        (ParamField::Epsilon, _) => mat.epsilon = value,
        (ParamField::Lambda, _) => mat.lambda = value,
        (ParamField::CV, _) => mat.c_v = value,
        (ParamField::FgmP1, SigmaLaw::Fgm(p)) => p.p1 = value,
        (ParamField::FgmP2, SigmaLaw::Fgm(p)) => p.p2 = value,
        (ParamField::FgmP3, SigmaLaw::Fgm(p)) => p.p3 = value,
        (ParamField::FgmP4, SigmaLaw::Fgm(p)) => p.p4 = value,
        (ParamField::FgmP5, SigmaLaw::Fgm(p)) => p.p5 = value,
        (f, _) => {
            return Err(CoreError::Material(format!(
                "parameter '{}' does not apply to this material law",
                f.as_str()
            )))
        }
    }
    Ok(())
}

/// Region-tag keyed material table.
#[derive(Debug, Clone)]
pub struct MaterialModel {
    pub regions: BTreeMap<i32, RegionMaterial>,
}

impl MaterialModel {
    pub fn new(regions: BTreeMap<i32, RegionMaterial>) -> Result<MaterialModel> {
        for mat in regions.values() {
            mat.validate()?;
        }
        Ok(MaterialModel { regions })
    }

    pub fn region(&self, tag: i32) -> Result<&RegionMaterial> {
        self.regions
            .get(&tag)
            .ok_or_else(|| CoreError::Material(format!("no material for region tag {tag}")))
    }

    pub fn any_field_dependent(&self) -> bool {
        self.regions.values().any(|m| m.field_dependent())
    }

    pub fn any_theta_dependent(&self) -> bool {
        self.regions.values().any(|m| m.theta_dependent())
    }
}
