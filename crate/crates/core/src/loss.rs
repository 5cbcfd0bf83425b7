//! Preference-optimization objectives over sequence log-probabilities.
//!
//! Every loss consumes a [`LogProbBundle`] and returns its value together
//! with closed-form partial derivatives with respect to the three policy
//! log-probabilities. Reference log-probabilities are constants; they never
//! receive a derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default anchoring strength for the base-anchored objective.
pub const DEFAULT_LAMBDA: f64 = 5.0;
/// Default KL-regularization strength.
pub const DEFAULT_BETA: f64 = 0.1;

/// Policy and reference sequence log-probabilities (nats) for the chosen,
/// rejected and base responses of one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbBundle {
    pub lp_policy_chosen: f64,
    pub lp_policy_rejected: f64,
    pub lp_policy_base: f64,
    pub lp_ref_chosen: f64,
    pub lp_ref_rejected: f64,
    pub lp_ref_base: f64,
}

impl LogProbBundle {
    /// Policy-minus-reference gap of the chosen response.
    pub fn gap_chosen(&self) -> f64 {
        self.lp_policy_chosen - self.lp_ref_chosen
    }

    pub fn gap_rejected(&self) -> f64 {
        self.lp_policy_rejected - self.lp_ref_rejected
    }

    pub fn gap_base(&self) -> f64 {
        self.lp_policy_base - self.lp_ref_base
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("lp_policy_chosen", self.lp_policy_chosen),
            ("lp_policy_rejected", self.lp_policy_rejected),
            ("lp_policy_base", self.lp_policy_base),
            ("lp_ref_chosen", self.lp_ref_chosen),
            ("lp_ref_rejected", self.lp_ref_rejected),
            ("lp_ref_base", self.lp_ref_base),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} is not finite ({v})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpo,
    Bapo,
    Ipo,
    Dpop,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Bapo => "bapo",
            Method::Ipo => "ipo",
            Method::Dpop => "dpop",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Method::Dpo),
            "bapo" => Ok(Method::Bapo),
            "ipo" => Ok(Method::Ipo),
            "dpop" => Ok(Method::Dpop),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected dpo, bapo, ipo or dpop)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    /// Anchoring strength; only read by [`Method::Bapo`].
    pub lambda: f64,
    /// IPO regularization; the target margin is `1 / (2 * tau_ipo)`.
    pub tau_ipo: f64,
    /// DPOP penalty weight on chosen-response likelihood drops.
    pub delta_dpop: f64,
    /// Divide sequence log-probabilities by response length before the loss.
    pub length_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Bapo,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            tau_ipo: 0.1,
            delta_dpop: 5.0,
            length_normalize: false,
        }
    }
}

impl LossConfig {
    pub fn dpo(beta: f64) -> Self {
        Self {
            method: Method::Dpo,
            beta,
            ..Self::default()
        }
    }

    pub fn bapo(beta: f64, lambda: f64) -> Self {
        Self {
            method: Method::Bapo,
            beta,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss.beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau_ipo > 0.0 && self.tau_ipo.is_finite()) {
            return Err(Error::Config(format!(
                "loss.tau_ipo must be > 0, got {}",
                self.tau_ipo
            )));
        }
        if !(self.delta_dpop >= 0.0 && self.delta_dpop.is_finite()) {
            return Err(Error::Config(format!(
                "loss.delta_dpop must be >= 0, got {}",
                self.delta_dpop
            )));
        }
        Ok(())
    }
}

/// Scalar loss plus its partial derivatives with respect to the policy
/// log-probabilities of the chosen, rejected and base responses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOutput {
    pub value: f64,
    pub d_lp_chosen: f64,
    pub d_lp_rejected: f64,
    pub d_lp_base: f64,
}

/// Logistic function, evaluated on the branch that never overflows `exp`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x` or precision loss for very
/// negative `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-ln σ(z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

pub fn dpo_loss(b: &LogProbBundle, cfg: &LossConfig) -> Result<LossOutput> {
    b.validate()?;
    check_beta(cfg)?;
    let z = cfg.beta * (b.gap_chosen() - b.gap_rejected());
    let s = sigmoid(-z);
    Ok(LossOutput {
        value: neg_log_sigmoid(z),
        d_lp_chosen: -cfg.beta * s,
        d_lp_rejected: cfg.beta * s,
        d_lp_base: 0.0,
    })
}

/// Hinge keeping the policy at least as likely as the reference to produce
/// the base response. Inactive at equality.
pub fn anchor_loss(b: &LogProbBundle) -> Result<LossOutput> {
    b.validate()?;
    let excess = b.lp_ref_base - b.lp_policy_base;
    let (value, d_lp_base) = if excess > 0.0 { (excess, -1.0) } else { (0.0, 0.0) };
    Ok(LossOutput {
        value,
        d_lp_chosen: 0.0,
        d_lp_rejected: 0.0,
        d_lp_base,
    })
}

pub fn bapo_loss(b: &LogProbBundle, cfg: &LossConfig) -> Result<LossOutput> {
    let dpo = dpo_loss(b, cfg)?;
    let anchor = anchor_loss(b)?;
    if cfg.lambda == 0.0 {
        // λ = 0 is exactly DPO, including the sign of zero derivatives.
        return Ok(dpo);
    }
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    Ok(LossOutput {
        value: dpo.value + cfg.lambda * anchor.value,
        d_lp_chosen: dpo.d_lp_chosen + cfg.lambda * anchor.d_lp_chosen,
        d_lp_rejected: dpo.d_lp_rejected + cfg.lambda * anchor.d_lp_rejected,
        d_lp_base: dpo.d_lp_base + cfg.lambda * anchor.d_lp_base,
    })
}

/// Squared deviation of the log-ratio margin from `1 / (2 tau)`.
pub fn ipo_loss(b: &LogProbBundle, cfg: &LossConfig) -> Result<LossOutput> {
    b.validate()?;
    if !(cfg.tau_ipo > 0.0 && cfg.tau_ipo.is_finite()) {
        return Err(Error::InvalidInput(format!("tau_ipo must be > 0, got {}", cfg.tau_ipo)));
    }
    let deviation = (b.gap_chosen() - b.gap_rejected()) - 1.0 / (2.0 * cfg.tau_ipo);
    Ok(LossOutput {
        value: deviation * deviation,
        d_lp_chosen: 2.0 * deviation,
        d_lp_rejected: -2.0 * deviation,
        d_lp_base: 0.0,
    })
}

/// DPO with a penalty whenever the chosen response falls below its
/// reference likelihood.
pub fn dpop_loss(b: &LogProbBundle, cfg: &LossConfig) -> Result<LossOutput> {
    b.validate()?;
    check_beta(cfg)?;
    if !(cfg.delta_dpop >= 0.0 && cfg.delta_dpop.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "delta_dpop must be >= 0, got {}",
            cfg.delta_dpop
        )));
    }
    let drop = b.lp_ref_chosen - b.lp_policy_chosen;
    let (penalty, d_penalty) = if drop > 0.0 { (drop, -1.0) } else { (0.0, 0.0) };
    let z = cfg.beta * (b.gap_chosen() - b.gap_rejected() - cfg.delta_dpop * penalty);
    let s = sigmoid(-z);
    Ok(LossOutput {
        value: neg_log_sigmoid(z),
        d_lp_chosen: -s * cfg.beta * (1.0 - cfg.delta_dpop * d_penalty),
        d_lp_rejected: s * cfg.beta,
        d_lp_base: 0.0,
    })
}

fn check_beta(cfg: &LossConfig) -> Result<()> {
    if cfg.beta > 0.0 && cfg.beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("beta must be > 0, got {}", cfg.beta)))
    }
}

/// Dispatches on `cfg.method`.
pub fn evaluate(b: &LogProbBundle, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.method {
        Method::Dpo => dpo_loss(b, cfg),
        Method::Bapo => bapo_loss(b, cfg),
        Method::Ipo => ipo_loss(b, cfg),
        Method::Dpop => dpop_loss(b, cfg),
    }
}

/// Derivatives of a batch-mean loss with respect to one example's policy
/// log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossGrad {
    pub d_lp_chosen: f64,
    pub d_lp_rejected: f64,
    pub d_lp_base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grads: Vec<LossGrad>,
}

/// Arithmetic mean of per-example losses; derivatives carry the `1/N`.
pub fn batch_loss(bundles: &[LogProbBundle], cfg: &LossConfig) -> Result<BatchLoss> {
    if bundles.is_empty() {
        return Err(Error::InvalidInput("batch_loss on an empty batch".into()));
    }
    let scale = 1.0 / bundles.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(bundles.len());
    for b in bundles {
        let out = evaluate(b, cfg)?;
        total += out.value;
        grads.push(LossGrad {
            d_lp_chosen: out.d_lp_chosen * scale,
            d_lp_rejected: out.d_lp_rejected * scale,
            d_lp_base: out.d_lp_base * scale,
        });
    }
    Ok(BatchLoss {
        value: total * scale,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bundle_from_gaps(gw: f64, gl: f64) -> LogProbBundle {
        LogProbBundle {
            lp_policy_chosen: -5.0 + gw,
            lp_policy_rejected: -6.0 + gl,
            lp_policy_base: -4.0,
            lp_ref_chosen: -5.0,
            lp_ref_rejected: -6.0,
            lp_ref_base: -4.0,
        }
    }

    fn base_bundle(lp_ref_base: f64, lp_policy_base: f64) -> LogProbBundle {
        LogProbBundle {
            lp_policy_base,
            lp_ref_base,
            ..bundle_from_gaps(0.0, 0.0)
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        let tiny = sigmoid(-709.0);
        assert!(tiny > 0.0 && tiny < 1e-300);
        assert!((tiny / 1.216_780_750_623_423e-308 - 1.0).abs() < 1e-6);
        assert_eq!(sigmoid(700.0), 1.0);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        for beta in [0.01, 0.1, 1.0, 3.0] {
            let out = dpo_loss(&bundle_from_gaps(0.0, 0.0), &LossConfig::dpo(beta)).unwrap();
            assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((out.d_lp_chosen + beta / 2.0).abs() < 1e-15);
            assert!((out.d_lp_rejected - beta / 2.0).abs() < 1e-15);
            assert_eq!(out.d_lp_base, 0.0);
        }
    }

    #[test]
    fn dpo_reference_values() {
        let b = bundle_from_gaps(1.0, -1.0);
        let v1 = dpo_loss(&b, &LossConfig::dpo(1.0)).unwrap().value;
        assert!((v1 - 0.126_928_011_042_972_5).abs() < 1e-12);
        let v2 = dpo_loss(&b, &LossConfig::dpo(0.1)).unwrap().value;
        assert!((v2 - 0.598_138_869_381_591_8).abs() < 1e-12);
    }

    #[test]
    fn dpo_rejects_non_finite() {
        let mut b = bundle_from_gaps(0.0, 0.0);
        b.lp_ref_rejected = f64::NAN;
        assert!(matches!(dpo_loss(&b, &LossConfig::dpo(0.1)), Err(Error::InvalidInput(_))));
        b = bundle_from_gaps(0.0, 0.0);
        b.lp_policy_base = f64::NEG_INFINITY;
        assert!(anchor_loss(&b).is_err());
    }

    #[test]
    fn anchor_examples() {
        let inactive = anchor_loss(&base_bundle(-12.0, -10.0)).unwrap();
        assert_eq!((inactive.value, inactive.d_lp_base), (0.0, 0.0));
        let active = anchor_loss(&base_bundle(-10.0, -12.0)).unwrap();
        assert_eq!((active.value, active.d_lp_base), (2.0, -1.0));
        let tie = anchor_loss(&base_bundle(-7.3, -7.3)).unwrap();
        assert_eq!((tie.value, tie.d_lp_base), (0.0, 0.0));
    }

    #[test]
    fn bapo_examples() {
        let b = bundle_from_gaps(0.3, -0.7);
        let zero = bapo_loss(&b, &LossConfig::bapo(0.1, 0.0)).unwrap();
        assert_eq!(zero, dpo_loss(&b, &LossConfig::dpo(0.1)).unwrap());

        // DPO part ln 2 (policy = reference on chosen/rejected), anchor part 0.2.
        let b = base_bundle(-4.0, -4.2);
        let out = bapo_loss(&b, &LossConfig::bapo(0.1, 5.0)).unwrap();
        assert!((out.value - (std::f64::consts::LN_2 + 1.0)).abs() < 1e-12);
        assert!((out.value - 1.693_147).abs() < 1e-6);
        assert_eq!(out.d_lp_base, -5.0);

        let b = base_bundle(-4.0, -3.0);
        let out = bapo_loss(&b, &LossConfig::bapo(0.1, 5.0)).unwrap();
        assert_eq!(out.value, dpo_loss(&b, &LossConfig::dpo(0.1)).unwrap().value);
    }

    #[test]
    fn ipo_examples() {
        let cfg = LossConfig {
            method: Method::Ipo,
            tau_ipo: 0.5,
            ..LossConfig::default()
        };
        assert_eq!(ipo_loss(&bundle_from_gaps(0.0, 0.0), &cfg).unwrap().value, 1.0);
        let at_target = ipo_loss(&bundle_from_gaps(0.6, -0.4), &cfg).unwrap();
        assert!(at_target.value.abs() < 1e-24);
        let out = ipo_loss(&bundle_from_gaps(0.25, 0.1), &cfg).unwrap();
        assert_eq!(out.d_lp_chosen, -out.d_lp_rejected);
        assert_eq!(out.d_lp_base, 0.0);
    }

    #[test]
    fn dpop_examples() {
        let dpop = |delta: f64| LossConfig {
            method: Method::Dpop,
            beta: 1.0,
            delta_dpop: delta,
            ..LossConfig::default()
        };
        let b = bundle_from_gaps(-1.0, -1.0);
        let out = dpop_loss(&b, &dpop(1.0)).unwrap();
        assert!((out.value - 1.313_261_687_518_222_8).abs() < 1e-12);

        for (gw, gl) in [(-1.0, -1.0), (0.4, 2.0), (3.0, -0.5)] {
            let b = bundle_from_gaps(gw, gl);
            let a = dpop_loss(&b, &dpop(0.0)).unwrap();
            let d = dpo_loss(&b, &LossConfig::dpo(1.0)).unwrap();
            assert_eq!(a.value.to_bits(), d.value.to_bits());
            assert_eq!(a.d_lp_chosen.to_bits(), d.d_lp_chosen.to_bits());
            assert_eq!(a.d_lp_rejected.to_bits(), d.d_lp_rejected.to_bits());
        }

        // Penalty inactive once the chosen response is at least as likely as under the reference.
        let b = bundle_from_gaps(0.5, -0.2);
        assert_eq!(dpop_loss(&b, &dpop(10.0)).unwrap(), dpo_loss(&b, &LossConfig::dpo(1.0)).unwrap());
    }

    #[test]
    fn batch_examples() {
        let cfg = LossConfig::bapo(0.1, 5.0);
        let a = base_bundle(-4.0, -4.5);
        let single = batch_loss(&[a], &cfg).unwrap();
        let direct = bapo_loss(&a, &cfg).unwrap();
        assert_eq!(single.value, direct.value);
        assert_eq!(single.grads[0].d_lp_base, direct.d_lp_base);

        let pair = batch_loss(&[a, a], &cfg).unwrap();
        assert_eq!(pair.value, single.value);
        assert_eq!(pair.grads[1].d_lp_base, direct.d_lp_base / 2.0);

        let mixed = [a, bundle_from_gaps(0.7, -2.0), base_bundle(-1.0, -0.5), bundle_from_gaps(-3.0, 1.0)];
        let sum: f64 = mixed.iter().map(|b| bapo_loss(b, &cfg).unwrap().value).sum();
        let batch = batch_loss(&mixed, &cfg).unwrap();
        assert!((batch.value - sum / 4.0).abs() < 1e-15);

        assert!(matches!(batch_loss(&[], &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert_eq!(LossConfig::default().lambda, 5.0);
        assert!(LossConfig::dpo(0.0).validate().is_err());
        assert!(LossConfig::bapo(0.1, -1.0).validate().is_err());
        assert_eq!("BAPO".parse::<Method>().unwrap(), Method::Bapo);
        assert!("orpo".parse::<Method>().is_err());
    }

    fn lp() -> impl Strategy<Value = f64> {
        -40.0..-0.01f64
    }

    prop_compose! {
        fn bundles()(a in lp(), b in lp(), c in lp(), d in lp(), e in lp(), f in lp()) -> LogProbBundle {
            LogProbBundle {
                lp_policy_chosen: a, lp_policy_rejected: b, lp_policy_base: c,
                lp_ref_chosen: d, lp_ref_rejected: e, lp_ref_base: f,
            }
        }
    }

    proptest! {
        #[test]
        fn anchor_nonnegative_and_zero_iff_inactive(b in bundles()) {
            let out = anchor_loss(&b).unwrap();
            prop_assert!(out.value >= 0.0);
            prop_assert_eq!(out.value == 0.0, b.lp_policy_base >= b.lp_ref_base);
        }

        #[test]
        fn bapo_lambda_zero_is_dpo(b in bundles(), beta in 0.01..5.0f64) {
            let d = dpo_loss(&b, &LossConfig::dpo(beta)).unwrap();
            let z = bapo_loss(&b, &LossConfig::bapo(beta, 0.0)).unwrap();
            prop_assert_eq!(d.value.to_bits(), z.value.to_bits());
            prop_assert_eq!(d.d_lp_chosen.to_bits(), z.d_lp_chosen.to_bits());
            prop_assert_eq!(d.d_lp_rejected.to_bits(), z.d_lp_rejected.to_bits());
            prop_assert_eq!(d.d_lp_base.to_bits(), z.d_lp_base.to_bits());
        }

        #[test]
        fn dpo_monotone(b in bundles(), bump in 0.01..2.0f64) {
            let cfg = LossConfig::dpo(0.5);
            let v = dpo_loss(&b, &cfg).unwrap().value;
            let up = LogProbBundle { lp_policy_chosen: b.lp_policy_chosen + bump, ..b };
            let down = LogProbBundle { lp_policy_rejected: b.lp_policy_rejected + bump, ..b };
            // Strictness can vanish once the margin saturates the sigmoid in f64.
            let margin = 0.5 * (b.gap_chosen() - b.gap_rejected());
            if margin < 30.0 {
                prop_assert!(dpo_loss(&up, &cfg).unwrap().value < v);
                prop_assert!(dpo_loss(&down, &cfg).unwrap().value > v);
            }
        }
    }
}
