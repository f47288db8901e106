//! Guided velocities from conditional and unconditional branch predictions.
//!
//! Branch naming follows the conditions each forward pass sees:
//! `u_full = u([x, d], y)`, `u_no_text = u([x, d], null)`,
//! `u_no_flow = u([x, 0], y)` and `u_none = u([x, 0], null)`.

use std::cell::Cell;

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::JointVelocity;

/// Anything that predicts a joint velocity for a noisy pair. `cond = None`
/// is the null class; an all-zero `d` is the null motion signal.
pub trait VelocityModel {
    fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, cond: Option<usize>, t: f64) -> Result<JointVelocity>;
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, cond: Option<usize>, t: f64) -> Result<JointVelocity> {
        (**self).predict(x, d, cond, t)
    }
}

/// Wraps a model and counts forward evaluations.
pub struct CountingModel<M> {
    pub inner: M,
    calls: Cell<usize>,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: VelocityModel> VelocityModel for CountingModel<M> {
    fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, cond: Option<usize>, t: f64) -> Result<JointVelocity> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, d, cond, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceRule {
    #[default]
    Inner,
    Cfg,
    Ip2p,
}

impl std::str::FromStr for GuidanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(GuidanceRule::Inner),
            "cfg" => Ok(GuidanceRule::Cfg),
            "ip2p" => Ok(GuidanceRule::Ip2p),
            other => Err(Error::invalid("rule", format!("unknown guidance rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Text (class) weight. For `ip2p` this is the motion weight, since that
    /// rule conditions on the visual signal first.
    pub w1: f64,
    /// Motion weight (`inner`), or the class weight for `ip2p`.
    pub w2: f64,
    pub rule: GuidanceRule,
    /// Fraction of sampling steps, from the start, that use motion guidance.
    pub motion_gate_fraction: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w1: 5.0,
            w2: 3.0,
            rule: GuidanceRule::Inner,
            motion_gate_fraction: 0.5,
        }
    }
}

impl GuidanceConfig {
    /// The weights used by the IP2P comparison: motion 3, text 5.
    pub fn ip2p_default() -> Self {
        GuidanceConfig {
            w1: 3.0,
            w2: 5.0,
            rule: GuidanceRule::Ip2p,
            motion_gate_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::invalid("guidance", "weights must be finite"));
        }
        if !(0.0..=1.0).contains(&self.motion_gate_fraction) {
            return Err(Error::invalid("motion_gate_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Branch predictions for one sampler step.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub u_full: JointVelocity,
    pub u_no_text: JointVelocity,
    pub u_no_flow: Option<JointVelocity>,
    pub u_none: Option<JointVelocity>,
}

fn check(a: &JointVelocity, b: &JointVelocity) -> Result<()> {
    if a.x.dim() != b.x.dim() || a.d.dim() != b.d.dim() {
        return Err(Error::shape("guidance branches differ in shape".to_string()));
    }
    Ok(())
}

fn combine3(
    a: &JointVelocity,
    b: &JointVelocity,
    c: &JointVelocity,
    f: impl Fn(f64, f64, f64) -> f64 + Copy,
) -> JointVelocity {
    let map = |p: &Array4<f64>, q: &Array4<f64>, r: &Array4<f64>| {
        Zip::from(p).and(q).and(r).map_collect(|&p, &q, &r| f(p, q, r))
    };
    JointVelocity {
        x: map(&a.x, &b.x, &c.x),
        d: map(&a.d, &b.d, &c.d),
    }
}

/// `(1 + w) u_cond - w u_uncond`.
pub fn cfg(u_cond: &JointVelocity, u_uncond: &JointVelocity, w: f64) -> Result<JointVelocity> {
    check(u_cond, u_uncond)?;
    Ok(combine3(u_cond, u_uncond, u_cond, |c, u, _| (1.0 + w) * c - w * u))
}

/// `(1 + w1 + w2) u_full - w1 u_no_text - w2 u_no_flow`, on appearance and
/// motion channels alike. `u_no_flow` may be absent only when `w2 == 0`.
pub fn inner_guidance(b: &BranchSet, w1: f64, w2: f64) -> Result<JointVelocity> {
    check(&b.u_full, &b.u_no_text)?;
    let Some(no_flow) = b.u_no_flow.as_ref() else {
        if w2 != 0.0 {
            return Err(Error::invalid(
                "branches",
                "inner guidance with w2 != 0 needs u_no_flow",
            ));
        }
        return cfg(&b.u_full, &b.u_no_text, w1);
    };
    check(&b.u_full, no_flow)?;
    // Grouped as cfg(...) - w2 * u_no_flow so w2 = 0 reproduces cfg bit for bit.
    Ok(combine3(&b.u_full, &b.u_no_text, no_flow, |f, t, n| {
        ((1.0 + w1 + w2) * f - w1 * t) - w2 * n
    }))
}

/// `u_none + w1 (u_no_text - u_none) + w2 (u_full - u_no_text)`.
pub fn ip2p_guidance(b: &BranchSet, w1: f64, w2: f64) -> Result<JointVelocity> {
    let none = b
        .u_none
        .as_ref()
        .ok_or_else(|| Error::invalid("branches", "ip2p guidance needs u_none"))?;
    check(&b.u_full, &b.u_no_text)?;
    check(&b.u_full, none)?;
    let a = combine3(none, &b.u_no_text, &b.u_full, |n, t, f| n + w1 * (t - n) + w2 * (f - t));
    Ok(a)
}

/// Effective `(w1, w2)` at a sampler step: motion guidance only runs for the
/// first `ceil(fraction * n_steps)` steps.
pub fn gate_motion_guidance(step: usize, n_steps: usize, cfg: &GuidanceConfig) -> Result<(f64, f64)> {
    if step >= n_steps {
        return Err(Error::invalid("step", format!("{step} not below {n_steps}")));
    }
    // Guard the ceiling against representation error (0.3 * 10 = 3.0000000000000004).
    let active = (cfg.motion_gate_fraction * n_steps as f64 - 1e-9).ceil().max(0.0) as usize;
    if step < active {
        Ok((cfg.w1, cfg.w2))
    } else {
        Ok((cfg.w1, 0.0))
    }
}

/// Evaluates only the branches `rule` needs: two for `cfg` or gated `inner`,
/// three for `inner` with motion guidance and for `ip2p`.
#[allow(clippy::too_many_arguments)]
pub fn guided_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    x: &Array4<f64>,
    d: &Array4<f64>,
    cond: Option<usize>,
    t: f64,
    rule: GuidanceRule,
    w1: f64,
    w2: f64,
) -> Result<JointVelocity> {
    let zeros = || Array4::zeros(d.dim());
    let u_full = model.predict(x, d, cond, t)?;
    let u_no_text = model.predict(x, d, None, t)?;
    match rule {
        GuidanceRule::Cfg => cfg(&u_full, &u_no_text, w1),
        GuidanceRule::Inner => {
            let u_no_flow = if w2 != 0.0 {
                Some(model.predict(x, &zeros(), cond, t)?)
            } else {
                None
            };
            let b = BranchSet {
                u_full,
                u_no_text,
                u_no_flow,
                u_none: None,
            };
            inner_guidance(&b, w1, w2)
        }
        GuidanceRule::Ip2p => {
            let u_none = Some(model.predict(x, &zeros(), None, t)?);
            let b = BranchSet {
                u_full,
                u_no_text,
                u_no_flow: None,
                u_none,
            };
            ip2p_guidance(&b, w1, w2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled(v: f64) -> JointVelocity {
        JointVelocity {
            x: Array4::from_elem((1, 2, 2, 3), v),
            d: Array4::from_elem((1, 2, 2, 3), -v),
        }
    }

    fn ramp(offset: f64) -> JointVelocity {
        JointVelocity {
            x: Array4::from_shape_fn((1, 2, 2, 3), |(_, a, b, c)| offset + (a * 7 + b * 3 + c) as f64 * 0.37),
            d: Array4::from_shape_fn((1, 2, 2, 3), |(_, a, b, c)| offset * 2.0 - (a + b * c) as f64 * 0.11),
        }
    }

    fn branches() -> BranchSet {
        BranchSet {
            u_full: ramp(1.0),
            u_no_text: ramp(-0.4),
            u_no_flow: Some(ramp(0.25)),
            u_none: Some(ramp(2.0)),
        }
    }

    #[test]
    fn zero_weights_return_full_branch() {
        let b = branches();
        assert_eq!(inner_guidance(&b, 0.0, 0.0).unwrap(), b.u_full);
        assert_eq!(cfg(&b.u_full, &b.u_no_text, 0.0).unwrap(), b.u_full);
    }

    #[test]
    fn default_weights_scalar_case() {
        let b = BranchSet {
            u_full: filled(1.0),
            u_no_text: filled(0.0),
            u_no_flow: Some(filled(0.0)),
            u_none: None,
        };
        let g = inner_guidance(&b, 5.0, 3.0).unwrap();
        assert!(g.x.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn ip2p_cases() {
        let b = branches();
        let g = ip2p_guidance(&b, 1.0, 1.0).unwrap();
        assert!((&g.x - &b.u_full.x).iter().all(|e| e.abs() < 1e-12));
        let s = BranchSet {
            u_full: filled(2.0),
            u_no_text: filled(1.0),
            u_no_flow: None,
            u_none: Some(filled(0.0)),
        };
        assert!(ip2p_guidance(&s, 3.0, 5.0).unwrap().x.iter().all(|&v| v == 8.0));
        let mut missing = b.clone();
        missing.u_none = None;
        assert!(ip2p_guidance(&missing, 3.0, 5.0).is_err());
    }

    #[test]
    fn inner_at_zero_motion_weight_is_cfg() {
        let b = branches();
        for w in [0.5, 5.0, 11.0] {
            assert_eq!(
                inner_guidance(&b, w, 0.0).unwrap(),
                cfg(&b.u_full, &b.u_no_text, w).unwrap()
            );
            let mut same = b.clone();
            same.u_no_flow = Some(b.u_full.clone());
            assert_eq!(
                inner_guidance(&same, w, 0.0).unwrap(),
                cfg(&b.u_full, &b.u_no_text, w).unwrap()
            );
        }
        let mut missing = b.clone();
        missing.u_no_flow = None;
        assert!(inner_guidance(&missing, 5.0, 3.0).is_err());
        assert_eq!(
            inner_guidance(&missing, 5.0, 0.0).unwrap(),
            cfg(&b.u_full, &b.u_no_text, 5.0).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut b = branches();
        b.u_no_text.x = Array4::zeros((2, 2, 2, 3));
        assert!(inner_guidance(&b, 1.0, 1.0).is_err());
        assert!(cfg(&b.u_full, &b.u_no_text, 1.0).is_err());
    }

    #[test]
    fn gate() {
        let g = GuidanceConfig::default();
        assert_eq!(gate_motion_guidance(49, 100, &g).unwrap(), (5.0, 3.0));
        assert_eq!(gate_motion_guidance(50, 100, &g).unwrap(), (5.0, 0.0));
        let never = GuidanceConfig {
            motion_gate_fraction: 0.0,
            ..g.clone()
        };
        let always = GuidanceConfig {
            motion_gate_fraction: 1.0,
            ..g.clone()
        };
        for k in 0..10 {
            assert_eq!(gate_motion_guidance(k, 10, &never).unwrap().1, 0.0);
            assert_eq!(gate_motion_guidance(k, 10, &always).unwrap().1, 3.0);
        }
        let third = GuidanceConfig {
            motion_gate_fraction: 0.3,
            ..g.clone()
        };
        assert_eq!(gate_motion_guidance(2, 10, &third).unwrap().1, 3.0);
        assert_eq!(gate_motion_guidance(3, 10, &third).unwrap().1, 0.0);
        assert!(gate_motion_guidance(100, 100, &g).is_err());
    }

    struct Echo;

    impl VelocityModel for Echo {
        fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, cond: Option<usize>, _t: f64) -> Result<JointVelocity> {
            let c = cond.map_or(0.0, |c| c as f64 + 1.0);
            Ok(JointVelocity { x: x + c, d: d + c })
        }
    }

    #[test]
    fn branch_economy() {
        let m = CountingModel::new(Echo);
        let x = Array4::zeros((1, 2, 2, 3));
        guided_velocity(&m, &x, &x, Some(1), 0.5, GuidanceRule::Inner, 5.0, 0.0).unwrap();
        assert_eq!(m.calls(), 2);
        guided_velocity(&m, &x, &x, Some(1), 0.5, GuidanceRule::Inner, 5.0, 3.0).unwrap();
        assert_eq!(m.calls(), 5);
        guided_velocity(&m, &x, &x, Some(1), 0.5, GuidanceRule::Cfg, 5.0, 3.0).unwrap();
        assert_eq!(m.calls(), 7);
        guided_velocity(&m, &x, &x, Some(1), 0.5, GuidanceRule::Ip2p, 3.0, 5.0).unwrap();
        assert_eq!(m.calls(), 10);
    }

    proptest! {
        #[test]
        fn affine_hull(c in -10.0f64..10.0, w1 in -8.0f64..8.0, w2 in -8.0f64..8.0) {
            let b = BranchSet {
                u_full: filled(c),
                u_no_text: filled(c),
                u_no_flow: Some(filled(c)),
                u_none: Some(filled(c)),
            };
            for g in [
                inner_guidance(&b, w1, w2).unwrap(),
                cfg(&b.u_full, &b.u_no_text, w1).unwrap(),
                ip2p_guidance(&b, w1, w2).unwrap(),
            ] {
                prop_assert!(g.x.iter().all(|&v| (v - c).abs() <= 1e-12));
                prop_assert!(g.d.iter().all(|&v| (v + c).abs() <= 1e-12));
            }
        }

        #[test]
        fn inner_is_linear_in_each_branch(a in -3.0f64..3.0, s in -2.0f64..2.0) {
            let b = branches();
            let mut scaled = b.clone();
            scaled.u_no_text = JointVelocity { x: &b.u_no_text.x * s, d: &b.u_no_text.d * s };
            let g0 = inner_guidance(&b, a, 1.5).unwrap();
            let g1 = inner_guidance(&scaled, a, 1.5).unwrap();
            // Changing one branch moves the output by -w1 times the change.
            let expected = &g0.x - &((&scaled.u_no_text.x - &b.u_no_text.x) * a);
            prop_assert!((&g1.x - &expected).iter().all(|e| e.abs() < 1e-9));
        }
    }
}
