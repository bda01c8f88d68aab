use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{PccsError, Result};
use crate::losses::{LossWeights, Toggles};
use crate::model::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small network and short schedule for CPU runs on 64×64 images.
    Desk,
    /// The published schedule: 20k steps, batch 8 + 8.
    Paper,
}

/// Filesystem locations. Not part of the configuration hash.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<String>,
    pub out: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub net: NetConfig,
    pub lambda_aux: f64,
    pub lambda_pc: f64,
    pub lambda_u: f64,
    pub tau: f64,
    /// Prototype moving-average coefficient.
    pub mu: f64,
    /// Weight of the teacher prototype's own history in the prototype update.
    pub gamma: f64,
    /// Teacher weight EMA decay.
    pub mu_w: f64,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest global gradient norm per step; larger gradients are scaled down (0 disables).
    #[serde(default)]
    pub grad_clip: f64,
    pub t_max: u64,
    pub warmup_steps: u64,
    /// Step at which the consistency weight reaches its plateau.
    pub t_ramp: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub toggles: Toggles,
    /// Deepest interior distance bin; deeper pixels share the last bin.
    pub max_bin: i32,
    pub seed: u64,
    /// Apply the consistency and uncertainty terms to labelled images too.
    pub consistency_on_labeled: bool,
    /// Take pseudo-labels from the student instead of the teacher.
    pub student_pseudo_labels: bool,
    /// Weight of the prototype classifier's cross-entropy.
    pub classifier_weight: f64,
    /// Save a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    #[serde(default)]
    pub paths: Paths,
}

impl TrainConfig {
    pub fn desk(num_classes: usize) -> Self {
        let w = LossWeights::default();
        Self {
            preset: Preset::Desk,
            net: NetConfig::desk(num_classes),
            lambda_aux: w.lambda_aux,
            lambda_pc: w.lambda_pc,
            lambda_u: w.lambda_u,
            tau: 0.05,
            mu: 0.99,
            gamma: 0.999,
            mu_w: 0.99,
            lr: 0.05,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 2.0,
            t_max: 2000,
            warmup_steps: 200,
            t_ramp: 3000,
            batch_labeled: 4,
            batch_unlabeled: 4,
            toggles: Toggles::ALL,
            max_bin: 24,
            seed: 0,
            consistency_on_labeled: true,
            student_pseudo_labels: false,
            classifier_weight: 0.1,
            checkpoint_every: 500,
            paths: Paths::default(),
        }
    }

    pub fn paper(num_classes: usize) -> Self {
        Self {
            preset: Preset::Paper,
            net: NetConfig {
                num_classes,
                widths: vec![16, 32, 64, 128, 256],
                fused_dim: 256,
            },
            grad_clip: 0.0,
            t_max: 20000,
            warmup_steps: 2000,
            t_ramp: 30000,
            batch_labeled: 8,
            batch_unlabeled: 8,
            checkpoint_every: 2000,
            ..Self::desk(num_classes)
        }
    }

    pub fn preset(preset: Preset, num_classes: usize) -> Self {
        match preset {
            Preset::Desk => Self::desk(num_classes),
            Preset::Paper => Self::paper(num_classes),
        }
    }

    /// Parses a JSON object whose keys override the preset it names (`"preset"`, default desk).
    /// Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| PccsError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(user) = value else {
            return Err(PccsError::Config(
                "configuration must be a JSON object".into(),
            ));
        };
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(p) => {
                serde_json::from_value(p.clone()).map_err(|e| PccsError::Config(e.to_string()))?
            }
        };
        let classes = user
            .get("net")
            .and_then(|n| n.get("num_classes"))
            .and_then(Value::as_u64)
            .unwrap_or(2) as usize;
        let mut base = serde_json::to_value(Self::preset(preset, classes))?;
        merge(&mut base, Value::Object(user));
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| PccsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override. `key` may be dotted (`net.fused_dim`). Toggle names
    /// `l_con`, `l_u`, `l_aux`, `l_pc` and `all_unsup` accept `on`/`off`. Call
    /// [`TrainConfig::validate`] once all overrides are in.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| PccsError::Config(format!("override `{spec}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let switch = |raw: &str| match raw {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            other => Err(PccsError::Config(format!(
                "toggle value `{other}` is not on/off"
            ))),
        };
        match key {
            "all_unsup" => {
                self.toggles = if switch(raw)? {
                    Toggles::ALL
                } else {
                    Toggles::NONE
                };
                return Ok(());
            }
            "l_con" => self.toggles.l_con = switch(raw)?,
            "l_u" => self.toggles.l_u = switch(raw)?,
            "l_aux" => self.toggles.l_aux = switch(raw)?,
            "l_pc" => self.toggles.l_pc = switch(raw)?,
            _ => {
                let parsed: Value =
                    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
                let mut value = serde_json::to_value(&*self)?;
                let mut slot = &mut value;
                for part in key.split('.') {
                    slot = slot.get_mut(part).ok_or_else(|| {
                        PccsError::Config(format!("unknown configuration key `{key}`"))
                    })?;
                }
                *slot = parsed;
                *self =
                    serde_json::from_value(value).map_err(|e| PccsError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    // The negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PccsError::Config(msg));
        self.net
            .validate()
            .map_err(|e| PccsError::Config(e.to_string()))?;
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("mu", self.mu),
            ("gamma", self.gamma),
            ("mu_w", self.mu_w),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.mu + self.gamma < 1.0 {
            return bad("mu + gamma must be at least 1".into());
        }
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("lambda_pc", self.lambda_pc),
            ("lambda_u", self.lambda_u),
            ("classifier_weight", self.classifier_weight),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.t_max == 0 || self.t_ramp == 0 {
            return bad("t_max and t_ramp must be positive".into());
        }
        if self.warmup_steps > self.t_max {
            return bad("warmup_steps exceeds t_max".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be at least 1".into());
        }
        if self.max_bin < 1 {
            return bad("max_bin must be at least 1".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_aux: self.lambda_aux,
            lambda_pc: self.lambda_pc,
            lambda_u: self.lambda_u,
        }
    }

    /// SHA-256 over the canonical JSON of everything except `paths`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets() {
        let c = TrainConfig::desk(2);
        assert_eq!(
            (c.lambda_aux, c.lambda_pc, c.lambda_u, c.tau),
            (0.3, 0.1, 0.01, 0.05)
        );
        assert_eq!((c.mu, c.gamma, c.lr, c.lr_power), (0.99, 0.999, 0.05, 0.9));
        let p = TrainConfig::paper(2);
        assert_eq!((p.t_max, p.warmup_steps, p.batch_labeled), (20000, 2000, 8));
        assert_eq!(TrainConfig::from_json(r#"{"preset":"paper"}"#).unwrap(), p);
    }

    #[test]
    fn json_overrides_and_unknown_keys() {
        let c =
            TrainConfig::from_json(r#"{"t_max": 50, "warmup_steps": 5, "net": {"fused_dim": 8}}"#)
                .unwrap();
        assert_eq!((c.t_max, c.net.fused_dim, c.net.widths.len()), (50, 8, 5));
        assert!(TrainConfig::from_json(r#"{"lamda_aux": 0.3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"net": {"depth": 3}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"tau": 0}"#).is_err());
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::desk(2);
        c.apply_override("l_pc=off").unwrap();
        assert!(!c.toggles.l_pc && c.toggles.l_con);
        c.apply_override("all_unsup=off").unwrap();
        assert_eq!(c.toggles, Toggles::NONE);
        c.apply_override("net.fused_dim=32").unwrap();
        assert_eq!(c.net.fused_dim, 32);
        c.apply_override("t_max=4").unwrap();
        assert!(c.validate().is_err());
        c.apply_override("warmup_steps=0").unwrap();
        c.validate().unwrap();
        assert!(c.apply_override("bogus=1").is_err());
        assert!(c.apply_override("l_u=maybe").is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = TrainConfig::desk(2);
        let mut b = a.clone();
        b.paths.out = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
