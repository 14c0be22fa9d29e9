//! Run configuration: plain-text key=value files with per-key
//! validation and a stable serialization order.

use crate::error::{OcrtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub k_tilde: usize,
    pub d_o: usize,
    pub d_z: usize,
    pub t: usize,
    pub n_r: usize,
    pub d_r: usize,
    pub graph_layers: usize,
    /// 0 means "auto": resolved to K−1.
    pub max_degree: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs_ocl: usize,
    pub epochs_relation: usize,
    pub steps_sam: usize,
    pub steps_clip: usize,
    pub eps: f64,
    pub pgd_steps: usize,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 8,
            k_tilde: 7,
            d_o: 64,
            d_z: 64,
            t: 3,
            n_r: 4,
            d_r: 64,
            graph_layers: 2,
            max_degree: 0,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 4,
            epochs_ocl: 40,
            epochs_relation: 5,
            steps_sam: 500,
            steps_clip: 300,
            eps: 4.0 / 255.0,
            pgd_steps: 10,
            seed: 0,
            size: 32,
            count: 64,
        }
    }
}

pub const KEYS: &[&str] = &[
    "k",
    "k_tilde",
    "d_o",
    "d_z",
    "t",
    "n_r",
    "d_r",
    "graph_layers",
    "max_degree",
    "lr",
    "weight_decay",
    "batch",
    "epochs_ocl",
    "epochs_relation",
    "steps_sam",
    "steps_clip",
    "eps",
    "pgd_steps",
    "seed",
    "size",
    "count",
];

fn bad(key: &'static str, reason: impl Into<String>) -> OcrtError {
    OcrtError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn resolved_max_degree(&self) -> usize {
        if self.max_degree == 0 {
            self.k - 1
        } else {
            self.max_degree
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn pu(key: &'static str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| bad(key, format!("`{v}` is not a non-negative integer")))
        }
        fn pf(key: &'static str, v: &str) -> Result<f64> {
            v.parse().map_err(|_| bad(key, format!("`{v}` is not a number")))
        }
        match key {
            "k" => self.k = pu("k", value)?,
            "k_tilde" => self.k_tilde = pu("k_tilde", value)?,
            "d_o" => self.d_o = pu("d_o", value)?,
            "d_z" => self.d_z = pu("d_z", value)?,
            "t" => self.t = pu("t", value)?,
            "n_r" => self.n_r = pu("n_r", value)?,
            "d_r" => self.d_r = pu("d_r", value)?,
            "graph_layers" => self.graph_layers = pu("graph_layers", value)?,
            "max_degree" => self.max_degree = pu("max_degree", value)?,
            "lr" => self.lr = pf("lr", value)?,
            "weight_decay" => self.weight_decay = pf("weight_decay", value)?,
            "batch" => self.batch = pu("batch", value)?,
            "epochs_ocl" => self.epochs_ocl = pu("epochs_ocl", value)?,
            "epochs_relation" => self.epochs_relation = pu("epochs_relation", value)?,
            "steps_sam" => self.steps_sam = pu("steps_sam", value)?,
            "steps_clip" => self.steps_clip = pu("steps_clip", value)?,
            "eps" => self.eps = pf("eps", value)?,
            "pgd_steps" => self.pgd_steps = pu("pgd_steps", value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad("seed", format!("`{value}` is not a u64")))?
            }
            "size" => self.size = pu("size", value)?,
            "count" => self.count = pu("count", value)?,
            other => {
                return Err(OcrtError::Config {
                    key: other.to_string(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(bad("k", "need at least 2 slots"));
        }
        if self.k_tilde == 0 || self.k_tilde > self.k {
            return Err(bad("k_tilde", format!("must lie in [1, k={}]", self.k)));
        }
        for (key, v) in [
            ("d_o", self.d_o),
            ("d_z", self.d_z),
            ("t", self.t),
            ("n_r", self.n_r),
            ("d_r", self.d_r),
            ("graph_layers", self.graph_layers),
            ("batch", self.batch),
            ("pgd_steps", self.pgd_steps),
        ] {
            if v == 0 {
                return Err(OcrtError::Config {
                    key: key.to_string(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.max_degree > self.k - 1 {
            return Err(bad(
                "max_degree",
                format!("must be at most k-1 = {}", self.k - 1),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be a positive finite number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", "must be non-negative and finite"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(bad("eps", "must lie in (0, 1)"));
        }
        if self.size < 8 || self.size % 4 != 0 {
            return Err(bad("size", "image side must be a multiple of 4, at least 8"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "k" => self.k.to_string(),
            "k_tilde" => self.k_tilde.to_string(),
            "d_o" => self.d_o.to_string(),
            "d_z" => self.d_z.to_string(),
            "t" => self.t.to_string(),
            "n_r" => self.n_r.to_string(),
            "d_r" => self.d_r.to_string(),
            "graph_layers" => self.graph_layers.to_string(),
            "max_degree" => self.max_degree.to_string(),
            "lr" => format!("{:e}", self.lr),
            "weight_decay" => format!("{:e}", self.weight_decay),
            "batch" => self.batch.to_string(),
            "epochs_ocl" => self.epochs_ocl.to_string(),
            "epochs_relation" => self.epochs_relation.to_string(),
            "steps_sam" => self.steps_sam.to_string(),
            "steps_clip" => self.steps_clip.to_string(),
            "eps" => format!("{:e}", self.eps),
            "pgd_steps" => self.pgd_steps.to_string(),
            "seed" => self.seed.to_string(),
            "size" => self.size.to_string(),
            "count" => self.count.to_string(),
            _ => unreachable!("get called with unknown key {key}"),
        }
    }

    /// key=value lines in the fixed KEYS order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| OcrtError::Config {
                key: line.to_string(),
                reason: "expected key=value".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.set("k", "4").unwrap();
        cfg.set("k_tilde", "3").unwrap();
        cfg.set("eps", "0.0078431372549019607").unwrap();
        cfg.set("seed", "42").unwrap();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("lr", "fast").unwrap_err();
        assert!(err.to_string().contains("lr"));
        let err = cfg.set("slots", "8").unwrap_err();
        assert!(err.to_string().contains("slots"));

        cfg.k_tilde = 20;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("k_tilde"));
    }

    #[test]
    fn auto_max_degree_tracks_k() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolved_max_degree(), 7);
        cfg.set("k", "4").unwrap();
        assert_eq!(cfg.resolved_max_degree(), 3);
        cfg.set("max_degree", "2").unwrap();
        assert_eq!(cfg.resolved_max_degree(), 2);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nk=4\nk_tilde=3\n").unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.k_tilde, 3);
    }
}
