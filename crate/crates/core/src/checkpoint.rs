//! JSON parameter checkpoints.
//!
//! ```text
//! {
//!   "format": "dialcomm-checkpoint",
//!   "version": 1,
//!   "iteration": 70000,
//!   "config": { ...resolved run config... },
//!   "slots": [ { "a_net": { "spec", "input", "output",
//!                            "params": { "params": [ { "name": "w0",
//!                                "value": { "rows", "cols", "data": [...] } }, ... ] } },
//!                "c_net": ..., "a_target": ..., "c_target": ..., "tau_target": 0.01 } ]
//! }
//! ```
//!
//! Slot `k` is agent `k`'s parameter set, or the single shared set under
//! parameter sharing. Floats are written in shortest round-trip form, so a
//! save/load cycle is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nets::AgentParams;
use crate::run::{io_err, AnyTrainer, RunConfig, RunError};

pub const FORMAT: &str = "dialcomm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub config: RunConfig,
    pub slots: Vec<AgentParams>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &AnyTrainer) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            iteration: trainer.iteration(),
            config: config.clone(),
            slots: trainer.slots().to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_str(text)
            .map_err(|e| RunError::Runtime(format!("not a checkpoint: {e}")))?;
        if h.format != FORMAT {
            return Err(RunError::Runtime(format!("unknown checkpoint format `{}`", h.format)));
        }
        if h.version != VERSION {
            return Err(RunError::Runtime(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                h.version
            )));
        }
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| RunError::Runtime(format!("malformed checkpoint: {e}")))?;
        for (k, s) in c.slots.iter().enumerate() {
            let nets = [("a_net", &s.a_net), ("c_net", &s.c_net), ("a_target", &s.a_target), ("c_target", &s.c_target)];
            for (name, net) in nets {
                for p in net.params.iter() {
                    if p.value.len() != p.value.rows() * p.value.cols() {
                        return Err(RunError::Runtime(format!(
                            "slot {k} {name}.{}: {} values for shape {:?}",
                            p.name,
                            p.value.len(),
                            p.value.shape()
                        )));
                    }
                }
            }
            s.a_target
                .params
                .check_aligned(&s.a_net.params)
                .and_then(|_| s.c_target.params.check_aligned(&s.c_net.params))
                .map_err(|e| RunError::Runtime(format!("slot {k}: {e}")))?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::EnvKind;

    fn small() -> (RunConfig, AnyTrainer) {
        let mut c = RunConfig::defaults(EnvKind::Matrix);
        c.trainer.iterations = 3;
        c.trainer.episodes_per_iteration = 4;
        let mut t = AnyTrainer::new(&c).unwrap();
        t.train_with(|_| {}).unwrap();
        (c, t)
    }

    #[test]
    fn round_trip_is_exact() {
        let (c, t) = small();
        let ck = Checkpoint::from_trainer(&c, &t);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.iteration, 3);
    }

    #[test]
    fn header_is_checked() {
        let (c, t) = small();
        let mut ck = Checkpoint::from_trainer(&c, &t);
        ck.version = 99;
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        ck.version = VERSION;
        ck.format = "other".into();
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }

    #[test]
    fn mismatched_environment_is_rejected() {
        let (c, t) = small();
        let ck = Checkpoint::from_trainer(&c, &t);
        let mut other = c.clone();
        other.matrix.n_numbers = 16;
        other.matrix.message_bits = 4;
        let e = AnyTrainer::from_checkpoint(&other, &ck).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(AnyTrainer::from_checkpoint(&c, &ck).is_ok());
    }
}
