use std::fmt;

use egospk::error::{AudioError, CheckpointError, EvalError, ModelError, SynthError};

/// Invalid flags, config values or missing input paths.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Other => "other",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numerical => "numerical",
        }
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::NonFinite { .. } => Kind::Numerical,
        ModelError::Config(_) => Kind::Config,
        _ => Kind::Data,
    }
}

fn synth_kind(e: &SynthError) -> Kind {
    match e {
        SynthError::Profile(_) | SynthError::Config(_) => Kind::Config,
        _ => Kind::Data,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::Model(m) => model_kind(m),
        EvalError::Synth(s) => synth_kind(s),
        EvalError::Spec(_) | EvalError::Indivisible { .. } | EvalError::MissingCheckpoint(_) => Kind::Config,
        _ => Kind::Data,
    }
}

/// Exit category of an error: the first cause with a known category wins.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return Kind::Config;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return eval_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return synth_kind(e);
        }
        if cause.is::<AudioError>() || cause.is::<CheckpointError>() || cause.is::<std::io::Error>() {
            return Kind::Data;
        }
    }
    Kind::Other
}

/// Single-line JSON error record for stderr.
pub fn error_line(err: &anyhow::Error, kind: Kind) -> String {
    serde_json::json!({
        "error": {
            "kind": kind.as_str(),
            "exit_code": kind.exit_code(),
            "message": format!("{err:#}"),
        }
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories() {
        let nonfinite = anyhow::Error::from(EvalError::Model(ModelError::NonFinite { step: 3 }));
        assert_eq!(classify(&nonfinite), Kind::Numerical);
        assert_eq!(classify(&anyhow::Error::from(ConfigError("x".into())).context("outer")), Kind::Config);
        assert_eq!(classify(&anyhow::Error::from(AudioError::Empty)), Kind::Data);
        assert_eq!(classify(&anyhow::anyhow!("plain")), Kind::Other);
        let line = error_line(&nonfinite, Kind::Numerical);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["exit_code"], 4);
    }
}
