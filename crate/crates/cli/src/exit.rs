//! Mapping from failures to process exit codes.

use std::fmt;

use dust_core::corpus::CorpusError;
use dust_core::decode::DecodeError;
use dust_core::dust::{DustError, TranscribeError};
use dust_core::lm::LmError;
use dust_core::nnet::NnetError;
use dust_core::pipeline::PipelineError;
use dust_core::textdist::MetricError;

pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// A bad flag combination or config value detected by the CLI itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn corpus(e: &CorpusError) -> i32 {
    match e {
        CorpusError::EmptyAlphabet | CorpusError::InvalidSpec(_) | CorpusError::MaskTooWide { .. } => CONFIG,
        _ => DATA,
    }
}

fn nnet(e: &NnetError) -> i32 {
    match e {
        NnetError::Config(_) | NnetError::ZeroStep => CONFIG,
        NnetError::Diverged { .. } => NUMERIC,
        _ => DATA,
    }
}

fn dust(e: &DustError) -> i32 {
    match e {
        DustError::Config(_) => CONFIG,
        DustError::Metric(_) => NUMERIC,
        _ => DATA,
    }
}

fn decode(e: &DecodeError) -> i32 {
    match e {
        DecodeError::ZeroBeam => CONFIG,
        DecodeError::NonFinite => NUMERIC,
        DecodeError::VocabMismatch { .. } => DATA,
    }
}

fn pipeline(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(_) | PipelineError::PlanMismatch { .. } => CONFIG,
        PipelineError::Corpus(c) => corpus(c),
        PipelineError::Nnet(n) => nnet(n),
        PipelineError::Dust(d) => dust(d),
        PipelineError::Metric(_) => NUMERIC,
        PipelineError::Data(_) | PipelineError::Json { .. } | PipelineError::Io(_) => DATA,
    }
}

/// Exit code for the first recognised error in the chain; data error
/// otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return pipeline(e);
        }
        if let Some(e) = cause.downcast_ref::<NnetError>() {
            return nnet(e);
        }
        if let Some(e) = cause.downcast_ref::<DustError>() {
            return dust(e);
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return corpus(e);
        }
        if let Some(e) = cause.downcast_ref::<LmError>() {
            return if matches!(e, LmError::Config(_)) { CONFIG } else { DATA };
        }
        if let Some(e) = cause.downcast_ref::<DecodeError>() {
            return decode(e);
        }
        if let Some(e) = cause.downcast_ref::<TranscribeError>() {
            return match e {
                TranscribeError::Nnet(n) => nnet(n),
                TranscribeError::Decode(d) => decode(d),
            };
        }
        if cause.is::<MetricError>() {
            return NUMERIC;
        }
    }
    DATA
}

pub fn kind(code: i32) -> &'static str {
    match code {
        CONFIG => "config",
        NUMERIC => "numeric",
        _ => "data",
    }
}
