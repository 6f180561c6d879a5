//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::alignment::{AlignMethod, AlignParams};
use crate::evaluation::AlignmentMode;
use crate::loops::{DescriptorParams, DetectionParams};
use crate::pose_graph::{PropagateOptions, SolveSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse '{value}'")]
    BadValue { key: String, value: String },
    #[error("{source_name}:{line}: {reason}")]
    Syntax {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodName {
    Umeyama,
    Irls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub chunk_size: usize,
    pub overlap: usize,
    pub lambda_d: f64,
    pub lambda_gamma: f64,
    pub beta: f64,
    pub whitening_r: usize,
    pub whitening_dim: usize,
    pub loop_chunk_size: usize,
    pub similarity_threshold: f64,
    pub min_frame_gap: usize,
    pub nms_radius: usize,
    pub enable_loops: bool,
    pub align_method: MethodName,
    pub irls_max_iters: usize,
    pub irls_kernel_scale: f64,
    pub min_reliable_points: usize,
    pub max_relaxations: usize,
    pub max_alignment_points: usize,
    pub lm_max_iters: usize,
    pub lm_initial_damping: f64,
    pub lm_damping_up: f64,
    pub lm_damping_down: f64,
    pub lm_cost_tolerance: f64,
    pub lm_step_tolerance: f64,
    pub lm_dense_limit: usize,
    pub depth_ceiling: Option<f64>,
    pub export_pixel_stride: usize,
    pub ate_mode: AlignmentMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let solve = SolveSettings::default();
        Self {
            chunk_size: 75,
            overlap: 30,
            lambda_d: 0.2,
            lambda_gamma: 0.5,
            beta: 0.5,
            whitening_r: 1,
            whitening_dim: 512,
            loop_chunk_size: 40,
            similarity_threshold: 0.65,
            min_frame_gap: 150,
            nms_radius: 25,
            enable_loops: true,
            align_method: MethodName::Umeyama,
            irls_max_iters: 10,
            irls_kernel_scale: 1.345,
            min_reliable_points: 100,
            max_relaxations: 3,
            max_alignment_points: 200_000,
            lm_max_iters: solve.max_iters,
            lm_initial_damping: solve.initial_damping,
            lm_damping_up: solve.damping_up,
            lm_damping_down: solve.damping_down,
            lm_cost_tolerance: solve.cost_tolerance,
            lm_step_tolerance: solve.step_tolerance,
            lm_dense_limit: solve.dense_limit,
            depth_ceiling: None,
            export_pixel_stride: 1,
            ate_mode: AlignmentMode::Sim3,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "chunk_size",
        "overlap",
        "lambda_d",
        "lambda_gamma",
        "beta",
        "whitening_r",
        "whitening_dim",
        "loop_chunk_size",
        "similarity_threshold",
        "min_frame_gap",
        "nms_radius",
        "enable_loops",
        "align_method",
        "irls_max_iters",
        "irls_kernel_scale",
        "min_reliable_points",
        "max_relaxations",
        "max_alignment_points",
        "lm_max_iters",
        "lm_initial_damping",
        "lm_damping_up",
        "lm_damping_down",
        "lm_cost_tolerance",
        "lm_step_tolerance",
        "lm_dense_limit",
        "depth_ceiling",
        "export_pixel_stride",
        "ate_mode",
        "seed",
    ];

    /// Sets one key from its text form. Does not re-validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "chunk_size" => self.chunk_size = parse(key, v)?,
            "overlap" => self.overlap = parse(key, v)?,
            "lambda_d" => self.lambda_d = parse(key, v)?,
            "lambda_gamma" => self.lambda_gamma = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "whitening_r" => self.whitening_r = parse(key, v)?,
            "whitening_dim" => self.whitening_dim = parse(key, v)?,
            "loop_chunk_size" => self.loop_chunk_size = parse(key, v)?,
            "similarity_threshold" => self.similarity_threshold = parse(key, v)?,
            "min_frame_gap" => self.min_frame_gap = parse(key, v)?,
            "nms_radius" => self.nms_radius = parse(key, v)?,
            "enable_loops" => self.enable_loops = parse_bool(key, v)?,
            "align_method" => {
                self.align_method = match v.to_ascii_lowercase().as_str() {
                    "umeyama" => MethodName::Umeyama,
                    "irls" => MethodName::Irls,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "irls_max_iters" => self.irls_max_iters = parse(key, v)?,
            "irls_kernel_scale" => self.irls_kernel_scale = parse(key, v)?,
            "min_reliable_points" => self.min_reliable_points = parse(key, v)?,
            "max_relaxations" => self.max_relaxations = parse(key, v)?,
            "max_alignment_points" => self.max_alignment_points = parse(key, v)?,
            "lm_max_iters" => self.lm_max_iters = parse(key, v)?,
            "lm_initial_damping" => self.lm_initial_damping = parse(key, v)?,
            "lm_damping_up" => self.lm_damping_up = parse(key, v)?,
            "lm_damping_down" => self.lm_damping_down = parse(key, v)?,
            "lm_cost_tolerance" => self.lm_cost_tolerance = parse(key, v)?,
            "lm_step_tolerance" => self.lm_step_tolerance = parse(key, v)?,
            "lm_dense_limit" => self.lm_dense_limit = parse(key, v)?,
            "depth_ceiling" => {
                self.depth_ceiling = match v.to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "export_pixel_stride" => self.export_pixel_stride = parse(key, v)?,
            "ate_mode" => {
                self.ate_mode = match v.to_ascii_lowercase().as_str() {
                    "sim3" => AlignmentMode::Sim3,
                    "se3" => AlignmentMode::Se3,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            source_name: "--set".into(),
            line: 0,
            reason: format!("expected key=value, found '{assignment}'"),
        })?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_text(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_text(text, source_name)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                source_name: source_name.into(),
                line: k + 1,
                reason: format!("expected 'key = value', found '{line}'"),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.chunk_size == 0 || self.overlap >= self.chunk_size {
            return fail(format!(
                "need overlap < chunk_size, got overlap {} chunk_size {}",
                self.overlap, self.chunk_size
            ));
        }
        if self.overlap == 0 {
            return fail("overlap must be at least 1 to align neighbouring chunks".into());
        }
        if !(self.lambda_d > 0.0 && self.lambda_d.is_finite()) {
            return fail(format!("lambda_d must be positive, got {}", self.lambda_d));
        }
        if !(self.lambda_gamma >= 0.0 && self.lambda_gamma.is_finite()) {
            return fail(format!("lambda_gamma must be non-negative, got {}", self.lambda_gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.whitening_dim == 0 {
            return fail("whitening_dim must be positive".into());
        }
        if self.loop_chunk_size < 2 {
            return fail("loop_chunk_size must be at least 2".into());
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return fail(format!(
                "similarity_threshold must lie in [-1, 1], got {}",
                self.similarity_threshold
            ));
        }
        if !(self.irls_kernel_scale > 0.0 && self.irls_kernel_scale.is_finite()) {
            return fail("irls_kernel_scale must be positive".into());
        }
        if self.irls_max_iters == 0 {
            return fail("irls_max_iters must be positive".into());
        }
        if self.min_reliable_points < 3 {
            return fail("min_reliable_points must be at least 3".into());
        }
        if self.max_alignment_points < self.min_reliable_points {
            return fail("max_alignment_points must be >= min_reliable_points".into());
        }
        if self.export_pixel_stride == 0 {
            return fail("export_pixel_stride must be positive".into());
        }
        if let Some(c) = self.depth_ceiling {
            if !(c > 0.0) {
                return fail(format!("depth_ceiling must be positive, got {c}"));
            }
        }
        let lm_positive = [
            ("lm_initial_damping", self.lm_initial_damping),
            ("lm_damping_up", self.lm_damping_up),
            ("lm_damping_down", self.lm_damping_down),
        ];
        for (name, v) in lm_positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lm_damping_up <= 1.0 || self.lm_damping_down >= 1.0 {
            return fail("need lm_damping_up > 1 and lm_damping_down < 1".into());
        }
        if self.lm_cost_tolerance < 0.0 || self.lm_step_tolerance < 0.0 {
            return fail("LM tolerances must be non-negative".into());
        }
        Ok(())
    }

    pub fn align_params(&self) -> AlignParams {
        AlignParams {
            lambda_d: self.lambda_d,
            lambda_gamma: self.lambda_gamma,
            method: match self.align_method {
                MethodName::Umeyama => AlignMethod::Umeyama,
                MethodName::Irls => AlignMethod::Irls {
                    max_iters: self.irls_max_iters,
                    kernel_scale: self.irls_kernel_scale,
                },
            },
            min_points: self.min_reliable_points,
            max_relaxations: self.max_relaxations,
            max_points: self.max_alignment_points,
            seed: self.seed,
        }
    }

    pub fn descriptor_params(&self) -> DescriptorParams {
        DescriptorParams {
            beta: self.beta,
            removed_components: self.whitening_r,
            d_out: self.whitening_dim,
        }
    }

    pub fn detection_params(&self) -> DetectionParams {
        DetectionParams {
            threshold: self.similarity_threshold,
            min_frame_gap: self.min_frame_gap,
            nms_radius: self.nms_radius,
        }
    }

    pub fn solve_settings(&self) -> SolveSettings {
        SolveSettings {
            max_iters: self.lm_max_iters,
            initial_damping: self.lm_initial_damping,
            damping_up: self.lm_damping_up,
            damping_down: self.lm_damping_down,
            cost_tolerance: self.lm_cost_tolerance,
            step_tolerance: self.lm_step_tolerance,
            dense_limit: self.lm_dense_limit,
        }
    }

    pub fn propagate_options(&self) -> PropagateOptions {
        PropagateOptions {
            depth_ceiling: self.depth_ceiling,
            pixel_stride: self.export_pixel_stride,
        }
    }

    /// Text form accepted by [`PipelineConfig::parse_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_text(key));
        }
        out
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "chunk_size" => self.chunk_size.to_string(),
            "overlap" => self.overlap.to_string(),
            "lambda_d" => self.lambda_d.to_string(),
            "lambda_gamma" => self.lambda_gamma.to_string(),
            "beta" => self.beta.to_string(),
            "whitening_r" => self.whitening_r.to_string(),
            "whitening_dim" => self.whitening_dim.to_string(),
            "loop_chunk_size" => self.loop_chunk_size.to_string(),
            "similarity_threshold" => self.similarity_threshold.to_string(),
            "min_frame_gap" => self.min_frame_gap.to_string(),
            "nms_radius" => self.nms_radius.to_string(),
            "enable_loops" => self.enable_loops.to_string(),
            "align_method" => match self.align_method {
                MethodName::Umeyama => "umeyama".into(),
                MethodName::Irls => "irls".into(),
            },
            "irls_max_iters" => self.irls_max_iters.to_string(),
            "irls_kernel_scale" => self.irls_kernel_scale.to_string(),
            "min_reliable_points" => self.min_reliable_points.to_string(),
            "max_relaxations" => self.max_relaxations.to_string(),
            "max_alignment_points" => self.max_alignment_points.to_string(),
            "lm_max_iters" => self.lm_max_iters.to_string(),
            "lm_initial_damping" => format!("{:e}", self.lm_initial_damping),
            "lm_damping_up" => self.lm_damping_up.to_string(),
            "lm_damping_down" => self.lm_damping_down.to_string(),
            "lm_cost_tolerance" => format!("{:e}", self.lm_cost_tolerance),
            "lm_step_tolerance" => format!("{:e}", self.lm_step_tolerance),
            "lm_dense_limit" => self.lm_dense_limit.to_string(),
            "depth_ceiling" => self.depth_ceiling.map_or("none".into(), |c| c.to_string()),
            "export_pixel_stride" => self.export_pixel_stride.to_string(),
            "ate_mode" => match self.ate_mode {
                AlignmentMode::Sim3 => "sim3".into(),
                AlignmentMode::Se3 => "se3".into(),
            },
            "seed" => self.seed.to_string(),
            _ => unreachable!("KEYS and value_text disagree on {key}"),
        }
    }
}
