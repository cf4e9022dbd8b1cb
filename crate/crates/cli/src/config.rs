//! Experiment configuration: a single JSON document.

use std::path::Path;

use anyhow::{bail, Context};
use emlab::analysis::TestFunction;
use emlab::density::GridConfig;
use emlab::gaussian::SearchGrid;
use emlab::study::StudyConfig;
use emlab::suite::SuiteConfig;
use emlab::{DriftSpec, Scalar, SchemeParams, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x: Vec<f64>,
    /// Cutoff constant; `null` uses the drift's sup norm (or 1).
    #[serde(rename = "B")]
    pub b_const: Option<f64>,
    pub variant: Variant,
}

impl Default for SchemeSection {
    fn default() -> Self {
        SchemeSection {
            horizon: 1.0,
            x: vec![0.0],
            b_const: None,
            variant: Variant::Primary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Points per axis; `null` selects 2048 (d = 1) or 256 (d = 2).
    #[serde(rename = "N")]
    pub points: Option<usize>,
    #[serde(rename = "L_factor")]
    pub l_factor: f64,
    #[serde(rename = "M")]
    pub m_nodes: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        GridSection {
            points: g.points,
            l_factor: g.l_factor,
            m_nodes: g.m_nodes,
        }
    }
}

impl GridSection {
    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            points: self.points,
            l_factor: self.l_factor,
            m_nodes: self.m_nodes,
            ..GridConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub n_list: Vec<usize>,
    pub n_ref: usize,
    pub grid: GridSection,
    pub c_weight: f64,
    pub slack: f64,
    pub duhamel_stride: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = StudyConfig::default();
        StudySection {
            n_list: s.n_list,
            n_ref: s.n_ref,
            grid: GridSection::default(),
            c_weight: s.c_weight,
            slack: s.slack,
            duhamel_stride: s.duhamel_stride,
        }
    }
}

impl StudySection {
    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            n_list: self.n_list.clone(),
            n_ref: self.n_ref,
            grid: self.grid.grid_config(),
            c_weight: self.c_weight,
            slack: self.slack,
            duhamel_stride: self.duhamel_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub samples: usize,
    pub phi: TestFunction,
    /// Coarse step count of the weak-error estimate.
    pub n: usize,
    pub n_ref: usize,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            samples: 100_000,
            phi: TestFunction::HalfSpace(0.0),
            n: 32,
            n_ref: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSection {
    pub c: f64,
    pub search_points: usize,
    pub convolution_draws: usize,
    pub gronwall_draws: usize,
    pub gronwall_points: usize,
}

impl Default for LemmaSection {
    fn default() -> Self {
        let s = SuiteConfig::default();
        LemmaSection {
            c: s.c,
            search_points: s.search.points,
            convolution_draws: s.convolution_draws,
            gronwall_draws: s.gronwall_draws,
            gronwall_points: s.gronwall_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drift document `{"family", "params", "d", "rho", "q"}`.
    pub drift: serde_json::Value,
    pub scheme: SchemeSection,
    pub study: StudySection,
    pub mc: McSection,
    pub lemmas: LemmaSection,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            drift: serde_json::json!({ "family": "zero", "params": {}, "d": 1, "rho": "inf", "q": "inf" }),
            scheme: SchemeSection::default(),
            study: StudySection::default(),
            mc: McSection::default(),
            lemmas: LemmaSection::default(),
            seed: 1,
            precision: Precision::F64,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let s = &self.study;
        if s.n_list.windows(2).any(|w| w[0] >= w[1]) {
            bail!("study.n_list must be strictly increasing");
        }
        if let Some(&n_max) = s.n_list.last() {
            if s.n_ref < 16 * n_max {
                bail!("study.n_ref = {} must be at least 16 * max(n_list) = {}", s.n_ref, 16 * n_max);
            }
        }
        if !(s.c_weight > 1.0) {
            bail!("study.c_weight must exceed 1");
        }
        if !(self.scheme.horizon > 0.0) {
            bail!("scheme.T must be positive");
        }
        Ok(())
    }

    pub fn drift<T: Scalar>(&self) -> anyhow::Result<DriftSpec<T>> {
        Ok(DriftSpec::from_json(&self.drift)?)
    }

    /// Scheme parameters with `n` steps; fails with the admissibility error
    /// for inadmissible exponents.
    pub fn params<T: Scalar>(&self, n: usize) -> anyhow::Result<SchemeParams<T>> {
        let drift = self.drift::<T>()?;
        if self.scheme.x.len() != drift.dim() {
            bail!("scheme.x has {} components, drift dimension is {}", self.scheme.x.len(), drift.dim());
        }
        Ok(SchemeParams::new(
            drift,
            T::lit(self.scheme.horizon),
            n,
            self.scheme.x.iter().map(|&v| T::lit(v)).collect(),
            self.scheme.b_const.map(T::lit),
            self.scheme.variant,
        )?)
    }

    pub fn suite_config(&self) -> SuiteConfig {
        let l = &self.lemmas;
        SuiteConfig {
            c: l.c,
            search: SearchGrid {
                points: l.search_points,
                ..SearchGrid::default()
            },
            convolution_draws: l.convolution_draws,
            gronwall_draws: l.gronwall_draws,
            gronwall_points: l.gronwall_points,
            seed: self.seed,
            ..SuiteConfig::default()
        }
    }
}
