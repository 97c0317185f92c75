//! Epilepsy-style panel generation and planted-outlier contamination.
//!
//! Each subject draws a random intercept `u_i ~ N(0, σ₁²)` that drives both
//! the 8-week baseline count, `Poisson(exp(γ₀ + u_i))`, and the four period
//! counts, `Poisson(exp(x_ijᵀβ + u_i))`. `γ₀ = log(mean base) − σ₁²/2` so the
//! marginal baseline mean matches the covariate source. `lbase` is derived
//! from the generated baseline before the period counts are drawn.
//!
//! Randomness comes from ChaCha20 keyed by a 64-bit seed; grid cells derive
//! their seeds from the base seed and their coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_design, DataError, DesignSpec, PanelDataset, SubjectRecord, PERIODS};

/// Name of the random stream recorded in panel metadata.
pub const GENERATOR_NAME: &str = "ChaCha20Rng(rand_chacha 0.9; rand_distr 0.5 samplers)";

/// Linear predictors above this are rejected.
pub const MAX_ETA: f64 = 30.0;

/// Random-effect standard deviations of the study grid.
pub const SIGMA1_GRID: [f64; 3] = [0.25, 0.5, 1.0];

/// True fixed effects for the default design
/// `(intercept, lbase, trt, lbase×trt, lage)`.
pub const DEFAULT_BETA: [f64; 5] = [1.6, 0.3, -0.3, 0.2, 0.4];

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("linear predictor {eta:.2} for subject {subject} exceeds {MAX_ETA}")]
    RateOverflow { subject: u32, eta: f64 },
    #[error("contamination method {0} is not one of 1..=6")]
    BadMethod(u8),
    #[error("target subject {target} is outside 1..={subjects}")]
    BadTarget { target: usize, subjects: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Subject-level covariates taken from a reference panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariates {
    pub trt: u8,
    pub base: u32,
    pub age: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSource {
    /// `trt ~ Bernoulli(½)`, `base = 6 + Poisson(λ)` with `λ ~ Gamma(2, 12.5)`,
    /// `age ~ Uniform{18..=42}`.
    #[default]
    Synthetic,
    /// Rows used in order when their count equals `m1`, otherwise resampled
    /// with replacement.
    Reference(Vec<Covariates>),
}

impl CovariateSource {
    pub fn from_panel(panel: &PanelDataset) -> Self {
        CovariateSource::Reference(
            panel
                .subjects()
                .iter()
                .map(|s| Covariates {
                    trt: s.trt,
                    base: s.base,
                    age: s.age,
                })
                .collect(),
        )
    }

    fn label(&self) -> &'static str {
        match self {
            CovariateSource::Synthetic => "synthetic",
            CovariateSource::Reference(_) => "reference",
        }
    }

    fn draw(&self, m1: usize, rng: &mut ChaCha20Rng) -> Result<Vec<Covariates>, SimulateError> {
        match self {
            CovariateSource::Synthetic => {
                let gamma = Gamma::new(2.0, 12.5).expect("valid gamma");
                (0..m1)
                    .map(|_| {
                        let trt = u8::from(rng.random_bool(0.5));
                        let lambda: f64 = gamma.sample(rng);
                        let extra = Poisson::new(lambda.max(1e-12))
                            .expect("valid poisson")
                            .sample(rng);
                        let age = rng.random_range(18..=42);
                        Ok(Covariates {
                            trt,
                            base: 6 + extra as u32,
                            age,
                        })
                    })
                    .collect()
            }
            CovariateSource::Reference(rows) => {
                if rows.is_empty() {
                    return Err(SimulateError::InvalidSpec("empty reference covariates".into()));
                }
                if rows.len() == m1 {
                    Ok(rows.clone())
                } else {
                    Ok((0..m1).map(|_| rows[rng.random_range(0..rows.len())]).collect())
                }
            }
        }
    }
}

/// Parameters of one simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub m1: usize,
    pub sigma1: f64,
    pub beta: Vec<f64>,
    pub seed: u64,
    pub covariates: CovariateSource,
    /// SD of optional iid normal noise added to each linear predictor.
    pub alpha_sd: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            m1: 59,
            sigma1: 0.5,
            beta: DEFAULT_BETA.to_vec(),
            seed: 0,
            covariates: CovariateSource::Synthetic,
            alpha_sd: 0.0,
        }
    }
}

impl GenSpec {
    fn validate(&self, design: &DesignSpec) -> Result<(), SimulateError> {
        if !(self.sigma1 > 0.0 && self.sigma1.is_finite()) {
            return Err(SimulateError::InvalidSpec(format!(
                "sigma1 must be positive, got {}",
                self.sigma1
            )));
        }
        if self.m1 < 2 {
            return Err(SimulateError::InvalidSpec(format!(
                "m1 must be at least 2, got {}",
                self.m1
            )));
        }
        if self.beta.len() != design.p() {
            return Err(SimulateError::InvalidSpec(format!(
                "beta has {} entries but the design has {} terms",
                self.beta.len(),
                design.p()
            )));
        }
        if !(self.alpha_sd >= 0.0 && self.alpha_sd.is_finite()) {
            return Err(SimulateError::InvalidSpec("alpha_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sidecar metadata for an emitted panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMetadata {
    pub m1: usize,
    pub sigma1: f64,
    pub beta: Vec<f64>,
    pub terms: Vec<crate::data::Term>,
    pub seed: u64,
    pub covariate_source: String,
    pub alpha_sd: f64,
    /// Baseline log-rate offset on the 8-week scale.
    pub gamma0: f64,
    pub generator: String,
    pub library_version: String,
}

impl GenMetadata {
    /// Header lines for the panel CSV.
    pub fn csv_comments(&self) -> Vec<String> {
        vec![
            format!("generator: {}", self.generator),
            format!(
                "seed: {} sigma1: {} m1: {} covariates: {}",
                self.seed, self.sigma1, self.m1, self.covariate_source
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    pub metadata: GenMetadata,
}

pub fn generate(spec: &GenSpec, design: &DesignSpec) -> Result<SimulatedPanel, SimulateError> {
    spec.validate(design)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let covs = spec.covariates.draw(spec.m1, &mut rng)?;

    let mean_base = covs.iter().map(|c| c.base as f64).sum::<f64>() / covs.len() as f64;
    let gamma0 = mean_base.max(0.5).ln() - 0.5 * spec.sigma1 * spec.sigma1;
    let normal = Normal::new(0.0, spec.sigma1).expect("valid normal");

    let mut u = Vec::with_capacity(spec.m1);
    let mut subjects = Vec::with_capacity(spec.m1);
    for (k, c) in covs.iter().enumerate() {
        let id = k as u32 + 1;
        let ui: f64 = normal.sample(&mut rng);
        let eta = gamma0 + ui;
        if eta > MAX_ETA {
            return Err(SimulateError::RateOverflow { subject: id, eta });
        }
        let base = Poisson::new(eta.exp()).expect("valid poisson").sample(&mut rng) as u32;
        u.push(ui);
        subjects.push(SubjectRecord {
            id,
            trt: c.trt,
            base,
            age: c.age,
            y: [0; PERIODS],
        });
    }

    let skeleton = PanelDataset::new(subjects.clone())?;
    let dm = build_design(&skeleton, design)?;
    let noise = (spec.alpha_sd > 0.0).then(|| Normal::new(0.0, spec.alpha_sd).expect("valid normal"));
    for (i, subject) in subjects.iter_mut().enumerate() {
        for (j, r) in dm.rows(i).enumerate() {
            let mut eta: f64 = (0..dm.p()).map(|k| dm.x[(r, k)] * spec.beta[k]).sum::<f64>() + u[i];
            if let Some(n) = &noise {
                eta += n.sample(&mut rng);
            }
            if eta > MAX_ETA {
                return Err(SimulateError::RateOverflow {
                    subject: subject.id,
                    eta,
                });
            }
            subject.y[j] = Poisson::new(eta.exp()).expect("valid poisson").sample(&mut rng) as u32;
        }
    }

    Ok(SimulatedPanel {
        panel: PanelDataset::new(subjects)?,
        metadata: GenMetadata {
            m1: spec.m1,
            sigma1: spec.sigma1,
            beta: spec.beta.clone(),
            terms: design.terms().to_vec(),
            seed: spec.seed,
            covariate_source: spec.covariates.label().to_string(),
            alpha_sd: spec.alpha_sd,
            gamma0,
            generator: GENERATOR_NAME.to_string(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// One planted-outlier edit applied to a single subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    /// 1 through 6:
    /// 1. add 30 to period 1;
    /// 2. add 30 to every period;
    /// 3. add 100 to period 1;
    /// 4. add 100 to every period;
    /// 5. set the baseline to 50;
    /// 6. methods 4 and 5 together.
    pub method: u8,
    /// 1-based position of the subject in the panel.
    pub target: usize,
}

impl ContaminationSpec {
    pub fn new(method: u8) -> Self {
        Self { method, target: 1 }
    }
}

pub fn contaminate(
    data: &PanelDataset,
    spec: &ContaminationSpec,
) -> Result<PanelDataset, SimulateError> {
    if !(1..=6).contains(&spec.method) {
        return Err(SimulateError::BadMethod(spec.method));
    }
    if spec.target == 0 || spec.target > data.len() {
        return Err(SimulateError::BadTarget {
            target: spec.target,
            subjects: data.len(),
        });
    }
    let idx = spec.target - 1;
    Ok(data.map_subjects(|subjects| {
        let s = &mut subjects[idx];
        match spec.method {
            1 => s.y[0] += 30,
            2 => s.y.iter_mut().for_each(|y| *y += 30),
            3 => s.y[0] += 100,
            4 => s.y.iter_mut().for_each(|y| *y += 100),
            5 => s.base = 50,
            6 => {
                s.y.iter_mut().for_each(|y| *y += 100);
                s.base = 50;
            }
            _ => unreachable!(),
        }
    })?)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the clean panel for grid coordinates `(σ₁ index, replicate)`.
/// Methods share the clean panel so their contaminations are matched.
pub fn cell_seed(base_seed: u64, sigma_index: usize, replicate: usize) -> u64 {
    base_seed ^ splitmix64(((sigma_index as u64) << 32) | replicate as u64)
}

/// Layout of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub base_seed: u64,
    pub replicates: usize,
    pub sigmas: Vec<f64>,
    pub methods: Vec<u8>,
    pub m1: usize,
    pub beta: Vec<f64>,
    pub covariates: CovariateSource,
    pub alpha_sd: f64,
    /// 1-based contaminated subject.
    pub target: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            base_seed: 0,
            replicates: 20,
            sigmas: SIGMA1_GRID.to_vec(),
            methods: vec![1, 2, 3, 4],
            m1: 59,
            beta: DEFAULT_BETA.to_vec(),
            covariates: CovariateSource::Synthetic,
            alpha_sd: 0.0,
            target: 1,
        }
    }
}

/// Position of a cell in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCoord {
    pub sigma_index: usize,
    pub sigma1: f64,
    pub method: u8,
    pub replicate: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub coord: CellCoord,
    pub clean: SimulatedPanel,
    pub contaminated: PanelDataset,
}

impl GridOptions {
    /// Cells in σ₁-major, then method, then replicate order.
    pub fn coordinates(&self) -> Vec<CellCoord> {
        let mut out = Vec::new();
        for (si, &sigma1) in self.sigmas.iter().enumerate() {
            for &method in &self.methods {
                for r in 0..self.replicates {
                    out.push(CellCoord {
                        sigma_index: si,
                        sigma1,
                        method,
                        replicate: r,
                        seed: cell_seed(self.base_seed, si, r),
                    });
                }
            }
        }
        out
    }

    pub fn gen_spec(&self, coord: &CellCoord) -> GenSpec {
        GenSpec {
            m1: self.m1,
            sigma1: coord.sigma1,
            beta: self.beta.clone(),
            seed: coord.seed,
            covariates: self.covariates.clone(),
            alpha_sd: self.alpha_sd,
        }
    }

    pub fn make_cell(&self, coord: CellCoord, design: &DesignSpec) -> Result<GridCell, SimulateError> {
        let clean = generate(&self.gen_spec(&coord), design)?;
        let contaminated = contaminate(
            &clean.panel,
            &ContaminationSpec {
                method: coord.method,
                target: self.target,
            },
        )?;
        Ok(GridCell {
            coord,
            clean,
            contaminated,
        })
    }
}

/// Lazily enumerates every cell of the study grid.
pub fn study_grid<'a>(
    opts: &'a GridOptions,
    design: &'a DesignSpec,
) -> impl Iterator<Item = Result<GridCell, SimulateError>> + 'a {
    opts.coordinates()
        .into_iter()
        .map(move |c| opts.make_cell(c, design))
}
