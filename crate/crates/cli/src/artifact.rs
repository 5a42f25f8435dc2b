//! JSON fit artifact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use copvi::copula_va::VariationalParams;
use copvi::elliptical::FamilyKind;
use copvi::optimizer::{LbBar, StepRule};
use copvi::transforms::TransformKind;

use crate::error::{CliError, CliResult, Context};

pub const FORMAT_VERSION: u32 = 1;

/// Settings the fit was run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: String,
    pub difference: bool,
    pub min_obs: usize,
    pub family: FamilyKind,
    pub transform: TransformKind,
    pub factors: usize,
    pub steps: usize,
    pub init_scale: f64,
    pub step_rule: StepRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub format_version: u32,
    pub config: FitConfig,
    pub seed: u64,
    /// Labels of the copula margins, in model order.
    pub columns: Vec<String>,
    pub n_obs: usize,
    /// Dimension of theta.
    pub m: usize,
    /// Flattened `lambda*` in the order (mu, log sigma, gamma, tau, omega).
    pub lambda: Vec<f64>,
    pub lb_bar: Option<LbBar>,
    pub steps_completed: usize,
    pub wall_clock_seconds: Option<f64>,
}

impl FitArtifact {
    /// Rebuild the variational parameters from the flattened vector.
    pub fn variational_params(&self) -> CliResult<VariationalParams> {
        let template = VariationalParams::init(
            self.m,
            self.config.factors,
            self.config.transform,
            self.config.family,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        if template.n_params() != self.lambda.len() {
            return Err(CliError::Data(format!(
                "artifact holds {} parameters, expected {} for m={}, K={}",
                self.lambda.len(),
                template.n_params(),
                self.m,
                self.config.factors
            )));
        }
        template.unflatten(&DVector::from_column_slice(&self.lambda)).context("rebuilding parameters")
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let what = || format!("writing {}", path.display());
        let mut w = BufWriter::new(File::create(path).context(what())?);
        serde_json::to_writer_pretty(&mut w, self).context(what())?;
        w.write_all(b"\n").context(what())?;
        w.flush().context(what())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let what = || format!("reading {}", path.display());
        let file = File::open(path).context(what())?;
        let raw: serde_json::Value = serde_json::from_reader(BufReader::new(file)).context(what())?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Data(format!(
                    "{}: artifact format version {v} is not supported (expected {FORMAT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(CliError::Data(format!("{}: missing format_version", path.display()))),
        }
        serde_json::from_value(raw).context(what())
    }
}
