//! Variant comparison: one shared stage-1 run, a stage-2 fine-tune per
//! two-port variant, and a single-port baseline trained for the combined
//! epoch budget.

use serde::{Deserialize, Serialize};

use crate::dataset::StereoSample;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::{evaluate, train, EpochRecord, ExperimentConfig, Init, TrainReport, Variant};

/// The rows of the standard ablation table.
pub const TABLE_VARIANTS: [Variant; 4] = [Variant::BaselineSingle, Variant::UnwarpedPair, Variant::WarpedGt, Variant::SameNoise];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    /// Shared settings; `stage`, `variant`, `epochs` and the port count are
    /// set per run.
    pub base: ExperimentConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub variants: Vec<Variant>,
}

impl AblationPlan {
    fn config(&self, variant: Variant, stage: u8, epochs: usize) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.variant = variant;
        c.stage = stage;
        c.epochs = epochs;
        c.model = c.model.with_ports(variant.ports());
        c
    }

    /// Stage-1 configuration shared by the two-port variants.
    pub fn stage1_config(&self) -> ExperimentConfig {
        self.config(Variant::WarpedGt, 1, self.stage1_epochs)
    }

    pub fn stage2_config(&self, variant: Variant) -> ExperimentConfig {
        self.config(variant, 2, self.stage2_epochs)
    }

    /// Baseline and cold-start runs get both stage budgets.
    pub fn single_run_config(&self, variant: Variant) -> ExperimentConfig {
        let mut c = self.config(variant, 2, self.stage1_epochs + self.stage2_epochs);
        c.cold_start = true;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub dataset: String,
    pub mean_psnr_db: f64,
    /// `100 (v - baseline) / baseline`, when the baseline was run.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Variant,
    pub model: ModelParams<f32>,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub stage1: Option<AblationRun>,
    pub runs: Vec<AblationRun>,
}

/// Progress callback arguments: run label and the finished epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&str, &EpochRecord);

pub fn run_ablation(
    plan: &AblationPlan,
    train_set: &[StereoSample],
    test_set: &[StereoSample],
    dataset: &str,
    progress: Progress<'_>,
) -> Result<AblationOutcome> {
    if plan.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let mut stage1 = None;
    if plan.variants.iter().any(|v| v.ports() == 2) {
        let config = plan.stage1_config();
        let (model, report) = train(&config, train_set, test_set, Init::Fresh, |r| progress("stage-1", r))?;
        stage1 = Some(AblationRun { variant: config.variant, model, report });
    }

    let mut runs = Vec::new();
    for &variant in &plan.variants {
        let label = variant.name();
        let (config, init) = match (variant.ports(), &stage1) {
            (2, Some(s1)) => (plan.stage2_config(variant), Init::From(s1.model.clone())),
            _ => (plan.single_run_config(variant), Init::Fresh),
        };
        let (model, report) = train(&config, train_set, test_set, init, |r| progress(label, r))?;
        runs.push(AblationRun { variant, model, report });
    }

    let mut rows = Vec::new();
    for run in &runs {
        let psnr = evaluate(&run.model, test_set, run.variant, &plan.stage2_config(run.variant), plan.base.eval_seed)?.mean_psnr_db;
        rows.push(AblationRow { variant: run.variant, dataset: dataset.into(), mean_psnr_db: psnr, delta_pct: None });
    }
    if let Some(base) = rows.iter().find(|r| r.variant == Variant::BaselineSingle).map(|r| r.mean_psnr_db) {
        for r in &mut rows {
            r.delta_pct = Some(100.0 * (r.mean_psnr_db - base) / base);
        }
    }
    Ok(AblationOutcome { rows, stage1, runs })
}

/// CSV with header `variant,dataset,mean_psnr_db,delta_pct`.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,dataset,mean_psnr_db,delta_pct\n");
    for r in rows {
        let delta = r.delta_pct.map(|d| format!("{d:+.2}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.4},{}\n", r.variant, r.dataset, crate::raw::reportable_db(r.mean_psnr_db), delta));
    }
    out
}
