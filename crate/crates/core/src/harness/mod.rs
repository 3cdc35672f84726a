//! Training, evaluation, the family ablation, the convergence comparison and
//! the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod optim;
pub mod suite;
pub mod train;

use std::path::Path;

use crate::io::write_json;
use crate::kernels::{default_bank, render_bank_grid, BankManifest, KernelFamily};
use crate::Result;

pub use config::{ExperimentConfig, OptimizerConfig, OUT_DIR_ENV};
pub use experiments::{ablate, compare_convergence, AblationTable, ConvergenceReport};
pub use suite::{gradcheck_suite, SuiteReport};
pub use train::{evaluate, train, train_on, Dataset, EvalReport, RunReport};

/// Default cell size of the kernel grid image, in px.
pub const VIZ_CELL_PX: usize = 64;

/// Render the default bank of `family` to a PGM at `out`, with a JSON
/// manifest next to it (`<out>.json`).
pub fn viz_kernels(family: KernelFamily, cell_px: usize, out: &Path) -> Result<BankManifest> {
    let bank = default_bank(family)?;
    let img = render_bank_grid(&bank, cell_px);
    img.write_pgm(out)?;
    let manifest = BankManifest::describe(&bank, cell_px, &img);
    write_json(&crate::io::sidecar_path(out), &manifest)?;
    Ok(manifest)
}
