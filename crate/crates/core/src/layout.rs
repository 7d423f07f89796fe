//! Results directory layout.
//!
//! ```text
//! <root>/<dataset>/fingerprint.json
//! <root>/<dataset>/splits.json
//! <root>/<dataset>/<plan-hash>/plan.json
//! <root>/<dataset>/<plan-hash>/preprocessed/<case>_{image,labels}.nii.gz, <case>_landmarks.json
//! <root>/<dataset>/<plan-hash>/fold_<k>/{checkpoint_best, checkpoint_final, log.jsonl, progress.csv}
//! ```

use std::path::{Path, PathBuf};

pub const RESULTS_ENV: &str = "NNLM_RESULTS";

/// `$NNLM_RESULTS` if set, else `results` under the working directory.
pub fn results_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(RESULTS_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("results"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    pub dataset: String,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, dataset: impl Into<String>) -> Self {
        Layout { root: root.into(), dataset: dataset.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join(&self.dataset)
    }

    pub fn fingerprint_path(&self) -> PathBuf {
        self.dataset_dir().join("fingerprint.json")
    }

    pub fn splits_path(&self) -> PathBuf {
        self.dataset_dir().join("splits.json")
    }

    pub fn plan_dir(&self, plan_hash: &str) -> PathBuf {
        self.dataset_dir().join(plan_hash)
    }

    pub fn plan_path(&self, plan_hash: &str) -> PathBuf {
        self.plan_dir(plan_hash).join("plan.json")
    }

    pub fn preprocessed_dir(&self, plan_hash: &str) -> PathBuf {
        self.plan_dir(plan_hash).join("preprocessed")
    }

    pub fn fold_dir(&self, plan_hash: &str, fold: &str) -> PathBuf {
        self.plan_dir(plan_hash).join(format!("fold_{fold}"))
    }
}
