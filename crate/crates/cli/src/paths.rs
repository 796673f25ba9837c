//! Workdir layout: every artifact lives at a fixed relative path so
//! manifests can reference each other portably.

use std::path::{Path, PathBuf};

pub fn data_dir(workdir: &Path) -> PathBuf {
    workdir.join("data")
}

pub fn split_manifest(workdir: &Path, split: &str) -> PathBuf {
    data_dir(workdir).join(format!("{split}.json"))
}

pub fn split_inputs(workdir: &Path, split: &str) -> PathBuf {
    data_dir(workdir).join(format!("{split}.lgt"))
}

pub fn split_clean(workdir: &Path, split: &str) -> PathBuf {
    data_dir(workdir).join(format!("{split}.clean.lgt"))
}

pub fn oracle_dir(workdir: &Path) -> PathBuf {
    workdir.join("oracle")
}

pub fn oracle_checkpoint(workdir: &Path) -> PathBuf {
    oracle_dir(workdir).join("oracle.json")
}

pub fn calibration(workdir: &Path) -> PathBuf {
    oracle_dir(workdir).join("calibration.json")
}

pub fn checkpoints_dir(workdir: &Path) -> PathBuf {
    workdir.join("checkpoints")
}

pub fn pretrained_checkpoint(workdir: &Path) -> PathBuf {
    checkpoints_dir(workdir).join("pretrained.json")
}

pub fn adapted_checkpoint(workdir: &Path) -> PathBuf {
    checkpoints_dir(workdir).join("adapted.json")
}

pub fn pretrain_loss_csv(workdir: &Path) -> PathBuf {
    checkpoints_dir(workdir).join("pretrain_loss.csv")
}

pub fn finetune_loss_csv(workdir: &Path) -> PathBuf {
    checkpoints_dir(workdir).join("finetune_loss.csv")
}

pub fn stage1_dir(workdir: &Path) -> PathBuf {
    workdir.join("stage1")
}

pub fn stage1_inputs(workdir: &Path) -> PathBuf {
    stage1_dir(workdir).join("inputs.lgt")
}

pub fn stage1_candidates(workdir: &Path) -> PathBuf {
    stage1_dir(workdir).join("candidates.lgt")
}

pub fn gate_report(workdir: &Path) -> PathBuf {
    stage1_dir(workdir).join("gate_report.json")
}

pub fn stage1_audit(workdir: &Path) -> PathBuf {
    stage1_dir(workdir).join("audit.jsonl")
}

pub fn reports_dir(workdir: &Path) -> PathBuf {
    workdir.join("reports")
}

pub fn eval_report(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("eval.json")
}

pub fn eval_csv(workdir: &Path, section: &str) -> PathBuf {
    reports_dir(workdir).join(format!("eval_{section}.csv"))
}

pub fn run_manifest(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("run_manifest.json")
}

pub fn ablate_filter_report(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("ablate_filter.json")
}

pub fn ablate_filter_csv(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("ablate_filter.csv")
}

pub fn ablate_mix_report(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("ablate_mix.json")
}

pub fn ablate_mix_csv(workdir: &Path) -> PathBuf {
    reports_dir(workdir).join("ablate_mix.csv")
}

pub fn lock_file(workdir: &Path) -> PathBuf {
    workdir.join(".lego.lock")
}
