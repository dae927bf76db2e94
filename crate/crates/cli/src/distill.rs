//! `distill-toy`: teacher training, distribution matching distillation and
//! the JSON/CSV report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use streamdiff_core::dmd::{kl_to_mixture, train_dmd, train_teacher, DmdConfig, TeacherConfig, FAKE_UPDATE_EVERY};
use streamdiff_core::Rng;

use crate::CliError;

/// Final generator samples written to the scatter CSV.
pub const SCATTER_SAMPLES: usize = 2000;

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub seed: u64,
    pub generator_updates: usize,
    pub fake_updates: usize,
    pub kl_trajectory: Vec<(usize, f32)>,
    /// `[n, 2]` row-major.
    pub samples: Vec<f32>,
}

impl DistillReport {
    pub fn kl_initial(&self) -> f32 {
        self.kl_trajectory.first().map_or(f32::NAN, |p| p.1)
    }

    pub fn kl_final(&self) -> f32 {
        self.kl_trajectory.last().map_or(f32::NAN, |p| p.1)
    }

    pub fn sample_mean(&self) -> [f32; 2] {
        let n = (self.samples.len() / 2).max(1) as f32;
        let mut m = [0.0f32; 2];
        for p in self.samples.chunks_exact(2) {
            m[0] += p[0] / n;
            m[1] += p[1] / n;
        }
        m
    }

    pub fn kl_csv(&self) -> String {
        let mut s = String::from("iteration,kl\n");
        for (it, kl) in &self.kl_trajectory {
            let _ = writeln!(s, "{it},{kl}");
        }
        s
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("x,y\n");
        for p in self.samples.chunks_exact(2) {
            let _ = writeln!(s, "{},{}", p[0], p[1]);
        }
        s
    }

    pub fn to_json(&self, kl_csv: &Path, samples_csv: &Path) -> Value {
        let traj: Vec<Value> = self
            .kl_trajectory
            .iter()
            .map(|(it, kl)| json!({"iteration": it, "kl": kl}))
            .collect();
        json!({
            "seed": self.seed,
            "generator_updates": self.generator_updates,
            "fake_updates": self.fake_updates,
            "fake_update_every": FAKE_UPDATE_EVERY,
            "kl_initial": self.kl_initial(),
            "kl_final": self.kl_final(),
            "kl_ratio": self.kl_final() / self.kl_initial(),
            "sample_mean": self.sample_mean(),
            "kl_trajectory": traj,
            "kl_csv": kl_csv.display().to_string(),
            "samples_csv": samples_csv.display().to_string(),
        })
    }
}

pub fn distill(iterations: usize, seed: u64) -> Result<DistillReport, CliError> {
    let rng = Rng::new(seed);
    let teacher = train_teacher(&TeacherConfig::default(), &mut rng.derive(1))?;
    let cfg = DmdConfig {
        iterations,
        ..DmdConfig::default()
    };
    let out = train_dmd(&teacher, &cfg, &mut rng.derive(2))?;
    let mut eps = vec![0.0f32; 2 * SCATTER_SAMPLES];
    rng.derive(3).fill_normal(&mut eps);
    let samples = out.generator.sample(&eps);
    debug_assert!(kl_to_mixture(&samples).is_finite());
    Ok(DistillReport {
        seed,
        generator_updates: out.generator_updates,
        fake_updates: out.fake_updates,
        kl_trajectory: out.kl_trajectory,
        samples,
    })
}

/// `report.json` → `report_kl.csv`, `report_samples.csv`.
pub fn csv_paths(out: &Path) -> (PathBuf, PathBuf) {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let dir = out.parent().unwrap_or(Path::new(""));
    (dir.join(format!("{stem}_kl.csv")), dir.join(format!("{stem}_samples.csv")))
}

pub fn write_report(report: &DistillReport, out: &Path) -> Result<(), CliError> {
    let (kl_path, samples_path) = csv_paths(out);
    let json = serde_json::to_string_pretty(&report.to_json(&kl_path, &samples_path)).expect("report serializes");
    let files = [
        (&kl_path, report.kl_csv()),
        (&samples_path, report.samples_csv()),
        (&out.to_path_buf(), json + "\n"),
    ];
    for (i, (path, body)) in files.iter().enumerate() {
        if let Err(e) = std::fs::write(path, body) {
            for (p, _) in &files[..=i] {
                let _ = std::fs::remove_file(p);
            }
            return Err(CliError::io(path, e));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_names_follow_the_report() {
        let (a, b) = csv_paths(Path::new("out/run.json"));
        assert_eq!(a, Path::new("out/run_kl.csv"));
        assert_eq!(b, Path::new("out/run_samples.csv"));
    }

    #[test]
    fn short_run_accounts_updates() {
        let r = distill(10, 1).unwrap();
        assert_eq!(r.generator_updates, 10);
        assert_eq!(r.fake_updates, 2);
        assert_eq!(r.samples.len(), 2 * SCATTER_SAMPLES);
        assert_eq!(r.kl_csv().lines().count(), r.kl_trajectory.len() + 1);
    }
}
