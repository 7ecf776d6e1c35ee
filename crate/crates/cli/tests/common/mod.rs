#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use advcomp_core::data::AttackMethod;
use advcomp_core::harness::{run_pipeline, RunConfig};
use advcomp_core::nn::TrainOptions;
use advcomp_core::zoo::{default_zoo, train_zoo, ZooTrainOptions};
use tempfile::TempDir;

pub const SIZE: usize = 16;

pub struct Fixture {
    _root: TempDir,
    pub zoo: PathBuf,
    pub data: PathBuf,
    pub run: PathBuf,
}

/// Quickly trained 16x16 zoo, a small dataset the target gets right, and
/// one TDMI run over it. Built once per test binary.
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = TempDir::new().unwrap();
        let zoo = root.path().join("zoo");
        let opts = ZooTrainOptions {
            seed: 5,
            image_size: SIZE,
            train_images: 300,
            test_images: 50,
            train: TrainOptions {
                epochs: 3,
                learning_rate: 3e-3,
                ..TrainOptions::default()
            },
        };
        train_zoo(&zoo, &default_zoo(SIZE), &opts, |_| {}).unwrap();
        let data = root.path().join("data");
        advcomp_cli::commands::make_dataset_command(&zoo, "t0", 4, 1, &data).unwrap();
        let run = root.path().join("run");
        run_pipeline(&small_config(AttackMethod::Tdmi, &zoo, &data), &run).unwrap();
        Fixture {
            _root: root,
            zoo,
            data,
            run,
        }
    })
}

pub fn small_config(method: AttackMethod, zoo: &Path, data: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(method);
    cfg.seed = 11;
    cfg.zoo_dir = zoo.to_path_buf();
    cfg.data_dir = data.to_path_buf();
    cfg.attack
        .insert("iterations".into(), toml::Value::Integer(2));
    cfg
}

/// Private copy of the fixture run so a test can append annotations.
pub fn fresh_run() -> (TempDir, PathBuf) {
    let src = &fixture().run;
    let dir = TempDir::new().unwrap();
    let dst = dir.path().join("run");
    copy_dir(src, &dst);
    (dir, dst)
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}
