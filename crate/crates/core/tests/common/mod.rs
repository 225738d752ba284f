#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffaug_core::synth::{synthesize, write_population, PopulationConfig, PopulationFiles};
use diffaug_core::VolumeFormat;

/// Writes a small synthetic population and returns its file locations.
pub fn small_population(dir: &Path, subjects: usize, dims: [usize; 2], format: VolumeFormat) -> PopulationFiles {
    let cfg = PopulationConfig {
        subjects,
        dims,
        seed: 11,
        ..PopulationConfig::default()
    };
    let pop = synthesize(&cfg).unwrap();
    write_population(&pop, dir, format).unwrap()
}

/// Every file under `dir` (relative path to bytes).
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
