//! On-disk benchmark bundle: schema, manifest, one CSV per block and split,
//! and a checksum list over all of them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vhgm_core::schema::{compute_train_stats, merge_tables, DatasetSchema, HeteroTable, TrainStats};
use vhgm_core::synth::{Benchmark, CopulaSpec, Manifest};

use crate::CliError;

pub const SCHEMA_FILE: &str = "schema.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUM_FILE: &str = "checksums.txt";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_file(block: &str, split: &str) -> String {
    format!("{block}_{split}.csv")
}

/// Writes every artifact of `bench` into `dir` and returns the checksum lines.
pub fn write_bundle(bench: &Benchmark, dir: &Path) -> Result<Vec<(String, String)>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec![SCHEMA_FILE.to_string(), MANIFEST_FILE.to_string()];
    std::fs::write(dir.join(SCHEMA_FILE), bench.schema().to_json()?)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&bench.manifest())?)?;
    for (k, block) in bench.design.blocks.iter().enumerate() {
        for (split, table) in SPLITS.iter().zip([&bench.train[k], &bench.val[k], &bench.test[k]]) {
            let name = split_file(&block.name, split);
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            table.write_csv(&mut w)?;
            w.flush()?;
            files.push(name);
        }
    }
    files.sort();
    let sums: Vec<(String, String)> =
        files.iter().map(|f| Ok((f.clone(), sha256_file(&dir.join(f))?))).collect::<Result<_, CliError>>()?;
    let mut out = String::from("# format_version 1\n");
    for (f, h) in &sums {
        out.push_str(&format!("{h}  {f}\n"));
    }
    std::fs::write(dir.join(CHECKSUM_FILE), out)?;
    Ok(sums)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub schema: DatasetSchema,
    pub manifest: Manifest,
    pub names: Vec<String>,
    pub train: Vec<HeteroTable>,
    pub val: Vec<HeteroTable>,
    pub test: Vec<HeteroTable>,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(CliError::validation(format!("bundle file {} not found", p.display())))
            }
        };
        let schema = DatasetSchema::from_json(&std::fs::read_to_string(need(SCHEMA_FILE)?)?)?;
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(need(MANIFEST_FILE)?)?)?;
        let names: Vec<String> = manifest.design.blocks.iter().map(|b| b.name.clone()).collect();
        let mut splits: [Vec<HeteroTable>; 3] = Default::default();
        for name in &names {
            for (s, split) in SPLITS.iter().enumerate() {
                let file = File::open(need(&split_file(name, split))?)?;
                splits[s].push(HeteroTable::read_csv(BufReader::new(file), schema.version, name)?);
            }
        }
        let [train, val, test] = splits;
        Ok(Self { dir: dir.to_path_buf(), schema, manifest, names, train, val, test })
    }

    pub fn merged(&self, split: &[HeteroTable]) -> Result<HeteroTable, CliError> {
        Ok(merge_tables(split, &self.schema)?)
    }

    pub fn train_stats(&self) -> Result<TrainStats, CliError> {
        Ok(compute_train_stats(&self.merged(&self.train)?, &self.schema)?)
    }

    /// Rebuilds the generating process recorded in the manifest.
    pub fn copula(&self) -> Result<CopulaSpec, CliError> {
        let m = &self.manifest;
        Ok(CopulaSpec::new(self.schema.clone(), m.sigma.clone(), m.marginals.clone(), m.seed)?)
    }

    pub fn block_index(&self, name: &str) -> Result<usize, CliError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::validation(format!("no block `{name}`; bundle has {}", self.names.join(", "))))
    }
}
