//! Run manifests: the provenance record written into every run directory
//! before training starts, so even a crashed run leaves behind what it was
//! attempting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// `manifest.json`: where the run came from and when it ran.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// 40-hex-digit id, unique per invocation.
    pub run_id: String,
    /// The `--config` path as given, if any.
    pub config_path: Option<PathBuf>,
    /// The dataset directory as given.
    pub dataset_path: PathBuf,
    /// The run directory itself (absolute if the caller's path was).
    pub output_dir: PathBuf,
    pub started: String,
    /// Missing until the run completes successfully.
    pub finished: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn timestamp() -> String {
    let now: DateTime<Utc> = Utc::now();
    now.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// A git-style content id: 160 bits of hex derived by folding the material
/// (config text, paths, wall clock, pid) through a 64-bit mixer. Not
/// cryptographic — it only needs to be unique and stable-looking in logs.
pub fn run_id(material: &str) -> String {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut state: u64 = 0x6a09_e667_f3bc_c908;
    for byte in material.bytes() {
        state = mix(state ^ u64::from(byte));
    }
    let mut out = String::with_capacity(40);
    for _ in 0..5 {
        state = mix(state);
        out.push_str(&format!("{:08x}", (state >> 32) as u32));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_look_like_object_ids_and_differ_by_material() {
        let a = run_id("config-a");
        let b = run_id("config-b");
        assert_eq!(a.len(), 40);
        assert!(a.bytes().all(|b| b.is_ascii_hexdigit()));
        assert_ne!(a, b);
        assert_eq!(a, run_id("config-a"));
    }
}
