//! Clip-pool manifests: a `pools.json` mapping stems to clip files, plus
//! the toy-pool writer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cassforge_core::conditioning::{read_fseq, write_fseq};
use cassforge_core::dsp::resample_to_mono_16k;
use cassforge_core::error::{Error, Result};
use cassforge_core::mixer::{Clip, ClipPool, StemPools};
use cassforge_core::toygen::{generate_toy_pools, ToyCorpusConfig};
use cassforge_core::wav::{read_wav, write_wav_f32};
use cassforge_core::StemKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub wav: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

/// On-disk pool manifest. Paths are relative to the manifest's directory.
/// `exclude` is the external accept/reject screen: listed clip ids are
/// dropped at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolsFile {
    #[serde(default)]
    pub exclude: Vec<String>,
    pub dx: Vec<ClipEntry>,
    pub fx: Vec<ClipEntry>,
    pub mx: Vec<ClipEntry>,
}

fn load_pool(
    entries: &[ClipEntry],
    stem: StemKind,
    base: &Path,
    exclude: &[String],
) -> Result<ClipPool> {
    let mut clips = Vec::with_capacity(entries.len());
    for entry in entries {
        let wav_path = base.join(&entry.wav);
        let raw = read_wav(&wav_path)?;
        let audio = resample_to_mono_16k(&raw)?;
        let features = match &entry.features {
            Some(p) => Some(read_fseq(base.join(p))?),
            None => None,
        };
        clips.push(Clip {
            id: entry.id.clone(),
            audio,
            features,
        });
    }
    let mut pool = ClipPool::new(stem, clips);
    pool.retain_accepted(exclude);
    pool.validate()?;
    Ok(pool)
}

/// Load `pools.json` and all referenced clips (resampled to mono 16 kHz).
pub fn load_pools(manifest_path: impl AsRef<Path>) -> Result<StemPools> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let file: PoolsFile = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let pools = StemPools {
        dx: load_pool(&file.dx, StemKind::Dx, base, &file.exclude)?,
        fx: load_pool(&file.fx, StemKind::Fx, base, &file.exclude)?,
        mx: load_pool(&file.mx, StemKind::Mx, base, &file.exclude)?,
    };
    pools.validate()?;
    Ok(pools)
}

fn write_pool(dir: &Path, pool: &ClipPool) -> Result<Vec<ClipEntry>> {
    let stem_dir = dir.join(pool.stem_kind.name());
    std::fs::create_dir_all(&stem_dir).map_err(|e| Error::io(&stem_dir, e))?;
    let mut entries = Vec::with_capacity(pool.clips.len());
    for clip in &pool.clips {
        let wav_rel = PathBuf::from(pool.stem_kind.name()).join(format!("{}.wav", clip.id));
        write_wav_f32(dir.join(&wav_rel), &clip.audio)?;
        let features = match &clip.features {
            Some(f) => {
                let rel = PathBuf::from(pool.stem_kind.name()).join(format!("{}.fseq", clip.id));
                write_fseq(dir.join(&rel), f)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ClipEntry {
            id: clip.id.clone(),
            wav: wav_rel,
            features,
        });
    }
    Ok(entries)
}

/// Write a pool set (clips plus `pools.json`) under `dir`.
pub fn write_pools(dir: impl AsRef<Path>, pools: &StemPools) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = PoolsFile {
        exclude: Vec::new(),
        dx: write_pool(dir, &pools.dx)?,
        fx: write_pool(dir, &pools.fx)?,
        mx: write_pool(dir, &pools.mx)?,
    };
    let manifest = dir.join("pools.json");
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Generate and write the parametric toy pools; returns the manifest path.
pub fn cmd_toy_pools(
    out_dir: impl AsRef<Path>,
    clips_per_stem: usize,
    clip_seconds: f64,
    seed: u64,
) -> Result<PathBuf> {
    let cfg = ToyCorpusConfig {
        clips_per_stem,
        clip_seconds,
        seed,
    };
    let pools = generate_toy_pools(&cfg);
    write_pools(out_dir, &pools)
}
