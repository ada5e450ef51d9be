//! Run-directory dataset layout:
//! `<root>/<sample_id>/{mix,dx,fx,mx}.wav`, `manifest.csv`,
//! `features/{facial,scene}.fseq`, `mastering.json`.

use std::path::{Path, PathBuf};

use cassforge_core::conditioning::{read_fseq, write_fseq, FeatureSequence};
use cassforge_core::dsp::Waveform;
use cassforge_core::error::{Error, Result};
use cassforge_core::mixer::{write_manifest, SynthesizedSample};
use cassforge_core::wav::{read_wav, write_wav_f32};

pub fn sample_dir_name(index: usize) -> String {
    format!("{index:05}")
}

/// Write one synthesized sample under `dir`.
pub fn write_sample(dir: impl AsRef<Path>, sample: &SynthesizedSample) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_wav_f32(dir.join("mix.wav"), &sample.stems.mixture)?;
    write_wav_f32(dir.join("dx.wav"), &sample.stems.dx)?;
    write_wav_f32(dir.join("fx.wav"), &sample.stems.fx)?;
    write_wav_f32(dir.join("mx.wav"), &sample.stems.mx)?;
    write_manifest(dir.join("manifest.csv"), &sample.stems.manifest)?;
    let mastering = serde_json::to_string_pretty(&sample.mastering)?;
    std::fs::write(dir.join("mastering.json"), mastering)
        .map_err(|e| Error::io(dir.join("mastering.json"), e))?;
    if sample.facial.is_some() || sample.scene.is_some() {
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        if let Some(f) = &sample.facial {
            write_fseq(feat_dir.join("facial.fseq"), f)?;
        }
        if let Some(s) = &sample.scene {
            write_fseq(feat_dir.join("scene.fseq"), s)?;
        }
    }
    Ok(())
}

/// One sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub dir: PathBuf,
    pub mixture: Waveform,
    pub dx: Waveform,
    pub fx: Waveform,
    pub mx: Waveform,
    pub facial: Option<FeatureSequence>,
    pub scene: Option<FeatureSequence>,
}

impl LoadedSample {
    pub fn load(dir: impl AsRef<Path>) -> Result<LoadedSample> {
        let dir = dir.as_ref();
        let facial_path = dir.join("features/facial.fseq");
        let scene_path = dir.join("features/scene.fseq");
        Ok(LoadedSample {
            dir: dir.to_path_buf(),
            mixture: read_wav(dir.join("mix.wav"))?,
            dx: read_wav(dir.join("dx.wav"))?,
            fx: read_wav(dir.join("fx.wav"))?,
            mx: read_wav(dir.join("mx.wav"))?,
            facial: facial_path
                .exists()
                .then(|| read_fseq(&facial_path))
                .transpose()?,
            scene: scene_path
                .exists()
                .then(|| read_fseq(&scene_path))
                .transpose()?,
        })
    }

    pub fn has_features(&self) -> bool {
        self.facial.is_some() && self.scene.is_some()
    }
}

/// All samples under a dataset root (subdirectories containing `mix.wav`),
/// sorted by directory name.
pub struct Dataset {
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset> {
        let root = root.as_ref();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join("mix.wav").exists())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::validation(format!(
                "{}: no sample directories (expected <id>/mix.wav)",
                root.display()
            )));
        }
        let samples = dirs
            .iter()
            .map(LoadedSample::load)
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
