//! `eval` command: per-stem SI-SDR(i) and WPR plus set-level Fréchet
//! distance and pairwise KL, computing whatever the supplied inputs allow.

use std::path::{Path, PathBuf};

use serde::Serialize;

use cassforge_core::error::{Error, Result};
use cassforge_core::metrics::{
    frechet_distance, pairwise_kl, read_act, read_emb, si_sdr, si_sdri, wpr, ActivationMatrix,
    ClassGrouping, WPR_MIN_RUN, WPR_THRESHOLD,
};
use cassforge_core::sed::sed_from_waveform;
use cassforge_core::wav::read_wav;
use cassforge_core::StemKind;

#[derive(Debug, Clone, Serialize)]
pub struct EvalArgs {
    /// Directory with estimated {dx,fx,mx}.wav.
    pub est_dir: PathBuf,
    /// Directory with reference {dx,fx,mx,mix}.wav.
    pub ref_dir: Option<PathBuf>,
    /// Directory with external {dx,fx,mx}.act activations.
    pub acts_dir: Option<PathBuf>,
    /// External embedding files for the Fréchet distance.
    pub emb_est: Option<PathBuf>,
    pub emb_ref: Option<PathBuf>,
    /// Per-clip class-probability files (.emb layout) for pairwise KL.
    pub kl_est: Option<PathBuf>,
    pub kl_ref: Option<PathBuf>,
    /// Grouping CSV for external activations (built-in detector uses the
    /// identity grouping).
    pub grouping_csv: Option<PathBuf>,
    pub report_path: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StemReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdri: Option<f64>,
    /// None when the metric was not computed; Some(None) is encoded as
    /// null when the track was entirely silent for the detector.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wpr: Option<Option<f64>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Averages {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdri: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wpr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dx: StemReport,
    pub fx: StemReport,
    pub mx: StemReport,
    pub averages: Averages,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frechet_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise_kl: Option<f64>,
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn stem(&self, kind: StemKind) -> &StemReport {
        match kind {
            StemKind::Dx => &self.dx,
            StemKind::Fx => &self.fx,
            StemKind::Mx => &self.mx,
        }
    }

    fn stem_mut(&mut self, kind: StemKind) -> &mut StemReport {
        match kind {
            StemKind::Dx => &mut self.dx,
            StemKind::Fx => &mut self.fx,
            StemKind::Mx => &mut self.mx,
        }
    }

    /// Fixed-width summary table.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:>10.3}"),
            None => format!("{:>10}", "-"),
        };
        let fmt_wpr = |v: Option<Option<f64>>| match v {
            Some(Some(x)) => format!("{:>10.4}", x),
            Some(None) => format!("{:>10}", "undef"),
            None => format!("{:>10}", "-"),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6}{:>10}{:>10}{:>10}\n",
            "stem", "si_sdr", "si_sdri", "wpr"
        ));
        for stem in StemKind::ALL {
            let r = self.stem(stem);
            out.push_str(&format!(
                "{:<6}{}{}{}\n",
                stem.name(),
                fmt(r.si_sdr),
                fmt(r.si_sdri),
                fmt_wpr(r.wpr),
            ));
        }
        out.push_str(&format!(
            "{:<6}{}{}{}\n",
            "avg",
            fmt(self.averages.si_sdr),
            fmt(self.averages.si_sdri),
            fmt(self.averages.wpr),
        ));
        if let Some(f) = self.frechet_distance {
            out.push_str(&format!("frechet_distance: {f:.4}\n"));
        }
        if let Some(k) = self.pairwise_kl {
            out.push_str(&format!("pairwise_kl: {k:.4}\n"));
        }
        for s in &self.skipped {
            out.push_str(&format!("skipped: {s}\n"));
        }
        out
    }
}

fn mean3(values: [Option<f64>; 3]) -> Option<f64> {
    if values.iter().all(|v| v.is_some()) {
        Some(values.iter().map(|v| v.unwrap()).sum::<f64>() / 3.0)
    } else {
        None
    }
}

fn activation_for(
    stem: StemKind,
    est_path: &Path,
    acts_dir: &Option<PathBuf>,
) -> Result<(ActivationMatrix, bool)> {
    if let Some(dir) = acts_dir {
        let p = dir.join(format!("{}.act", stem.name()));
        return Ok((read_act(&p)?, true));
    }
    let wav = read_wav(est_path)?;
    Ok((sed_from_waveform(&wav)?, false))
}

/// Compute the report. Partial inputs compute what is possible; everything
/// skipped is listed in `skipped`.
pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let mut report = EvalReport {
        dx: StemReport::default(),
        fx: StemReport::default(),
        mx: StemReport::default(),
        averages: Averages::default(),
        frechet_distance: None,
        pairwise_kl: None,
        skipped: Vec::new(),
    };

    // SI-SDR / SI-SDRi against references.
    match &args.ref_dir {
        Some(ref_dir) => {
            let mix_path = ref_dir.join("mix.wav");
            let mixture = if mix_path.exists() {
                Some(read_wav(&mix_path)?)
            } else {
                report
                    .skipped
                    .push("si_sdri: no mix.wav in reference directory".to_string());
                None
            };
            for stem in StemKind::ALL {
                let reference = read_wav(ref_dir.join(format!("{}.wav", stem.name())))?;
                let estimate = read_wav(args.est_dir.join(format!("{}.wav", stem.name())))?;
                if reference.len() != estimate.len() {
                    return Err(Error::validation(format!(
                        "{} estimate length {} != reference length {}",
                        stem,
                        estimate.len(),
                        reference.len()
                    )));
                }
                let r = report.stem_mut(stem);
                r.si_sdr = Some(si_sdr(&reference, &estimate)?);
                if let Some(mix) = &mixture {
                    r.si_sdri = Some(si_sdri(&reference, &estimate, mix)?);
                }
            }
        }
        None => report
            .skipped
            .push("si_sdr/si_sdri: no reference directory supplied".to_string()),
    }

    // WPR per stem, from external activations or the built-in detector.
    let grouping = match (&args.grouping_csv, &args.acts_dir) {
        (Some(path), _) => ClassGrouping::from_csv_file(path)?,
        (None, Some(_)) => {
            // External activations usually carry fine classes; without a
            // grouping we can only accept the identity classes.
            ClassGrouping::identity()
        }
        (None, None) => ClassGrouping::identity(),
    };
    for stem in StemKind::ALL {
        let est_path = args.est_dir.join(format!("{}.wav", stem.name()));
        match activation_for(stem, &est_path, &args.acts_dir) {
            Ok((act, _external)) => {
                let value = wpr(&act, &grouping, stem, WPR_THRESHOLD, WPR_MIN_RUN)?;
                report.stem_mut(stem).wpr = Some(value);
            }
            Err(e) => {
                report.skipped.push(format!("wpr {}: {e}", stem.name()));
            }
        }
    }

    // Fréchet distance over embedding sets.
    match (&args.emb_est, &args.emb_ref) {
        (Some(est), Some(reference)) => {
            let a = read_emb(est)?;
            let b = read_emb(reference)?;
            report.frechet_distance = Some(frechet_distance(&b, &a)?);
        }
        (None, None) => report
            .skipped
            .push("frechet_distance: no embedding files supplied".to_string()),
        _ => {
            return Err(Error::validation(
                "frechet distance needs both --emb-est and --emb-ref".to_string(),
            ))
        }
    }

    // Pairwise KL over per-clip class probabilities.
    match (&args.kl_est, &args.kl_ref) {
        (Some(est), Some(reference)) => {
            let p = read_emb(reference)?;
            let q = read_emb(est)?;
            report.pairwise_kl = Some(pairwise_kl(&p.data, &q.data)?);
        }
        (None, None) => report
            .skipped
            .push("pairwise_kl: no probability files supplied".to_string()),
        _ => {
            return Err(Error::validation(
                "pairwise KL needs both --kl-est and --kl-ref".to_string(),
            ))
        }
    }

    report.averages = Averages {
        si_sdr: mean3([report.dx.si_sdr, report.fx.si_sdr, report.mx.si_sdr]),
        si_sdri: mean3([report.dx.si_sdri, report.fx.si_sdri, report.mx.si_sdri]),
        wpr: mean3([
            report.dx.wpr.flatten(),
            report.fx.wpr.flatten(),
            report.mx.wpr.flatten(),
        ]),
    };

    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let report = run_eval(args)?;
    if let Some(parent) = args.report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&args.report_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&args.report_path, e))?;
    Ok(report)
}
