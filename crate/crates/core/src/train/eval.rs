use std::fmt::Write as _;
use std::path::Path;

use crate::dcp::{dehaze_dcp, DcpConfig};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{psnr, ssim, MetricReport, RowStatus};
use crate::model::{Branches, FusionKind, Model, ModelConfig};
use crate::synth::Manifest;

use super::{train_on, TrainConfig, TrainData};

/// Runs the model on an image of any size: the input is edge-padded up to
/// the required multiple and the output cropped back.
pub fn restore_image(model: &Model<f32>, image: &ImageBuffer) -> Result<ImageBuffer> {
    let m = model.config.size_multiple();
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        ImageBuffer::from_fn(ph, pw, |y, x, c| image.get(y.min(h - 1), x.min(w - 1), c))
    };
    let out = ImageBuffer::from_tensor(&model.infer(&padded.to_tensor::<f32>())?)?;
    if (ph, pw) == (h, w) {
        Ok(out)
    } else {
        out.crop(0, 0, h, w)
    }
}

fn score(out: &ImageBuffer, clean: &ImageBuffer) -> Result<RowStatus> {
    Ok(RowStatus::Ok {
        psnr_db: psnr(out, clean, 1.0)?,
        ssim: ssim(out, clean)?,
    })
}

/// Scores every manifest pair: the degraded input itself, the model, and
/// (with `dcp`) the dark-channel baseline. Unreadable pairs become
/// `missing` rows and the run continues.
pub fn evaluate(model: &Model<f32>, manifest: &Manifest, dcp: Option<&DcpConfig>) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    report.notes.push((
        "ssim".into(),
        "Rec.601 luminance, 11x11 Gaussian (sigma 1.5), valid windows".into(),
    ));
    report.notes.push(("psnr".into(), "float [0,1] domain, peak 1".into()));
    if let Some(c) = dcp {
        c.validate()?;
        report.notes.push((
            "dcp".into(),
            format!(
                "patch={} omega={} t0={} airlight_percent={}, no guided-filter refinement",
                c.patch, c.omega, c.t0, c.airlight_percent
            ),
        ));
    }
    let mut methods = vec!["degraded", "model"];
    if dcp.is_some() {
        methods.push("dcp");
    }
    for row in &manifest.rows {
        let load = |f: &str| ImageBuffer::load(manifest.path_of(f)).map_err(|e| format!("{f}: {e}"));
        let pair = match (load(&row.degraded), load(&row.clean)) {
            (Ok(d), Ok(c)) if d.same_shape(&c) => Ok((d, c)),
            (Ok(_), Ok(_)) => Err("degraded and clean sizes differ".to_string()),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        let (degraded, clean) = match pair {
            Ok(p) => p,
            Err(why) => {
                log::warn!("sample `{}`: {why}", row.id);
                for m in &methods {
                    report.push(m, &row.id, RowStatus::Missing(why.clone()));
                }
                continue;
            }
        };
        report.push("degraded", &row.id, score(&degraded, &clean)?);
        report.push("model", &row.id, score(&restore_image(model, &degraded)?, &clean)?);
        if let Some(c) = dcp {
            report.push("dcp", &row.id, score(&dehaze_dcp(&degraded, c)?, &clean)?);
        }
    }
    Ok(report)
}

/// The five branch/fusion topologies with their published PSNR/SSIM.
pub const ABLATION_VARIANTS: [(&str, Branches, FusionKind, f64, f64); 5] = [
    (
        "only Transformer Branch",
        Branches::Transformer,
        FusionKind::None,
        31.426,
        0.941,
    ),
    ("only CNN Branch", Branches::Cnn, FusionKind::None, 20.449, 0.826),
    ("Transformer + CNN", Branches::Both, FusionKind::Add, 30.986, 0.941),
    (
        "Trans. + CNN + SK Fusion",
        Branches::Both,
        FusionKind::Sk,
        31.667,
        0.948,
    ),
    (
        "Trans. + CNN + Gate Fusion",
        Branches::Both,
        FusionKind::Gate,
        34.150,
        0.952,
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub config: ModelConfig,
    pub parameters: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub reference_psnr_db: f64,
    pub reference_ssim: f64,
    pub final_loss: f64,
    pub data_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seed: u64,
    pub steps: u64,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# seed: {}\n# steps: {}\n", self.seed, self.steps);
        out.push_str("variant\tbranches\tfusion\tparameters\tpsnr_db\tssim\treference_psnr_db\treference_ssim\tfinal_loss\tdata_digest\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.3}\t{:.3}\t{:.9e}\t{}",
                r.label,
                r.config.branches,
                r.config.fusion,
                r.parameters,
                r.psnr_db,
                r.ssim,
                r.reference_psnr_db,
                r.reference_ssim,
                r.final_loss,
                r.data_digest
            );
        }
        out
    }

    /// Labels sorted by measured PSNR, best first.
    pub fn ordering(&self) -> Vec<&'static str> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.psnr_db.total_cmp(&a.psnr_db));
        rows.into_iter().map(|r| r.label).collect()
    }
}

/// Trains the five topologies with the same seed, data order and budget, and
/// scores each on `eval` (the training manifest when `None`). Per-variant
/// checkpoints and loss logs go to `out_dir/<n>_<fusion>/` when given.
pub fn run_ablation(base: &TrainConfig, eval: Option<&Manifest>, out_dir: Option<&Path>) -> Result<AblationTable> {
    let train_manifest = Manifest::load(&base.manifest)?;
    let data = TrainData::load(&train_manifest)?;
    let eval = eval.unwrap_or(&train_manifest);
    let mut rows = Vec::new();
    for (i, (label, branches, fusion, p_psnr, p_ssim)) in ABLATION_VARIANTS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.branches = *branches;
        cfg.model.fusion = *fusion;
        let dir = out_dir.map(|d| d.join(format!("{}_{}_{}", i + 1, branches, fusion)));
        log::info!("ablation: training `{label}`");
        let outcome = train_on(&cfg, &data, dir.as_deref(), None)?;
        let model = &outcome.checkpoint.model;
        let report = evaluate(model, eval, None)?;
        let (psnr_db, ssim) = report
            .mean("model")
            .ok_or_else(|| Error::Data("ablation evaluation scored no images".into()))?;
        rows.push(AblationRow {
            label,
            config: cfg.model.clone(),
            parameters: model.num_parameters(),
            psnr_db,
            ssim,
            reference_psnr_db: *p_psnr,
            reference_ssim: *p_ssim,
            final_loss: outcome.losses.last().map(|l| l.1).unwrap_or(f64::NAN),
            data_digest: outcome.data_digest,
        });
    }
    Ok(AblationTable {
        rows,
        seed: base.seed,
        steps: base.steps,
    })
}
