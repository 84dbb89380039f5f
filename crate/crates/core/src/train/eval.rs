//! Held-out evaluation and static/dynamic decomposition.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TrainFrame;
use crate::checkpoint::Checkpoint;
use crate::field::HexPlaneField;
use crate::metrics::{masked_psnr, masked_ssim, psnr, ssim_metric};
use crate::render::{render, CameraModel, RenderOptions, RenderOutput};
use crate::scene::{DeformedGaussians, GaussianSet};
use crate::{Error, Result};

/// Renders the canonical set deformed to time `t`, or as-is without a field.
pub fn render_at(
    scene: &GaussianSet,
    field: Option<&HexPlaneField>,
    camera: &CameraModel,
    t: f64,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let deformed = match field {
        Some(f) => f.deform(scene, t)?.0,
        None => DeformedGaussians::from_static(scene, 0),
    };
    Ok(render(&deformed, camera, opts)?.0)
}

/// Non-finite values are written as the strings `"inf"`, `"-inf"` and
/// `"nan"` since JSON has no literal for them.
mod sentinel {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }

    fn to_num(v: f64) -> Num {
        if v.is_finite() {
            Num::F(v)
        } else if v.is_nan() {
            Num::S("nan".into())
        } else if v > 0.0 {
            Num::S("inf".into())
        } else {
            Num::S("-inf".into())
        }
    }

    fn from_num<E: serde::de::Error>(n: Num) -> std::result::Result<f64, E> {
        match n {
            Num::F(v) => Ok(v),
            Num::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("expected a number or inf sentinel, got {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_num(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        from_num(Num::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
            v.map(to_num).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
            Option::<Num>::deserialize(d)?.map(from_num).transpose()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub time: f64,
    #[serde(with = "sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    /// Restricted to the dynamic-region mask; absent without a mask or
    /// when the mask is empty in this frame.
    #[serde(with = "sentinel::option", default, skip_serializing_if = "Option::is_none")]
    pub masked_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    #[serde(with = "sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(with = "sentinel::option", default, skip_serializing_if = "Option::is_none")]
    pub masked_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_ssim: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Picks the model whose field covers `t`; static models cover everything.
fn model_for(models: &[Checkpoint], t: f64) -> Option<&Checkpoint> {
    models
        .iter()
        .find(|m| m.field.as_ref().is_none_or(|f| (f.bounds().t_min..=f.bounds().t_max).contains(&t)))
        .or_else(|| {
            // Nearest time range for frames between clips.
            models.iter().min_by(|a, b| {
                let gap = |m: &Checkpoint| {
                    m.field
                        .as_ref()
                        .map_or(0.0, |f| (f.bounds().t_min - t).max(t - f.bounds().t_max).max(0.0))
                };
                gap(a).total_cmp(&gap(b))
            })
        })
}

/// Per-frame PSNR/SSIM (and their masked variants where masks exist),
/// averaged per image over the frames.
pub fn evaluate(models: &[Checkpoint], frames: &[TrainFrame], opts: &RenderOptions) -> Result<EvalReport> {
    if models.is_empty() || frames.is_empty() {
        return Err(Error::invalid("evaluation needs at least one model and one frame"));
    }
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let m = model_for(models, f.time).expect("models is non-empty");
        let r = render_at(&m.scene, m.field.as_ref(), &f.camera, f.time, opts)?;
        let (w, h) = (f.data.width, f.data.height);
        let rgb: Vec<f64> = r.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (mut mp, mut ms) = (None, None);
        if let Some(mask) = f.data.mask.as_ref().filter(|m| m.iter().any(|v| *v)) {
            mp = Some(masked_psnr(&rgb, &f.data.rgb, mask, 3)?);
            ms = masked_ssim(&rgb, &f.data.rgb, mask, w, h, 3)?;
        }
        out.push(FrameMetrics {
            index: f.index,
            time: f.time,
            psnr: psnr(&rgb, &f.data.rgb)?,
            ssim: ssim_metric(&rgb, &f.data.rgb, w, h, 3)?,
            masked_psnr: mp,
            masked_ssim: ms,
        });
    }
    Ok(EvalReport {
        psnr: mean(out.iter().map(|f| f.psnr)).unwrap_or(f64::NAN),
        ssim: mean(out.iter().map(|f| f.ssim)).unwrap_or(f64::NAN),
        masked_psnr: mean(out.iter().filter_map(|f| f.masked_psnr)),
        masked_ssim: mean(out.iter().filter_map(|f| f.masked_ssim)),
        frames: out,
    })
}

/// Per-Gaussian time-averaged position-offset norm over `samples` times
/// spread evenly across the field's time range (endpoints included).
pub fn dynamic_scores(scene: &GaussianSet, field: &HexPlaneField, samples: usize) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::invalid("at least one time sample is needed"));
    }
    let b = field.bounds();
    let mut score = vec![0.0; scene.len()];
    for k in 0..samples {
        let s = if samples == 1 { 0.5 } else { k as f64 / (samples - 1) as f64 };
        let t = b.t_min + (b.t_max - b.t_min) * s;
        let (_, tape) = field.deform(scene, t)?;
        for (acc, d) in score.iter_mut().zip(tape.offsets.chunks_exact(3)) {
            *acc += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() / samples as f64;
        }
    }
    Ok(score)
}
