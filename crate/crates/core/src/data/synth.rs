//! Deterministic synthetic CT volumes and their question/answer items.
//!
//! Every volume shows one organ (shape and position identify it) whose
//! brightness encodes the contrast phase, over a banded background whose
//! orientation encodes the imaging plane. An abnormality pattern may be
//! stamped into a contiguous run of slices inside one quadrant.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Value written into stamped abnormality pixels.
pub const STAMP_INTENSITY: f32 = 1.0;
/// Upper bound on any unstamped pixel.
pub const MAX_BACKGROUND: f32 = 0.7;

macro_rules! tag_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Data(format!(concat!("unknown ", stringify!($name), " '{}'"), s)))
            }
        }
    };
}

tag_enum!(QuestionType {
    Plane => "plane",
    Phase => "phase",
    Organ => "organ",
    Abnormality => "abnormality",
    Location => "location",
});

tag_enum!(Plane {
    Axial => "axial",
    Coronal => "coronal",
    Sagittal => "sagittal",
});

tag_enum!(Phase {
    NonContrast => "non_contrast",
    Arterial => "arterial",
    PortalVenous => "portal_venous",
});

tag_enum!(Organ {
    Liver => "liver",
    Spleen => "spleen",
    Kidney => "kidney",
    Pancreas => "pancreas",
});

tag_enum!(Archetype {
    Disk => "disk",
    Cross => "cross",
    Ring => "ring",
    None => "none",
});

tag_enum!(Quadrant {
    UpperLeft => "upper_left",
    UpperRight => "upper_right",
    LowerLeft => "lower_left",
    LowerRight => "lower_right",
});

impl Quadrant {
    /// Top-left corner of the quadrant in an `h × w` slice.
    pub fn origin(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::UpperLeft => (0, 0),
            Self::UpperRight => (0, w / 2),
            Self::LowerLeft => (h / 2, 0),
            Self::LowerRight => (h / 2, w / 2),
        }
    }
}

/// Ground truth planted in a synthetic volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeFacts {
    pub plane_tag: Plane,
    pub phase_tag: Phase,
    pub organ_tag: Organ,
    pub abnormality_tag: Archetype,
    pub planted_slices: Vec<usize>,
    pub planted_quadrant: Quadrant,
}

impl VolumeFacts {
    pub fn validate(&self, n_slices: usize) -> Result<()> {
        let p = &self.planted_slices;
        if p.is_empty() {
            return Err(Error::Data("planted_slices is empty".into()));
        }
        if p.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Data(format!("planted_slices {p:?} are not contiguous")));
        }
        if p[p.len() - 1] >= n_slices {
            return Err(Error::Data(format!(
                "planted slice {} is out of range for {n_slices} slices",
                p[p.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn has_abnormality(&self) -> bool {
        self.abnormality_tag != Archetype::None
    }
}

/// A stack of grayscale slices in `[0, 1]` plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    /// `n_slices · height · width` values, slice-major then row-major.
    pub pixels: Vec<f32>,
    pub facts: VolumeFacts,
}

impl Volume {
    pub fn slice_pixels(&self, n: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.pixels[n * len..(n + 1) * len]
    }

    pub fn slice(&self, n: usize) -> Tensor2 {
        let data = self.slice_pixels(n).iter().map(|&v| f64::from(v)).collect();
        Tensor2::from_vec(self.height, self.width, data).expect("slice dimensions")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_slices: usize,
    pub max_slices: usize,
    pub max_planted: usize,
    pub train_volumes: usize,
    pub dev_volumes: usize,
    pub test_volumes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            min_slices: 4,
            max_slices: 12,
            max_planted: 3,
            train_volumes: 500,
            dev_volumes: 50,
            test_volumes: 50,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_slices < 4 || self.max_slices < self.min_slices {
            return Err(Error::Config(format!(
                "slice range {}..={} must satisfy 4 <= min <= max",
                self.min_slices, self.max_slices
            )));
        }
        if self.height < 8 || self.width < 8 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "slices must be even-sized and at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.max_planted == 0 {
            return Err(Error::Config("max_planted must be positive".into()));
        }
        Ok(())
    }
}

/// Organ membership of pixel `(r, c)` in an `h × w` slice.
fn organ_mask(organ: Organ, r: f64, c: f64, h: f64, w: f64) -> bool {
    let (y, x) = ((r + 0.5) / h, (c + 0.5) / w);
    let ellipse = |cy: f64, cx: f64, ry: f64, rx: f64| {
        let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
        dy * dy + dx * dx <= 1.0
    };
    match organ {
        Organ::Liver => ellipse(0.45, 0.3, 0.32, 0.24),
        Organ::Spleen => ellipse(0.3, 0.78, 0.16, 0.12),
        Organ::Kidney => ellipse(0.72, 0.22, 0.13, 0.09) || ellipse(0.72, 0.78, 0.13, 0.09),
        Organ::Pancreas => (0.44..0.6).contains(&y) && (0.2..0.82).contains(&x),
    }
}

fn organ_intensity(phase: Phase) -> f64 {
    match phase {
        Phase::NonContrast => 0.15,
        Phase::Arterial => 0.35,
        Phase::PortalVenous => 0.55,
    }
}

/// Stamp membership at local coordinates inside a `qh × qw` quadrant.
pub fn stamp_mask(archetype: Archetype, r: usize, c: usize, qh: usize, qw: usize) -> bool {
    let cy = (qh as f64 - 1.0) / 2.0;
    let cx = (qw as f64 - 1.0) / 2.0;
    let scale = qh.min(qw) as f64 / 8.0;
    let (dy, dx) = ((r as f64 - cy) / scale, (c as f64 - cx) / scale);
    let d2 = dy * dy + dx * dx;
    match archetype {
        Archetype::Disk => d2 <= 2.6 * 2.6,
        Archetype::Ring => (1.8 * 1.8..=3.3 * 3.3).contains(&d2),
        Archetype::Cross => (dy.abs() <= 1.0 && dx.abs() <= 3.0) || (dx.abs() <= 1.0 && dy.abs() <= 3.0),
        Archetype::None => false,
    }
}

/// Builds one volume from `rng`. The same seed always yields the same volume.
pub fn generate_volume(id: impl Into<String>, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Volume {
    let n_slices = rng.random_range(cfg.min_slices..=cfg.max_slices);
    let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n);
    let plane = Plane::ALL[pick(rng, Plane::ALL.len())];
    let phase = Phase::ALL[pick(rng, Phase::ALL.len())];
    let organ = Organ::ALL[pick(rng, Organ::ALL.len())];
    let archetype = Archetype::ALL[pick(rng, Archetype::ALL.len())];
    let quadrant = Quadrant::ALL[pick(rng, Quadrant::ALL.len())];
    let run = rng.random_range(1..=cfg.max_planted.min(n_slices / 2).max(1));
    let start = rng.random_range(0..=n_slices - run);
    let planted: Vec<usize> = (start..start + run).collect();

    let (h, w) = (cfg.height, cfg.width);
    let mut pixels = Vec::with_capacity(n_slices * h * w);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    for n in 0..n_slices {
        let drift = 0.3 * n as f64;
        for r in 0..h {
            for c in 0..w {
                let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
                let mut v = 0.05;
                for &(fy, fx, phase0) in &waves {
                    v += 0.01 * (1.0 + (2.0 * PI * (fy * y + fx * x) + phase0 + drift).cos());
                }
                let band = match plane {
                    Plane::Axial => y,
                    Plane::Coronal => x,
                    Plane::Sagittal => (x + y) / 2.0,
                };
                v += 0.05 * (1.0 + (4.0 * PI * band).cos());
                if organ_mask(organ, r as f64, c as f64, h as f64, w as f64) {
                    v += organ_intensity(phase);
                }
                pixels.push((v as f32).min(MAX_BACKGROUND));
            }
        }
    }

    if archetype != Archetype::None {
        let (qh, qw) = (h / 2, w / 2);
        let (r0, c0) = quadrant.origin(h, w);
        for &n in &planted {
            for r in 0..qh {
                for c in 0..qw {
                    if stamp_mask(archetype, r, c, qh, qw) {
                        pixels[n * h * w + (r0 + r) * w + (c0 + c)] = STAMP_INTENSITY;
                    }
                }
            }
        }
    }

    Volume {
        id: id.into(),
        n_slices,
        height: h,
        width: w,
        pixels,
        facts: VolumeFacts {
            plane_tag: plane,
            phase_tag: phase,
            organ_tag: organ,
            abnormality_tag: archetype,
            planted_slices: planted,
            planted_quadrant: quadrant,
        },
    }
}

/// Seeds a generator for one volume of the corpus. Distinct `(split, index)`
/// pairs draw from distinct ChaCha streams of the master seed, so output does
/// not depend on generation order.
pub fn volume_rng(master_seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Dev = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}' (expected train|dev|test)")))
    }
}

/// One question about one volume, in the open-ended answer form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub volume_id: String,
    pub question: String,
    pub answer: String,
    pub question_type: QuestionType,
}

const TEMPLATES: [(QuestionType, [&str; 2]); 5] = [
    (QuestionType::Plane, ["which plane is this ct scan in", "in which plane was this image taken"]),
    (QuestionType::Phase, ["which phase is this ct scan", "what is the contrast phase of this image"]),
    (QuestionType::Organ, ["which organ is shown in this image", "what organ does this scan show"]),
    (
        QuestionType::Abnormality,
        ["what abnormality is seen in this image", "what kind of abnormality does this scan show"],
    ),
    (
        QuestionType::Location,
        ["in which quadrant is the abnormality located", "where is the abnormality located"],
    ),
];

/// Every phrasing the generator can emit for a question type.
pub fn question_templates(kind: QuestionType) -> &'static [&'static str] {
    &TEMPLATES
        .iter()
        .find(|(k, _)| *k == kind)
        .expect("every question type has templates")
        .1
}

/// Open-ended answer text determined by the volume facts.
pub fn answer_text(facts: &VolumeFacts, kind: QuestionType) -> &'static str {
    match kind {
        QuestionType::Plane => facts.plane_tag.as_str(),
        QuestionType::Phase => match facts.phase_tag {
            Phase::NonContrast => "non contrast",
            Phase::Arterial => "arterial phase",
            Phase::PortalVenous => "portal venous phase",
        },
        QuestionType::Organ => facts.organ_tag.as_str(),
        QuestionType::Abnormality => match facts.abnormality_tag {
            Archetype::Disk => "round lesion",
            Archetype::Cross => "stellate lesion",
            Archetype::Ring => "ring lesion",
            Archetype::None => "no abnormality",
        },
        QuestionType::Location => match (facts.has_abnormality(), facts.planted_quadrant) {
            (false, _) => "not applicable",
            (true, Quadrant::UpperLeft) => "upper left quadrant",
            (true, Quadrant::UpperRight) => "upper right quadrant",
            (true, Quadrant::LowerLeft) => "lower left quadrant",
            (true, Quadrant::LowerRight) => "lower right quadrant",
        },
    }
}

/// One question per family; the phrasing is chosen by `rng`.
pub fn generate_questions_with(volume: &Volume, rng: &mut impl Rng) -> Result<Vec<QaItem>> {
    volume.facts.validate(volume.n_slices)?;
    Ok(TEMPLATES
        .iter()
        .map(|(kind, phrasings)| QaItem {
            volume_id: volume.id.clone(),
            question: phrasings.choose(rng).expect("two phrasings").to_string(),
            answer: answer_text(&volume.facts, *kind).to_string(),
            question_type: *kind,
        })
        .collect())
}

/// Questions for `volume` with phrasings fixed by its id.
pub fn generate_questions(volume: &Volume) -> Result<Vec<QaItem>> {
    let seed = volume
        .id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    generate_questions_with(volume, &mut ChaCha8Rng::seed_from_u64(seed))
}
