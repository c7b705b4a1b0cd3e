//! Turns sample records into network-ready face crops.

use std::collections::HashMap;

use thiserror::Error;

use crate::augment::{draw_five, max_integer_shift, normalize_crop_padded, AugmentError, CropTransform};
use crate::blend::{compose_morph_detailed, BlendError, MorphComposite, MorphParams, OuterSource};
use crate::dataset::{AugmentRef, FaceRecord, SampleKind, SampleRecord};
use crate::geometry::Point;
use crate::imaging::{load_image, ImageBuffer, ImageError};
use crate::landmarks::{parse_landmarks, LandmarkError, LandmarkSet};
use crate::partial::{compose_partial, PartialError};
use crate::seed::derived_rng;
use crate::warp::WarpMethod;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("unknown face id {0:?}")]
    UnknownId(String),
    #[error("sample {0} has no warp method")]
    MissingMethod(String),
    #[error("sample {id}: expected {expected} sources, found {found}")]
    SourceCount { id: String, expected: usize, found: usize },
    #[error("{id}: {source}")]
    Landmarks { id: String, source: LandmarkError },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Partial(#[from] PartialError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// A face image with its landmarks.
#[derive(Debug, Clone)]
pub struct Face {
    pub image: ImageBuffer,
    pub landmarks: LandmarkSet,
}

/// All source faces of a dataset held in memory.
#[derive(Debug, Clone, Default)]
pub struct FaceStore {
    faces: HashMap<String, Face>,
}

impl FaceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, face: Face) {
        self.faces.insert(id.into(), face);
    }

    /// Loads every record's image and landmark file. Alpha channels are
    /// dropped by the image loader.
    pub fn load(records: &[FaceRecord]) -> Result<Self, RenderError> {
        let mut store = Self::new();
        for r in records {
            let image = load_image(&r.image)?;
            let landmarks = parse_landmarks(&r.landmarks, (image.width(), image.height()))
                .map_err(|source| RenderError::Landmarks { id: r.id.clone(), source })?;
            store.insert(r.id.clone(), Face { image, landmarks });
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Result<&Face, RenderError> {
        self.faces.get(id).ok_or_else(|| RenderError::UnknownId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// Identifies one morph composite; samples sharing a key share the morph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MorphKey {
    pub a: String,
    pub b: String,
    pub method: WarpMethod,
    pub outer_source: OuterSource,
}

impl MorphKey {
    pub fn of(sample: &SampleRecord) -> Result<Option<MorphKey>, RenderError> {
        if sample.kind == SampleKind::Genuine {
            return Ok(None);
        }
        if sample.sources.len() != 2 {
            return Err(RenderError::SourceCount {
                id: sample.id.clone(),
                expected: 2,
                found: sample.sources.len(),
            });
        }
        let method = sample.method.ok_or_else(|| RenderError::MissingMethod(sample.id.clone()))?;
        Ok(Some(MorphKey {
            a: sample.sources[0].clone(),
            b: sample.sources[1].clone(),
            method,
            outer_source: sample.outer_source,
        }))
    }
}

pub fn compose_key(key: &MorphKey, store: &FaceStore, params: &MorphParams) -> Result<MorphComposite, RenderError> {
    let (fa, fb) = (store.get(&key.a)?, store.get(&key.b)?);
    let params = MorphParams {
        method: key.method,
        outer_source: key.outer_source,
        ..params.clone()
    };
    Ok(compose_morph_detailed(&fa.image, &fb.image, &fa.landmarks, &fb.landmarks, &params)?)
}

/// Crop settings: output side and the margin kept for shift augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOptions {
    pub size: usize,
    pub pad: usize,
}

impl CropOptions {
    /// Margin wide enough for every shift [`crate::augment::random_shift`] draws.
    pub fn with_shift_margin(size: usize) -> Self {
        Self {
            size,
            pad: max_integer_shift(size),
        }
    }
}

/// A rendered sample: padded crop plus its landmarks in crop coordinates
/// (relative to the unpadded window).
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub padded: ImageBuffer,
    pub size: usize,
    pub pad: usize,
    pub landmarks: Vec<Point>,
}

impl RenderedSample {
    /// The crop shifted by an integer offset; `(0, 0)` is the centered crop.
    pub fn view(&self, dx: i64, dy: i64) -> ImageBuffer {
        let p = self.pad as i64;
        assert!(dx.abs() <= p && dy.abs() <= p, "shift ({dx}, {dy}) beyond pad {p}");
        self.padded.window((p + dx) as usize, (p + dy) as usize, self.size, self.size)
    }

    pub fn centered(&self) -> ImageBuffer {
        self.view(0, 0)
    }
}

/// Full-resolution image and landmarks of a sample before augmentation.
pub fn sample_face(
    sample: &SampleRecord,
    store: &FaceStore,
    morph: Option<&MorphComposite>,
) -> Result<(ImageBuffer, LandmarkSet), RenderError> {
    match sample.kind {
        SampleKind::Genuine => {
            if sample.sources.len() != 1 {
                return Err(RenderError::SourceCount {
                    id: sample.id.clone(),
                    expected: 1,
                    found: sample.sources.len(),
                });
            }
            let f = store.get(&sample.sources[0])?;
            Ok((f.image.clone(), f.landmarks.clone()))
        }
        SampleKind::CompleteMorph | SampleKind::PartialMorph => {
            let m = morph.ok_or_else(|| RenderError::MissingMethod(sample.id.clone()))?;
            let image = if sample.kind == SampleKind::CompleteMorph {
                m.image.clone()
            } else {
                compose_partial(&m.image, &m.outer, &m.target, sample.regions)?
            };
            Ok((image, m.target.clone()))
        }
    }
}

/// Applies the sample's corruption (if any), then crops.
pub fn finish_sample(
    image: &ImageBuffer,
    landmarks: &LandmarkSet,
    augment: Option<AugmentRef>,
    crop: CropOptions,
) -> Result<RenderedSample, RenderError> {
    let corrupted;
    let source = match augment {
        Some(a) => {
            let specs = draw_five(image.height(), &mut derived_rng(a.seed, "five", 0));
            corrupted = specs[a.version as usize % 5].apply(image)?;
            &corrupted
        }
        None => image,
    };
    let padded = normalize_crop_padded(source, landmarks, crop.size, crop.pad)?;
    let t = CropTransform::new(landmarks, (0.0, 0.0), crop.size)?;
    Ok(RenderedSample {
        padded,
        size: crop.size,
        pad: crop.pad,
        landmarks: landmarks.points().iter().map(|&p| t.to_crop(p)).collect(),
    })
}

/// Renders one sample without any caching.
pub fn render_sample(
    sample: &SampleRecord,
    store: &FaceStore,
    params: &MorphParams,
    crop: CropOptions,
) -> Result<RenderedSample, RenderError> {
    let morph = MorphKey::of(sample)?
        .map(|k| compose_key(&k, store, params))
        .transpose()?;
    let (image, lm) = sample_face(sample, store, morph.as_ref())?;
    finish_sample(&image, &lm, sample.augment, crop)
}
