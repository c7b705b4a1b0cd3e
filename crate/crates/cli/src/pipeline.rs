//! Rendering sample lists into tensors, shared by the commands.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use morphforge_core::blend::{MorphComposite, MorphParams};
use morphforge_core::dataset::{load_manifest, read_samples, SampleRecord};
use morphforge_core::render::{compose_key, finish_sample, sample_face, CropOptions, FaceStore, MorphKey, RenderedSample};
use morphforge_core::seed::derived_rng;
use morphforge_learn::nn::{binary_target, Examples, Tensor};
use rand::Rng;
use rayon::prelude::*;

use crate::error::Result;

/// Loads a manifest together with every face it lists.
pub fn load_faces(manifest: &Path) -> Result<(Vec<morphforge_core::dataset::FaceRecord>, FaceStore)> {
    let records = load_manifest(manifest)?;
    let store = FaceStore::load(&records)?;
    Ok((records, store))
}

/// Renders every sample. Each distinct morph is composed once.
pub fn render_all(
    samples: &[SampleRecord],
    store: &FaceStore,
    params: &MorphParams,
    crop: CropOptions,
) -> Result<Vec<RenderedSample>> {
    let keys: BTreeSet<MorphKey> = samples
        .iter()
        .map(MorphKey::of)
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let keys: Vec<MorphKey> = keys.into_iter().collect();
    let composites: Vec<MorphComposite> = keys
        .par_iter()
        .map(|k| compose_key(k, store, params))
        .collect::<Result<_, _>>()?;
    let cache: BTreeMap<&MorphKey, &MorphComposite> = keys.iter().zip(&composites).collect();
    Ok(samples
        .par_iter()
        .map(|s| {
            let key = MorphKey::of(s)?;
            let morph = key.as_ref().map(|k| cache[k]);
            let (image, lm) = sample_face(s, store, morph)?;
            finish_sample(&image, &lm, s.augment, crop)
        })
        .collect::<Result<_, _>>()?)
}

/// A sample list with its rendered crops.
pub struct RenderedSet {
    pub samples: Vec<SampleRecord>,
    pub rendered: Vec<RenderedSample>,
}

impl RenderedSet {
    pub fn load(path: &Path, store: &FaceStore, params: &MorphParams, crop: CropOptions) -> Result<Self> {
        let samples = read_samples(path)?;
        let rendered = render_all(&samples, store, params, crop)?;
        Ok(Self { samples, rendered })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_image(&self.rendered[i].centered())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.tensor(i)).collect()
    }

    /// Training view: binary one-hot targets for single-label samples,
    /// region flags for multi-label ones.
    pub fn examples(&self, shift: bool) -> SampleExamples<'_> {
        let targets = self
            .samples
            .iter()
            .map(|s| match s.label.as_slice() {
                [l] => binary_target(*l == 1),
                _ => s.targets(),
            })
            .collect();
        SampleExamples {
            set: self,
            targets,
            shift,
        }
    }
}

pub struct SampleExamples<'a> {
    set: &'a RenderedSet,
    targets: Vec<Vec<f64>>,
    shift: bool,
}

impl SampleExamples<'_> {
    /// Integer crop offset of sample `i` in `epoch`.
    pub fn shift_of(&self, i: usize, epoch: usize) -> (i64, i64) {
        let pad = self.set.rendered[i].pad as i64;
        if !self.shift || pad == 0 {
            return (0, 0);
        }
        // corrupted versions of one sample share its seed, so mix in the version
        let s = &self.set.samples[i];
        let version = s.augment.map_or(0, |a| a.version as u64 + 1);
        let mut rng = derived_rng(s.seed, "shift", epoch as u64 * 8 + version);
        (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad))
    }
}

impl Examples for SampleExamples<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn input(&self, index: usize, epoch: usize) -> Cow<'_, Tensor> {
        let (dx, dy) = self.shift_of(index, epoch);
        Cow::Owned(Tensor::from_image(&self.set.rendered[index].view(dx, dy)))
    }

    fn target(&self, index: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.targets[index])
    }
}
