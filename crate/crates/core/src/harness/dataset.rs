//! Training samples and their on-disk layout.
//!
//! A dataset directory holds, per sample `<id>`: `<id>.ppm` (image),
//! `<id>.csv` (head annotations) and optionally `<id>.persp.f32m`
//! (perspective map at image resolution). Samples are ordered by id.

use std::fs;
use std::path::Path;

use crate::data::density::HeadAnnotations;
use crate::data::io::{decode_ppm, encode_ppm, format_annotations, parse_annotations, read_f32m, write_f32m};
use crate::data::synth::SyntheticScene;
use crate::error::{Error, Result};
use crate::perspective::PerspectiveMap;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1 x 3 x H x W`.
    pub image: Tensor4,
    pub heads: HeadAnnotations,
    pub persp: Option<PerspectiveMap>,
}

impl Sample {
    pub fn from_scene(s: &SyntheticScene) -> Self {
        Self {
            id: s.heads.image_id.clone(),
            image: s.image.clone(),
            heads: s.heads.clone(),
            persp: Some(s.persp.clone()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.image.h(), self.image.w())
    }
}

impl From<SyntheticScene> for Sample {
    fn from(s: SyntheticScene) -> Self {
        Self {
            id: s.heads.image_id.clone(),
            image: s.image,
            heads: s.heads,
            persp: Some(s.persp),
        }
    }
}

pub fn from_scenes(scenes: &[SyntheticScene]) -> Vec<Sample> {
    scenes.iter().map(Sample::from_scene).collect()
}

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for s in samples {
        fs::write(dir.join(format!("{}.ppm", s.id)), encode_ppm(&s.image)?)?;
        fs::write(dir.join(format!("{}.csv", s.id)), format_annotations(&s.heads.points))?;
        if let Some(p) = &s.persp {
            write_f32m(dir.join(format!("{}.persp.f32m", s.id)), p.grid())?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let image = decode_ppm(&fs::read(dir.join(format!("{id}.ppm")))?)?;
            let csv = fs::read_to_string(dir.join(format!("{id}.csv")))
                .map_err(|e| Error::Data(format!("{id}.csv: {e}")))?;
            let heads = HeadAnnotations::new(id.clone(), parse_annotations(&csv)?);
            heads.check_bounds(image.h(), image.w())?;
            let pp = dir.join(format!("{id}.persp.f32m"));
            let persp = if pp.exists() {
                let g = read_f32m(&pp)?;
                if g.shape() != (image.h(), image.w()) {
                    return Err(Error::Data(format!("{id}: perspective {:?} vs image {:?}", g.shape(), (image.h(), image.w()))));
                }
                Some(PerspectiveMap::new(g)?)
            } else {
                None
            };
            Ok(Sample { id, image, heads, persp })
        })
        .collect()
}

/// Mirrors every plane of a tensor left to right.
pub fn flip_tensor(t: &Tensor4) -> Tensor4 {
    let [n, c, _, w] = t.shape();
    let mut out = t.clone();
    for b in 0..n {
        for ch in 0..c {
            for row in out.plane_mut(b, ch).chunks_mut(w) {
                row.reverse();
            }
        }
    }
    out
}
