//! On-disk corpus: `manifest.json` plus one little-endian `f32` raster per
//! image sample, named `{sample_id}_{kind}.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use umm_core::datamodel::{Corpus, CorpusSpec, IdentityParams, ImageSample, MultiModalTuple, Sample, TextSample};
use umm_core::ModalityKind;

use crate::error::{Result, UmmError};
use crate::fsutil;

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: CorpusSpec,
    vocabulary: Vec<String>,
    identities: Vec<IdentityParams>,
    tuples: Vec<TupleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TupleEntry {
    sample_id: String,
    identity_id: u32,
    view_index: u32,
    images: Vec<ImageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<TextSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    kind: ModalityKind,
    file: String,
    height: usize,
    width: usize,
    channels: usize,
}

pub fn raster_name(sample_id: &str, kind: ModalityKind) -> String {
    format!("{sample_id}_{}.bin", kind.letter())
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let mut tuples = Vec::with_capacity(corpus.tuples.len());
    for t in &corpus.tuples {
        let id = t.sample_id();
        let mut images = Vec::new();
        for k in [ModalityKind::R, ModalityKind::S, ModalityKind::I] {
            if let Some(img) = t.image(k) {
                let file = raster_name(&id, k);
                fsutil::write_atomic(&dir.join(&file), &fsutil::f32_le_bytes(img.pixels.iter().copied()))?;
                images.push(ImageEntry { kind: k, file, height: img.height, width: img.width, channels: img.channels });
            }
        }
        tuples.push(TupleEntry {
            sample_id: id,
            identity_id: t.identity_id,
            view_index: t.view_index,
            images,
            text: t.text().cloned(),
        });
    }
    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        spec: corpus.spec.clone(),
        vocabulary: corpus.vocabulary.clone(),
        identities: corpus.identities.clone(),
        tuples,
    };
    fsutil::write_atomic(&dir.join(MANIFEST), &fsutil::to_json(&manifest))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(UmmError::MissingInput(dir.to_path_buf()));
    }
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(UmmError::MissingManifest(dir.to_path_buf()));
    }
    let manifest: Manifest = fsutil::parse_json(&path, &fsutil::read_string(&path)?)?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(UmmError::VersionMismatch {
            what: "corpus format",
            expected: CORPUS_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let mut tuples = Vec::with_capacity(manifest.tuples.len());
    for e in manifest.tuples {
        let mut samples: [Option<Sample>; 4] = Default::default();
        for img in e.images {
            let p = dir.join(&img.file);
            let n = img.height * img.width * img.channels;
            let pixels = fsutil::f32_from_le(&p, &fsutil::read(&p)?, n)?;
            samples[img.kind.index()] =
                Some(Sample::Image(ImageSample::new(img.height, img.width, img.channels, pixels)?));
        }
        samples[ModalityKind::T.index()] = e.text.map(Sample::Text);
        let t = MultiModalTuple::new(e.identity_id, e.view_index, samples)?;
        if t.sample_id() != e.sample_id {
            return Err(UmmError::ConfigParse {
                path,
                message: format!("sample_id {} does not match identity/view {}", e.sample_id, t.sample_id()),
            });
        }
        tuples.push(t);
    }
    Ok(Corpus { spec: manifest.spec, vocabulary: manifest.vocabulary, identities: manifest.identities, tuples })
}
