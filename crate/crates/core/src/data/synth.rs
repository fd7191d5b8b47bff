use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::manifest::DEFAULT_ROLES;
use super::{rule_parse_caption, ClipRecord, Corpus, CorpusManifest};

const DETERMINERS: [&str; 4] = ["the", "a", "one", "some"];

/// Knobs for [`synth_corpus`].
///
/// Clip `i` has latent class `i % classes` and attribute `i / classes`. Its
/// features are class centroid + attribute offset + noise, and its captions
/// read `<verb> <determiner> <attribute> <noun>`, where the verb/noun pair
/// identifies the class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub clips: usize,
    pub classes: usize,
    pub captions_per_clip: usize,
    pub dim_2d: usize,
    pub dim_3d: usize,
    /// 0 disables region features.
    pub dim_roi: usize,
    pub noise: f64,
    pub attribute_scale: f64,
    /// Upper bound on distinct content tokens (verbs, nouns, attributes).
    pub vocab_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            clips: 64,
            classes: 8,
            captions_per_clip: 1,
            dim_2d: 2048,
            dim_3d: 2048,
            dim_roi: 2048,
            noise: 0.1,
            attribute_scale: 1.0,
            vocab_size: 1000,
        }
    }
}

pub struct SynthOutput {
    pub corpus: Corpus,
    /// Verb lexicon the captions were parsed with.
    pub verbs: BTreeSet<String>,
    /// Latent class of every clip.
    pub classes: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn sum_f32(parts: &[&[f64]]) -> Vec<f64> {
    (0..parts[0].len())
        .map(|i| parts.iter().map(|p| p[i]).sum::<f64>() as f32 as f64)
        .collect()
}

/// Seeded corpus with planted clip/caption structure.
///
/// Draw order from one ChaCha8 stream: per class the 2D, 3D and region
/// centroids; per attribute the 2D, 3D and region offsets; per clip the 2D,
/// 3D and region noise.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.clips < 2 {
        return Err(Error::Config(format!("need at least 2 clips, got {}", cfg.clips)));
    }
    if cfg.classes == 0 || cfg.classes > cfg.clips {
        return Err(Error::Config(format!(
            "classes must be in 1..={}, got {}",
            cfg.clips, cfg.classes
        )));
    }
    if cfg.captions_per_clip == 0 || cfg.captions_per_clip > DETERMINERS.len() {
        return Err(Error::Config(format!(
            "captions per clip must be in 1..={}, got {}",
            DETERMINERS.len(),
            cfg.captions_per_clip
        )));
    }
    if cfg.dim_2d == 0 || cfg.dim_3d == 0 {
        return Err(Error::Config("feature dimensions must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite() && cfg.attribute_scale >= 0.0 && cfg.attribute_scale.is_finite()) {
        return Err(Error::Config("noise and attribute scale must be finite and non-negative".into()));
    }
    let verbs_n = (cfg.classes as f64).sqrt().ceil() as usize;
    let nouns_n = cfg.classes.div_ceil(verbs_n);
    let attrs_n = cfg.clips.div_ceil(cfg.classes);
    let needed = verbs_n + nouns_n + attrs_n;
    if needed > cfg.vocab_size {
        return Err(Error::Config(format!(
            "{} clips over {} classes need {needed} content tokens, vocabulary allows {}",
            cfg.clips, cfg.classes, cfg.vocab_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |rng: &mut ChaCha8Rng, scale: f64| {
        (
            uniform(rng, cfg.dim_2d, scale),
            uniform(rng, cfg.dim_3d, scale),
            uniform(rng, cfg.dim_roi, scale),
        )
    };
    let centroids: Vec<_> = (0..cfg.classes).map(|_| draw(&mut rng, 1.0)).collect();
    let attributes: Vec<_> = (0..attrs_n).map(|_| draw(&mut rng, cfg.attribute_scale)).collect();

    let verbs: BTreeSet<String> = (0..verbs_n).map(|v| format!("verb{v}")).collect();
    let width = (cfg.clips - 1).to_string().len();
    let mut clips = Vec::with_capacity(cfg.clips);
    let mut captions = Vec::with_capacity(cfg.clips * cfg.captions_per_clip);
    let mut classes = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let class = i % cfg.classes;
        let attr = i / cfg.classes;
        let noise = draw(&mut rng, cfg.noise);
        let (c, a) = (&centroids[class], &attributes[attr]);
        let clip_id = format!("clip{i:0width$}");
        clips.push(ClipRecord {
            clip_id: clip_id.clone(),
            f2d: sum_f32(&[&c.0, &a.0, &noise.0]),
            f3d: sum_f32(&[&c.1, &a.1, &noise.1]),
            froi: (cfg.dim_roi > 0).then(|| sum_f32(&[&c.2, &a.2, &noise.2])),
        });
        classes.push(class);
        for (j, det) in DETERMINERS.iter().take(cfg.captions_per_clip).enumerate() {
            let tokens = vec![
                format!("verb{}", class % verbs_n),
                det.to_string(),
                format!("attr{attr}"),
                format!("noun{}", class / verbs_n),
            ];
            captions.push(rule_parse_caption(&format!("{clip_id}_{j}"), &clip_id, &tokens, &verbs)?);
        }
    }

    let manifest = CorpusManifest {
        split: "synthetic".into(),
        clips: clips.len(),
        captions: captions.len(),
        dim_2d: cfg.dim_2d,
        dim_3d: cfg.dim_3d,
        dim_roi: cfg.dim_roi,
        roles: DEFAULT_ROLES.iter().map(|r| r.to_string()).collect(),
        seed: Some(cfg.seed),
    };
    Ok(SynthOutput {
        corpus: Corpus::new(manifest, clips, captions)?,
        verbs,
        classes,
    })
}
