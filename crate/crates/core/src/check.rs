//! Finite-difference check of the full model on a tiny synthetic batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{synth_corpus, SynthConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{finite_diff_check, finite_diff_check_with_fault, BackwardFault, GradCheckReport};
use crate::text::{CaptionGraph, EmbeddingTable, Vocabulary};
use crate::video::ExpertFeatures;

/// Half-width of the uniform noise added to every initialized parameter.
/// Large enough that attention weights move away from uniform, which keeps
/// gradient entries well clear of the finite-difference roundoff floor.
pub const PERTURBATION: f64 = 0.5;

/// Builds the configured model over `gradcheck_batch` synthetic clips, draws
/// every parameter (biases and norm terms included) at random, and checks the
/// batch loss gradient of every parameter entry.
pub fn model_gradcheck(cfg: &RunConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let gc = &cfg.gradcheck;
    let synth = SynthConfig {
        seed: cfg.train.seed,
        clips: gc.batch,
        classes: gc.batch,
        captions_per_clip: 1,
        dim_2d: gc.feature_dim,
        dim_3d: gc.feature_dim,
        dim_roi: gc.feature_dim,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth)?.corpus;
    let mut run = cfg.clone();
    run.adopt_corpus(&corpus.manifest);

    let mut tokens: Vec<String> = corpus.vocabulary().tokens().map(String::from).collect();
    if tokens.len() > gc.vocab {
        return Err(Error::Config(format!(
            "gradcheck batch needs {} tokens, vocabulary size is {}",
            tokens.len(),
            gc.vocab
        )));
    }
    tokens.extend((tokens.len()..gc.vocab).map(|i| format!("unused{i}")));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let table = EmbeddingTable::random(Vocabulary::from_tokens(tokens), run.model.word_dim, &mut rng);
    let mut model = Model::init(run.model.clone(), table, &mut rng)?;
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-PERTURBATION..PERTURBATION);
        }
    }
    model.round_params();

    let feats: Vec<ExpertFeatures> = corpus
        .clips
        .iter()
        .map(|c| model.expert_features(c))
        .collect::<Result<_>>()?;
    let clips: Vec<&ExpertFeatures> = feats.iter().collect();
    let caps: Vec<&CaptionGraph> = corpus.captions.iter().collect();
    let margin = run.train.margin;
    let precision = run.model.precision;
    let mut params = model.params.clone();
    let loss = |store: &_, tape: &mut _| model.batch_loss_with(store, tape, &clips, &caps, margin);
    match fault {
        None => finite_diff_check(&mut params, precision, gc.h, gc.tolerance, loss),
        Some(f) => finite_diff_check_with_fault(&mut params, precision, gc.h, gc.tolerance, f, loss),
    }
}
