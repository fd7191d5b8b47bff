//! Gallery ranking, R@k / MedR, and the ablation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::config::{render_key_values, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::matching::{expert_weights, WeightingMode, TEXT_WEIGHTS, VIDEO_WEIGHTS};
use crate::model::{FeatureSetting, Model};
use crate::tensor::Tensor;
use crate::video::AttentionDesign;
use crate::LevelEncodings;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Caption queries against a clip gallery.
    #[default]
    TextToVideo,
    /// Clip queries against a gallery of one caption per clip.
    VideoToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToVideo => "text_to_video",
            Direction::VideoToText => "video_to_text",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "text_to_video" | "t2v" => Ok(Direction::TextToVideo),
            "video_to_text" | "v2t" => Ok(Direction::VideoToText),
            other => Err(format!("unknown direction `{other}` (valid: text_to_video, video_to_text)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub gallery_size: usize,
    pub queries: usize,
    /// k → percentage of queries with rank ≤ k.
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: usize,
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(direction: Direction, gallery_size: usize, ranks: Vec<usize>, ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Invalid("no queries to report on".into()));
        }
        Ok(Self {
            direction,
            gallery_size,
            queries: ranks.len(),
            recall_at: ks.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect(),
            median_rank: median_rank(&ranks),
            ranks,
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or_else(|| recall_at_k(&self.ranks, k))
    }

    /// `key = value` metrics file contents.
    /// Metric keys and formatted values, in file order.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("direction".to_string(), self.direction.to_string()),
            ("gallery".to_string(), self.gallery_size.to_string()),
            ("queries".to_string(), self.queries.to_string()),
        ];
        for (k, v) in &self.recall_at {
            pairs.push((format!("r{k}"), format!("{v:.4}")));
        }
        pairs.push(("medr".to_string(), self.median_rank.to_string()));
        pairs
    }

    pub fn to_key_values(&self) -> String {
        let pairs = self.key_values();
        let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        render_key_values(&refs)
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (gallery {}, {} queries):", self.direction, self.gallery_size, self.queries)?;
        for (k, v) in &self.recall_at {
            write!(f, " R@{k} {v:.2}")?;
        }
        write!(f, " MedR {}", self.median_rank)
    }
}

fn check_truth(scores: &Tensor, truth: &[usize]) -> Result<(usize, usize)> {
    let [q, n] = match scores.shape() {
        [q, n] => [*q, *n],
        other => return Err(Error::Invalid(format!("score matrix must be 2-D, got {other:?}"))),
    };
    if truth.len() != q {
        return Err(Error::Invalid(format!(
            "{q} queries but {} ground-truth entries",
            truth.len()
        )));
    }
    if let Some((i, t)) = truth.iter().enumerate().find(|(_, &t)| t >= n) {
        return Err(Error::Invalid(format!(
            "query {i} has ground truth {t} outside a gallery of {n}"
        )));
    }
    Ok((q, n))
}

/// Rank of each query's ground truth: 1 + the number of other gallery items
/// scoring at least as high (ties count against the truth).
pub fn ranks_from_scores(scores: &Tensor, truth: &[usize]) -> Result<Vec<usize>> {
    let (_, n) = check_truth(scores, truth)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let row = &scores.data()[q * n..(q + 1) * n];
            let s = row[t];
            1 + row.iter().enumerate().filter(|&(j, &x)| j != t && x >= s).count()
        })
        .collect())
}

/// Percentage of ranks ≤ k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Lower median: the ⌈Q/2⌉-th smallest rank.
pub fn median_rank(ranks: &[usize]) -> usize {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted[sorted.len().div_ceil(2) - 1]
}

/// Reference metrics: each row is fully sorted (score descending, the truth
/// placed after every item it ties with) and read off by position.
pub fn oracle_metrics(scores: &Tensor, truth: &[usize], ks: &[usize]) -> Result<RetrievalReport> {
    let (_, n) = check_truth(scores, truth)?;
    let mut ranks = Vec::with_capacity(truth.len());
    for (q, &t) in truth.iter().enumerate() {
        let row = &scores.data()[q * n..(q + 1) * n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite scores")
                .then_with(|| (a == t).cmp(&(b == t)))
        });
        ranks.push(order.iter().position(|&j| j == t).unwrap() + 1);
    }
    let mut hits = BTreeMap::new();
    for &k in ks {
        let mut count = 0usize;
        for &r in &ranks {
            if r <= k {
                count += 1;
            }
        }
        hits.insert(k, count as f64 * 100.0 / ranks.len() as f64);
    }
    let mut sorted = ranks.clone();
    sorted.sort();
    let median = sorted[(sorted.len() + 1) / 2 - 1];
    Ok(RetrievalReport {
        direction: Direction::TextToVideo,
        gallery_size: n,
        queries: ranks.len(),
        recall_at: hits,
        median_rank: median,
        ranks,
    })
}

/// Per-item unit vectors and expert weights, reused across a whole gallery.
struct Prepared {
    units: Vec<[Vec<f64>; 3]>,
    weights: Vec<Option<[f64; 3]>>,
}

fn prepare(items: &[LevelEncodings], a: Option<&Tensor>, side: &'static str) -> Result<Prepared> {
    let mut units = Vec::with_capacity(items.len());
    let mut weights = Vec::with_capacity(items.len());
    for it in items {
        let mut u: [Vec<f64>; 3] = Default::default();
        for (l, t) in it.levels().iter().enumerate() {
            let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    side,
                    level: ["global", "action", "object"][l],
                });
            }
            u[l] = t.data().iter().map(|x| x / norm).collect();
        }
        units.push(u);
        weights.push(a.map(|a| expert_weights(it, a)).transpose()?);
    }
    Ok(Prepared { units, weights })
}

fn combine(cos: [f64; 3], mode: WeightingMode, wv: Option<[f64; 3]>, wt: Option<[f64; 3]>) -> f64 {
    let w = match mode {
        WeightingMode::Average => return (cos[0] + cos[1] + cos[2]) / 3.0,
        WeightingMode::VideoOnly => wv.unwrap(),
        WeightingMode::TextOnly => wt.unwrap(),
        WeightingMode::Both => {
            let (wv, wt) = (wv.unwrap(), wt.unwrap());
            [0, 1, 2].map(|i| 0.5 * (wv[i] + wt[i]))
        }
    };
    w.iter().zip(cos).map(|(w, c)| w * c).sum()
}

/// `Q × N` scores: caption queries against clips for text→video, clip queries
/// against captions for video→text.
pub fn score_matrix(
    model: &Model,
    videos: &[LevelEncodings],
    captions: &[LevelEncodings],
    direction: Direction,
) -> Result<Tensor> {
    let mode = model.config.weighting;
    let va = mode.uses_video_weights().then(|| model.params.get(VIDEO_WEIGHTS)).transpose()?;
    let ta = mode.uses_text_weights().then(|| model.params.get(TEXT_WEIGHTS)).transpose()?;
    let pv = prepare(videos, va, "video")?;
    let pt = prepare(captions, ta, "text")?;
    let pair = |vi: usize, ci: usize| -> f64 {
        let mut cos = [0.0; 3];
        for (l, c) in cos.iter_mut().enumerate() {
            let dot: f64 = pv.units[vi][l].iter().zip(&pt.units[ci][l]).map(|(a, b)| a * b).sum();
            *c = dot.clamp(-1.0, 1.0);
        }
        combine(cos, mode, pv.weights[vi], pt.weights[ci])
    };
    let (q, n) = match direction {
        Direction::TextToVideo => (captions.len(), videos.len()),
        Direction::VideoToText => (videos.len(), captions.len()),
    };
    let mut data = Vec::with_capacity(q * n);
    for qi in 0..q {
        for gi in 0..n {
            data.push(match direction {
                Direction::TextToVideo => pair(gi, qi),
                Direction::VideoToText => pair(qi, gi),
            });
        }
    }
    Ok(Tensor::new(vec![q, n], data)?)
}

/// Encodes every clip and caption once, each on its own short-lived tape.
pub fn encode_corpus(model: &Model, corpus: &Corpus) -> Result<(Vec<LevelEncodings>, Vec<LevelEncodings>)> {
    let videos = corpus
        .clips
        .iter()
        .map(|c| model.video_encodings(&model.expert_features(c)?))
        .collect::<Result<Vec<_>>>()?;
    let captions = corpus
        .captions
        .iter()
        .map(|g| model.text_encodings(g))
        .collect::<Result<Vec<_>>>()?;
    Ok((videos, captions))
}

/// Retrieval metrics over `corpus`. Text→video uses every caption as a query;
/// video→text uses each clip's first caption as its gallery entry.
pub fn evaluate(model: &Model, corpus: &Corpus, direction: Direction) -> Result<RetrievalReport> {
    let (videos, captions) = encode_corpus(model, corpus)?;
    evaluate_encoded(model, corpus, &videos, &captions, direction)
}

pub fn evaluate_encoded(
    model: &Model,
    corpus: &Corpus,
    videos: &[LevelEncodings],
    captions: &[LevelEncodings],
    direction: Direction,
) -> Result<RetrievalReport> {
    let (scores, truth) = match direction {
        Direction::TextToVideo => (
            score_matrix(model, videos, captions, direction)?,
            corpus.caption_targets(),
        ),
        Direction::VideoToText => {
            let pairs = corpus.first_caption_pairs();
            if pairs.len() != corpus.clips.len() {
                return Err(Error::Invalid("every clip needs a caption for video→text retrieval".into()));
            }
            let mut gallery = vec![None; corpus.clips.len()];
            for &(clip, cap) in &pairs {
                gallery[clip] = Some(captions[cap].clone());
            }
            let gallery: Vec<LevelEncodings> = gallery.into_iter().map(Option::unwrap).collect();
            (
                score_matrix(model, videos, &gallery, direction)?,
                (0..corpus.clips.len()).collect(),
            )
        }
    };
    let n = scores.shape()[1];
    RetrievalReport::from_ranks(direction, n, ranks_from_scores(&scores, &truth)?, &DEFAULT_KS)
}

/// One ablation dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Weighting,
    Design,
    Features,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Weighting, Axis::Design, Axis::Features];

    /// Parses a comma-separated axis list.
    pub fn parse_list(s: &str) -> Result<Vec<Axis>> {
        let mut axes = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let axis = part.parse::<Axis>().map_err(Error::Config)?;
            if axes.contains(&axis) {
                return Err(Error::Config(format!("axis `{part}` listed twice")));
            }
            axes.push(axis);
        }
        if axes.is_empty() {
            return Err(Error::Config("no ablation axes given (valid: weighting, design, features)".into()));
        }
        Ok(axes)
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "weighting" => Ok(Axis::Weighting),
            "design" => Ok(Axis::Design),
            "features" => Ok(Axis::Features),
            other => Err(format!("unknown axis `{other}` (valid: weighting, design, features)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub weighting: WeightingMode,
    pub design: AttentionDesign,
    pub features: FeatureSetting,
    pub report: RetrievalReport,
}

impl AblationRow {
    pub fn machine_line(&self) -> String {
        format!(
            "mode={} design={} features={} r1={:.4} r5={:.4} r10={:.4} medr={}",
            self.weighting,
            self.design,
            self.features,
            self.report.recall(1),
            self.report.recall(5),
            self.report.recall(10),
            self.report.median_rank
        )
    }
}

/// Every combination of the requested axes; other settings stay as in `base`.
pub fn ablation_configs(base: &RunConfig, axes: &[Axis]) -> Vec<RunConfig> {
    let mut configs = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::new();
        for cfg in &configs {
            match axis {
                Axis::Weighting => {
                    for mode in WeightingMode::ALL {
                        let mut c = cfg.clone();
                        c.model.weighting = mode;
                        next.push(c);
                    }
                }
                Axis::Design => {
                    for design in AttentionDesign::ALL {
                        let mut c = cfg.clone();
                        c.model.design = design;
                        next.push(c);
                    }
                }
                Axis::Features => {
                    for features in FeatureSetting::ALL {
                        let mut c = cfg.clone();
                        c.model.features = features;
                        next.push(c);
                    }
                }
            }
        }
        configs = next;
    }
    configs
}

/// Builds (and optionally trains) one model per configuration and scores it
/// text→video on `corpus`.
pub fn ablation_report(corpus: &Corpus, configs: &[RunConfig]) -> Result<Vec<AblationRow>> {
    configs
        .iter()
        .map(|cfg| {
            let mut trainer = crate::train::Trainer::from_config(cfg, corpus)?;
            if cfg.ablate_epochs > 0 {
                trainer.train(corpus, cfg.ablate_epochs, None, |_| {})?;
            }
            let report = evaluate(&trainer.model, corpus, Direction::TextToVideo)?;
            Ok(AblationRow {
                weighting: cfg.model.weighting,
                design: cfg.model.design,
                features: cfg.model.features,
                report,
            })
        })
        .collect()
}

/// Aligned table followed by one machine-readable line per row.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<9} {:<9} {:<9} {:>8} {:>8} {:>8} {:>6}\n",
        "mode", "design", "features", "R@1", "R@5", "R@10", "MedR"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<9} {:<9} {:<9} {:>8.2} {:>8.2} {:>8.2} {:>6}\n",
            r.weighting.to_string(),
            r.design.to_string(),
            r.features.to_string(),
            r.report.recall(1),
            r.report.recall(5),
            r.report.recall(10),
            r.report.median_rank
        ));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.machine_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> Tensor {
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn unique_max_is_rank_one() {
        let s = matrix(vec![vec![0.1, 0.9, 0.3]]);
        assert_eq!(ranks_from_scores(&s, &[1]).unwrap(), [1]);
    }

    #[test]
    fn all_ties_rank_last() {
        let s = matrix(vec![vec![0.5; 4]]);
        assert_eq!(ranks_from_scores(&s, &[2]).unwrap(), [4]);
        assert_eq!(oracle_metrics(&s, &[2], &DEFAULT_KS).unwrap().ranks, [4]);
    }

    #[test]
    fn hand_counted_rank() {
        let s = matrix(vec![vec![0.9, 0.8, 0.7]]);
        assert_eq!(ranks_from_scores(&s, &[1]).unwrap(), [2]);
    }

    #[test]
    fn truth_checks() {
        let s = matrix(vec![vec![0.9, 0.8]]);
        assert!(ranks_from_scores(&s, &[]).is_err());
        assert!(ranks_from_scores(&s, &[2]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 3, 12], 5) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[1, 3, 12], 12), 100.0);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_rank(&[2]), 2);
        assert_eq!(median_rank(&[1, 2, 3, 4]), 2);
        assert_eq!(median_rank(&[5, 1, 3]), 3);
    }

    #[test]
    fn oracle_identity_and_reverse() {
        let eye = Tensor::eye(3);
        assert_eq!(oracle_metrics(&eye, &[0, 1, 2], &DEFAULT_KS).unwrap().ranks, [1, 1, 1]);
        // row q scores item j as j, truth on the diagonal: item 0 is worst in row 0
        let rev = matrix(vec![vec![0.0, 1.0, 2.0]; 3]);
        assert_eq!(oracle_metrics(&rev, &[0, 1, 2], &DEFAULT_KS).unwrap().ranks, [3, 2, 1]);
        assert_eq!(ranks_from_scores(&rev, &[0, 1, 2]).unwrap(), [3, 2, 1]);
    }

    #[test]
    fn uniform_random_scores_give_chance_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (q, n) = (2000, 1000);
        let data: Vec<f64> = (0..q * n).map(|_| rng.gen()).collect();
        let s = Tensor::new(vec![q, n], data).unwrap();
        let truth: Vec<usize> = (0..q).map(|i| i % n).collect();
        let ranks = ranks_from_scores(&s, &truth).unwrap();
        for (k, want) in [(1, 0.1), (5, 0.5), (10, 1.0)] {
            assert!((recall_at_k(&ranks, k) - want).abs() <= 0.5, "R@{k}");
        }
        assert!(median_rank(&ranks).abs_diff(500) <= 50);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(Axis::parse_list("design,features").unwrap(), [Axis::Design, Axis::Features]);
        let err = Axis::parse_list("weighting,colour").unwrap_err().to_string();
        assert!(err.contains("colour") && err.contains("features"), "{err}");
    }

    #[test]
    fn ablation_row_counts() {
        let base = RunConfig::default();
        assert_eq!(ablation_configs(&base, &[Axis::Weighting]).len(), 4);
        assert_eq!(ablation_configs(&base, &[Axis::Design]).len(), 2);
        assert_eq!(ablation_configs(&base, &[Axis::Features]).len(), 3);
        assert_eq!(ablation_configs(&base, &[Axis::Design, Axis::Features]).len(), 6);
    }

    fn scores_with_ties() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (prop::collection::vec(0u8..4, 36), prop::collection::vec(0usize..6, 6))
            .prop_map(|(s, t)| (s.into_iter().map(f64::from).collect(), t))
    }

    proptest! {
        #[test]
        fn counting_matches_oracle((data, truth) in scores_with_ties()) {
            let s = Tensor::new(vec![6, 6], data).unwrap();
            let oracle = oracle_metrics(&s, &truth, &DEFAULT_KS).unwrap();
            prop_assert_eq!(ranks_from_scores(&s, &truth).unwrap(), oracle.ranks);
        }

        #[test]
        fn recall_monotone_in_k(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let mut last = 0.0;
            for k in 1..55 {
                let r = recall_at_k(&ranks, k);
                prop_assert!(r >= last && (0.0..=100.0).contains(&r));
                last = r;
            }
            let m = median_rank(&ranks);
            prop_assert!(m >= 1 && m <= 49);
        }

        #[test]
        fn gallery_permutation_invariant(
            data in prop::collection::vec(-1.0f64..1.0, 20),
            truth in prop::collection::vec(0usize..5, 4),
            shift in 1usize..5,
        ) {
            let s = Tensor::new(vec![4, 5], data.clone()).unwrap();
            let perm = |j: usize| (j + shift) % 5;
            let mut permuted = vec![0.0; 20];
            for q in 0..4 {
                for j in 0..5 {
                    permuted[q * 5 + perm(j)] = data[q * 5 + j];
                }
            }
            let p = Tensor::new(vec![4, 5], permuted).unwrap();
            let t2: Vec<usize> = truth.iter().map(|&t| perm(t)).collect();
            prop_assert_eq!(ranks_from_scores(&s, &truth).unwrap(), ranks_from_scores(&p, &t2).unwrap());
        }
    }
}
