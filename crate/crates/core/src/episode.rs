//! Synthetic few-shot episode generator.
//!
//! Stands in for a backbone + region proposal stage: every class is a latent
//! Gaussian over input features with a linear ground-truth law mapping a
//! feature to its 4-d regression target. Novel classes are built as blends
//! of base-class anchors, with a `similarity` knob controlling how much
//! base-novel commonality the world actually contains (0 = none, 1 = novel
//! classes sit exactly on their base-class mixtures).

use std::io::{self, BufRead, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory_bank::{ClassId, ClassRole};
use crate::numerics::{euclidean_distance, gaussian_sample, FeatureVector, RngState};

/// Episode and world-geometry parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub n_base: usize,
    pub n_novel: usize,
    /// Base-novel commonality in [0, 1].
    pub similarity: f64,
    /// Foreground instances per novel class available for fine-tuning.
    pub k_shot: usize,
    /// Foreground instances per base class in the training stream.
    pub base_abundance: usize,
    /// Held-out instances per class (and background draws) for evaluation.
    pub eval_per_class: usize,
    /// Fraction of the base training stream that is background.
    pub background_fraction: f64,
    /// Class means are drawn on a sphere of this radius.
    pub mean_radius: f64,
    /// Minimum pairwise distance between base-class means.
    pub separation_margin: f64,
    pub latent_var_min: f64,
    pub latent_var_max: f64,
    /// Noise added to regression targets so the linear law is not degenerate.
    pub reg_noise_std: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_base: 15,
            n_novel: 5,
            similarity: 0.8,
            k_shot: 1,
            base_abundance: 200,
            eval_per_class: 100,
            background_fraction: 0.2,
            mean_radius: 3.5,
            separation_margin: 2.5,
            latent_var_min: 0.05,
            latent_var_max: 0.2,
            reg_noise_std: 0.05,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("could not place base class {class_index} with margin {margin} after {tries} tries")]
    InfeasibleSeparation {
        class_index: usize,
        margin: f64,
        tries: usize,
    },
    #[error("world needs at least 2 base and 1 novel class, got {n_base}/{n_novel}")]
    TooFewClasses { n_base: usize, n_novel: usize },
}

/// Latent generator for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub class_id: ClassId,
    pub role: ClassRole,
    pub latent_mean: FeatureVector,
    pub latent_var: FeatureVector,
    /// Ground-truth linear law, row-major `d_in x 4`.
    pub regress_weight: Vec<f64>,
    pub regress_offset: [f64; 4],
    /// For novel classes: the base classes blended into the anchor and their
    /// mixture coefficients. Empty for base classes.
    pub base_mixture: Vec<(ClassId, f64)>,
}

/// One synthetic region proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub feature: FeatureVector,
    pub label: ProposalLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalLabel {
    Foreground { class: ClassId, reg_target: [f64; 4] },
    Background,
}

impl Proposal {
    pub fn class_index(&self, n_classes: usize) -> usize {
        match &self.label {
            ProposalLabel::Foreground { class, .. } => class.0,
            ProposalLabel::Background => n_classes,
        }
    }

    pub fn foreground(&self) -> Option<(ClassId, &[f64; 4])> {
        match &self.label {
            ProposalLabel::Foreground { class, reg_target } => Some((*class, reg_target)),
            ProposalLabel::Background => None,
        }
    }
}

/// A full few-shot episode: abundant base stream, K-shot novel set, held-out
/// evaluation set drawn fresh.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    pub base_train: Vec<Proposal>,
    pub novel_train: Vec<Proposal>,
    pub eval_set: Vec<Proposal>,
    pub generator_seed: u64,
    pub n_base: usize,
    pub n_novel: usize,
    pub d_in: usize,
}

impl EpisodeDataset {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }
}

const PLACEMENT_TRIES: usize = 500;

fn unit_direction(d: usize, rng: &mut RngState) -> FeatureVector {
    loop {
        let v: FeatureVector = (0..d).map(|_| rng.normal()).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn blend(a: &[f64], b: &[f64], w_a: f64) -> FeatureVector {
    a.iter().zip(b).map(|(x, y)| w_a * x + (1.0 - w_a) * y).collect()
}

fn random_regress_map(d_in: usize, rng: &mut RngState) -> (Vec<f64>, [f64; 4]) {
    let scale = 1.0 / (d_in as f64).sqrt();
    let weight = (0..d_in * 4).map(|_| scale * rng.normal()).collect();
    let offset = std::array::from_fn(|_| rng.uniform_in(-0.5, 0.5));
    (weight, offset)
}

/// Draw the class structure: well-separated base means, novel classes built
/// from base-class anchors according to `similarity`.
pub fn build_world(
    ep: &EpisodeConfig,
    d_in: usize,
    rng: &mut RngState,
) -> Result<Vec<ClassSpec>, EpisodeError> {
    if ep.n_base < 2 || ep.n_novel < 1 {
        return Err(EpisodeError::TooFewClasses {
            n_base: ep.n_base,
            n_novel: ep.n_novel,
        });
    }
    let mut specs: Vec<ClassSpec> = Vec::with_capacity(ep.n_base + ep.n_novel);

    for i in 0..ep.n_base {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let candidate: FeatureVector = unit_direction(d_in, rng)
                .into_iter()
                .map(|x| x * ep.mean_radius)
                .collect();
            let ok = specs
                .iter()
                .all(|s| euclidean_distance(&s.latent_mean, &candidate) >= ep.separation_margin);
            if ok {
                placed = Some(candidate);
                break;
            }
        }
        let latent_mean = placed.ok_or(EpisodeError::InfeasibleSeparation {
            class_index: i,
            margin: ep.separation_margin,
            tries: PLACEMENT_TRIES,
        })?;
        let latent_var = (0..d_in)
            .map(|_| rng.uniform_in(ep.latent_var_min, ep.latent_var_max))
            .collect();
        let (regress_weight, regress_offset) = random_regress_map(d_in, rng);
        specs.push(ClassSpec {
            class_id: ClassId(i),
            role: ClassRole::Base,
            latent_mean,
            latent_var,
            regress_weight,
            regress_offset,
            base_mixture: Vec::new(),
        });
    }

    let s = ep.similarity;
    for j in 0..ep.n_novel {
        let a = rng.below(ep.n_base);
        let b = loop {
            let cand = rng.below(ep.n_base);
            if cand != a {
                break cand;
            }
        };
        let beta = rng.uniform_in(0.35, 0.65);
        let anchor_mean = blend(&specs[a].latent_mean, &specs[b].latent_mean, beta);
        let anchor_var = blend(&specs[a].latent_var, &specs[b].latent_var, beta);
        let anchor_w = blend(&specs[a].regress_weight, &specs[b].regress_weight, beta);
        let anchor_off: [f64; 4] = std::array::from_fn(|i| {
            beta * specs[a].regress_offset[i] + (1.0 - beta) * specs[b].regress_offset[i]
        });

        let fresh_mean: FeatureVector = unit_direction(d_in, rng)
            .into_iter()
            .map(|x| x * ep.mean_radius)
            .collect();
        let fresh_var: FeatureVector = (0..d_in)
            .map(|_| rng.uniform_in(ep.latent_var_min, ep.latent_var_max))
            .collect();
        let (fresh_w, fresh_off) = random_regress_map(d_in, rng);

        specs.push(ClassSpec {
            class_id: ClassId(ep.n_base + j),
            role: ClassRole::Novel,
            latent_mean: blend(&anchor_mean, &fresh_mean, s),
            latent_var: blend(&anchor_var, &fresh_var, s),
            regress_weight: blend(&anchor_w, &fresh_w, s),
            regress_offset: std::array::from_fn(|i| {
                s * anchor_off[i] + (1.0 - s) * fresh_off[i]
            }),
            base_mixture: vec![(ClassId(a), beta), (ClassId(b), 1.0 - beta)],
        });
    }
    Ok(specs)
}

fn sample_foreground(spec: &ClassSpec, ep: &EpisodeConfig, rng: &mut RngState) -> Proposal {
    let feature = gaussian_sample(&spec.latent_mean, &spec.latent_var, rng)
        .expect("latent variance is non-negative");
    let d_in = feature.len();
    let reg_target = std::array::from_fn(|i| {
        let mut u = spec.regress_offset[i];
        for (d, &x) in feature.iter().enumerate().take(d_in) {
            u += spec.regress_weight[d * 4 + i] * x;
        }
        u + ep.reg_noise_std * rng.normal()
    });
    Proposal {
        feature,
        label: ProposalLabel::Foreground {
            class: spec.class_id,
            reg_target,
        },
    }
}

fn sample_background(specs: &[ClassSpec], d_in: usize, ep: &EpisodeConfig, rng: &mut RngState) -> Proposal {
    // Broad cloud, rejected near class means so backgrounds stay background.
    let std = 2.0 * ep.mean_radius / (d_in as f64).sqrt();
    let mut feature: FeatureVector = (0..d_in).map(|_| std * rng.normal()).collect();
    for _ in 0..20 {
        let far = specs
            .iter()
            .all(|s| euclidean_distance(&s.latent_mean, &feature) >= ep.separation_margin);
        if far {
            break;
        }
        feature = (0..d_in).map(|_| std * rng.normal()).collect();
    }
    Proposal {
        feature,
        label: ProposalLabel::Background,
    }
}

fn sample_set(
    specs: &[ClassSpec],
    counts: &[usize],
    n_background: usize,
    ep: &EpisodeConfig,
    rng: &mut RngState,
) -> Vec<Proposal> {
    let d_in = specs.first().map_or(0, |s| s.latent_mean.len());
    let mut out = Vec::new();
    for (spec, &count) in specs.iter().zip(counts) {
        for _ in 0..count {
            out.push(sample_foreground(spec, ep, rng));
        }
    }
    for _ in 0..n_background {
        out.push(sample_background(specs, d_in, ep, rng));
    }
    out
}

/// Foreground proposals per `counts`, plus enough background draws that the
/// background makes up `background_fraction` of the returned set.
pub fn sample_proposals(
    specs: &[ClassSpec],
    counts: &[usize],
    background_fraction: f64,
    ep: &EpisodeConfig,
    rng: &mut RngState,
) -> Vec<Proposal> {
    let total_fg: usize = counts.iter().sum();
    let n_bg = if background_fraction > 0.0 {
        (total_fg as f64 * background_fraction / (1.0 - background_fraction)).round() as usize
    } else {
        0
    };
    sample_set(specs, counts, n_bg, ep, rng)
}

/// A complete episode: abundant base stream (with backgrounds), exactly
/// `k_shot` foreground proposals per novel class, and a fresh evaluation
/// set with `eval_per_class` draws per class plus as many backgrounds.
pub fn make_episode(
    specs: &[ClassSpec],
    ep: &EpisodeConfig,
    rng: &mut RngState,
) -> EpisodeDataset {
    let n_classes = specs.len();
    let d_in = specs.first().map_or(0, |s| s.latent_mean.len());

    let base_counts: Vec<usize> = specs
        .iter()
        .map(|s| if s.role == ClassRole::Base { ep.base_abundance } else { 0 })
        .collect();
    let base_train = sample_proposals(specs, &base_counts, ep.background_fraction, ep, rng);

    let novel_counts: Vec<usize> = specs
        .iter()
        .map(|s| if s.role == ClassRole::Novel { ep.k_shot } else { 0 })
        .collect();
    let novel_train = sample_set(specs, &novel_counts, 0, ep, rng);

    let eval_counts = vec![ep.eval_per_class; n_classes];
    let eval_set = sample_set(specs, &eval_counts, ep.eval_per_class, ep, rng);

    EpisodeDataset {
        base_train,
        novel_train,
        eval_set,
        generator_seed: rng.seed(),
        n_base: ep.n_base,
        n_novel: ep.n_novel,
        d_in,
    }
}

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset format: {0}")]
    Format(String),
}

/// Write an episode as versioned line-delimited text:
/// `<split> fg <class> <features...> <u0> <u1> <u2> <u3>` or
/// `<split> bg <features...>`.
pub fn save_dataset<W: Write>(ds: &EpisodeDataset, out: &mut W) -> Result<(), DatasetIoError> {
    writeln!(
        out,
        "# episode v1 d_in={} n_base={} n_novel={} seed={}",
        ds.d_in, ds.n_base, ds.n_novel, ds.generator_seed
    )?;
    for (split, proposals) in [
        ("base", &ds.base_train),
        ("novel", &ds.novel_train),
        ("eval", &ds.eval_set),
    ] {
        for p in proposals {
            match &p.label {
                ProposalLabel::Foreground { class, reg_target } => {
                    write!(out, "{split} fg {}", class.0)?;
                    for x in &p.feature {
                        write!(out, " {x}")?;
                    }
                    for u in reg_target {
                        write!(out, " {u}")?;
                    }
                }
                ProposalLabel::Background => {
                    write!(out, "{split} bg")?;
                    for x in &p.feature {
                        write!(out, " {x}")?;
                    }
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn load_dataset<R: BufRead>(input: R) -> Result<EpisodeDataset, DatasetIoError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetIoError::Format("empty file".into()))??;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some("episode") || parts.next() != Some("v1") {
        return Err(DatasetIoError::Format(format!("bad header: {header}")));
    }
    let mut get = |key: &str| -> Result<u64, DatasetIoError> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|p| p.strip_prefix('='))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| DatasetIoError::Format(format!("missing {key} in header")))
    };
    let d_in = get("d_in")? as usize;
    let n_base = get("n_base")? as usize;
    let n_novel = get("n_novel")? as usize;
    let seed = get("seed")?;

    let mut ds = EpisodeDataset {
        base_train: Vec::new(),
        novel_train: Vec::new(),
        eval_set: Vec::new(),
        generator_seed: seed,
        n_base,
        n_novel,
        d_in,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let split = tok
            .next()
            .ok_or_else(|| DatasetIoError::Format("missing split".into()))?
            .to_string();
        let kind = tok
            .next()
            .ok_or_else(|| DatasetIoError::Format("missing kind".into()))?;
        let parse =
            |t: &str| -> Result<f64, DatasetIoError> {
                t.parse()
                    .map_err(|e| DatasetIoError::Format(format!("bad float {t}: {e}")))
            };
        let proposal = match kind {
            "fg" => {
                let class: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| DatasetIoError::Format("missing class index".into()))?;
                if class >= n_base + n_novel {
                    return Err(DatasetIoError::Format(format!("class {class} out of range")));
                }
                let values: Vec<f64> = tok.map(parse).collect::<Result<_, _>>()?;
                if values.len() != d_in + 4 {
                    return Err(DatasetIoError::Format(format!(
                        "fg record needs {} values, got {}",
                        d_in + 4,
                        values.len()
                    )));
                }
                Proposal {
                    feature: values[..d_in].to_vec(),
                    label: ProposalLabel::Foreground {
                        class: ClassId(class),
                        reg_target: std::array::from_fn(|i| values[d_in + i]),
                    },
                }
            }
            "bg" => {
                let feature: Vec<f64> = tok.map(parse).collect::<Result<_, _>>()?;
                if feature.len() != d_in {
                    return Err(DatasetIoError::Format(format!(
                        "bg record needs {d_in} values, got {}",
                        feature.len()
                    )));
                }
                Proposal {
                    feature,
                    label: ProposalLabel::Background,
                }
            }
            other => return Err(DatasetIoError::Format(format!("unknown kind {other}"))),
        };
        match split.as_str() {
            "base" => ds.base_train.push(proposal),
            "novel" => ds.novel_train.push(proposal),
            "eval" => ds.eval_set.push(proposal),
            other => return Err(DatasetIoError::Format(format!("unknown split {other}"))),
        }
    }
    Ok(ds)
}

/// Content hash of an episode (sha-256 of its serialized form, first 8
/// bytes hex). Equal hashes across arms certify shared episodes.
pub fn dataset_hash(ds: &EpisodeDataset) -> String {
    let mut buf = Vec::new();
    save_dataset(ds, &mut buf).expect("in-memory serialization");
    let digest = Sha256::digest(&buf);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn cfg_small() -> EpisodeConfig {
        EpisodeConfig {
            n_base: 4,
            n_novel: 2,
            base_abundance: 10,
            eval_per_class: 5,
            k_shot: 2,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn world_is_deterministic_and_separated() {
        let ep = cfg_small();
        let a = build_world(&ep, 8, &mut RngState::new(1)).unwrap();
        let b = build_world(&ep, 8, &mut RngState::new(1)).unwrap();
        assert_eq!(a, b);
        for i in 0..ep.n_base {
            for j in 0..i {
                let d = euclidean_distance(&a[i].latent_mean, &a[j].latent_mean);
                assert!(d >= ep.separation_margin);
            }
        }
    }

    #[test]
    fn world_rejects_degenerate_class_counts() {
        let mut ep = cfg_small();
        ep.n_base = 1;
        assert!(matches!(
            build_world(&ep, 8, &mut RngState::new(1)),
            Err(EpisodeError::TooFewClasses { .. })
        ));
    }

    #[test]
    fn infeasible_separation_is_detected() {
        let mut ep = cfg_small();
        ep.n_base = 40;
        ep.separation_margin = 2.0 * ep.mean_radius + 1.0; // beyond the sphere diameter
        assert!(matches!(
            build_world(&ep, 3, &mut RngState::new(1)),
            Err(EpisodeError::InfeasibleSeparation { .. })
        ));
    }

    #[test]
    fn full_similarity_pins_novel_to_anchor() {
        let mut ep = cfg_small();
        ep.similarity = 1.0;
        let specs = build_world(&ep, 8, &mut RngState::new(3)).unwrap();
        for spec in specs.iter().filter(|s| s.role == ClassRole::Novel) {
            let mut anchor = vec![0.0; 8];
            for (base, w) in &spec.base_mixture {
                for (acc, x) in anchor.iter_mut().zip(&specs[base.0].latent_mean) {
                    *acc += w * x;
                }
            }
            for (m, a) in spec.latent_mean.iter().zip(&anchor) {
                assert!((m - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_similarity_decorrelates_novel_from_anchor() {
        let mut ep = cfg_small();
        ep.similarity = 0.0;
        let mut cos_sum = 0.0;
        let runs = 200;
        for seed in 0..runs {
            let specs = build_world(&ep, 16, &mut RngState::new(seed)).unwrap();
            let novel = &specs[ep.n_base];
            let mut anchor = vec![0.0; 16];
            for (base, w) in &novel.base_mixture {
                for (acc, x) in anchor.iter_mut().zip(&specs[base.0].latent_mean) {
                    *acc += w * x;
                }
            }
            let cos = dot(&novel.latent_mean, &anchor)
                / (crate::numerics::norm(&novel.latent_mean) * crate::numerics::norm(&anchor));
            cos_sum += cos;
        }
        assert!(
            (cos_sum / runs as f64).abs() < 0.1,
            "mean cosine {}",
            cos_sum / runs as f64
        );
    }

    #[test]
    fn sample_proposals_empty_request_is_empty() {
        let ep = cfg_small();
        let specs = build_world(&ep, 8, &mut RngState::new(2)).unwrap();
        let got = sample_proposals(&specs, &vec![0; 6], 0.0, &ep, &mut RngState::new(5));
        assert!(got.is_empty());
    }

    #[test]
    fn degenerate_world_gives_exact_linear_targets() {
        let mut ep = cfg_small();
        ep.latent_var_min = 0.0;
        ep.latent_var_max = 0.0;
        ep.reg_noise_std = 0.0;
        let specs = build_world(&ep, 6, &mut RngState::new(7)).unwrap();
        let counts = vec![1; specs.len()];
        let got = sample_proposals(&specs, &counts, 0.0, &ep, &mut RngState::new(8));
        for (p, spec) in got.iter().zip(&specs) {
            assert_eq!(p.feature, spec.latent_mean);
            let (_, u) = p.foreground().unwrap();
            for i in 0..4 {
                let expected: f64 = spec.regress_offset[i]
                    + (0..6)
                        .map(|d| spec.regress_weight[d * 4 + i] * p.feature[d])
                        .sum::<f64>();
                assert!((u[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn foreground_empirical_mean_matches_latent() {
        let ep = cfg_small();
        let specs = build_world(&ep, 6, &mut RngState::new(11)).unwrap();
        let mut counts = vec![0; specs.len()];
        counts[0] = 10_000;
        let got = sample_proposals(&specs, &counts, 0.0, &ep, &mut RngState::new(12));
        let n = got.len() as f64;
        for d in 0..6 {
            let mean: f64 = got.iter().map(|p| p.feature[d]).sum::<f64>() / n;
            let std = specs[0].latent_var[d].sqrt();
            let bound = 3.0 * std / n.sqrt();
            assert!(
                (mean - specs[0].latent_mean[d]).abs() < bound.max(1e-3),
                "dim {d}: {mean} vs {}",
                specs[0].latent_mean[d]
            );
        }
    }

    #[test]
    fn episode_counts_are_exact_and_deterministic() {
        let ep = cfg_small();
        let specs = build_world(&ep, 8, &mut RngState::new(21)).unwrap();
        let ds = make_episode(&specs, &ep, &mut RngState::new(22));
        let ds2 = make_episode(&specs, &ep, &mut RngState::new(22));
        assert_eq!(ds, ds2);

        let mut fg_counts = vec![0usize; specs.len()];
        for p in &ds.novel_train {
            fg_counts[p.foreground().unwrap().0 .0] += 1;
        }
        for (i, spec) in specs.iter().enumerate() {
            let expected = if spec.role == ClassRole::Novel { ep.k_shot } else { 0 };
            assert_eq!(fg_counts[i], expected);
        }
        let base_fg = ds
            .base_train
            .iter()
            .filter(|p| p.foreground().is_some())
            .count();
        assert_eq!(base_fg, ep.n_base * ep.base_abundance);
        let eval_fg = ds.eval_set.iter().filter(|p| p.foreground().is_some()).count();
        assert_eq!(eval_fg, specs.len() * ep.eval_per_class);
        let eval_bg = ds.eval_set.len() - eval_fg;
        assert_eq!(eval_bg, ep.eval_per_class);
    }

    #[test]
    fn one_shot_episode_has_one_proposal_per_novel_class() {
        let mut ep = cfg_small();
        ep.k_shot = 1;
        let specs = build_world(&ep, 8, &mut RngState::new(31)).unwrap();
        let ds = make_episode(&specs, &ep, &mut RngState::new(32));
        assert_eq!(ds.novel_train.len(), ep.n_novel);
    }

    #[test]
    fn nearest_prototype_ceiling_on_fully_anchored_world() {
        // similarity 1, zero variance, zero noise: every class collapses to
        // its mean, so a nearest-prototype classifier built from the training
        // splits is exact on novel eval points.
        let mut ep = cfg_small();
        ep.similarity = 1.0;
        ep.latent_var_min = 0.0;
        ep.latent_var_max = 0.0;
        ep.reg_noise_std = 0.0;
        let specs = build_world(&ep, 8, &mut RngState::new(41)).unwrap();
        let ds = make_episode(&specs, &ep, &mut RngState::new(42));

        let n_classes = specs.len();
        let mut sums = vec![vec![0.0; 8]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for p in ds.base_train.iter().chain(&ds.novel_train) {
            if let Some((c, _)) = p.foreground() {
                counts[c.0] += 1;
                for (s, x) in sums[c.0].iter_mut().zip(&p.feature) {
                    *s += x;
                }
            }
        }
        let protos: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|x| x / n as f64).collect())
            .collect();

        for p in &ds.eval_set {
            if let Some((c, _)) = p.foreground() {
                if c.0 >= ep.n_base {
                    let nearest = (0..n_classes)
                        .min_by(|&a, &b| {
                            euclidean_distance(&protos[a], &p.feature)
                                .partial_cmp(&euclidean_distance(&protos[b], &p.feature))
                                .unwrap()
                        })
                        .unwrap();
                    assert_eq!(nearest, c.0);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let ep = cfg_small();
        let specs = build_world(&ep, 8, &mut RngState::new(51)).unwrap();
        let ds = make_episode(&specs, &ep, &mut RngState::new(52));
        let mut buf = Vec::new();
        save_dataset(&ds, &mut buf).unwrap();
        let loaded = load_dataset(&buf[..]).unwrap();
        assert_eq!(ds, loaded);
        assert_eq!(dataset_hash(&ds), dataset_hash(&loaded));
    }

    #[test]
    fn load_rejects_malformed_input() {
        assert!(load_dataset(&b"garbage\n"[..]).is_err());
        let bad = b"# episode v1 d_in=2 n_base=2 n_novel=1 seed=0\nbase fg 9 1 2 0 0 0 0\n";
        assert!(load_dataset(&bad[..]).is_err());
    }
}
