//! The trainable detection head.
//!
//! Shared input features are decoupled by two projection heads (fully
//! connected + ReLU) into a cls space feeding a (C+1)-way linear classifier
//! and a loc space feeding C per-class 4-d box regressors. Backward is the
//! exact chain rule; the ReLU subgradient at 0 is 0.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::numerics::{FeatureVector, RngState};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
}

/// Head dimensions: input feature size, the two projected spaces, and the
/// number of foreground classes (the classifier adds one background logit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub d_in: usize,
    pub d_cls: usize,
    pub d_loc: usize,
    pub n_classes: usize,
}

/// Dense layer, weight stored row-major as `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
            d_in,
            d_out,
        }
    }

    pub fn random(d_in: usize, d_out: usize, std: f64, rng: &mut RngState) -> Self {
        let mut layer = Linear::zeros(d_in, d_out);
        for w in &mut layer.weight {
            *w = std * rng.normal();
        }
        layer
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.d_out..(i + 1) * self.d_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// Chain rule for `out = W^T x + b`: accumulates the parameter gradients
    /// and adds `W . d_out` into `d_x`.
    fn backward(&self, x: &[f64], d_out: &[f64], grads: &mut LinearGrads, d_x: &mut [f64]) {
        for (j, &g) in d_out.iter().enumerate() {
            grads.bias[j] += g;
        }
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.d_out..(i + 1) * self.d_out];
            let grow = &mut grads.weight[i * self.d_out..(i + 1) * self.d_out];
            let mut acc = 0.0;
            for ((gw, &w), &g) in grow.iter_mut().zip(row).zip(d_out) {
                *gw += xi * g;
                acc += w * g;
            }
            d_x[i] += acc;
        }
    }
}

/// Gradient (or velocity) buffers matching one [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    fn zeros_like(layer: &Linear) -> Self {
        LinearGrads {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn reset(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}

/// Decoupled projections plus classifier and per-class regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub dims: HeadDims,
    pub cls_proj: Linear,
    pub loc_proj: Linear,
    pub classifier: Linear,
    pub regressors: Vec<Linear>,
}

impl Heads {
    pub fn zeros(dims: HeadDims) -> Self {
        Heads {
            dims,
            cls_proj: Linear::zeros(dims.d_in, dims.d_cls),
            loc_proj: Linear::zeros(dims.d_in, dims.d_loc),
            classifier: Linear::zeros(dims.d_cls, dims.n_classes + 1),
            regressors: (0..dims.n_classes)
                .map(|_| Linear::zeros(dims.d_loc, 4))
                .collect(),
        }
    }

    /// He-style init for the ReLU projections, small-std init for the
    /// prediction layers so training starts near uniform outputs.
    pub fn random(dims: HeadDims, rng: &mut RngState) -> Self {
        let proj_std = (2.0 / dims.d_in as f64).sqrt();
        Heads {
            dims,
            cls_proj: Linear::random(dims.d_in, dims.d_cls, proj_std, rng),
            loc_proj: Linear::random(dims.d_in, dims.d_loc, proj_std, rng),
            classifier: Linear::random(dims.d_cls, dims.n_classes + 1, 0.01, rng),
            regressors: (0..dims.n_classes)
                .map(|_| Linear::random(dims.d_loc, 4, 0.01, rng))
                .collect(),
        }
    }

    /// Forward pass retaining every intermediate needed by [`Heads::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<Activations, HeadError> {
        if input.len() != self.dims.d_in {
            return Err(HeadError::DimensionMismatch {
                what: "input",
                expected: self.dims.d_in,
                got: input.len(),
            });
        }
        let mut z_cls = vec![0.0; self.dims.d_cls];
        self.cls_proj.forward(input, &mut z_cls);
        let f_cls: Vec<f64> = z_cls.iter().map(|&z| z.max(0.0)).collect();

        let mut z_loc = vec![0.0; self.dims.d_loc];
        self.loc_proj.forward(input, &mut z_loc);
        let f_loc: Vec<f64> = z_loc.iter().map(|&z| z.max(0.0)).collect();

        let mut logits = vec![0.0; self.dims.n_classes + 1];
        self.classifier.forward(&f_cls, &mut logits);

        let mut box_preds = Vec::with_capacity(self.dims.n_classes);
        let mut row = [0.0; 4];
        for reg in &self.regressors {
            reg.forward(&f_loc, &mut row);
            box_preds.push(row);
        }

        Ok(Activations {
            input: input.to_vec(),
            z_cls,
            f_cls,
            z_loc,
            f_loc,
            logits,
            box_preds,
        })
    }

    /// Classifier applied directly to a cls-space feature, bypassing the
    /// projection. Used to score features sampled in the cls space.
    pub fn classifier_logits(&self, f_cls: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.dims.n_classes + 1];
        self.classifier.forward(f_cls, &mut logits);
        logits
    }

    /// Exact chain-rule backward for one retained forward pass. Parameter
    /// gradients accumulate into `grads`; the input gradient is returned.
    pub fn backward(
        &self,
        acts: &Activations,
        upstream: &UpstreamGrads,
        grads: &mut HeadGrads,
    ) -> Result<FeatureVector, HeadError> {
        if upstream.logits.len() != self.dims.n_classes + 1 {
            return Err(HeadError::DimensionMismatch {
                what: "logits gradient",
                expected: self.dims.n_classes + 1,
                got: upstream.logits.len(),
            });
        }
        if upstream.box_preds.len() != self.dims.n_classes {
            return Err(HeadError::DimensionMismatch {
                what: "box gradient rows",
                expected: self.dims.n_classes,
                got: upstream.box_preds.len(),
            });
        }

        let mut d_f_cls = vec![0.0; self.dims.d_cls];
        self.classifier
            .backward(&acts.f_cls, upstream.logits, &mut grads.classifier, &mut d_f_cls);
        if let Some(extra) = upstream.f_cls {
            for (d, &e) in d_f_cls.iter_mut().zip(extra) {
                *d += e;
            }
        }

        let mut d_f_loc = vec![0.0; self.dims.d_loc];
        for ((reg, d_row), g) in self
            .regressors
            .iter()
            .zip(upstream.box_preds)
            .zip(&mut grads.regressors)
        {
            reg.backward(&acts.f_loc, d_row, g, &mut d_f_loc);
        }
        if let Some(extra) = upstream.f_loc {
            for (d, &e) in d_f_loc.iter_mut().zip(extra) {
                *d += e;
            }
        }

        // ReLU gate: pass gradient only where the pre-activation was positive.
        let d_z_cls: Vec<f64> = d_f_cls
            .iter()
            .zip(&acts.z_cls)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();
        let d_z_loc: Vec<f64> = d_f_loc
            .iter()
            .zip(&acts.z_loc)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();

        let mut d_input = vec![0.0; self.dims.d_in];
        self.cls_proj
            .backward(&acts.input, &d_z_cls, &mut grads.cls_proj, &mut d_input);
        self.loc_proj
            .backward(&acts.input, &d_z_loc, &mut grads.loc_proj, &mut d_input);
        Ok(d_input)
    }

    /// Momentum SGD over every parameter tensor: `v <- m v + g; p <- p - lr v`.
    pub fn sgd_update(&mut self, grads: &HeadGrads, velocity: &mut HeadGrads, cfg: &SgdConfig) {
        let pairs = [
            (&mut self.cls_proj, &grads.cls_proj, &mut velocity.cls_proj),
            (&mut self.loc_proj, &grads.loc_proj, &mut velocity.loc_proj),
            (
                &mut self.classifier,
                &grads.classifier,
                &mut velocity.classifier,
            ),
        ];
        for (layer, g, v) in pairs {
            sgd_step(&mut layer.weight, &g.weight, &mut v.weight, cfg);
            sgd_step(&mut layer.bias, &g.bias, &mut v.bias, cfg);
        }
        for ((layer, g), v) in self
            .regressors
            .iter_mut()
            .zip(&grads.regressors)
            .zip(&mut velocity.regressors)
        {
            sgd_step(&mut layer.weight, &g.weight, &mut v.weight, cfg);
            sgd_step(&mut layer.bias, &g.bias, &mut v.bias, cfg);
        }
    }

    /// Versioned plain-text checkpoint: header with dimensions, then one
    /// line per tensor with round-trippable float formatting.
    pub fn save_checkpoint<W: Write>(&self, out: &mut W) -> Result<(), CheckpointError> {
        let d = &self.dims;
        writeln!(
            out,
            "# heads v1 d_in={} d_cls={} d_loc={} n_classes={}",
            d.d_in, d.d_cls, d.d_loc, d.n_classes
        )?;
        let mut write_tensor = |name: &str, values: &[f64]| -> Result<(), CheckpointError> {
            write!(out, "{name}")?;
            for v in values {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
            Ok(())
        };
        write_tensor("cls_proj_w", &self.cls_proj.weight)?;
        write_tensor("cls_proj_b", &self.cls_proj.bias)?;
        write_tensor("loc_proj_w", &self.loc_proj.weight)?;
        write_tensor("loc_proj_b", &self.loc_proj.bias)?;
        write_tensor("classifier_w", &self.classifier.weight)?;
        write_tensor("classifier_b", &self.classifier.bias)?;
        for (i, reg) in self.regressors.iter().enumerate() {
            write_tensor(&format!("regressor_{i}_w"), &reg.weight)?;
            write_tensor(&format!("regressor_{i}_b"), &reg.bias)?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(input: R) -> Result<Heads, CheckpointError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| CheckpointError::Format("empty file".into()))??;
        let dims = parse_header(&header)?;
        let mut heads = Heads::zeros(dims);

        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::Format("missing tensor name".into()))?;
            let values: Vec<f64> = parts
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| CheckpointError::Format(format!("bad float {t}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let target: &mut Vec<f64> = match name {
                "cls_proj_w" => &mut heads.cls_proj.weight,
                "cls_proj_b" => &mut heads.cls_proj.bias,
                "loc_proj_w" => &mut heads.loc_proj.weight,
                "loc_proj_b" => &mut heads.loc_proj.bias,
                "classifier_w" => &mut heads.classifier.weight,
                "classifier_b" => &mut heads.classifier.bias,
                _ => {
                    let rest = name
                        .strip_prefix("regressor_")
                        .ok_or_else(|| CheckpointError::Format(format!("unknown tensor {name}")))?;
                    let (idx, kind) = rest
                        .rsplit_once('_')
                        .ok_or_else(|| CheckpointError::Format(format!("unknown tensor {name}")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| CheckpointError::Format(format!("bad index in {name}")))?;
                    let reg = heads.regressors.get_mut(idx).ok_or_else(|| {
                        CheckpointError::Format(format!("regressor index {idx} out of range"))
                    })?;
                    match kind {
                        "w" => &mut reg.weight,
                        "b" => &mut reg.bias,
                        _ => {
                            return Err(CheckpointError::Format(format!("unknown tensor {name}")))
                        }
                    }
                }
            };
            if values.len() != target.len() {
                return Err(CheckpointError::Format(format!(
                    "tensor {name}: expected {} values, got {}",
                    target.len(),
                    values.len()
                )));
            }
            *target = values;
        }
        Ok(heads)
    }
}

fn parse_header(header: &str) -> Result<HeadDims, CheckpointError> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some("heads") || parts.next() != Some("v1") {
        return Err(CheckpointError::Format(format!("bad header: {header}")));
    }
    let mut get = |key: &str| -> Result<usize, CheckpointError> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|p| p.strip_prefix('='))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| CheckpointError::Format(format!("missing {key} in header")))
    };
    Ok(HeadDims {
        d_in: get("d_in")?,
        d_cls: get("d_cls")?,
        d_loc: get("d_loc")?,
        n_classes: get("n_classes")?,
    })
}

/// Retained activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: FeatureVector,
    pub z_cls: Vec<f64>,
    pub f_cls: FeatureVector,
    pub z_loc: Vec<f64>,
    pub f_loc: FeatureVector,
    pub logits: Vec<f64>,
    pub box_preds: Vec<[f64; 4]>,
}

/// Upstream loss gradients entering the head. The optional entries inject
/// gradients directly at the projected features.
pub struct UpstreamGrads<'a> {
    pub logits: &'a [f64],
    pub box_preds: &'a [[f64; 4]],
    pub f_cls: Option<&'a [f64]>,
    pub f_loc: Option<&'a [f64]>,
}

/// Gradient buffers matching a [`Heads`] layout. Also used as the SGD
/// velocity state.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub cls_proj: LinearGrads,
    pub loc_proj: LinearGrads,
    pub classifier: LinearGrads,
    pub regressors: Vec<LinearGrads>,
}

impl HeadGrads {
    pub fn zeros_like(heads: &Heads) -> Self {
        HeadGrads {
            cls_proj: LinearGrads::zeros_like(&heads.cls_proj),
            loc_proj: LinearGrads::zeros_like(&heads.loc_proj),
            classifier: LinearGrads::zeros_like(&heads.classifier),
            regressors: heads.regressors.iter().map(LinearGrads::zeros_like).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.cls_proj.reset();
        self.loc_proj.reset();
        self.classifier.reset();
        for r in &mut self.regressors {
            r.reset();
        }
    }
}

/// Momentum SGD hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
}

/// One momentum SGD step on a flat parameter tensor.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.learning_rate * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: HeadDims = HeadDims {
        d_in: 6,
        d_cls: 5,
        d_loc: 5,
        n_classes: 4,
    };

    #[test]
    fn zero_heads_emit_zero_outputs() {
        let heads = Heads::zeros(DIMS);
        let acts = heads.forward(&vec![1.0; 6]).unwrap();
        assert!(acts.f_cls.iter().all(|&x| x == 0.0));
        assert!(acts.f_loc.iter().all(|&x| x == 0.0));
        assert!(acts.logits.iter().all(|&x| x == 0.0));
        assert!(acts.box_preds.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_projection_passes_non_negative_input() {
        let dims = HeadDims {
            d_in: 3,
            d_cls: 3,
            d_loc: 3,
            n_classes: 2,
        };
        let mut heads = Heads::zeros(dims);
        for i in 0..3 {
            heads.cls_proj.weight[i * 3 + i] = 1.0;
        }
        let x = vec![0.5, 0.0, 2.0];
        let acts = heads.forward(&x).unwrap();
        assert_eq!(acts.f_cls, x);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = RngState::new(17);
        let heads = Heads::random(DIMS, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let acts = heads.forward(&x).unwrap();

        // Independent re-evaluation with naive loops.
        let lin = |w: &[f64], b: &[f64], x: &[f64], d_out: usize| -> Vec<f64> {
            (0..d_out)
                .map(|j| {
                    b[j] + (0..x.len()).map(|i| x[i] * w[i * d_out + j]).sum::<f64>()
                })
                .collect()
        };
        let z_cls = lin(&heads.cls_proj.weight, &heads.cls_proj.bias, &x, 5);
        let f_cls: Vec<f64> = z_cls.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        let logits = lin(&heads.classifier.weight, &heads.classifier.bias, &f_cls, 5);
        for (a, b) in acts.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        let z_loc = lin(&heads.loc_proj.weight, &heads.loc_proj.bias, &x, 5);
        let f_loc: Vec<f64> = z_loc.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        for (c, reg) in heads.regressors.iter().enumerate() {
            let t = lin(&reg.weight, &reg.bias, &f_loc, 4);
            for i in 0..4 {
                assert!((acts.box_preds[c][i] - t[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let heads = Heads::zeros(DIMS);
        assert!(matches!(
            heads.forward(&[1.0, 2.0]),
            Err(HeadError::DimensionMismatch { what: "input", .. })
        ));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = RngState::new(3);
        let heads = Heads::random(DIMS, &mut rng);
        let acts = heads.forward(&vec![0.3; 6]).unwrap();
        let mut grads = HeadGrads::zeros_like(&heads);
        let d_logits = vec![0.0; 5];
        let d_box = vec![[0.0; 4]; 4];
        let d_input = heads
            .backward(
                &acts,
                &UpstreamGrads {
                    logits: &d_logits,
                    box_preds: &d_box,
                    f_cls: None,
                    f_loc: None,
                },
                &mut grads,
            )
            .unwrap();
        assert!(d_input.iter().all(|&x| x == 0.0));
        assert!(grads.classifier.weight.iter().all(|&x| x == 0.0));
        assert!(grads.cls_proj.weight.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn classifier_weight_gradient_is_outer_product() {
        let mut rng = RngState::new(4);
        let heads = Heads::random(DIMS, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.normal().abs()).collect();
        let acts = heads.forward(&x).unwrap();
        let d_logits: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let d_box = vec![[0.0; 4]; 4];
        let mut grads = HeadGrads::zeros_like(&heads);
        heads
            .backward(
                &acts,
                &UpstreamGrads {
                    logits: &d_logits,
                    box_preds: &d_box,
                    f_cls: None,
                    f_loc: None,
                },
                &mut grads,
            )
            .unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = acts.f_cls[i] * d_logits[j];
                assert!((grads.classifier.weight[i * 5 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_single_step_without_momentum() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(
            &mut p,
            &[1.0],
            &mut v,
            &SgdConfig {
                learning_rate: 0.1,
                momentum: 0.0,
                iterations: 1,
            },
        );
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let mut p = vec![1.5, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(
            &mut p,
            &[0.0, 0.0],
            &mut v,
            &SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                iterations: 1,
            },
        );
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn sgd_momentum_two_step_recurrence() {
        // v1 = 1, theta1 = -0.1; v2 = 1.9, theta2 = -0.29.
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            iterations: 2,
        };
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, &cfg);
        sgd_step(&mut p, &[1.0], &mut v, &cfg);
        assert!((p[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut rng = RngState::new(88);
        let heads = Heads::random(DIMS, &mut rng);
        let mut buf = Vec::new();
        heads.save_checkpoint(&mut buf).unwrap();
        let loaded = Heads::load_checkpoint(&buf[..]).unwrap();
        assert_eq!(heads, loaded);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Heads::load_checkpoint(&b"nonsense\n"[..]).is_err());
        assert!(Heads::load_checkpoint(
            &b"# heads v1 d_in=2 d_cls=2 d_loc=2 n_classes=1\ncls_proj_w 1 2 3\n"[..]
        )
        .is_err());
    }
}
