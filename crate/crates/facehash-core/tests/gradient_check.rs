//! Central finite-difference verification of every analytic gradient: the
//! four loss functions on small random matrices, and each term plus the full
//! composite propagated through a tiny network to every parameter tensor.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use facehash_core::augment::{augment_batch, AugmentationPolicy};
use facehash_core::datapipe::{make_synthetic_dataset, IdentityLabel, ImageTensor, LabeledBatch};
use facehash_core::losses::{
    classification_loss, reg_loss, sp_loss, squared_quantization_loss, total_loss, LossWeights,
};
use facehash_core::netcore::{
    backward, forward_train, init_model, HeadGradients, ModelConfig, ModelParams,
};

const FD_STEP: f64 = 1e-5;

/// Relative agreement with an absolute fallback for near-zero gradients,
/// where the quotient is dominated by finite-difference noise.
fn check_close(analytic: f64, fd: f64, rel_tol: f64, context: &str) {
    let denom = analytic.abs().max(fd.abs());
    if denom < 1e-5 {
        assert!(
            (analytic - fd).abs() < 1e-6,
            "{context}: near-zero gradients disagree: analytic {analytic:e}, fd {fd:e}"
        );
    } else {
        let rel = (analytic - fd).abs() / denom;
        assert!(
            rel < rel_tol,
            "{context}: rel err {rel:e} (analytic {analytic:e}, fd {fd:e})"
        );
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0) * scale)
}

#[test]
fn sp_loss_matches_finite_differences() {
    let g = random_matrix(3, 4, 1, 0.8);
    let gt = random_matrix(3, 4, 2, 0.8);
    let labels = vec![IdentityLabel(0), IdentityLabel(1), IdentityLabel(0)];
    let (_, grad_g, grad_gt) = sp_loss(g.view(), gt.view(), &labels).unwrap();

    for i in 0..3 {
        for j in 0..4 {
            let mut plus = g.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = g.clone();
            minus[(i, j)] -= FD_STEP;
            let lp = sp_loss(plus.view(), gt.view(), &labels).unwrap().0;
            let lm = sp_loss(minus.view(), gt.view(), &labels).unwrap().0;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            assert!(
                (grad_g[(i, j)] - fd).abs() < 1e-6,
                "sp d/dg[{i},{j}]: {} vs {fd}",
                grad_g[(i, j)]
            );

            let mut plus = gt.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = gt.clone();
            minus[(i, j)] -= FD_STEP;
            let lp = sp_loss(g.view(), plus.view(), &labels).unwrap().0;
            let lm = sp_loss(g.view(), minus.view(), &labels).unwrap().0;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            assert!(
                (grad_gt[(i, j)] - fd).abs() < 1e-6,
                "sp d/dg~[{i},{j}]: {} vs {fd}",
                grad_gt[(i, j)]
            );
        }
    }
}

#[test]
fn reg_loss_matches_finite_differences() {
    let g = random_matrix(3, 4, 3, 1.5);
    let (_, grad) = reg_loss(g.view());
    for i in 0..3 {
        for j in 0..4 {
            let mut plus = g.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = g.clone();
            minus[(i, j)] -= FD_STEP;
            let fd = (reg_loss(plus.view()).0 - reg_loss(minus.view()).0) / (2.0 * FD_STEP);
            assert!((grad[(i, j)] - fd).abs() < 1e-6);
        }
    }
}

#[test]
fn quantization_loss_matches_finite_differences() {
    // keep entries away from the |q| = 1 kink where the subgradient is chosen
    let mut q = random_matrix(3, 4, 4, 0.7);
    q.mapv_inplace(|v| if v.abs() > 0.95 { 0.5 * v } else { v });
    let (_, grad) = squared_quantization_loss(q.view());
    for i in 0..3 {
        for j in 0..4 {
            let mut plus = q.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = q.clone();
            minus[(i, j)] -= FD_STEP;
            let fd = (squared_quantization_loss(plus.view()).0
                - squared_quantization_loss(minus.view()).0)
                / (2.0 * FD_STEP);
            assert!((grad[(i, j)] - fd).abs() < 1e-6);
        }
    }
}

#[test]
fn classification_loss_matches_finite_differences() {
    let logits = random_matrix(3, 4, 5, 2.0);
    let labels = vec![IdentityLabel(2), IdentityLabel(0), IdentityLabel(3)];
    let (_, grad) = classification_loss(logits.view(), &labels).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut plus = logits.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = logits.clone();
            minus[(i, j)] -= FD_STEP;
            let lp = classification_loss(plus.view(), &labels).unwrap().0;
            let lm = classification_loss(minus.view(), &labels).unwrap().0;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            assert!((grad[(i, j)] - fd).abs() < 1e-6);
        }
    }
}

/// Which objective to push through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Sp,
    Reg,
    Sq,
    Cls,
    Composite,
}

pub struct NetworkProbe {
    pub params: ModelParams,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<IdentityLabel>,
    pub weights: LossWeights,
}

impl NetworkProbe {
    /// A tiny-backbone instance on an 8x8 input with K = 4 and c = 2,
    /// with real augmented twins in the back half of the batch.
    pub fn tiny_8x8() -> Self {
        let config = ModelConfig::tiny(8, 4, 2);
        let params = init_model(&config, 77).unwrap();
        let ds = make_synthetic_dataset(2, 4, 8, 31).unwrap();
        let originals: Vec<ImageTensor> = ds.samples()[..4].iter().map(|s| s.image.clone()).collect();
        let labels: Vec<IdentityLabel> = ds.samples()[..4].iter().map(|s| s.label).collect();
        let batch = LabeledBatch {
            images: originals.clone(),
            labels: labels.clone(),
            identity_count: 2,
        };
        let twins = augment_batch(&AugmentationPolicy::default(), &batch, 55).unwrap();
        let mut images = originals;
        images.extend(twins.images);
        NetworkProbe {
            params,
            images,
            labels,
            weights: LossWeights::default(),
        }
    }

    fn term_values(&self, params: &ModelParams) -> (f64, f64, f64, f64) {
        let mut p = params.clone();
        let (out, _) = forward_train(&mut p, &self.images).unwrap();
        let n = self.labels.len();
        let sp = sp_loss(out.g.slice(s![..n, ..]), out.g.slice(s![n.., ..]), &self.labels)
            .unwrap()
            .0;
        let reg = reg_loss(out.g.view()).0;
        let sq = squared_quantization_loss(out.q.view()).0;
        let mut labels2 = self.labels.clone();
        labels2.extend(self.labels.iter().copied());
        let cls = classification_loss(out.logits.view(), &labels2).unwrap().0;
        (sp, reg, sq, cls)
    }

    /// Scalar loss as a pure function of the parameters.
    pub fn loss(&self, params: &ModelParams, term: Term) -> f64 {
        let (sp, reg, sq, cls) = self.term_values(params);
        match term {
            Term::Sp => sp,
            Term::Reg => reg,
            Term::Sq => sq,
            Term::Cls => cls,
            Term::Composite => total_loss(sp, reg, sq, cls, &self.weights),
        }
    }

    /// Analytic gradients of one term, flattened in trainable order.
    pub fn analytic(&self, term: Term) -> Vec<Vec<f64>> {
        let mut p = self.params.clone();
        let (out, cache) = forward_train(&mut p, &self.images).unwrap();
        let n = self.labels.len();
        let rows = 2 * n;
        let dg_dim = p.config.projection_dim;
        let k = p.config.code_bits;

        let mut heads = HeadGradients::default();
        match term {
            Term::Sp => {
                let (_, dgo, dga) =
                    sp_loss(out.g.slice(s![..n, ..]), out.g.slice(s![n.., ..]), &self.labels)
                        .unwrap();
                let mut d_g = Array2::zeros((rows, dg_dim));
                d_g.slice_mut(s![..n, ..]).assign(&dgo);
                d_g.slice_mut(s![n.., ..]).assign(&dga);
                heads.d_g = Some(d_g);
            }
            Term::Reg => {
                heads.d_g = Some(reg_loss(out.g.view()).1);
            }
            Term::Sq => {
                heads.d_q = Some(squared_quantization_loss(out.q.view()).1);
            }
            Term::Cls => {
                let mut labels2 = self.labels.clone();
                labels2.extend(self.labels.iter().copied());
                heads.d_logits = Some(classification_loss(out.logits.view(), &labels2).unwrap().1);
            }
            Term::Composite => {
                let (_, dgo, dga) =
                    sp_loss(out.g.slice(s![..n, ..]), out.g.slice(s![n.., ..]), &self.labels)
                        .unwrap();
                let mut d_g = Array2::zeros((rows, dg_dim));
                d_g.slice_mut(s![..n, ..]).assign(&dgo);
                d_g.slice_mut(s![n.., ..]).assign(&dga);
                let (_, d_reg) = reg_loss(out.g.view());
                d_g.zip_mut_with(&d_reg, |a, &b| *a += self.weights.lambda1 * b);
                heads.d_g = Some(d_g);

                let (_, d_q) = squared_quantization_loss(out.q.view());
                heads.d_q = Some(d_q.mapv(|v| self.weights.lambda2 * v));
                let _ = k;

                let mut labels2 = self.labels.clone();
                labels2.extend(self.labels.iter().copied());
                heads.d_logits =
                    Some(classification_loss(out.logits.view(), &labels2).unwrap().1);
            }
        }
        let grads = backward(&p, &cache, &heads).unwrap();
        grads.flat().into_iter().map(|s| s.to_vec()).collect()
    }

    /// Compare analytic vs central differences on `coords_per_tensor`
    /// sampled coordinates of every parameter tensor.
    pub fn check_term(&self, term: Term, coords_per_tensor: usize, rel_tol: f64) {
        let analytic = self.analytic(term);
        let names: Vec<String> = self
            .params
            .trainable()
            .iter()
            .map(|(_, n, _)| n.clone())
            .collect();
        let sizes: Vec<usize> = self.params.trainable().iter().map(|(_, _, s)| s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);

        for (ti, &len) in sizes.iter().enumerate() {
            for _ in 0..coords_per_tensor.min(len) {
                let i = rng.gen_range(0..len);
                let mut plus = self.params.clone();
                plus.trainable_mut()[ti].1[i] += FD_STEP;
                let mut minus = self.params.clone();
                minus.trainable_mut()[ti].1[i] -= FD_STEP;
                let fd = (self.loss(&plus, term) - self.loss(&minus, term)) / (2.0 * FD_STEP);
                check_close(
                    analytic[ti][i],
                    fd,
                    rel_tol,
                    &format!("{term:?} {}[{i}]", names[ti]),
                );
            }
        }
    }
}

#[test]
fn network_gradients_match_finite_differences_per_term() {
    let probe = NetworkProbe::tiny_8x8();
    for term in [Term::Sp, Term::Reg, Term::Sq, Term::Cls] {
        probe.check_term(term, 4, 1e-4);
    }
}

#[test]
fn network_composite_gradient_matches_finite_differences() {
    let probe = NetworkProbe::tiny_8x8();
    probe.check_term(Term::Composite, 4, 1e-4);
}
