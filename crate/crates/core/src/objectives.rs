//! Training objectives: Huber reconstruction, multi-scale adversarial,
//! feature-pyramid perceptual, component contextual and their weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::nn::{Bound, Conv, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_HUBER_DELTA: f64 = 0.1;
pub const PROB_CLAMP: f64 = 1e-7;
pub const CX_BANDWIDTH: f64 = 0.5;
/// Added inside the square root of the stage distance so the gradient stays
/// finite when the two feature maps coincide.
pub const NORM_EPS: f64 = 1e-12;
/// Side length the component crops are resampled to before feature extraction.
pub const COMPONENT_SIZE: usize = 16;
/// Feature stages compared by the contextual loss.
pub const CX_STAGES: [usize; 2] = [1, 2];
pub const ADV_SCALES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_rec_prime: f64,
    pub lambda_ccx: f64,
    pub adv_scale_weights: [f64; 4],
    pub vgg_layer_weights: [f64; 5],
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 100.0,
            lambda_rec_prime: 100.0,
            lambda_ccx: 1.0,
            adv_scale_weights: [4.0, 2.0, 1.0, 1.0],
            vgg_layer_weights: [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
            huber_delta: DEFAULT_HUBER_DELTA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_rec_prime, self.lambda_ccx]
            .into_iter()
            .chain(self.adv_scale_weights)
            .chain(self.vgg_layer_weights);
        for w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber delta {} must be positive", self.huber_delta)));
        }
        Ok(())
    }
}

fn huber_point(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean Huber penalty of the elementwise residual.
pub fn huber(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "huber",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if !(delta > 0.0) {
        return Err(Error::contract(format!("huber delta must be positive, got {delta}")));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| huber_point(p - t, delta)).sum();
    Ok(s / pred.numel() as f64)
}

/// Derivative of the pointwise penalty with respect to the residual.
pub(crate) fn huber_slope(d: f64, delta: f64) -> f64 {
    d.clamp(-delta, delta)
}

/// Weighted parts of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub rec_prime: f64,
    pub rec: f64,
    pub vgg: f64,
    pub ccx: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.adv + w.lambda_rec_prime * parts.rec_prime + w.lambda_rec * parts.rec + parts.vgg + w.lambda_ccx * parts.ccx
}

/// Discriminator and generator losses from per-scale probability maps.
pub fn adversarial_from_probs(real: &[Tensor], fake: &[Tensor], weights: &[f64]) -> Result<(f64, f64)> {
    if real.len() != fake.len() || real.len() != weights.len() {
        return Err(Error::contract(format!(
            "adversarial scale count mismatch: {} real, {} fake, {} weights",
            real.len(),
            fake.len(),
            weights.len()
        )));
    }
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (mut ld, mut lg) = (0.0, 0.0);
    for ((r, f), &w) in real.iter().zip(fake).zip(weights) {
        let lr = r.data().iter().map(|&p| -clamp(p).ln()).sum::<f64>() / r.numel() as f64;
        let lf = f.data().iter().map(|&p| -(1.0 - clamp(p)).ln()).sum::<f64>() / f.numel() as f64;
        let gf = f.data().iter().map(|&p| -clamp(p).ln()).sum::<f64>() / f.numel() as f64;
        ld += w * (lr + lf);
        lg += w * gf;
    }
    Ok((ld, lg))
}

fn weighted_sum(g: &mut Graph, terms: Vec<(Var, f64)>) -> Result<Var> {
    let scaled: Vec<Var> = terms.into_iter().map(|(v, w)| g.scale(v, w)).collect();
    g.add_all(&scaled)
}

/// `-mean(log p)` on a probability map, with clamping.
fn neg_log_mean(g: &mut Graph, p: Var, complement: bool) -> Var {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let c = if complement { g.affine(c, -1.0, 1.0) } else { c };
    let l = g.ln(c);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

pub fn discriminator_loss_on_graph(g: &mut Graph, real: &[Var], fake: &[Var], weights: &[f64]) -> Result<Var> {
    if real.len() != fake.len() || real.len() != weights.len() {
        return Err(Error::contract("adversarial scale count mismatch"));
    }
    let mut terms = Vec::new();
    for ((&r, &f), &w) in real.iter().zip(fake).zip(weights) {
        let a = neg_log_mean(g, r, false);
        let b = neg_log_mean(g, f, true);
        terms.push((g.add(a, b)?, w));
    }
    weighted_sum(g, terms)
}

pub fn generator_adv_loss_on_graph(g: &mut Graph, fake: &[Var], weights: &[f64]) -> Result<Var> {
    if fake.len() != weights.len() {
        return Err(Error::contract("adversarial scale count mismatch"));
    }
    let terms = fake
        .iter()
        .zip(weights)
        .map(|(&f, &w)| (neg_log_mean(g, f, false), w))
        .collect();
    weighted_sum(g, terms)
}

/// One patch discriminator: three convolutions, the last producing logits.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub layers: [Conv; 3],
}

/// Patch discriminators applied to the input average-pooled by 1, 2, 4, 8.
#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator {
    pub scales: Vec<usize>,
    pub nets: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new<R: rand::Rng + ?Sized>(ps: &mut ParamSet, channels: usize, rng: &mut R) -> Self {
        let nets = ADV_SCALES
            .iter()
            .map(|s| {
                let name = format!("disc{s}");
                PatchDiscriminator {
                    layers: [
                        Conv::new(ps, &format!("{name}.conv0"), 3, channels, 3, rng),
                        Conv::new(ps, &format!("{name}.conv1"), channels, 2 * channels, 3, rng),
                        Conv::new(ps, &format!("{name}.conv2"), 2 * channels, 1, 3, rng),
                    ],
                }
            })
            .collect();
        MultiScaleDiscriminator {
            scales: ADV_SCALES.to_vec(),
            nets,
        }
    }

    /// Probability maps, one per scale.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.nets.len());
        for (net, &s) in self.nets.iter().zip(&self.scales) {
            let mut h = if s == 1 { x } else { g.avg_pool(x, s)? };
            for (i, layer) in net.layers.iter().enumerate() {
                h = layer.forward(g, p, h)?;
                if i < 2 {
                    h = g.leaky_relu(h, 0.2);
                    let (_, hh, ww) = g.value(h).dims3()?;
                    if hh >= 4 && ww >= 4 && hh % 2 == 0 && ww % 2 == 0 {
                        h = g.avg_pool(h, 2)?;
                    }
                }
            }
            out.push(g.sigmoid(h));
        }
        Ok(out)
    }
}

/// Evaluates both adversarial losses for one real/fake pair.
pub fn adversarial_losses(
    disc: &MultiScaleDiscriminator,
    params: &ParamSet,
    x_real: &Tensor,
    x_fake: &Tensor,
    weights: &[f64],
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let r = g.constant(x_real.clone());
    let f = g.constant(x_fake.clone());
    let pr = disc.forward(&mut g, &p, r)?;
    let pf = disc.forward(&mut g, &p, f)?;
    let real: Vec<Tensor> = pr.iter().map(|&v| g.value(v).clone()).collect();
    let fake: Vec<Tensor> = pf.iter().map(|&v| g.value(v).clone()).collect();
    adversarial_from_probs(&real, &fake, weights)
}

/// Frozen five-stage convolutional feature pyramid. Stage 0 runs at input
/// resolution, every later stage halves it first.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub params: ParamSet,
    pub stages: Vec<Conv>,
}

pub const FEATURE_WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

impl FeatureNet {
    /// Deterministic weights from `seed` (0 for the reference extractor).
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        let stages = FEATURE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut params, &format!("feat.stage{i}"), c_in, c, 3, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        FeatureNet { params, stages }
    }

    /// Features of stages `0..upto`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, upto: usize) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(upto);
        let mut h = x;
        for (i, conv) in self.stages.iter().take(upto).enumerate() {
            if i > 0 {
                h = g.avg_pool(h, 2)?;
            }
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, 0.2);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn features(&self, x: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(x.clone());
        let f = self.forward(&mut g, &p, v, upto)?;
        Ok(f.iter().map(|&v| g.value(v).clone()).collect())
    }
}

/// `sqrt(mean((a - b)^2) + eps) - sqrt(eps)`: the root-mean-square stage
/// distance, exactly zero for identical maps.
pub fn stage_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, |x, y| x - y)?;
    Ok((d.sum_sq() / d.numel() as f64 + NORM_EPS).sqrt() - NORM_EPS.sqrt())
}

fn stage_distance_on_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq);
    let m = g.affine(m, 1.0, NORM_EPS);
    let r = g.sqrt(m);
    Ok(g.affine(r, 1.0, -NORM_EPS.sqrt()))
}

/// Perceptual loss on the graph; `target` is usually a constant.
pub fn perceptual_on_graph(
    g: &mut Graph,
    net: &FeatureNet,
    p: &Bound,
    pred: Var,
    target: Var,
    layer_weights: &[f64],
) -> Result<Var> {
    let upto = layer_weights.len().min(net.stages.len());
    let fp = net.forward(g, p, pred, upto)?;
    let ft = net.forward(g, p, target, upto)?;
    let mut terms = Vec::new();
    for ((&a, &b), &w) in fp.iter().zip(&ft).zip(layer_weights) {
        terms.push((stage_distance_on_graph(g, a, b)?, w));
    }
    weighted_sum(g, terms)
}

pub fn perceptual_loss(net: &FeatureNet, pred: &Tensor, target: &Tensor, layer_weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("perceptual_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let upto = layer_weights.len().min(net.stages.len());
    let fp = net.features(pred, upto)?;
    let ft = net.features(target, upto)?;
    let mut s = 0.0;
    for ((a, b), w) in fp.iter().zip(&ft).zip(layer_weights) {
        s += w * stage_distance(a, b)?;
    }
    Ok(s)
}

/// Contextual similarity of two vector sets given as rows of `[N, D]` and
/// `[M, D]` matrices.
pub fn contextual_similarity(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let cx = contextual_on_graph(&mut g, va, vb, bandwidth)?;
    Ok(g.scalar_value(cx))
}

fn row_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let sq = g.mul(x, x)?;
    let s = g.reduce(sq, 1, Reduction::Sum)?;
    let s = g.affine(s, 1.0, NORM_EPS);
    let n = g.sqrt(s);
    let inv = g.recip(n);
    let inv = g.expand(inv, 1, d)?;
    g.mul(x, inv)
}

/// Contextual similarity between row sets, as a scalar node in `(0, 1]`.
pub fn contextual_on_graph(g: &mut Graph, a: Var, b: Var, bandwidth: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("contextual_similarity", format!("{sa:?} vs {sb:?}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::contract(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let m = sb[0];
    let an = row_normalize(g, a)?;
    let bn = row_normalize(g, b)?;
    let bt = g.transpose(bn)?;
    let cos = g.matmul(an, bt)?;
    let dist = g.affine(cos, -1.0, 1.0);
    let dmin = g.reduce(dist, 1, Reduction::Min)?;
    let dmin = g.affine(dmin, 1.0, 1e-5);
    let inv = g.recip(dmin);
    let inv = g.expand(inv, 1, m)?;
    let rel = g.mul(dist, inv)?;
    let logits = g.affine(rel, -1.0 / bandwidth, 1.0 / bandwidth);
    let w = g.exp(logits);
    let rs = g.reduce(w, 1, Reduction::Sum)?;
    let rinv = g.recip(rs);
    let rinv = g.expand(rinv, 1, m)?;
    let cx = g.mul(w, rinv)?;
    let best = g.reduce(cx, 0, Reduction::Max)?;
    Ok(g.mean(best))
}

/// Axis-aligned image rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CropBox {
    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.h > 0 && self.w > 0 && self.y0 + self.h <= h && self.x0 + self.w <= w
    }
}

/// `[C, H, W]` feature map as `H*W` rows of length `C`.
fn as_rows(g: &mut Graph, f: Var) -> Result<Var> {
    let (c, h, w) = g.value(f).dims3()?;
    let flat = g.reshape(f, &[c, h * w])?;
    g.transpose(flat)
}

/// `-log CX` averaged over components and contextual stages.
pub fn component_contextual_on_graph(
    g: &mut Graph,
    net: &FeatureNet,
    p: &Bound,
    pred: Var,
    target: Var,
    boxes: &[CropBox],
) -> Result<Var> {
    if boxes.is_empty() {
        log::warn!("component contextual loss called without crop boxes; contributing 0");
        let z = g.constant(Tensor::scalar(0.0));
        return Ok(z);
    }
    let (_, h, w) = g.value(pred).dims3()?;
    let upto = CX_STAGES.iter().max().map_or(0, |m| m + 1);
    let mut terms = Vec::new();
    for b in boxes {
        if !b.fits(h, w) {
            return Err(Error::contract(format!("crop box {b:?} outside {h}x{w} image")));
        }
        let mut feats = Vec::new();
        for img in [pred, target] {
            let c = g.crop(img, b.y0, b.x0, b.h, b.w)?;
            let c = g.resize_bilinear(c, COMPONENT_SIZE, COMPONENT_SIZE)?;
            feats.push(net.forward(g, p, c, upto)?);
        }
        for &s in &CX_STAGES {
            let ra = as_rows(g, feats[0][s])?;
            let rb = as_rows(g, feats[1][s])?;
            let cx = contextual_on_graph(g, ra, rb, CX_BANDWIDTH)?;
            let l = g.ln(cx);
            terms.push((l, -1.0 / (boxes.len() * CX_STAGES.len()) as f64));
        }
    }
    weighted_sum(g, terms)
}

pub fn component_contextual_loss(net: &FeatureNet, pred: &Tensor, target: &Tensor, boxes: &[CropBox]) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let a = g.constant(pred.clone());
    let b = g.constant(target.clone());
    let l = component_contextual_on_graph(&mut g, net, &p, a, b, boxes)?;
    Ok(g.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn huber_cases() {
        let d = 0.1;
        let a = Tensor::full(&[4], 0.3);
        assert_eq!(huber(&a, &a, d).unwrap(), 0.0);
        let t = Tensor::zeros(&[4]);
        let at = Tensor::full(&[4], d);
        assert!((huber(&at, &t, d).unwrap() - d * d / 2.0).abs() < 1e-18);
        assert!((d * (d - d / 2.0) - d * d / 2.0).abs() < 1e-18);
        let two = Tensor::full(&[4], 2.0 * d);
        assert!((huber(&two, &t, d).unwrap() - 1.5 * d * d).abs() < 1e-15);
        assert!(huber(&a, &Tensor::zeros(&[3]), d).is_err());
        assert!(huber(&a, &a, 0.0).is_err());
    }

    #[test]
    fn huber_monotone() {
        let mut prev = -1.0;
        for i in 0..200 {
            let v = huber_point(i as f64 * 0.003, 0.1);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let unit = LossParts {
            adv: 1.0,
            rec_prime: 1.0,
            rec: 1.0,
            vgg: 1.0,
            ccx: 1.0,
        };
        assert_eq!(total_loss(&unit, &w), 203.0);
        let two = LossParts { rec: 2.0, ..unit };
        assert_eq!(total_loss(&two, &w) - total_loss(&unit, &w), 100.0);
    }

    #[test]
    fn adversarial_symmetric_point() {
        let half: Vec<Tensor> = (0..4).map(|_| Tensor::full(&[1, 2, 2], 0.5)).collect();
        let w = LossWeights::default().adv_scale_weights;
        let (ld, lg) = adversarial_from_probs(&half, &half, &w).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((ld - 8.0 * 2.0 * ln2).abs() < 1e-12);
        assert!((lg - 8.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_saturation() {
        let ones: Vec<Tensor> = (0..4).map(|_| Tensor::full(&[1, 2, 2], 1.0)).collect();
        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[1, 2, 2])).collect();
        let (ld, lg) = adversarial_from_probs(&ones, &zeros, &[4.0, 2.0, 1.0, 1.0]).unwrap();
        assert!(ld < 1e-5);
        assert!((lg - 8.0 * -(1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn adversarial_graph_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[1, 3, 3], 0.01, 0.99, &mut rng)).collect();
        let fake: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[1, 3, 3], 0.01, 0.99, &mut rng)).collect();
        let w = [4.0, 2.0, 1.0, 1.0];
        let mut oracle_d = 0.0;
        let mut oracle_g = 0.0;
        for i in 0..4 {
            let n = 9.0;
            let lr: f64 = real[i].data().iter().map(|p| -p.ln()).sum::<f64>() / n;
            let lf: f64 = fake[i].data().iter().map(|p| -(1.0 - p).ln()).sum::<f64>() / n;
            oracle_d += w[i] * (lr + lf);
            oracle_g += w[i] * fake[i].data().iter().map(|p| -p.ln()).sum::<f64>() / n;
        }
        let (ld, lg) = adversarial_from_probs(&real, &fake, &w).unwrap();
        assert!((ld - oracle_d).abs() < 1e-10);
        assert!((lg - oracle_g).abs() < 1e-10);
        let mut g = Graph::new();
        let rv: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
        let fv: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
        let d = discriminator_loss_on_graph(&mut g, &rv, &fv, &w).unwrap();
        let gl = generator_adv_loss_on_graph(&mut g, &fv, &w).unwrap();
        assert!((g.scalar_value(d) - oracle_d).abs() < 1e-10);
        assert!((g.scalar_value(gl) - oracle_g).abs() < 1e-10);
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = MultiScaleDiscriminator::new(&mut ps, 4, &mut rng);
        let x = rand_tensor(&[3, 16, 16], 2);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let v = g.constant(x);
        let probs = d.forward(&mut g, &p, v).unwrap();
        assert_eq!(probs.len(), 4);
        for pv in probs {
            assert!(g.value(pv).data().iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }

    #[test]
    fn perceptual_cases() {
        let net = FeatureNet::new(0);
        let a = rand_tensor(&[3, 16, 16], 1);
        let b = rand_tensor(&[3, 16, 16], 2);
        let w = LossWeights::default().vgg_layer_weights;
        assert_eq!(perceptual_loss(&net, &a, &a, &w).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&net, &a, &b, &[0.0; 5]).unwrap(), 0.0);
        let fa = net.features(&a, 5).unwrap();
        let fb = net.features(&b, 5).unwrap();
        let oracle: f64 = (0..5)
            .map(|i| {
                let n = fa[i].numel() as f64;
                let ss: f64 = fa[i].data().iter().zip(fb[i].data()).map(|(x, y)| (x - y).powi(2)).sum();
                w[i] * ((ss / n + NORM_EPS).sqrt() - NORM_EPS.sqrt())
            })
            .sum();
        let got = perceptual_loss(&net, &a, &b, &w).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn weights_applied_in_order() {
        let net = FeatureNet::new(0);
        let a = rand_tensor(&[3, 16, 16], 5);
        let b = rand_tensor(&[3, 16, 16], 6);
        let w = LossWeights::default().vgg_layer_weights;
        let fa = net.features(&a, 5).unwrap();
        let fb = net.features(&b, 5).unwrap();
        for i in 0..5 {
            let mut one = [0.0; 5];
            one[i] = 1.0;
            let single = perceptual_loss(&net, &a, &b, &one).unwrap();
            assert!((single - stage_distance(&fa[i], &fb[i]).unwrap()).abs() < 1e-12);
        }
        let total = perceptual_loss(&net, &a, &b, &w).unwrap();
        let parts: f64 = (0..5).map(|i| w[i] * stage_distance(&fa[i], &fb[i]).unwrap()).sum();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn contextual_identity_and_single() {
        let a = rand_tensor(&[10, 6], 3);
        let cx = contextual_similarity(&a, &a, CX_BANDWIDTH).unwrap();
        assert!((cx - 1.0).abs() < 1e-6);
        let u = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        // a single row normalizes to itself
        assert!((contextual_similarity(&u, &v, CX_BANDWIDTH).unwrap() - 1.0).abs() < 1e-12);
    }

    fn cx_oracle(a: &Tensor, b: &Tensor, h: f64) -> f64 {
        let (n, m, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
        let mut dist = vec![vec![0.0; m]; n];
        for i in 0..n {
            let ai = row(a, i);
            for j in 0..m {
                let bj = row(b, j);
                let dot: f64 = ai.iter().zip(&bj).map(|(x, y)| x * y).sum();
                dist[i][j] = 1.0 - dot / (norm(&ai) * norm(&bj));
            }
        }
        let mut cx = vec![vec![0.0; m]; n];
        for i in 0..n {
            let mn = dist[i].iter().cloned().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = dist[i].iter().map(|dd| ((1.0 - dd / (mn + 1e-5)) / h).exp()).collect();
            let s: f64 = w.iter().sum();
            for j in 0..m {
                cx[i][j] = w[j] / s;
            }
        }
        (0..m).map(|j| (0..n).map(|i| cx[i][j]).fold(f64::MIN, f64::max)).sum::<f64>() / m as f64
    }

    #[test]
    fn contextual_matches_oracle_and_is_permutation_invariant() {
        let a = rand_tensor(&[7, 5], 11);
        let b = rand_tensor(&[9, 5], 12);
        let cx = contextual_similarity(&a, &b, CX_BANDWIDTH).unwrap();
        assert!((cx - cx_oracle(&a, &b, CX_BANDWIDTH)).abs() < 1e-12);
        assert!(cx > 0.0 && cx <= 1.0);
        let permute = |t: &Tensor, seed: u64| {
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            Tensor::from_fn(&[n, d], |k| t.data()[idx[k / d] * d + k % d])
        };
        let cx2 = contextual_similarity(&permute(&a, 1), &permute(&b, 2), CX_BANDWIDTH).unwrap();
        assert!((cx - cx2).abs() < 1e-12);
    }

    #[test]
    fn component_loss_cases() {
        let net = FeatureNet::new(0);
        let a = rand_tensor(&[3, 32, 32], 7);
        let b = rand_tensor(&[3, 32, 32], 8);
        let boxes = [
            CropBox { y0: 8, x0: 6, h: 6, w: 8 },
            CropBox { y0: 8, x0: 18, h: 6, w: 8 },
            CropBox { y0: 20, x0: 10, h: 6, w: 12 },
        ];
        assert!(component_contextual_loss(&net, &a, &a, &boxes).unwrap().abs() < 1e-6);
        assert_eq!(component_contextual_loss(&net, &a, &b, &[]).unwrap(), 0.0);
        let got = component_contextual_loss(&net, &a, &b, &boxes).unwrap();
        let mut sum = 0.0;
        for bx in &boxes {
            let crop = |t: &Tensor| {
                let c = crate::ops::crop(t, bx.y0, bx.x0, bx.h, bx.w).unwrap();
                crate::ops::resize_bilinear(&c, COMPONENT_SIZE, COMPONENT_SIZE).unwrap()
            };
            let fa = net.features(&crop(&a), 3).unwrap();
            let fb = net.features(&crop(&b), 3).unwrap();
            for &s in &CX_STAGES {
                let rows = |f: &Tensor| {
                    let (c, h, w) = f.dims3().unwrap();
                    Tensor::from_fn(&[h * w, c], |k| f.data()[(k % c) * h * w + k / c])
                };
                sum -= contextual_similarity(&rows(&fa[s]), &rows(&fb[s]), CX_BANDWIDTH).unwrap().ln();
            }
        }
        let oracle = sum / 6.0;
        assert!((got - oracle).abs() < 1e-10);
        let outside = [CropBox { y0: 30, x0: 0, h: 6, w: 6 }];
        assert!(component_contextual_loss(&net, &a, &b, &outside).is_err());
    }
}
