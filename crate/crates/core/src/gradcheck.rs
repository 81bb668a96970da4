//! Central finite-difference verification of graph gradients.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function of `inputs` with
/// central differences on `coords` randomly chosen coordinates.
///
/// `build` records the function on a fresh graph given one leaf per input.
/// Every input tensor gets at least one coordinate.
pub fn check<F, R>(inputs: &[Tensor], coords: usize, rng: &mut R, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..coords.max(inputs.len()) {
        let (which, flat) = if k < inputs.len() {
            (k, rng.random_range(0..inputs[k].numel()))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut which = 0;
            while flat >= work[which].numel() {
                flat -= work[which].numel();
                which += 1;
            }
            (which, flat)
        };
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + FD_STEP;
        let up = eval(&work)?;
        work[which].data_mut()[flat] = orig - FD_STEP;
        let down = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[which].data()[flat];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((which, flat, a, numeric));
        }
    }
    Ok(report)
}

/// Largest relative error accepted by the suites.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one named check within a module suite.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: &'static str,
    pub report: GradReport,
}

/// Worst relative error per module, in first-seen order.
pub fn module_maxima(results: &[CaseResult]) -> Vec<(&'static str, f64, usize)> {
    let mut out: Vec<(&'static str, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(m, _, _)| *m == r.module) {
            Some(entry) => {
                entry.1 = entry.1.max(r.report.max_rel_err);
                entry.2 += r.report.checked;
            }
            None => out.push((r.module, r.report.max_rel_err, r.report.checked)),
        }
    }
    out
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    module: &'static str,
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(
    module: &'static str,
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        module,
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Reduces any node to a scalar through a fixed random weighting, so that
/// every output coordinate influences the result differently.
fn project(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    let w = Tensor::from_fn(g.shape(v), |i| ((i * 7919 + 13) % 97) as f64 / 97.0 - 0.4);
    debug_assert_eq!(w.numel(), n);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn unary(
    name: &'static str,
    input: Tensor,
    f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static,
) -> Case {
    case("tensor_core", name, vec![input], move |g, v| {
        let y = f(g, v[0])?;
        project(g, y)
    })
}

fn tensor_core_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<Case> {
    use crate::graph::Reduction;
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, rng);
    let img = u(&[3, 6, 6], -1.0, 1.0);
    let pos = u(&[4, 5], 0.5, 2.0);
    let mat = u(&[4, 5], -1.0, 1.0);
    let mut cases = vec![
        case("tensor_core", "add", vec![mat.clone(), u(&[4, 5], -1.0, 1.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        case("tensor_core", "sub", vec![mat.clone(), u(&[4, 5], -1.0, 1.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        }),
        case("tensor_core", "mul", vec![mat.clone(), u(&[4, 5], -1.0, 1.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        }),
        unary("affine", mat.clone(), |g, x| Ok(g.affine(x, -1.7, 0.3))),
        unary("recip", pos.clone(), |g, x| Ok(g.recip(x))),
        unary("sqrt", pos.clone(), |g, x| Ok(g.sqrt(x))),
        unary("exp", mat.clone(), |g, x| Ok(g.exp(x))),
        unary("ln", pos.clone(), |g, x| Ok(g.ln(x))),
        unary("clamp", mat.clone(), |g, x| Ok(g.clamp(x, -0.5, 0.5))),
        unary("sigmoid", mat.clone(), |g, x| Ok(g.sigmoid(x))),
        unary("tanh", mat.clone(), |g, x| Ok(g.tanh(x))),
        unary("leaky_relu", mat.clone(), |g, x| Ok(g.leaky_relu(x, 0.2))),
        unary("sum", mat.clone(), |g, x| {
            let s = g.sum(x);
            let s2 = g.mul(s, s)?;
            Ok(s2)
        }),
        unary("mean", mat.clone(), |g, x| {
            let m = g.mean(x);
            Ok(g.exp(m))
        }),
        unary("reduce_sum", mat.clone(), |g, x| g.reduce(x, 1, Reduction::Sum)),
        unary("reduce_max", mat.clone(), |g, x| g.reduce(x, 0, Reduction::Max)),
        unary("reduce_min", mat.clone(), |g, x| g.reduce(x, 1, Reduction::Min)),
        unary("expand", mat.clone(), |g, x| g.expand(x, 1, 3)),
        unary("broadcast_channels", u(&[3], -1.0, 1.0), |g, x| g.broadcast_channels(x, 2, 3)),
        unary("broadcast_map", u(&[1, 3, 2], -1.0, 1.0), |g, x| g.broadcast_map(x, 4)),
        unary("reshape", mat.clone(), |g, x| g.reshape(x, &[2, 10])),
        unary("transpose", mat.clone(), |g, x| g.transpose(x)),
        case("tensor_core", "matmul", vec![mat.clone(), u(&[5, 3], -1.0, 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        case(
            "tensor_core",
            "conv2d",
            vec![img.clone(), u(&[4, 3, 3, 3], -0.5, 0.5), u(&[4], -0.1, 0.1)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(g, y)
            },
        ),
        case(
            "tensor_core",
            "conv2d_strided",
            vec![u(&[3, 7, 7], -1.0, 1.0), u(&[2, 3, 3, 3], -0.5, 0.5), u(&[2], -0.1, 0.1)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
                project(g, y)
            },
        ),
        case(
            "tensor_core",
            "linear",
            vec![u(&[5], -1.0, 1.0), u(&[3, 5], -1.0, 1.0), u(&[3], -1.0, 1.0)],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y)
            },
        ),
        unary("softmax", img.clone(), |g, x| g.softmax(x, 0)),
        unary("instance_norm", img.clone(), |g, x| Ok(g.instance_norm(x, 1e-5)?.0)),
        unary("layer_norm", img.clone(), |g, x| Ok(g.layer_norm(x, 1e-5)?.0)),
        unary("upsample_nearest", img.clone(), |g, x| g.upsample_nearest(x, 2)),
        unary("resize_bilinear_up", img.clone(), |g, x| g.resize_bilinear(x, 9, 11)),
        unary("resize_bilinear_down", img.clone(), |g, x| g.resize_bilinear(x, 4, 5)),
        unary("avg_pool", img.clone(), |g, x| g.avg_pool(x, 2)),
        case("tensor_core", "concat", vec![img.clone(), u(&[2, 6, 6], -1.0, 1.0)], |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y)
        }),
        unary("crop", img.clone(), |g, x| g.crop(x, 1, 2, 3, 4)),
        unary("narrow", img.clone(), |g, x| g.narrow(x, 1, 2)),
        case("tensor_core", "huber", vec![mat.clone(), u(&[4, 5], -1.0, 1.0)], |g, v| {
            g.huber(v[0], v[1], 0.1)
        }),
    ];
    cases.shrink_to_fit();
    cases
}

fn modulation_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<Case> {
    use crate::modulation::{denormalize_on_graph, BlockInput, GateMode, Rm3Config, Rm3Params};
    use crate::nn::{Bound, ParamSet};
    let mut out = Vec::new();
    for (name, gate) in [("rm3_shared_gate", GateMode::Shared), ("rm3_per_channel_gate", GateMode::PerChannel)] {
        let cfg = Rm3Config {
            channels: 4,
            spatial_channels: 3,
            noise_dim: 5,
            code_dim: 6,
            eps: 1e-5,
            gate,
        };
        let mut ps = ParamSet::new();
        let block = Rm3Params::new(&mut ps, "rm3", cfg, rng);
        let np = ps.len();
        let mut inputs = ps.values().to_vec();
        inputs.push(Tensor::uniform(&[4, 6, 6], -1.0, 1.0, rng));
        inputs.push(Tensor::uniform(&[3, 3, 3], -1.0, 1.0, rng));
        inputs.push(Tensor::uniform(&[5], -1.0, 1.0, rng));
        inputs.push(Tensor::uniform(&[6], -1.0, 1.0, rng));
        out.push(case("modulation", name, inputs, move |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let input = BlockInput {
                h: v[np],
                z_s: v[np + 1],
                z_n: v[np + 2],
                z_w: v[np + 3],
            };
            let o = block.forward(g, &p, input)?;
            project(g, o.out)
        }));
    }
    out.push(case(
        "modulation",
        "denormalize",
        vec![
            Tensor::uniform(&[3, 4, 4], -1.0, 1.0, rng),
            Tensor::uniform(&[3], -1.0, 1.0, rng),
            Tensor::uniform(&[3, 4, 4], -1.0, 1.0, rng),
        ],
        |g, v| {
            let y = denormalize_on_graph(g, v[0], v[1], v[2])?;
            project(g, y)
        },
    ));
    out
}

fn objectives_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<Case> {
    use crate::nn::{Bound, ParamSet};
    use crate::objectives::{
        component_contextual_on_graph, contextual_on_graph, discriminator_loss_on_graph,
        generator_adv_loss_on_graph, perceptual_on_graph, CropBox, FeatureNet, LossWeights, MultiScaleDiscriminator,
    };
    let w = LossWeights::default();
    let features = std::rc::Rc::new(FeatureNet::new(0));
    let nf = features.params.len();
    let mut dps = ParamSet::new();
    let disc = MultiScaleDiscriminator::new(&mut dps, 2, rng);
    let nd = dps.len();
    let a = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, rng);
    let b = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, rng);

    let mut out = Vec::new();
    let delta = w.huber_delta;
    out.push(case("objectives", "huber", vec![a.clone(), b.clone()], move |g, v| {
        g.huber(v[0], v[1], delta)
    }));

    let adv = w.adv_scale_weights;
    let mut d_inputs = dps.values().to_vec();
    d_inputs.push(a.clone());
    d_inputs.push(b.clone());
    let d1 = disc.clone();
    out.push(case("objectives", "adversarial_discriminator", d_inputs.clone(), move |g, v| {
        let p = Bound::from_vars(v[..nd].to_vec());
        let pr = d1.forward(g, &p, v[nd])?;
        let pf = d1.forward(g, &p, v[nd + 1])?;
        discriminator_loss_on_graph(g, &pr, &pf, &adv)
    }));
    out.push(case("objectives", "adversarial_generator", d_inputs, move |g, v| {
        let p = Bound::from_vars(v[..nd].to_vec());
        let pf = disc.forward(g, &p, v[nd + 1])?;
        generator_adv_loss_on_graph(g, &pf, &adv)
    }));

    let layers = w.vgg_layer_weights;
    let f1 = features.clone();
    let frozen = features.params.values().to_vec();
    out.push(case("objectives", "perceptual", vec![a.clone(), b.clone()], move |g, v| {
        let p = Bound::from_vars(frozen.iter().map(|t| g.constant(t.clone())).collect());
        perceptual_on_graph(g, &f1, &p, v[0], v[1], &layers)
    }));
    let mut f_inputs = features.params.values().to_vec();
    f_inputs.push(a.clone());
    f_inputs.push(b.clone());
    let f2 = features.clone();
    out.push(case("objectives", "feature_pyramid", f_inputs, move |g, v| {
        let p = Bound::from_vars(v[..nf].to_vec());
        let feats = f2.forward(g, &p, v[nf], 5)?;
        let mut terms = Vec::new();
        for f in feats {
            terms.push(project(g, f)?);
        }
        g.add_all(&terms)
    }));

    out.push(case(
        "objectives",
        "contextual",
        vec![
            Tensor::uniform(&[6, 4], -1.0, 1.0, rng),
            Tensor::uniform(&[5, 4], -1.0, 1.0, rng),
        ],
        |g, v| contextual_on_graph(g, v[0], v[1], 0.5),
    ));
    let f3 = features;
    let frozen = f3.params.values().to_vec();
    let boxes = [CropBox { y0: 2, x0: 1, h: 6, w: 8 }, CropBox { y0: 9, x0: 5, h: 5, w: 7 }];
    out.push(case("objectives", "component_contextual", vec![a, b], move |g, v| {
        let p = Bound::from_vars(frozen.iter().map(|t| g.constant(t.clone())).collect());
        component_contextual_on_graph(g, &f3, &p, v[0], v[1], &boxes)
    }));
    out
}

fn memory_cases<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Case>> {
    use crate::memory::{MemoryBank, Query};
    use crate::wavelet::WaveletCode;
    let mut bank = MemoryBank::new(4, 3, 2)?;
    bank.write(0, &Query::new(vec![1.0, 0.2, -0.1])?, &WaveletCode::new(vec![5.0, -5.0]), 1);
    bank.write(1, &Query::new(vec![0.9, 0.1, 0.0])?, &WaveletCode::new(vec![-5.0, 5.0]), 1);
    let raw = Tensor::uniform(&[3], -1.0, 1.0, rng).zip_map(&Tensor::new(&[3], vec![1.0, 0.0, 0.0])?, |a, b| 0.2 * a + b)?;
    let z = WaveletCode::new(vec![5.0, -5.0]);
    Ok(vec![case("memory", "triplet", vec![raw], move |g, v| {
        // Normalize on the graph so the hinge sees a unit query.
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq);
        let n = g.sqrt(s);
        let inv = g.recip(n);
        let inv = g.expand(inv, 0, 3)?;
        let q = g.mul(v[0], inv)?;
        let (loss, _) = bank.triplet_on_graph(g, q, &z, 0.5, 0.7)?;
        Ok(loss)
    })])
}

/// The 16x16, two-block generator objective with a frozen discriminator and
/// feature extractor, differentiated with respect to every generator
/// parameter.
fn pipeline_cases<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Case>> {
    use crate::nn::{Bound, ParamSet};
    use crate::objectives::{
        component_contextual_on_graph, generator_adv_loss_on_graph, perceptual_on_graph, CropBox, FeatureNet,
        LossWeights, MultiScaleDiscriminator,
    };
    use crate::pipeline::nets::{Generator, GeneratorConfig, QueryEncoder};

    let cfg = GeneratorConfig {
        resolution: 16,
        block_count: 2,
        base_channels: 4,
        noise_dim: 8,
        mapping_width: 6,
        wavelet_levels: 1,
        ..GeneratorConfig::default()
    };
    let gen = Generator::new(cfg.clone(), rng.next_u64())?;
    let np = gen.params.len();
    // Away from the output clamp, where atanh's curvature swamps central
    // differences.
    let lq_up = Tensor::uniform(&[3, 16, 16], -0.9, 0.9, rng);
    let hr = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, rng);
    let noise = Tensor::uniform(&[cfg.noise_dim], -1.0, 1.0, rng);
    let code = Tensor::uniform(&[cfg.code_dim()], -0.2, 0.2, rng);
    let features = FeatureNet::new(0);
    let mut dps = ParamSet::new();
    let disc = MultiScaleDiscriminator::new(&mut dps, 2, rng);
    let w = LossWeights::default();
    let boxes = [CropBox { y0: 3, x0: 2, h: 4, w: 5 }, CropBox { y0: 10, x0: 4, h: 4, w: 8 }];

    let mut inputs = gen.params.values().to_vec();
    inputs.extend([lq_up.clone(), noise.clone(), code.clone()]);
    let g1 = gen.clone();
    let end_to_end = case("pipeline", "generator_end_to_end", inputs, move |g, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let out = g1.forward(g, &p, v[np], v[np + 1], v[np + 2])?;
        let target = g.constant(hr.clone());
        let fv = Bound::from_vars(features.params.values().iter().map(|t| g.constant(t.clone())).collect());
        let dv = Bound::from_vars(dps.values().iter().map(|t| g.constant(t.clone())).collect());
        let pf = disc.forward(g, &dv, out.restored)?;
        let adv = generator_adv_loss_on_graph(g, &pf, &w.adv_scale_weights)?;
        let rec = g.huber(out.restored, target, w.huber_delta)?;
        let rec = g.scale(rec, w.lambda_rec);
        let rec_prime = g.huber(out.x_mr, target, w.huber_delta)?;
        let rec_prime = g.scale(rec_prime, w.lambda_rec_prime);
        let vgg = perceptual_on_graph(g, &features, &fv, out.restored, target, &w.vgg_layer_weights)?;
        let ccx = component_contextual_on_graph(g, &features, &fv, out.restored, target, &boxes)?;
        let ccx = g.scale(ccx, w.lambda_ccx);
        g.add_all(&[adv, rec, rec_prime, vgg, ccx])
    });

    let mut inputs = gen.params.values().to_vec();
    inputs.push(noise);
    let mapping = case("pipeline", "mapping_network", inputs, move |g, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let heads = gen.mapping_forward(g, &p, v[np])?;
        let mut terms = Vec::new();
        for h in heads {
            terms.push(project(g, h)?);
        }
        g.add_all(&terms)
    });

    let query = QueryEncoder::new(16, 4, rng.next_u64())?;
    let nq = query.params.len();
    let mut inputs = query.params.values().to_vec();
    inputs.push(lq_up);
    let query_case = case("pipeline", "query_encoder", inputs, move |g, v| {
        let p = Bound::from_vars(v[..nq].to_vec());
        let q = query.forward(g, &p, v[nq])?;
        project(g, q)
    });
    Ok(vec![end_to_end, mapping, query_case])
}

/// Runs every module suite with `coords` coordinates per case (at least one
/// per input tensor).
pub fn run_suites(seed: u64, coords: usize) -> Result<Vec<CaseResult>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cases = tensor_core_cases(&mut rng);
    cases.extend(modulation_cases(&mut rng));
    cases.extend(objectives_cases(&mut rng));
    cases.extend(memory_cases(&mut rng)?);
    cases.extend(pipeline_cases(&mut rng)?);
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let report = check(&c.inputs, coords, &mut rng, &c.build)?;
        log::debug!("{}::{} max rel err {:.3e}", c.module, c.name, report.max_rel_err);
        out.push(CaseResult {
            module: c.module,
            case: c.name,
            report,
        });
    }
    Ok(out)
}
