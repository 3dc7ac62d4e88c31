#![allow(dead_code)]

use diffusion_ad::denoiser::{multi_head_attention, AttentionWeights};
use diffusion_ad::tensor::gradcheck::{grad_check, GradCheckReport};
use diffusion_ad::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type ScalarFn = Box<dyn Fn(&Graph<f64>, &Var<f64>) -> Result<Var<f64>>>;

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output element
/// contributes a distinct amount to the checked scalar.
pub fn project(g: &Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let w = g.constant(Tensor::randn(y.shape().to_vec(), &mut rng(seed)));
    let p = g.mul(y, &w)?;
    Ok(g.sum(&p))
}

pub struct Case {
    pub name: &'static str,
    pub point: Tensor<f64>,
    pub f: ScalarFn,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

/// Values in `±[0.1, 1]`, clear of kinks at zero.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed).map(|v| if v >= 0.0 { 0.1 + 0.9 * v } else { -0.1 + 0.9 * v })
}

fn case(name: &'static str, point: Tensor<f64>, f: impl Fn(&Graph<f64>, &Var<f64>) -> Result<Var<f64>> + 'static) -> Case {
    Case { name, point, f: Box::new(f) }
}

fn konst(g: &Graph<f64>, shape: &[usize], seed: u64) -> Var<f64> {
    g.constant(uniform(shape, -1.0, 1.0, seed))
}

/// One check per differentiable operation, each input position in turn.
pub fn op_cases() -> Vec<Case> {
    let s = [2, 3, 4];
    let mut v = vec![
        case("add", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.add(x, &konst(g, &[2, 3, 4], 2))?; project(g, &y, 3) }),
        case("sub/lhs", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.sub(x, &konst(g, &[2, 3, 4], 2))?; project(g, &y, 3) }),
        case("sub/rhs", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.sub(&konst(g, &[2, 3, 4], 2), x)?; project(g, &y, 3) }),
        case("mul", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.mul(x, &konst(g, &[2, 3, 4], 2))?; project(g, &y, 3) }),
        case("mul/self", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.mul(x, x)?; project(g, &y, 3) }),
        case("div/lhs", uniform(&s, -1.0, 1.0, 1), |g, x| {
            let d = g.constant(uniform(&[2, 3, 4], 0.5, 2.0, 2));
            let y = g.div(x, &d)?;
            project(g, &y, 3)
        }),
        case("div/rhs", uniform(&s, 0.5, 2.0, 1), |g, x| { let y = g.div(&konst(g, &[2, 3, 4], 2), x)?; project(g, &y, 3) }),
        case("add_scalar", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.add_scalar(x, 0.7); project(g, &y, 3) }),
        case("mul_scalar", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.mul_scalar(x, -1.3); project(g, &y, 3) }),
        case("div_scalar", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.div_scalar(x, 2.5)?; project(g, &y, 3) }),
        case("sqrt", uniform(&s, 0.3, 2.0, 1), |g, x| { let y = g.sqrt(x)?; project(g, &y, 3) }),
        case("square", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.square(x); project(g, &y, 3) }),
        case("silu", uniform(&s, -3.0, 3.0, 1), |g, x| { let y = g.silu(x); project(g, &y, 3) }),
        case("leaky_relu", away_from_zero(&s, 1), |g, x| { let y = g.leaky_relu(x, 0.1); project(g, &y, 3) }),
        case("sum", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.sum(x); Ok(g.mul_scalar(&y, 0.3)) }),
        case("mean", uniform(&s, -1.0, 1.0, 1), |g, x| Ok(g.mean(x))),
        case("mse", uniform(&s, -1.0, 1.0, 1), |g, x| g.mse(x, &konst(g, &[2, 3, 4], 2))),
        case("sum_trailing", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.sum_trailing(x, 1)?; project(g, &y, 3) }),
        case("global_avg_pool", uniform(&[2, 3, 4, 5], -1.0, 1.0, 1), |g, x| { let y = g.global_avg_pool(x)?; project(g, &y, 3) }),
        case("reshape", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.reshape(x, &[6, 4])?; project(g, &y, 3) }),
        case("permute", uniform(&s, -1.0, 1.0, 1), |g, x| { let y = g.permute(x, &[2, 0, 1])?; project(g, &y, 3) }),
        case("transpose", uniform(&[3, 5], -1.0, 1.0, 1), |g, x| { let y = g.transpose(x)?; project(g, &y, 3) }),
        case("concat", uniform(&s, -1.0, 1.0, 1), |g, x| {
            let other = konst(g, &[2, 2, 4], 2);
            let y = g.concat(&[&other, x, x], 1)?;
            project(g, &y, 3)
        }),
        case("add_channel_bias/input", uniform(&[2, 3, 2, 2], -1.0, 1.0, 1), |g, x| {
            let y = g.add_channel_bias(x, &konst(g, &[3], 2))?;
            project(g, &y, 3)
        }),
        case("add_channel_bias/bias", uniform(&[3], -1.0, 1.0, 1), |g, b| {
            let y = g.add_channel_bias(&konst(g, &[2, 3, 2, 2], 2), b)?;
            project(g, &y, 3)
        }),
        case("add_sample_bias/bias", uniform(&[2, 3], -1.0, 1.0, 1), |g, b| {
            let y = g.add_sample_bias(&konst(g, &[2, 3, 2, 2], 2), b)?;
            project(g, &y, 3)
        }),
        case("matmul/lhs", uniform(&[3, 4], -1.0, 1.0, 1), |g, x| { let y = g.matmul(x, &konst(g, &[4, 5], 2))?; project(g, &y, 3) }),
        case("matmul/rhs", uniform(&[4, 5], -1.0, 1.0, 1), |g, x| { let y = g.matmul(&konst(g, &[3, 4], 2), x)?; project(g, &y, 3) }),
        case("bmm/lhs", uniform(&[2, 3, 4], -1.0, 1.0, 1), |g, x| { let y = g.bmm(x, &konst(g, &[2, 4, 5], 2), false)?; project(g, &y, 3) }),
        case("bmm/rhs_transposed", uniform(&[2, 5, 4], -1.0, 1.0, 1), |g, x| {
            let y = g.bmm(&konst(g, &[2, 3, 4], 2), x, true)?;
            project(g, &y, 3)
        }),
        case("upsample2x", uniform(&[1, 2, 3, 3], -1.0, 1.0, 1), |g, x| { let y = g.upsample2x(x)?; project(g, &y, 3) }),
        case("resize_bilinear/up", uniform(&[1, 2, 4, 5], -1.0, 1.0, 1), |g, x| { let y = g.resize_bilinear(x, 7, 9)?; project(g, &y, 3) }),
        case("resize_bilinear/down", uniform(&[1, 1, 9, 8], -1.0, 1.0, 1), |g, x| { let y = g.resize_bilinear(x, 4, 3)?; project(g, &y, 3) }),
        case("softmax/last", uniform(&s, -2.0, 2.0, 1), |g, x| { let y = g.softmax(x, 2)?; project(g, &y, 3) }),
        case("softmax/middle", uniform(&s, -2.0, 2.0, 1), |g, x| { let y = g.softmax(x, 1)?; project(g, &y, 3) }),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let name: &'static str = Box::leak(format!("conv2d/input s{stride} p{pad}").into_boxed_str());
        v.push(case(name, uniform(&[2, 2, 5, 6], -1.0, 1.0, 1), move |g, x| {
            let y = g.conv2d(x, &konst(g, &[3, 2, 3, 3], 2), stride, pad)?;
            project(g, &y, 3)
        }));
        let name: &'static str = Box::leak(format!("conv2d/kernel s{stride} p{pad}").into_boxed_str());
        v.push(case(name, uniform(&[3, 2, 3, 3], -1.0, 1.0, 1), move |g, k| {
            let y = g.conv2d(&konst(g, &[2, 2, 5, 6], 2), k, stride, pad)?;
            project(g, &y, 3)
        }));
    }
    v.push(case("attention/input", uniform(&[2, 5, 4], -1.0, 1.0, 1), |g, x| {
        let ws: Vec<Var<f64>> = (0..4).map(|i| konst(g, if i < 3 { &[4, 6] } else { &[6, 4] }, 10 + i)).collect();
        let w = AttentionWeights { q: &ws[0], k: &ws[1], v: &ws[2], o: &ws[3], heads: 2 };
        let y = multi_head_attention(g, x, &w)?;
        project(g, &y, 3)
    }));
    for (which, shape) in [("attention/W_Q", [4, 6]), ("attention/W_K", [4, 6]), ("attention/W_V", [4, 6]), ("attention/W_O", [6, 4])] {
        v.push(case(which, uniform(&shape, -1.0, 1.0, 1), move |g, p| {
            let x = konst(g, &[2, 5, 4], 2);
            let mut ws: Vec<Var<f64>> = (0..4).map(|i| konst(g, if i < 3 { &[4, 6] } else { &[6, 4] }, 10 + i)).collect();
            let slot = ["attention/W_Q", "attention/W_K", "attention/W_V", "attention/W_O"].iter().position(|n| *n == which).unwrap();
            ws[slot] = p.clone();
            let w = AttentionWeights { q: &ws[0], k: &ws[1], v: &ws[2], o: &ws[3], heads: 2 };
            let y = multi_head_attention(g, &x, &w)?;
            project(g, &y, 3)
        }));
    }
    v
}

pub fn check(c: &Case) -> GradCheckReport {
    grad_check(|g, x| (c.f)(g, x), &c.point, 1e-3).unwrap()
}

pub const TONE_RATE: f64 = 128.0;
pub const TONE_LEN: usize = 512;

pub fn tone(freq: f64, len: usize, rate: f64) -> Tensor {
    Tensor::from_fn([len], |i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin() as f32)
}

/// Row index of peak mean energy over the central half of the signal.
pub fn peak_row(rows: &[Vec<f64>]) -> usize {
    let energy = |r: &Vec<f64>| {
        let n = r.len();
        r[n / 4..3 * n / 4].iter().map(|v| v * v).sum::<f64>()
    };
    (0..rows.len()).max_by(|&a, &b| energy(&rows[a]).total_cmp(&energy(&rows[b]))).unwrap()
}

/// Modulus of a directly evaluated complex Morlet correlation,
/// `|Σ x[k] ψ*((k − b)Δt / s)| / √s`, one row per scale.
pub fn complex_morlet_oracle(x: &[f32], scales: &[f64], rate: f64) -> Vec<Vec<f64>> {
    let dt = 1.0 / rate;
    let n = x.len();
    scales
        .iter()
        .map(|&s| {
            (0..n)
                .map(|b| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (k, &v) in x.iter().enumerate() {
                        let u = (k as f64 - b as f64) * dt / s;
                        if u.abs() > 8.0 {
                            continue;
                        }
                        let env = (-0.5 * u * u).exp();
                        re += v as f64 * env * (6.0 * u).cos();
                        im -= v as f64 * env * (6.0 * u).sin();
                    }
                    (re * re + im * im).sqrt() * (dt / s).sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (num / den).sqrt()
}

/// Counts every (anomalous, normal) pair directly; ties count one half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (_, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i] == 1) {
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| labels[*j] == 0) {
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// A random two-class score set of size 2..=200 with deliberate ties.
pub fn random_score_set(rng: &mut impl rand::Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=n.max(2));
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.37 - 3.0).collect();
    (scores, labels)
}

pub fn tiny_model_config() -> diffusion_ad::denoiser::ModelConfig {
    diffusion_ad::denoiser::ModelConfig {
        base_channels: 8,
        depth: 1,
        heads: 1,
        head_dim: 8,
        wavelet_levels: 1,
        wavelet_filter: "haar".into(),
        time_embed_dim: 16,
        input_channels: 1,
    }
}

/// Mean L_MSE over the last 50 of `steps` steps on one fixed 8×8 batch.
/// With `fixed_noise`, every step also reuses the same timesteps and noise.
pub fn overfit_tail_loss(steps: usize, fixed_noise: bool) -> f64 {
    use diffusion_ad::data::synth_normal_image;
    use diffusion_ad::denoiser::Denoiser;
    use diffusion_ad::diffusion::NoiseSchedule;
    use diffusion_ad::perception::FeatureExtractor;
    use diffusion_ad::training::{training_step, Adam, TrainConfig};

    let schedule = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
    let f = FeatureExtractor::new(3, 1).unwrap();
    let cfg = TrainConfig { learning_rate: 5e-3, gamma: 0.0, ..Default::default() };
    let mut model = Denoiser::new(tiny_model_config(), 1).unwrap();
    let mut opt = Adam::from_config(&cfg);
    let mut r = rng(0);
    let items: Vec<Tensor> = (0..4).map(|_| synth_normal_image(&mut r, 8)).collect();
    let batch = Tensor::stack(&items).unwrap();
    let mut tail = Vec::new();
    for step in 0..steps {
        let mut step_rng = if fixed_noise { rng(99) } else { rng(1000 + step as u64) };
        let l = training_step(&mut model, &mut opt, &batch, &schedule, &f, &cfg, &mut step_rng).unwrap();
        if step + 50 >= steps {
            tail.push(l.l_mse);
        }
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Worst relative error between backprop and central differences over every
/// weight of a denoiser, for the loss `sum(predict_noise(x, t))`.
pub fn model_gradcheck_worst(cfg: diffusion_ad::denoiser::ModelConfig, seed: u64) -> (f64, usize) {
    use diffusion_ad::denoiser::Denoiser;
    use diffusion_ad::tensor::gradcheck::relative_error;

    let mut m = Denoiser::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1);
    // the output head starts at zero; randomize it so every weight matters
    for name in ["out.out1.weight", "out.out1.bias"] {
        let shape = m.weights().get(name).unwrap().shape().to_vec();
        *m.weights_mut().get_mut(name).unwrap() = Tensor::rand_uniform(shape, -0.5, 0.5, &mut r);
    }
    let x = Tensor::<f64>::randn([1, 1, 8, 8], &mut r);
    let t = [7usize];
    let g = Graph::<f64>::new();
    let bw = m.weights().bind(&g, true);
    let y = m.forward(&g, &bw, &g.constant(x.clone()), &t).unwrap();
    let grads = g.backward(&g.sum(&y)).unwrap();

    let eps = 1e-3;
    let eval = |name: &str, i: usize, delta: f64| -> f64 {
        let g = Graph::<f64>::inference();
        let mut bound = m.weights().bind::<f64>(&g, false);
        let base = bound.get(name).unwrap().value().clone();
        let mut d = base.to_vec();
        d[i] += delta;
        bound.replace(name, g.constant(Tensor::new(base.shape().to_vec(), d).unwrap()));
        m.forward(&g, &bound, &g.constant(x.clone()), &t).unwrap().value().sum()
    };
    let (mut worst, mut count) = (0.0f64, 0);
    for (name, var) in bw.iter() {
        let analytic = grads.get(var).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; var.value().numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let num = (eval(name, i, eps) - eval(name, i, -eps)) / (2.0 * eps);
            worst = worst.max(relative_error(a, num));
            count += 1;
        }
    }
    (worst, count)
}
