use prefalign_core::adapter::{evaluate, forward_loss, grad, mean_loss, train, AdapterParams, EmbeddingSources, TrainerConfig};
use prefalign_core::dataset::{random_guess_accuracy, stats, Dataset, PreferenceInstance};
use prefalign_core::embedding::EmbeddingMatrix;
use prefalign_core::linalg::Matrix;
use prefalign_core::shuffle::seeded_rng;
use prefalign_core::synthetic::{isotropic, separable, SeparableSpec};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Fixture {
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    instances: Vec<PreferenceInstance>,
}

impl Fixture {
    fn sources(&self) -> EmbeddingSources<'_> {
        EmbeddingSources { images: &self.images, texts: &self.texts }
    }
}

fn random_fixture(rng: &mut ChaCha8Rng, dim: usize, prompts: usize) -> Fixture {
    let mut images = EmbeddingMatrix::new(dim).unwrap();
    let mut texts = EmbeddingMatrix::new(dim).unwrap();
    let mut instances = Vec::new();
    for p in 0..prompts {
        let n = rng.random_range(2..=4);
        let pid = format!("p{p}");
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        texts.insert_f64(&pid, &v).unwrap();
        let ids: Vec<String> = (0..n)
            .map(|k| {
                let id = format!("p{p}_{k}");
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                images.insert_f64(&id, &v).unwrap();
                id
            })
            .collect();
        instances.push(PreferenceInstance {
            prompt_id: pid,
            prompt: String::new(),
            user_id: "u".into(),
            preferred_index: rng.random_range(0..n),
            image_ids: ids,
        });
    }
    Fixture { images, texts, instances }
}

fn random_params(rng: &mut ChaCha8Rng, dim: usize, rank: usize, scale: f64) -> AdapterParams<f64> {
    let mut g = || rng.sample::<f64, _>(StandardNormal) * 0.3;
    AdapterParams {
        a: Matrix::from_fn(dim, rank, |_, _| g()),
        b: Matrix::from_fn(rank, dim, |_, _| g()),
        logit_scale: scale,
    }
}

fn params_mut(p: &mut AdapterParams<f64>, k: usize) -> &mut f64 {
    let na = p.a.as_slice().len();
    if k < na {
        &mut p.a.as_mut_slice()[k]
    } else {
        &mut p.b.as_mut_slice()[k - na]
    }
}

/// Largest elementwise relative error between the analytic gradient and
/// central differences.
fn gradient_check(rng: &mut ChaCha8Rng) -> f64 {
    let dim = rng.random_range(2..=16);
    let rank = rng.random_range(1..=4usize).min(dim);
    let fx = random_fixture(rng, dim, 1);
    let scale = rng.random_range(1.0..20.0);
    let params = random_params(rng, dim, rank, scale);
    let batch = &fx.instances[..1];
    let (_, g) = grad(batch, &fx.sources(), &params).unwrap();
    let analytic: Vec<f64> = g.a.as_slice().iter().chain(g.b.as_slice()).copied().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, &an) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        *params_mut(&mut plus, k) += h;
        let mut minus = params.clone();
        *params_mut(&mut minus, k) -= h;
        let fp = forward_loss(&batch[0], &fx.sources(), &plus).unwrap().loss;
        let fm = forward_loss(&batch[0], &fx.sources(), &minus).unwrap().loss;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(2024);
    for config in 0..100 {
        let worst = gradient_check(&mut rng);
        assert!(worst <= 1e-4, "configuration {config}: relative error {worst}");
    }
}

#[test]
fn batch_gradient_is_the_mean_of_instance_gradients() {
    let mut rng = seeded_rng(7);
    let fx = random_fixture(&mut rng, 6, 2);
    let params = random_params(&mut rng, 6, 3, 10.0);
    let (loss, g) = grad(&fx.instances, &fx.sources(), &params).unwrap();
    let (l0, g0) = grad(&fx.instances[..1], &fx.sources(), &params).unwrap();
    let (l1, g1) = grad(&fx.instances[1..], &fx.sources(), &params).unwrap();
    assert!((loss - (l0 + l1) / 2.0).abs() <= 1e-12);
    let mean = g0.a.add(&g1.a).scale(0.5);
    assert!(g.a.sub(&mean).as_slice().iter().all(|d| d.abs() <= 1e-12));
    let mean = g0.b.add(&g1.b).scale(0.5);
    assert!(g.b.sub(&mean).as_slice().iter().all(|d| d.abs() <= 1e-12));
}

#[test]
fn two_image_loss_by_hand() {
    let mut images = EmbeddingMatrix::new(2).unwrap();
    images.insert("x0", vec![1.0, 0.5]).unwrap();
    images.insert("x1", vec![-0.25, 1.0]).unwrap();
    let mut texts = EmbeddingMatrix::new(2).unwrap();
    texts.insert("p", vec![0.75, -0.5]).unwrap();
    let inst = PreferenceInstance {
        prompt_id: "p".into(),
        prompt: String::new(),
        user_id: "u".into(),
        image_ids: vec!["x0".into(), "x1".into()],
        preferred_index: 1,
    };
    let (a0, a1, b0, b1, s) = (0.5, -0.25, 1.0, 2.0, 3.0);
    let params = AdapterParams {
        a: Matrix::from_vec(2, 1, vec![a0, a1]),
        b: Matrix::from_vec(1, 2, vec![b0, b1]),
        logit_scale: s,
    };
    let p = |x: [f64; 2]| {
        let h = b0 * x[0] + b1 * x[1];
        [x[0] + a0 * h, x[1] + a1 * h]
    };
    let cos = |u: [f64; 2], v: [f64; 2]| (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
    let t = p([0.75, -0.5]);
    let l0 = s * cos(p([1.0, 0.5]), t);
    let l1 = s * cos(p([-0.25, 1.0]), t);
    let want = (l0.exp() + l1.exp()).ln() - l1;
    let sources = EmbeddingSources { images: &images, texts: &texts };
    let got = forward_loss(&inst, &sources, &params).unwrap();
    assert!((got.loss - want).abs() <= 1e-10, "{} vs {want}", got.loss);
    assert!((got.logits[0] - l0).abs() <= 1e-12 && (got.logits[1] - l1).abs() <= 1e-12);
}

#[test]
fn equal_logits_give_log_n() {
    let mut images = EmbeddingMatrix::new(3).unwrap();
    for k in 0..4 {
        images.insert(format!("i{k}"), vec![1.0, 2.0, 3.0]).unwrap();
    }
    let mut texts = EmbeddingMatrix::new(3).unwrap();
    texts.insert("p", vec![0.5, -1.0, 2.0]).unwrap();
    let inst = PreferenceInstance {
        prompt_id: "p".into(),
        prompt: String::new(),
        user_id: "u".into(),
        image_ids: (0..4).map(|k| format!("i{k}")).collect(),
        preferred_index: 2,
    };
    let mut rng = seeded_rng(3);
    let params = random_params(&mut rng, 3, 2, 100.0);
    let out = forward_loss(&inst, &EmbeddingSources { images: &images, texts: &texts }, &params).unwrap();
    assert!((out.loss - 4f64.ln()).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_never_negative(seed in any::<u64>(), dim in 2usize..10, scale in 0.1f64..200.0) {
        let mut rng = seeded_rng(seed);
        let fx = random_fixture(&mut rng, dim, 4);
        let rank = rng.random_range(1..=dim);
        let params = random_params(&mut rng, dim, rank, scale);
        for inst in &fx.instances {
            let loss = forward_loss(inst, &fx.sources(), &params).unwrap().loss;
            prop_assert!(loss >= 0.0 && loss.is_finite());
        }
    }

    #[test]
    fn evaluation_ignores_a_common_scale(seed in any::<u64>(), c in prop::sample::select(vec![0.125, 0.5, 2.5, 7.0, 64.0])) {
        let mut rng = seeded_rng(seed);
        let fx = random_fixture(&mut rng, 8, 30);
        let params = random_params(&mut rng, 8, 4, 10.0);
        let scaled = |m: &EmbeddingMatrix| {
            let mut out = EmbeddingMatrix::new(m.dim()).unwrap();
            for (id, v) in m.iter() {
                out.insert(id, v.iter().map(|x| x * c as f32).collect()).unwrap();
            }
            out
        };
        let (si, st) = (scaled(&fx.images), scaled(&fx.texts));
        let ds = Dataset::new(fx.instances.clone());
        let before = evaluate(&params, &ds, &fx.sources()).unwrap();
        let after = evaluate(&params, &ds, &EmbeddingSources { images: &si, texts: &st }).unwrap();
        prop_assert_eq!(before, after);
    }
}

#[test]
fn zero_adapter_on_isotropic_data_guesses_at_random() {
    let fx = isotropic(4000, 16, &[4, 3, 4, 2], 12);
    let sources = EmbeddingSources { images: &fx.images, texts: &fx.texts };
    let params = AdapterParams::<f64>::zero(16, 4, 100.0);
    let acc = evaluate(&params, &fx.dataset, &sources).unwrap();
    let expected = random_guess_accuracy(&stats(&fx.dataset)).unwrap();
    let var: f64 = fx.dataset.instances.iter().map(|i| {
        let p = 1.0 / i.n() as f64;
        p * (1.0 - p)
    }).sum();
    let sigma = var.sqrt() / fx.dataset.len() as f64;
    assert!((acc - expected).abs() <= 3.0 * sigma, "{acc} vs {expected} ± {}", 3.0 * sigma);
}

fn small_separable() -> prefalign_core::synthetic::EmbeddingFixture {
    separable(&SeparableSpec { prompts: 200, seed: 4, ..Default::default() })
}

#[test]
fn training_is_deterministic() {
    let fx = small_separable();
    let sources = EmbeddingSources { images: &fx.images, texts: &fx.texts };
    let config = TrainerConfig { epochs: 2, seed: 9, ..Default::default() };
    let (p1, h1) = train::<f64>(&fx.dataset, Some(&fx.dataset), &sources, &config).unwrap();
    let (p2, h2) = train::<f64>(&fx.dataset, Some(&fx.dataset), &sources, &config).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(h1, h2);
    assert!(h1.steps.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(h1.steps_csv().lines().count(), h1.steps.len() + 1);
}

#[test]
fn ten_epochs_lower_the_training_loss() {
    let fx = small_separable();
    let sources = EmbeddingSources { images: &fx.images, texts: &fx.texts };
    let config = TrainerConfig { epochs: 10, ..Default::default() };
    let (params, history) = train::<f64>(&fx.dataset, None, &sources, &config).unwrap();
    let initial = history.initial_train_loss.unwrap();
    let last = history.epochs.last().unwrap().mean_train_loss;
    assert!(last < initial, "{last} !< {initial}");
    assert!(mean_loss(&fx.dataset, &sources, &params).unwrap() < initial);
}

#[test]
fn zero_epochs_leave_params_alone() {
    let fx = small_separable();
    let sources = EmbeddingSources { images: &fx.images, texts: &fx.texts };
    let mut rng = seeded_rng(0);
    let start = AdapterParams::<f64>::init(32, 8, 100.0, &mut rng);
    let config = TrainerConfig { epochs: 0, rank: 8, ..Default::default() };
    let (p, h) = prefalign_core::adapter::train_from(start.clone(), &fx.dataset, None, &sources, &config, &mut rng).unwrap();
    assert_eq!(p, start);
    assert!(h.steps.is_empty() && h.epochs.is_empty());
}

#[test]
fn adapter_files_round_trip() {
    let mut rng = seeded_rng(8);
    let p = random_params(&mut rng, 5, 2, 100.0);
    let narrowed = |m: &Matrix<f64>| m.as_slice().iter().map(|&v| v as f32 as f64).collect::<Vec<_>>();
    let back = AdapterParams::<f64>::from_bytes(&p.to_bytes()).unwrap();
    assert_eq!(back.a.as_slice(), narrowed(&p.a).as_slice());
    assert_eq!(back.b.as_slice(), narrowed(&p.b).as_slice());
    assert_eq!(back.logit_scale, 100.0);
    assert_eq!(p.to_bytes().len(), 16 + 8 * 5 * 2);
}
