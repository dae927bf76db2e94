use streamdiff_core::dmd::{
    dmd_generator_grad, kl_to_mixture, sample_mixture, train_dmd, train_teacher, DmdConfig, TeacherConfig, ToyGenerator,
    ToyScoreNet,
};
use streamdiff_core::{Error, Rng};

/// f64 forward of `G(ε) = ε + MLP(ε)` with the crate's parameter layout.
fn generator_f64(dims: &[usize], params: &[f64], eps: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for x in eps.chunks(2) {
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, pair) in dims.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let mut z: Vec<f64> = params[off + i * o..off + i * o + o].to_vec();
            for p in 0..i {
                for j in 0..o {
                    z[j] += cur[p] * params[off + p * o + j];
                }
            }
            off += i * o + o;
            cur = if l + 2 < dims.len() {
                z.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
            } else {
                z
            };
        }
        out.push(x[0] + cur[0]);
        out.push(x[1] + cur[1]);
    }
    out
}

fn gradient_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut gen = ToyGenerator::new(&mut rng);
    let mut jitter = vec![0.0f32; gen.mlp.num_params()];
    rng.fill_normal(&mut jitter);
    gen.mlp.params_mut().iter_mut().zip(&jitter).for_each(|(p, j)| *p += 0.2 * j);
    let mut eps = vec![0.0f32; 16];
    rng.fill_normal(&mut eps);
    let mut d = vec![0.0f32; 16];
    rng.fill_normal(&mut d);

    let analytic = gen.surrogate_grad(&eps, &d);
    let dims = gen.mlp.dims().to_vec();
    let base: Vec<f64> = gen.mlp.params().iter().map(|&v| v as f64).collect();
    let eps64: Vec<f64> = eps.iter().map(|&v| v as f64).collect();
    let loss = |p: &[f64]| -> f64 {
        let y = generator_f64(&dims, p, &eps64);
        y.iter().zip(&d).map(|(a, b)| a * *b as f64).sum::<f64>() / 8.0
    };
    let h = 1e-6;
    let mut fd = vec![0.0f64; base.len()];
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        let up = loss(&p);
        p[i] = base[i] - h;
        let down = loss(&p);
        p[i] = base[i];
        fd[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}

#[test]
fn generator_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let err = gradient_error(seed);
        assert!(err <= 1e-3, "probe {seed}: relative error {err}");
    }
}

#[test]
fn identical_fake_and_teacher_give_no_signal() {
    let mut rng = Rng::new(22);
    let teacher = train_teacher(&TeacherConfig { steps: 50, ..Default::default() }, &mut rng).unwrap();
    let gen = ToyGenerator::new(&mut rng);
    let mut eps = vec![0.0f32; 128];
    rng.fill_normal(&mut eps);
    let g = dmd_generator_grad(&gen, &teacher, &teacher.clone(), &eps, &mut rng);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn teacher_recovers_the_mixture() {
    let teacher = train_teacher(&TeacherConfig::default(), &mut Rng::new(23)).unwrap();
    let n = 2000;
    let data = sample_mixture(&mut Rng::new(1), n);
    // Exact at t = 0 by construction.
    assert_eq!(teacher.predict_x0(&data, &vec![0; n]), data);

    // Held-out denoising error is below the prior variance (5 + 1).
    let mut rng = Rng::new(2);
    let t: Vec<u16> = (0..n).map(|_| rng.below(1001) as u16).collect();
    let x_t: Vec<f32> = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = t[i / 2] as f32 / 1000.0;
            (1.0 - s) * v + s * rng.normal()
        })
        .collect();
    let pred = teacher.predict_x0(&x_t, &t);
    let mse = pred.iter().zip(&data).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / n as f32;
    assert!(mse < 6.0, "mse {mse}");

    // Mirror symmetry: on the axis x = 0 the first coordinate averages to 0.
    for level in [750u16, 1000] {
        let pts: Vec<f32> = (0..n).flat_map(|_| [0.0, rng.normal()]).collect();
        let x = teacher.predict_x0(&pts, &vec![level; n]);
        let mean = x.chunks(2).map(|p| p[0]).sum::<f32>() / n as f32;
        assert!(mean.abs() < 0.1, "t = {level}: mean {mean}");
    }
}

#[test]
fn distillation_halves_the_kl() {
    let rng = Rng::new(24);
    let teacher = train_teacher(&TeacherConfig::default(), &mut rng.derive(1)).unwrap();
    let out = train_dmd(&teacher, &DmdConfig::default(), &mut rng.derive(2)).unwrap();
    assert_eq!(out.generator_updates, 1000);
    assert_eq!(out.fake_updates, 200);
    let first = out.kl_trajectory.first().unwrap().1;
    let last = out.kl_trajectory.last().unwrap().1;
    assert!(last <= 0.5 * first, "KL {first} -> {last}");
    let mut eps = vec![0.0f32; 20_000];
    rng.derive(3).fill_normal(&mut eps);
    let samples = out.generator.sample(&eps);
    let mean_x: f32 = samples.chunks(2).map(|p| p[0]).sum::<f32>() / 10_000.0;
    assert!(mean_x.abs() < 0.3, "mean {mean_x}");
    assert!(kl_to_mixture(&samples) < first);
}

#[test]
fn divergence_is_reported_with_its_iteration() {
    let err = train_teacher(&TeacherConfig { steps: 200, batch: 16, lr: 1e6 }, &mut Rng::new(25)).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err:?}");
    let teacher = ToyScoreNet::new(&mut Rng::new(26));
    let cfg = DmdConfig { iterations: 50, generator_lr: 1e9, fake_lr: 1e9, ..Default::default() };
    let err = train_dmd(&teacher, &cfg, &mut Rng::new(27)).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err:?}");
}
