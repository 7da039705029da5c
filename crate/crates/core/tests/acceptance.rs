//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Criteria 6, 8, 9 and 10 share one freshly trained desk bundle.
//!
//! Run alone with `cargo test -p meg-core --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, RngCore};

use meg::channel::{equalize, sample_fading_trace, transmit, ChannelKind, ChannelModel};
use meg::experiment::{
    medians, overhead_table, run_power, run_sweep, train_bundle, ExperimentConfig, PowerRun, Preset, SweepResult,
};
use meg::genmodel::{
    ddim_step, diffuse_forward, embed_prompt, generate_latent, Denoiser, Dims, GenConfig, GenError, NoisePredictor,
    NoiseSchedule, PixelImage, PromptEmbedding,
};
use meg::metrics::{fid, fid_from_features, psnr, FeatureExtractor, Mode};
use meg::nn::{Activation, Dense, Layer, LayerNorm, Mlp, Tensor};
use meg::protocol::{es_handle_request, transmit_frame, ue_receive, Deployment, GenerationRequest, SeedFrame};
use meg::rng::{normal_vec, stream_rng};
use meg::seedcodec::CodecPair;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, Box<dyn std::error::Error>>;

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// --- 1, 2: overhead arithmetic ------------------------------------------------

fn table_symbols() -> Check {
    let start = Instant::now();
    let t = overhead_table(&ExperimentConfig::preset(Preset::PaperArithmetic))?;
    let got: Vec<usize> = t.symbols.iter().map(|s| s.symbols).collect();
    let want = [1_048_576, 16_384, 1638, 4915, 8192, 11469, 14746];
    let elapsed = start.elapsed();
    Ok(outcome(
        got == want && elapsed < Duration::from_secs(1),
        format!("symbols {got:?} in {:.3}s", secs(elapsed)),
    ))
}

fn table_parameters() -> Check {
    let start = Instant::now();
    let t = overhead_table(&ExperimentConfig::preset(Preset::PaperArithmetic))?;
    let mut got: Vec<u64> = t.params.iter().map(|p| p.params).filter(|&p| p > 0).collect();
    got.sort_unstable();
    let mut want = vec![134_225_920, 134_234_112, 147_465_000, 147_472_384, 32_768];
    want.sort_unstable();
    let elapsed = start.elapsed();
    Ok(outcome(
        got == want && t.total == 563_430_184 && elapsed < Duration::from_secs(1),
        format!("layers {got:?}, total {} in {:.3}s", t.total, secs(elapsed)),
    ))
}

// --- 3: DDIM algebra ----------------------------------------------------------

/// Knows the clean latent, so it returns the exact noise present in `z_t`.
struct Oracle<'a> {
    z0: &'a [f32],
    schedule: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, z_t: &[f32], t: usize, _: &PromptEmbedding) -> Result<Vec<f32>, GenError> {
        let a = self.schedule.alpha_bar(t);
        Ok(z_t
            .iter()
            .zip(self.z0)
            .map(|(&z, &z0)| ((z as f64 - a.sqrt() * z0 as f64) / (1.0 - a).sqrt()) as f32)
            .collect())
    }
}

fn ddim_algebra() -> Check {
    let start = Instant::now();
    let mut rng = stream_rng(0xDD1, 0);
    let prompt = embed_prompt("bright small circle left", 8, 32)?;
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let steps = rng.random_range(1..=100);
        let top = rng.random_range(0.001..0.05);
        let mut betas: Vec<f64> = (0..steps).map(|_| rng.random_range(1e-4..top)).collect();
        betas.sort_by(f64::total_cmp);
        let schedule = NoiseSchedule::from_betas(betas)?;
        let n = rng.random_range(1..=64);
        let z0 = normal_vec(&mut rng, n);
        let eps = normal_vec(&mut rng, n);
        let mut z = diffuse_forward(&z0, steps, &eps, &schedule)?;
        let oracle = Oracle { z0: &z0, schedule: &schedule };
        for t in (1..=steps).rev() {
            z = ddim_step(&oracle, &z, t, &prompt, &schedule, None)?;
        }
        worst = z.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    let gen = GenConfig::desk();
    let model = Denoiser::new(&gen, &mut stream_rng(1, 0));
    let schedule = NoiseSchedule::linear(gen.steps)?;
    let emb = embed_prompt("dim large ring top", gen.max_tokens, gen.embed_dim)?;
    let init = normal_vec(&mut stream_rng(2, 0), gen.latent_dims().len());
    let a = generate_latent(&model, &emb, &init, &schedule, None)?;
    let b = generate_latent(&model, &emb, &init, &schedule, None)?;
    let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let elapsed = start.elapsed();
    Ok(outcome(
        worst < 1e-5 && identical && elapsed < Duration::from_secs(10),
        format!("max |z0 error| {worst:.2e} over 100 draws, sigma=0 bit-identical {identical}, {:.2}s", secs(elapsed)),
    ))
}

// --- 4: gradient integrity ----------------------------------------------------

fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8)
}

fn check_mlp(mut net: Mlp<f64>, rows: usize, seed: u64) -> Result<f64, Box<dyn std::error::Error>> {
    let n_in = net.input_size().expect("non-empty");
    let n_out = net.output_size().expect("non-empty");
    let mut rng = stream_rng(seed, 0);
    let x: Vec<f64> = (0..rows * n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..rows * n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::matrix(rows, n_in, x)?;
    let upstream = Tensor::matrix(rows, n_out, r.clone())?;
    net.forward(&x)?;
    let (gx, grads) = net.backward(&upstream)?;
    let h = 1e-6;
    let eval = |net: &Mlp<f64>, x: &Tensor<f64>| -> f64 {
        let y = net.infer(x).expect("forward");
        y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = net.params_mut()[ti].values[j];
            net.params_mut()[ti].values[j] = orig + h;
            let up = eval(&net, &x);
            net.params_mut()[ti].values[j] = orig - h;
            let down = eval(&net, &x);
            net.params_mut()[ti].values[j] = orig;
            worst = worst.max(relative_error((up - down) / (2.0 * h), g[j]));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&net, &xp) - eval(&net, &xm)) / (2.0 * h);
        worst = worst.max(relative_error(fd, gx.data()[i]));
    }
    Ok(worst)
}

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let mut rng = stream_rng(0x6AD, 0);
    let mut layer_worst = 0.0f64;
    let mut cases = Vec::new();
    for (i, act) in [Activation::None, Activation::Relu, Activation::Tanh].into_iter().enumerate() {
        let mut net = Mlp::<f64>::new("dense");
        net.push(Layer::Dense(Dense::new("d", 7, 5, act, &mut rng)));
        layer_worst = layer_worst.max(check_mlp(net, 4, 10 + i as u64)?);
        cases.push(format!("{act:?}"));
    }
    let mut affine = Mlp::<f64>::new("norm");
    affine.push(Layer::Norm(LayerNorm::new("n", 9, 1e-6)));
    let mut rng_g = stream_rng(20, 0);
    for p in affine.params_mut() {
        for v in p.values.iter_mut() {
            *v += rng_g.random_range(-0.5..0.5);
        }
    }
    layer_worst = layer_worst.max(check_mlp(affine, 3, 21)?);
    let mut free = Mlp::<f64>::new("normalize");
    free.push(Layer::Norm(LayerNorm::parameter_free("n", 9, 1e-6)));
    layer_worst = layer_worst.max(check_mlp(free, 3, 22)?);
    let stack = Mlp::<f64>::new("stack")
        .dense(6, 8, Activation::Tanh, &mut rng)
        .normalize(8, 1e-6)
        .dense(8, 8, Activation::Relu, &mut rng)
        .layer_norm(8, 1e-6)
        .dense(8, 3, Activation::None, &mut rng);
    layer_worst = layer_worst.max(check_mlp(stack, 5, 23)?);

    // encoder -> scaled channel -> decoder -> latent MSE, one noise draw
    let dims = Dims::new(2, 4, 4);
    let mut pair = CodecPair::<f32>::new(dims, 0.25, 12, &mut stream_rng(3, 0))?.cast::<f64>();
    let rows: Vec<Vec<f64>> =
        (0..3).map(|r| normal_vec(&mut stream_rng(40 + r, 0), dims.len()).iter().map(|&v| v as f64).collect()).collect();
    let z = Tensor::from_rows(&rows)?;
    let l = pair.seed_len();
    let noise = Tensor::matrix(3, l, normal_vec(&mut stream_rng(5, 0), 3 * l).iter().map(|&v| 0.3 * v as f64).collect())?;
    let (_, grads) = pair.loss_and_grads(&z, &noise)?;
    let h = 1e-6;
    let mut comp_worst = 0.0f64;
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = pair.params_mut()[ti].values[j];
            pair.params_mut()[ti].values[j] = orig + h;
            let up = pair.loss_and_grads(&z, &noise)?.0;
            pair.params_mut()[ti].values[j] = orig - h;
            let down = pair.loss_and_grads(&z, &noise)?.0;
            pair.params_mut()[ti].values[j] = orig;
            comp_worst = comp_worst.max(relative_error((up - down) / (2.0 * h), g[j]));
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        layer_worst < 1e-4 && comp_worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "layers ({}, LayerNorm, Normalize, stack) worst {layer_worst:.2e}; codec composition worst {comp_worst:.2e}; {:.2}s",
            cases.join(", "),
            secs(elapsed)
        ),
    ))
}

// --- 5: metric properties -----------------------------------------------------

fn metric_properties() -> Check {
    let dims = Dims::new(1, 32, 32);
    let mut rng = stream_rng(0x5E7, 0);
    let images: Vec<PixelImage> = (0..12)
        .map(|_| PixelImage::new(dims, (0..dims.len()).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<_, _>>()?;
    let self_fid = fid(&images, &images, &FeatureExtractor::standard(dims))?;

    let (m1, m2) = (vec![0.5, -1.0, 2.0], vec![1.5, 1.0, -0.5]);
    let point = fid_from_features(&vec![m1.clone(); 20], &vec![m2.clone(); 20])?;
    let dist: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();

    let n = 10_000;
    let (mu1, s1, mu2, s2) = (0.0, 1.0, 1.0, 2.0);
    let draw = |mu: f64, s: f64, seed: u64| -> Vec<Vec<f64>> {
        normal_vec(&mut stream_rng(seed, 0), n).iter().map(|&v| vec![mu + s * v as f64]).collect()
    };
    let gauss = fid_from_features(&draw(mu1, s1, 1), &draw(mu2, s2, 2))?;
    let closed = (mu1 - mu2) * (mu1 - mu2) + (s1 - s2) * (s1 - s2);

    let p = psnr(&[0u8; 64], &[255u8; 64], 255.0)?;
    let pass = self_fid < 1e-6 && (point - dist).abs() < 1e-6 && (gauss - closed).abs() / closed < 0.05 && p == 0.0;
    Ok(outcome(
        pass,
        format!(
            "FID(X,X) {self_fid:.1e}; point mass {point:.9} vs {dist}; 1-D Gaussian {gauss:.4} vs {closed} ({:.2}%); PSNR(0,255) {p}",
            100.0 * (gauss - closed).abs() / closed
        ),
    ))
}

// --- 6: low-SNR ordering ------------------------------------------------------

fn median_of(res: &SweepResult, mode: Mode, f_c: f64, snr: f64, psnr: bool) -> f64 {
    medians(res.select(mode, f_c, snr).iter().map(|r| if psnr { r.psnr_db } else { r.fid_proxy }))
}

fn low_snr_ordering(res: &SweepResult, cfg: &ExperimentConfig, elapsed: Duration) -> Check {
    let trials = cfg.sweep.trials;
    let mut lines = Vec::new();
    let mut pass = trials >= 5 && elapsed <= Duration::from_secs(15 * 60);
    for &f_c in &cfg.sweep.rates {
        let meg = median_of(res, Mode::Meg, f_c, -10.0, false);
        let raw = median_of(res, Mode::RawFeature, f_c, -10.0, false);
        let cen = median_of(res, Mode::Centralized, f_c, -10.0, false);
        let raw_p = median_of(res, Mode::RawFeature, f_c, 30.0, true);
        let meg_p = median_of(res, Mode::Meg, f_c, 30.0, true);
        let ok = meg < raw && raw < cen && raw_p >= meg_p;
        pass &= ok;
        lines.push(format!("f_c {f_c}: fid {meg:.3}<{raw:.3}<{cen:.3}, psnr30 {raw_p:.1}>={meg_p:.1}"));
    }
    Ok(outcome(pass, format!("{trials} trials; {}; {:.1}s incl. training", lines.join("; "), secs(elapsed))))
}

// --- 7: channel statistics ----------------------------------------------------

fn channel_statistics() -> Check {
    let blocks = 100_000;
    let model = ChannelModel::new(ChannelKind::RayleighBlock, 1, 0.0)?;
    let trace = sample_fading_trace(&model, blocks, 0xC4A);
    let second = trace.gains.iter().map(|g| g * g).sum::<f64>() / blocks as f64;

    let sigma = 0.7;
    let mut rng = stream_rng(0x401, 0);
    let y = transmit(&vec![0.0f32; 100_000], 1.0, 1.0, sigma, &mut rng)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (y.len() - 1) as f64;
    let var_err = (var / (sigma * sigma) - 1.0).abs();

    let mut worst = 0.0f32;
    for k in 0..200 {
        let x = normal_vec(&mut rng, 16);
        let (h, p) = (rng.random_range(0.01..3.0), rng.random_range(0.01..4.0));
        let back = equalize(&transmit(&x, h, p, 0.0, &mut stream_rng(k, 0))?, h, p)?;
        worst = back.iter().zip(&x).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(worst, f32::max);
    }
    let pass = (second - 1.0).abs() <= 0.02 && var_err <= 0.02 && worst < 1e-6;
    Ok(outcome(
        pass,
        format!("E[h^2] {second:.4} at 1e5 blocks; noise var error {:.2}%; zero-noise identity worst {worst:.1e}", 100.0 * var_err),
    ))
}

// --- 8, 9: power control ------------------------------------------------------

fn budget_feasibility(run: &PowerRun) -> Check {
    let a = &run.audit;
    Ok(outcome(
        a.violations == 0 && a.steps >= 10_000,
        format!("{} episodes, {} steps, {} violations", a.episodes, a.steps, a.violations),
    ))
}

fn ppo_efficacy(run: &PowerRun, elapsed: Duration) -> Check {
    let row = run.rows.iter().min_by(|a, b| a.p_max.total_cmp(&b.p_max)).ok_or("no budgets")?;
    let gaps: Vec<String> = run.rows.iter().map(|r| format!("{}:{:+.4}", r.p_max, r.uniform_fid - r.drl_fid)).collect();
    let pass = row.n >= 100 && row.mean_gain > 0.0 && row.sign_p < 0.05 && elapsed <= Duration::from_secs(30 * 60);
    Ok(outcome(
        pass,
        format!(
            "p_max {}: n {}, mean reward gain {:+.4}, wins {}, sign p {:.2e}; FID gap by budget [{}]; {:.1}s",
            row.p_max,
            row.n,
            row.mean_gain,
            row.sign_wins,
            row.sign_p,
            gaps.join(", "),
            secs(elapsed)
        ),
    ))
}

// --- 10: protocol exactness ---------------------------------------------------

fn random_frame(rng: &mut impl RngCore) -> SeedFrame {
    let len = rng.random_range(0..96);
    let payload = (0..len)
        .map(|_| loop {
            let v = f32::from_bits(rng.next_u32());
            if !v.is_nan() {
                break v;
            }
        })
        .collect();
    SeedFrame {
        flags: rng.random(),
        f_c_fixed: rng.random(),
        latent: [rng.random(), rng.random(), rng.random()],
        scale: rng.random_range(-1e6..1e6),
        block_length: rng.random(),
        payload,
    }
}

fn protocol_exactness(deploy: &Deployment) -> Check {
    let mut rng = stream_rng(0xF7A, 0);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let frame = random_frame(&mut rng);
        let bytes = frame.encode();
        let back = SeedFrame::decode(&bytes)?;
        if back != frame || back.encode() != bytes {
            mismatches += 1;
        }
    }
    let mut worst = 0.0f32;
    for (i, &f_c) in [0.1, 0.5, 0.9].iter().enumerate() {
        let req = GenerationRequest {
            prompt: meg::genmodel::PromptGrammar.evaluation(3)[i].clone(),
            f_c,
            image: deploy.gen.image,
            noise_seed: 100 + i as u64,
            link_snr_db: None,
        };
        let es = es_handle_request(deploy, &req, 16)?;
        let codec = deploy.codec_for(f_c, None)?;
        let local = deploy.autoencoder.decode_latent(&codec.decompress(&es.seed.symbols, es.seed.scale)?.values)?;
        let blocks = es.frame.payload.len().div_ceil(16);
        let gains: Vec<f64> = (0..blocks).map(|b| 0.2 + 0.3 * b as f64).collect();
        let rx = transmit_frame(&es.frame, &gains, &vec![0.8; blocks], 0.0, &mut stream_rng(0, 0), false)?;
        let ue = ue_receive(deploy, &es.frame.header_bytes(), &rx)?;
        worst = ue.image.values.iter().zip(&local.values).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    Ok(outcome(
        mismatches == 0 && worst < 1e-6,
        format!("10000 random frames, {mismatches} mismatches; noiseless end-to-end worst pixel error {worst:.1e}"),
    ))
}

fn report(id: u32, name: &str, result: Check, failures: &mut Vec<u32>) {
    match result {
        Ok(o) => {
            println!("criterion {id:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            if !o.pass {
                failures.push(id);
            }
        }
        Err(e) => {
            println!("criterion {id:>2} FAIL {name}: error: {e}");
            failures.push(id);
        }
    }
}

fn main() {
    let mut failures = Vec::new();
    report(1, "overhead symbols", table_symbols(), &mut failures);
    report(2, "codec parameter counts", table_parameters(), &mut failures);
    report(3, "DDIM algebra", ddim_algebra(), &mut failures);
    report(4, "gradient integrity", gradient_integrity(), &mut failures);
    report(5, "metric properties", metric_properties(), &mut failures);

    let cfg = ExperimentConfig::preset(Preset::Desk);
    let dir = tempfile::tempdir().expect("temporary directory");
    let start = Instant::now();
    let trained = train_bundle(&cfg, dir.path());
    let train_time = start.elapsed();
    let deploy = match trained {
        Ok((deploy, _)) => Some(deploy),
        Err(e) => {
            println!("desk bundle training failed: {e}");
            None
        }
    };

    match &deploy {
        Some(d) => {
            let start = Instant::now();
            let sweep = run_sweep(d, &cfg);
            let elapsed = train_time + start.elapsed();
            report(6, "low-SNR ordering", sweep.map_err(Into::into).and_then(|s| low_snr_ordering(&s, &cfg, elapsed)), &mut failures);
        }
        None => report(6, "low-SNR ordering", Err("no bundle".into()), &mut failures),
    }
    report(7, "channel statistics", channel_statistics(), &mut failures);
    match &deploy {
        Some(d) => {
            let start = Instant::now();
            match run_power(d, &cfg, None) {
                Ok(run) => {
                    let elapsed = start.elapsed();
                    report(8, "power budget", budget_feasibility(&run), &mut failures);
                    report(9, "PPO efficacy", ppo_efficacy(&run, elapsed), &mut failures);
                }
                Err(e) => {
                    let msg = e.to_string();
                    report(8, "power budget", Err(msg.clone().into()), &mut failures);
                    report(9, "PPO efficacy", Err(msg.into()), &mut failures);
                }
            }
            report(10, "protocol exactness", protocol_exactness(d), &mut failures);
        }
        None => {
            for (id, name) in [(8, "power budget"), (9, "PPO efficacy"), (10, "protocol exactness")] {
                report(id, name, Err("no bundle".into()), &mut failures);
            }
        }
    }
    println!("acceptance: {} of 10 passed", 10 - failures.len());
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
