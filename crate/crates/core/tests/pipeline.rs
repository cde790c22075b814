use latentedit::pipeline::edit_with_inversion_on;
use latentedit::similarity::similarity_stack;
use latentedit::*;
use proptest::prelude::*;

fn scenario(seed: u64) -> Scenario {
    generate_scenario(&ScenarioSpec {
        seed: Seed(seed),
        ..Default::default()
    })
    .unwrap()
}

fn config(sampler: Sampler, mode: EditMode, steps: usize) -> FusionConfig {
    let mut c = FusionConfig::new(sampler, mode);
    c.steps = steps;
    c
}

#[test]
fn nfe_counts_per_mode() {
    let sc = scenario(0);
    for sampler in [Sampler::Ddim, Sampler::Rf] {
        for steps in [8, 15] {
            let inv = edit(
                &sc.z0_source,
                &sc.model,
                &sc.source_cond,
                &sc.target_cond,
                &config(sampler, EditMode::Inversion, steps),
            )
            .unwrap();
            assert_eq!((inv.nfe_inversion, inv.nfe_denoise), (steps, steps));
            let free = edit(
                &sc.z0_source,
                &sc.model,
                &sc.source_cond,
                &sc.target_cond,
                &config(sampler, EditMode::InversionFree, steps),
            )
            .unwrap();
            assert_eq!((free.nfe_inversion, free.nfe_denoise), (0, steps));
            assert_eq!(2 * free.nfe_total(), inv.nfe_total());
            assert_eq!(inv.steps.len(), steps);
        }
    }
}

#[test]
fn edits_are_deterministic() {
    let sc = scenario(2);
    for mode in [EditMode::Inversion, EditMode::InversionFree] {
        let cfg = config(Sampler::Rf, mode, 8);
        let a = edit(
            &sc.z0_source,
            &sc.model,
            &sc.source_cond,
            &sc.target_cond,
            &cfg,
        )
        .unwrap();
        let b = edit(
            &sc.z0_source,
            &sc.model,
            &sc.source_cond,
            &sc.target_cond,
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn vanishing_gamma_gives_exact_midpoints() {
    // logistic(gamma * x) rounds to exactly 0.5 for gamma this small.
    let sc = scenario(1);
    let mut cfg = config(Sampler::Ddim, EditMode::Inversion, 6);
    cfg.sharpen = SharpenParams::new(1e-300, 0.08).unwrap();
    let schedule = cfg.schedule().unwrap();
    let report = edit(
        &sc.z0_source,
        &sc.model,
        &sc.source_cond,
        &sc.target_cond,
        &cfg,
    )
    .unwrap();
    assert!(report
        .maps
        .iter()
        .all(|m| m.values().iter().all(|&v| v == 0.5)));

    let chain = invert_trajectory(&sc.z0_source, &sc.model, &sc.source_cond, &schedule).unwrap();
    let mut z = chain.last().clone();
    for i in (1..=6).rev() {
        let d = schedule
            .denoise_step(&z, i, &sc.model, &sc.target_cond)
            .unwrap();
        z = d
            .zip_with(&chain.entries()[i - 1], |x, r| 0.5 * x + 0.5 * r)
            .unwrap();
    }
    assert_eq!(z, report.edited);
}

#[test]
fn same_condition_edit_stays_between_reconstruction_and_source() {
    let sc = scenario(0);
    for sampler in [Sampler::Ddim, Sampler::Rf] {
        let cfg = config(sampler, EditMode::Inversion, sampler.default_steps());
        let schedule = cfg.schedule().unwrap();
        let chain =
            invert_trajectory(&sc.z0_source, &sc.model, &sc.source_cond, &schedule).unwrap();
        let recon = denoise_loop(chain.last(), &sc.model, &sc.source_cond, &schedule).unwrap();
        let out = edit(
            &sc.z0_source,
            &sc.model,
            &sc.source_cond,
            &sc.source_cond,
            &cfg,
        )
        .unwrap();
        let gap = l2_relative_error(&recon, &sc.z0_source).unwrap();
        assert!(l2_relative_error(&out.edited, &recon).unwrap() <= gap);
        assert!(l2_relative_error(&out.edited, &sc.z0_source).unwrap() <= gap);
    }
}

#[test]
#[ignore = "first-order inversion drift (~5e-2) exceeds this bound; kept as a record"]
fn same_condition_edit_reproduces_plain_reconstruction() {
    let sc = scenario(0);
    let cfg = config(Sampler::Ddim, EditMode::Inversion, 15);
    let schedule = cfg.schedule().unwrap();
    let chain = invert_trajectory(&sc.z0_source, &sc.model, &sc.source_cond, &schedule).unwrap();
    let recon = denoise_loop(chain.last(), &sc.model, &sc.source_cond, &schedule).unwrap();
    let out = edit(
        &sc.z0_source,
        &sc.model,
        &sc.source_cond,
        &sc.source_cond,
        &cfg,
    )
    .unwrap();
    assert!(l2_relative_error(&out.edited, &recon).unwrap() <= 1e-6);
}

#[test]
fn exact_inversion_makes_same_condition_edit_a_reconstruction() {
    // A constant predictor inverts exactly, so the chain is the denoise path.
    let shape = Shape::new(2, 6, 6).unwrap();
    let model = ConstantDenoiser::new(sample_gaussian(shape, Seed(4)));
    let z0 = sample_gaussian(shape, Seed(5));
    let c = ConditionId::source();
    for sampler in [Sampler::Ddim, Sampler::Rf] {
        let cfg = config(sampler, EditMode::Inversion, 10);
        let schedule = cfg.schedule().unwrap();
        let chain = invert_trajectory(&z0, &model, &c, &schedule).unwrap();
        let recon = denoise_loop(chain.last(), &model, &c, &schedule).unwrap();
        let out = edit_with_inversion_on(&z0, &model, &c, &c, &cfg, &schedule).unwrap();
        assert!(l2_relative_error(&out.edited, &recon).unwrap() <= 1e-6);
    }
}

#[test]
fn inversion_free_fixed_point() {
    // Starting from z0 itself, the sampler drifts by roughly the attractor
    // variance, so the target is a tight one.
    let shape = Shape::new(4, 16, 16).unwrap();
    let z0 = sample_gaussian(shape, Seed(8)).scale(0.5).unwrap();
    let model = MixtureDenoiser::new(shape)
        .with_condition(
            ConditionId::target(),
            vec![Component {
                weight: 1.0,
                mean: z0.clone(),
                variance: 1e-3,
            }],
        )
        .unwrap();
    for sampler in [Sampler::Ddim, Sampler::Rf] {
        let mut cfg = config(sampler, EditMode::InversionFree, sampler.default_steps());
        cfg.alpha_init = 1.0;
        let out = edit_inversion_free(&z0, &model, &ConditionId::target(), &cfg).unwrap();
        let err = l2_relative_error(&out.edited, &z0).unwrap();
        assert!(err <= 1e-2, "{sampler:?}: {err}");
    }
}

#[test]
fn huge_gamma_copies_the_reference_where_it_agrees() {
    let sc = scenario(3);
    let schedule = Schedule::for_sampler(Sampler::Ddim, 15).unwrap();
    let traj = invert_trajectory(&sc.z0_source, &sc.model, &sc.source_cond, &schedule).unwrap();
    let z = schedule
        .denoise_step(traj.last(), 15, &sc.model, &sc.source_cond)
        .unwrap();
    // Reference equals the denoised latent except inside the edit rectangle.
    let mask = sc.edit_mask.clone().unwrap();
    let plane = z.shape().plane();
    let noise = sample_gaussian(z.shape(), Seed(77));
    let z_ref = LatentGrid::from_fn(z.shape(), |c, h, w| {
        let i = z.shape().index(c, h, w);
        if mask.bits()[i % plane] {
            noise.as_slice()[i]
        } else {
            z.as_slice()[i]
        }
    })
    .unwrap();
    let st = similarity_stack(&z, &z_ref, 0.5, 4, SharpenParams::new(1e4, 0.08).unwrap()).unwrap();
    for (i, &s) in st.sharpened.values().iter().enumerate() {
        if mask.bits()[i] {
            assert!(s < 1e-6);
        } else {
            assert!(s > 1.0 - 1e-6);
        }
    }
    let fused = fuse(&z, &z_ref, &st.sharpened).unwrap();
    for (i, (&f, &r)) in fused.as_slice().iter().zip(z_ref.as_slice()).enumerate() {
        if !mask.bits()[i % plane] {
            assert!((f - r).abs() <= 1e-9);
        }
    }
}

#[test]
fn editing_lowers_similarity() {
    for seed in 0..3 {
        let sc = scenario(seed);
        let mut cfg = config(Sampler::Ddim, EditMode::Inversion, 15);
        // Raw similarity means; the sharpened map is re-centred per step.
        cfg.seed = Seed(seed);
        let same = edit(
            &sc.z0_source,
            &sc.model,
            &sc.source_cond,
            &sc.source_cond,
            &cfg,
        )
        .unwrap();
        let diff = edit(
            &sc.z0_source,
            &sc.model,
            &sc.source_cond,
            &sc.target_cond,
            &cfg,
        )
        .unwrap();
        for (a, b) in same.steps.iter().zip(&diff.steps) {
            assert!(a.mixed.mean >= b.mixed.mean, "seed {seed} step {}", a.index);
        }
    }
}

#[test]
fn localized_edit_ordering_against_source() {
    for mode in [EditMode::Inversion, EditMode::InversionFree] {
        let mut wins = 0;
        for seed in 0..5 {
            let sc = scenario(seed);
            let mut cfg = config(Sampler::Ddim, mode, 15);
            cfg.seed = Seed(seed);
            let schedule = cfg.schedule().unwrap();
            let start = latentedit::pipeline::unfused_start(
                &sc.z0_source,
                &sc.model,
                &sc.source_cond,
                &cfg,
                &schedule,
            )
            .unwrap();
            let plain = denoise_loop(&start, &sc.model, &sc.target_cond, &schedule).unwrap();
            let out = edit(
                &sc.z0_source,
                &sc.model,
                &sc.source_cond,
                &sc.target_cond,
                &cfg,
            )
            .unwrap();
            let bg = sc.background_psnr(&out.edited, &sc.z0_source).unwrap()
                > sc.background_psnr(&plain, &sc.z0_source).unwrap();
            let fg = sc.edit_distance_to_target(&out.edited).unwrap()
                < sc.edit_distance_to_target(&sc.z0_source).unwrap();
            wins += usize::from(bg && fg);
        }
        assert!(wins >= 4, "{mode:?}: {wins}/5");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fusion_is_a_convex_combination(seed in any::<u64>(), vals in prop::collection::vec(0.0f64..=1.0, 12)) {
        let shape = Shape::new(3, 3, 4).unwrap();
        let z = sample_gaussian(shape, Seed(seed)).scale(5.0).unwrap();
        let r = sample_gaussian(shape, Seed(seed).derive(1)).scale(5.0).unwrap();
        let s = SimilarityMap::from_vec(3, 4, vals).unwrap();
        let f = fuse(&z, &r, &s).unwrap();
        for ((&o, &a), &b) in f.as_slice().iter().zip(z.as_slice()).zip(r.as_slice()) {
            prop_assert!(o >= a.min(b) && o <= a.max(b));
        }
        prop_assert_eq!(fuse(&z, &r, &SimilarityMap::constant(3, 4, 0.0).unwrap()).unwrap(), z.clone());
        prop_assert_eq!(fuse(&z, &r, &SimilarityMap::constant(3, 4, 1.0).unwrap()).unwrap(), r);
    }
}
