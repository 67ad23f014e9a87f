use isg_core::diff::Tensor;
use isg_core::features::*;
use isg_core::slide_io::{tile_fine, GlobalPatch, TileSpec};
use isg_core::synth::{generate_patch, PatchKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FAMILIES: [PatchKind; 4] = [
    PatchKind::Constant,
    PatchKind::Gradient,
    PatchKind::Noise,
    PatchKind::Checkerboard { cell: 4 },
];

fn family_set(side: usize, n: usize, offset: u64) -> Vec<Vec<u8>> {
    (0..n).map(|i| generate_patch(FAMILIES[i % 4], side, offset + i as u64)).collect()
}

fn refs(v: &[Vec<u8>]) -> Vec<&[u8]> {
    v.iter().map(Vec::as_slice).collect()
}

fn epoch_mean(trace: &[f64], epoch: usize, len: usize) -> f64 {
    trace[epoch * len..(epoch + 1) * len].iter().sum::<f64>() / len as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn zero_head_gives_zero_features() {
    let mut ex = Extractor::new(16, 32, 1).unwrap();
    ex.zero_head();
    for seed in 0..4 {
        let f = ex.encode(&generate_patch(PatchKind::Noise, 16, seed)).unwrap();
        assert_eq!(f, vec![0.0; 32]);
    }
}

#[test]
fn encoding_is_deterministic() {
    let ex = Extractor::new(64, 32, 3).unwrap();
    let p = generate_patch(PatchKind::Gradient, 64, 9);
    let a = ex.encode(&p).unwrap();
    assert_eq!(a.len(), 32);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, ex.encode(&p).unwrap());
    assert_eq!(a, Extractor::new(64, 32, 3).unwrap().encode(&p).unwrap());
}

fn frob(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Product of per-layer bounds: a k×k conv is at most `k·‖K‖_F`-Lipschitz,
/// a dense layer at most `‖W‖_F`, ReLU is 1-Lipschitz.
fn lipschitz_bound(ex: &Extractor) -> f64 {
    let mut l = 1.0;
    for i in 0..3 {
        l *= 3.0 * frob(ex.params.get(&format!("enc.conv{i}.w")).unwrap());
    }
    l * frob(ex.params.get("enc.fc.w").unwrap())
}

#[test]
fn single_pixel_change_respects_lipschitz_bound() {
    for side in [16usize, 64] {
        let ex = Extractor::new(side, 32, 5).unwrap();
        let bound = lipschitz_bound(&ex);
        let mut r = ChaCha8Rng::seed_from_u64(side as u64);
        for _ in 0..5 {
            let a = generate_patch(PatchKind::Noise, side, r.random());
            let mut b = a.clone();
            let i = r.random_range(0..b.len());
            b[i] = b[i].wrapping_add(100);
            let dx: f64 = normalize_pixels(&a)
                .iter()
                .zip(normalize_pixels(&b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dz = dist(&ex.encode(&a).unwrap(), &ex.encode(&b).unwrap());
            assert!(dz > 0.0);
            assert!(dz <= bound * dx, "{dz} > {bound} * {dx}");
        }
    }
}

fn global_patch(pixels: Vec<u8>) -> GlobalPatch {
    GlobalPatch { id: 0, grid_row: 0, grid_col: 0, side: 64, pixels }
}

#[test]
fn local_cube_layout() {
    let spec = TileSpec::new(64, 16).unwrap();
    let local = Extractor::new(16, 32, 7).unwrap();

    let grid = tile_fine(&global_patch(generate_patch(PatchKind::Noise, 64, 1)), &spec).unwrap();
    let cube = build_local_cube(&grid, &local).unwrap();
    assert_eq!(cube.shape(), &[4, 4, 32]);
    for r in 0..4 {
        for c in 0..4 {
            let at = (r * 4 + c) * 32;
            assert_eq!(&cube.data()[at..at + 32], local.encode(grid.get(r, c)).unwrap().as_slice());
        }
    }

    let flat = tile_fine(&global_patch(generate_patch(PatchKind::Constant, 64, 2)), &spec).unwrap();
    let cube = build_local_cube(&flat, &local).unwrap();
    let first = &cube.data()[..32];
    assert!(cube.data().chunks(32).all(|v| v == first));

    let mut swapped = grid.clone();
    swapped.patches.swap(1, 10);
    let a = build_local_cube(&grid, &local).unwrap();
    let b = build_local_cube(&swapped, &local).unwrap();
    for pos in 0..16 {
        let src = match pos {
            1 => 10,
            10 => 1,
            p => p,
        };
        assert_eq!(&b.data()[pos * 32..(pos + 1) * 32], &a.data()[src * 32..(src + 1) * 32]);
    }

    let wrong = Extractor::new(32, 32, 7).unwrap();
    assert!(matches!(build_local_cube(&grid, &wrong), Err(FeatError::WrongPatchSize { .. })));
}

fn silent_discriminator() -> Discriminator {
    let mut d = Discriminator::new(0);
    for name in ["disc.fc.w", "disc.fc.b"] {
        d.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    d
}

#[test]
fn loss_term_cases() {
    let phi = PerceptualNet::new(1);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[2, 16, 16, 3], 0.0, 1.0, &mut r);
    let same = loss_terms(&x, &x, &phi, &Discriminator::new(3)).unwrap();
    assert_eq!(same.l1, 0.0);
    assert_eq!(same.lpips_like, 0.0);

    let y = Tensor::uniform(&[2, 16, 16, 3], 0.0, 1.0, &mut r);
    let t = loss_terms(&x, &y, &phi, &silent_discriminator()).unwrap();
    assert!((t.disc_adv - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((t.gen_adv - std::f64::consts::LN_2).abs() < 1e-12);
    let brute = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64;
    assert!((t.l1 - brute).abs() < 1e-12);
    assert!(t.lpips_like > 0.0);

    let z = Tensor::zeros(&[2, 8, 8, 3]);
    assert!(loss_terms(&x, &z, &phi, &silent_discriminator()).is_err());
}

#[test]
fn reconstruction_losses_use_the_autoencoder() {
    let ex = Extractor::new(16, 8, 4).unwrap();
    let phi = PerceptualNet::new(1);
    let disc = Discriminator::new(2);
    let pats = family_set(16, 4, 0);
    let t = reconstruction_losses(&refs(&pats), &ex, &phi, &disc).unwrap();
    let x = ex.batch_tensor(&refs(&pats)).unwrap();
    let y = ex.reconstruct(&refs(&pats)).unwrap();
    assert_eq!(t, loss_terms(&x, &y, &phi, &disc).unwrap());
}

#[test]
fn training_halves_l1_on_textured_patches() {
    let pats = family_set(16, 256, 0);
    let mut ex = Extractor::new(16, 32, 1).unwrap();
    let phi = PerceptualNet::new(2);
    let phi_before = phi.params.clone();
    let mut disc = Discriminator::new(3);
    let disc_before = disc.params.clone();
    let cfg = ExtractorTrainConfig::default();
    let tr = train_extractor(&mut ex, &refs(&pats), &cfg, &phi, &mut disc).unwrap();
    assert_eq!(tr.total.len(), 500);
    let epoch = 256 / cfg.batch;
    let first = epoch_mean(&tr.l1, 0, epoch);
    let last = epoch_mean(&tr.l1, 500 / epoch - 1, epoch);
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(phi.params, phi_before);
    assert_eq!(disc.params, disc_before);
    for i in 0..tr.total.len() {
        assert_eq!(tr.total[i], tr.l1[i] + tr.lpips_like[i]);
    }
}

#[test]
fn coarse_extractor_reduces_l1() {
    let pats = family_set(64, 64, 1000);
    let mut ex = Extractor::new(64, 32, 1).unwrap();
    let cfg = ExtractorTrainConfig { steps: 40, ..Default::default() };
    let tr = train_extractor(&mut ex, &refs(&pats), &cfg, &PerceptualNet::new(2), &mut Discriminator::new(3)).unwrap();
    let first = epoch_mean(&tr.l1, 0, 8);
    let last = epoch_mean(&tr.l1, 4, 8);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn constant_patches_are_reconstructed() {
    let p = generate_patch(PatchKind::Constant, 16, 5);
    let pats = vec![p; 64];
    let mut ex = Extractor::new(16, 32, 1).unwrap();
    let tr = train_extractor(
        &mut ex,
        &refs(&pats),
        &ExtractorTrainConfig::default(),
        &PerceptualNet::new(2),
        &mut Discriminator::new(3),
    )
    .unwrap();
    assert!(*tr.l1.last().unwrap() < 1e-2, "{}", tr.l1.last().unwrap());
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let pats = family_set(16, 64, 0);
    let mut ex = Extractor::new(16, 32, 1).unwrap();
    let before = ex.params.clone();
    let cfg = ExtractorTrainConfig { lr: 0.0, steps: 4, batch: 64, ..Default::default() };
    let tr = train_extractor(&mut ex, &refs(&pats), &cfg, &PerceptualNet::new(2), &mut Discriminator::new(3)).unwrap();
    assert!(tr.total.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    assert_eq!(ex.params, before);
}

#[test]
fn adversarial_loss_composition() {
    let pats = family_set(16, 64, 0);
    let mut ex = Extractor::new(16, 16, 1).unwrap();
    let phi = PerceptualNet::new(2);
    let phi_before = phi.params.clone();
    let mut disc = Discriminator::new(3);
    let disc_before = disc.params.clone();
    let cfg = ExtractorTrainConfig { steps: 6, adversarial: true, ..Default::default() };
    let tr = train_extractor(&mut ex, &refs(&pats), &cfg, &phi, &mut disc).unwrap();
    for i in 0..tr.total.len() {
        let independent = tr.l1[i] + tr.lpips_like[i] + tr.gen_adv[i];
        assert!((tr.total[i] - independent).abs() < 1e-12);
    }
    assert_eq!(phi.params, phi_before);
    assert_ne!(disc.params, disc_before);
}

#[test]
fn training_errors() {
    let mut ex = Extractor::new(16, 8, 1).unwrap();
    let phi = PerceptualNet::new(2);
    let mut disc = Discriminator::new(3);
    let cfg = ExtractorTrainConfig::default();
    assert!(matches!(train_extractor(&mut ex, &[], &cfg, &phi, &mut disc), Err(FeatError::EmptyDataset)));
    let few = family_set(16, 10, 0);
    assert!(train_extractor(&mut ex, &refs(&few), &cfg, &phi, &mut disc).is_err());
    let pats = family_set(16, 64, 0);
    let wild = ExtractorTrainConfig { lr: 1e200, steps: 50, ..Default::default() };
    assert!(matches!(
        train_extractor(&mut ex, &refs(&pats), &wild, &phi, &mut disc),
        Err(FeatError::DivergedLoss(_)) | Err(FeatError::Diff(_))
    ));
}

/// Gray patch with the source's luminance pattern rescaled to mean 128 and
/// standard deviation 48, so a family is defined by its texture alone.
fn contrast_normalized(p: Vec<u8>) -> Vec<u8> {
    let gray: Vec<f64> = p.chunks(3).map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0).collect();
    let n = gray.len() as f64;
    let mean = gray.iter().sum::<f64>() / n;
    let sd = (gray.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd < 1e-6 { 1.0 } else { sd };
    gray.iter()
        .flat_map(|g| {
            let v = (128.0 + 48.0 * (g - mean) / sd).round().clamp(0.0, 255.0) as u8;
            [v, v, v]
        })
        .collect()
}

fn texture_set(side: usize, n: usize, offset: u64) -> Vec<Vec<u8>> {
    family_set(side, n, offset).into_iter().map(contrast_normalized).collect()
}

/// Mean intra-family and inter-family feature distances per family.
fn family_distances(side: usize, steps: usize) -> Vec<(f64, f64)> {
    let train = texture_set(side, 64, 0);
    let mut ex = Extractor::new(side, 32, 11).unwrap();
    let cfg = ExtractorTrainConfig { steps, ..Default::default() };
    train_extractor(&mut ex, &refs(&train), &cfg, &PerceptualNet::new(2), &mut Discriminator::new(3)).unwrap();
    let probe = texture_set(side, 32, 5000);
    let feats = ex.encode_many(&refs(&probe)).unwrap();
    (0..4)
        .map(|fam| {
            let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
            for i in (fam..32).step_by(4) {
                for (j, fj) in feats.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    if j % 4 == fam {
                        intra += dist(&feats[i], fj);
                        ni += 1;
                    } else {
                        inter += dist(&feats[i], fj);
                        nx += 1;
                    }
                }
            }
            (intra / ni as f64, inter / nx as f64)
        })
        .collect()
}

/// Structured families must cluster. Independent noise draws stay roughly
/// as far apart as they are from other families, so noise is only reported.
fn separability(side: usize, steps: usize) {
    let d = family_distances(side, steps);
    for (fam, &(intra, inter)) in d.iter().enumerate() {
        let kind = FAMILIES[fam];
        eprintln!("side {side}, {kind}: intra {intra:.4}, inter {inter:.4}");
        if kind != PatchKind::Noise {
            assert!(intra < inter, "side {side}, family {kind}: {intra} >= {inter}");
        }
    }
}

#[test]
fn families_separate_at_fine_side() {
    separability(16, 300);
}

#[test]
fn families_separate_at_coarse_side() {
    separability(64, 40);
}
