use usqm_core::degrade::{apply, DegradationKind, DegradationSpec};
use usqm_core::features::{SeededEncoder, TokenMatrix, DEFAULT_SEED};
use usqm_core::fr::{structural_distance, ulpips, ulpips_windowed, FrConfig};
use usqm_core::image::{axis_origins, psnr, tile, GrayImage};
use usqm_core::nr::{fit_bank, nrq_score, LabeledImage, NrConfig};
use usqm_core::phantom::{speckle_phantom, PhantomStyle};
use usqm_core::store::{load_bank, save_bank};

#[test]
fn psnr_of_one_flipped_pixel() {
    let a = GrayImage::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 15.0).unwrap();
    let b = a.map(|r, c, v| if (r, c) == (1, 2) { v + 0.5 } else { v }).unwrap();
    assert!((psnr(&a, &b).unwrap().db() - 18.0618).abs() < 1e-4);
}

#[test]
fn tiling_counts() {
    assert_eq!(axis_origins(512, 224, 112), vec![0, 112, 224, 288]);
    let img = GrayImage::from_fn(512, 512, |_, _| 0.5).unwrap();
    assert_eq!(tile(&img, 224, 112).unwrap().len(), 16);
    let img = GrayImage::from_fn(336, 224, |_, _| 0.5).unwrap();
    assert_eq!(tile(&img, 224, 112).unwrap().len(), 2);
}

#[test]
fn uniform_attention_maps_have_zero_structural_distance() {
    let fx = TokenMatrix::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
    let fy = TokenMatrix::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
    assert_eq!(structural_distance(&fx, &fy, 2, 3, 20.0).unwrap(), 0.0);
}

#[test]
fn fr_distance_grows_with_noise() {
    let enc = SeededEncoder::new(DEFAULT_SEED);
    let cfg = FrConfig::default();
    let x = speckle_phantom(224, 224, 21, &PhantomStyle::default()).unwrap();
    let scores: Vec<f64> = [0.02, 0.05, 0.10]
        .iter()
        .map(|&s| {
            let y = apply(&x, &DegradationSpec::new(DegradationKind::AdditiveGaussian, s, 4)).unwrap();
            ulpips(&x, &y, &cfg, &enc).unwrap().final_score
        })
        .collect();
    assert!(scores[0] < scores[1] && scores[1] < scores[2], "{scores:?}");

    // larger images are windowed; 448x448 at stride 112 gives 9 windows
    let big = speckle_phantom(448, 448, 22, &PhantomStyle::default()).unwrap();
    let (b, n) = ulpips_windowed(&big, &big, &cfg, &enc).unwrap();
    assert_eq!((b.final_score, n), (0.0, 9));
}

#[test]
fn bank_round_trip_scores_identically_and_prefers_own_organ() {
    let enc = SeededEncoder::new(DEFAULT_SEED);
    let organs = [("fine", PhantomStyle::fine()), ("coarse", PhantomStyle::coarse())];
    let mut train = Vec::new();
    for (name, st) in &organs {
        for s in 0..6u64 {
            train.push(LabeledImage {
                image: speckle_phantom(336, 336, 300 + s, st).unwrap(),
                organ: name.to_string(),
            });
        }
    }
    let cfg = NrConfig {
        pca_dim: 16,
        components: 2,
        ..NrConfig::default()
    };
    let (bank, report) = fit_bank(&train, &enc, &cfg).unwrap();
    assert_eq!(bank.organ_names(), vec!["coarse", "fine"]);
    assert!(report.organs.iter().all(|o| o.excluded.is_none()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    save_bank(&bank, &path).unwrap();
    let loaded = load_bank(&path).unwrap();
    let held = speckle_phantom(336, 336, 900, &PhantomStyle::fine()).unwrap();
    for organ in [None, Some("fine"), Some("coarse")] {
        let a = nrq_score(&held, &bank, organ, &enc, true).unwrap();
        let b = nrq_score(&held, &loaded, organ, &enc, true).unwrap();
        // the file stores f32, so allow rounding of the model parameters
        assert!((a.final_score - b.final_score).abs() < 1e-3 * a.final_score.abs().max(1.0));
        assert_eq!(a.kappa, 1);
    }

    // held-out patches of each organ are more likely under their own model
    for (name, st) in &organs {
        let other = if *name == "fine" { "coarse" } else { "fine" };
        let mut own = 0.0;
        let mut cross = 0.0;
        for s in 0..3u64 {
            let img = speckle_phantom(336, 336, 700 + s, st).unwrap();
            own += nrq_score(&img, &bank, Some(name), &enc, true).unwrap().patch_scores.iter().sum::<f64>();
            cross += nrq_score(&img, &bank, Some(other), &enc, true).unwrap().patch_scores.iter().sum::<f64>();
        }
        assert!(own > cross, "{name}: own {own} vs cross {cross}");
    }
}
