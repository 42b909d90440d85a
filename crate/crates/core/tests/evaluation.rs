use std::path::Path;

use mdsam_autograd::Tensor;
use mdsam_core::data::save_saliency;
use mdsam_core::metrics::{evaluate_dataset, evaluate_pairs, mae, pair_from_tensors};
use mdsam_core::synth::generate;

fn write_masks(dir: &Path, maps: &[(String, Tensor)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (id, m) in maps {
        save_saliency(m, &dir.join(format!("{id}.png"))).unwrap();
    }
}

fn gts() -> Vec<(String, Tensor)> {
    generate(3, 24, 4)
        .into_iter()
        .map(|g| {
            let t = Tensor::new(vec![1, 24, 24], g.mask.pixels().map(|p| p[0] as f64 / 255.0).collect());
            (g.id, t)
        })
        .collect()
}

#[test]
fn perfect_directory_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let gt = gts();
    write_masks(&dir.path().join("gt"), &gt);
    write_masks(&dir.path().join("pred"), &gt);
    let r = evaluate_dataset(&dir.path().join("pred"), &dir.path().join("gt")).unwrap();
    assert_eq!(r.aggregate.images, 3);
    assert_eq!(r.summary_line(), "0.0000 1.0000 1.0000 1.0000");
}

#[test]
fn unmatched_stems_are_listed_and_empty_intersection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let gt = gts();
    write_masks(&dir.path().join("gt"), &gt);
    let mut preds = gt[..2].to_vec();
    preds.push(("extra".into(), Tensor::zeros(&[1, 24, 24])));
    write_masks(&dir.path().join("pred"), &preds);
    let r = evaluate_dataset(&dir.path().join("pred"), &dir.path().join("gt")).unwrap();
    assert_eq!(r.aggregate.images, 2);
    assert_eq!(r.unmatched, vec!["extra".to_string(), "synth_002".to_string()]);

    write_masks(&dir.path().join("other"), &[("zzz".into(), Tensor::zeros(&[1, 24, 24]))]);
    assert!(evaluate_dataset(&dir.path().join("other"), &dir.path().join("gt")).is_err());
}

#[test]
fn predictions_are_resized_to_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let gt = gts();
    write_masks(&dir.path().join("gt"), &gt);
    let small: Vec<(String, Tensor)> = gt.iter().map(|(id, _)| (id.clone(), Tensor::full(&[1, 12, 12], 0.25))).collect();
    write_masks(&dir.path().join("pred"), &small);
    let r = evaluate_dataset(&dir.path().join("pred"), &dir.path().join("gt")).unwrap();
    assert_eq!(r.aggregate.images, 3);
}

#[test]
fn dataset_aggregate_is_mean_of_single_images() {
    let gt = gts();
    let preds: Vec<Tensor> = gt.iter().map(|(_, g)| g.map(|v| 0.7 * v + 0.1)).collect();
    let pairs: Vec<_> = gt.iter().zip(&preds).map(|((id, g), p)| pair_from_tensors(id, p, g).unwrap()).collect();
    let all = evaluate_pairs(&pairs).unwrap();
    let mean_mae = gt.iter().zip(&preds).map(|((_, g), p)| mae(p.data(), g.data()).unwrap()).sum::<f64>() / 3.0;
    assert!((all.aggregate.mae - mean_mae).abs() < 1e-12);
    assert!(all.aggregate.f_max >= all.aggregate.f_mean && all.aggregate.f_mean >= 0.0);
    for m in &all.per_image {
        for v in [m.mae, m.f_max.unwrap(), m.s_measure.unwrap(), m.e_measure, m.weighted_f.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn mae_is_symmetric_under_complement() {
    let (_, g) = &gts()[0];
    let p = g.map(|v| 0.3 + 0.4 * v);
    let a = mae(p.data(), g.data()).unwrap();
    let b = mae(&p.data().iter().map(|v| 1.0 - v).collect::<Vec<_>>(), &g.data().iter().map(|v| 1.0 - v).collect::<Vec<_>>()).unwrap();
    assert!((a - b).abs() < 1e-15);
}
