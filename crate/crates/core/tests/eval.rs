use ottalk::eval::{dtw_lip, evaluate_with, masked_errors, Masks};
use ottalk::mesh::{MaskLabel, VertexMask};
use ottalk::tensor::Tensor;
use ottalk::train::{synth_dataset, SynthConfig};
use rand::Rng;

fn masks(n: usize) -> (VertexMask, VertexMask, VertexMask) {
    (
        VertexMask::new(MaskLabel::Lip, vec![0, 1], n).unwrap(),
        VertexMask::new(MaskLabel::Face, vec![0, 1, 2, 3], n).unwrap(),
        VertexMask::new(MaskLabel::Head, (0..n).collect(), n).unwrap(),
    )
}

fn random(rng: &mut impl Rng, t: usize, n: usize) -> Tensor {
    Tensor::new(vec![t, 3 * n], (0..t * 3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dist(a: &Tensor, b: &Tensor, t: usize, v: usize) -> f64 {
    let w = a.shape()[1];
    (0..3).map(|k| (a.data()[t * w + v * 3 + k] - b.data()[t * w + v * 3 + k]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn identical_sequences_score_zero() {
    let (l, f, h) = masks(6);
    let m = Masks { lip: &l, face: &f, head: &h };
    let a = random(&mut ottalk::seed::rng(1), 4, 6);
    let r = masked_errors(&a, &a, m).unwrap();
    assert_eq!((r.e_max_lip, r.e_mean_lip, r.e_mean_face, r.e_mean_head), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(dtw_lip(&a, &a, &l).unwrap(), 0.0);
}

#[test]
fn uniform_offset() {
    let (l, f, h) = masks(6);
    let m = Masks { lip: &l, face: &f, head: &h };
    let a = random(&mut ottalk::seed::rng(2), 3, 6);
    let b = Tensor::new(vec![3, 18], a.data().iter().enumerate().map(|(i, x)| x + [1.0, 2.0, 2.0][i % 3]).collect()).unwrap();
    let r = masked_errors(&b, &a, m).unwrap();
    for v in [r.e_max_lip, r.e_mean_lip, r.e_mean_face, r.e_mean_head] {
        assert!((v - 3.0).abs() < 1e-12);
    }
}

#[test]
fn single_lip_vertex_error() {
    let (l, f, h) = masks(6);
    let m = Masks { lip: &l, face: &f, head: &h };
    let a = Tensor::zeros(&[4, 18]);
    let mut b = a.clone();
    b.data_mut()[2 * 18 + 3 + 1] = 2.0;
    let r = masked_errors(&b, &a, m).unwrap();
    assert_eq!(r.e_max_lip, 0.5);
    assert_eq!(r.e_mean_lip, 2.0 / (4.0 * 2.0));
    assert_eq!(r.e_mean_face, 2.0 / (4.0 * 4.0));
    assert_eq!(r.e_mean_head, 2.0 / (4.0 * 6.0));
}

#[test]
fn masked_errors_match_brute_force() {
    let mut rng = ottalk::seed::rng(3);
    let (l, f, h) = masks(7);
    let m = Masks { lip: &l, face: &f, head: &h };
    for _ in 0..20 {
        let t = rng.gen_range(1..6);
        let (a, b) = (random(&mut rng, t, 7), random(&mut rng, t, 7));
        let r = masked_errors(&a, &b, m).unwrap();
        let mut max_lip = 0.0;
        let mut mean_head = 0.0;
        for j in 0..t {
            max_lip += l.indices().iter().map(|&v| dist(&a, &b, j, v)).fold(0.0, f64::max) / t as f64;
            mean_head += (0..7).map(|v| dist(&a, &b, j, v)).sum::<f64>() / (7 * t) as f64;
        }
        assert!((r.e_max_lip - max_lip).abs() < 1e-12);
        assert!((r.e_mean_head - mean_head).abs() < 1e-12);
        assert!(r.e_mean_lip <= r.e_max_lip + 1e-15);
    }
}

#[test]
fn dtw_properties() {
    let mut rng = ottalk::seed::rng(4);
    let (l, _, _) = masks(5);
    for _ in 0..30 {
        let t = rng.gen_range(1..7);
        let (a, b) = (random(&mut rng, t, 5), random(&mut rng, t, 5));
        let d = dtw_lip(&a, &b, &l).unwrap();
        let diagonal: f64 = (0..t).map(|j| l.indices().iter().map(|&v| dist(&a, &b, j, v)).sum::<f64>()).sum();
        assert!(d <= diagonal + 1e-12);
        assert!(d >= 0.0);

        // Rigid translation of both sequences leaves the score unchanged.
        let shift = |x: &Tensor| Tensor::new(x.shape().to_vec(), x.data().iter().enumerate().map(|(i, v)| v + [0.5, -1.0, 2.0][i % 3]).collect()).unwrap();
        assert!((dtw_lip(&shift(&a), &shift(&b), &l).unwrap() - d).abs() < 1e-9);

        let t2 = rng.gen_range(1..7);
        let c = random(&mut rng, t2, 5);
        assert!(dtw_lip(&a, &c, &l).unwrap().is_finite());
    }
    assert!(dtw_lip(&Tensor::zeros(&[0, 15]), &Tensor::zeros(&[1, 15]), &l).is_err());
}

#[test]
fn oracle_predictor_scores_zero() {
    let mut cfg = SynthConfig::new(1, 3, 5);
    cfg.subdivisions = 2;
    let d = synth_dataset(&cfg).unwrap();
    let m = Masks { lip: &d.lip, face: &d.face, head: &d.head };
    let samples = d.samples();
    let r = evaluate_with(&samples, m, |s| Ok(s.targets.clone())).unwrap();
    assert_eq!((r.e_max_lip, r.e_mean_head, r.dtw_lip, r.frames), (0.0, 0.0, 0.0, 15));
    let z1 = evaluate_with(&samples, m, |s| Ok(Tensor::zeros(s.targets.shape()))).unwrap();
    let z2 = evaluate_with(&samples, m, |s| Ok(Tensor::zeros(s.targets.shape()))).unwrap();
    assert_eq!(z1, z2);
    assert!(z1.e_mean_head > 0.0);
}
