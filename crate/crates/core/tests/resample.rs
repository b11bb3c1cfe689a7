use std::time::Instant;

use ottalk::mesh::{self, TriangleMesh};
use ottalk::resample::{barycentric_upsample, build_hierarchy, qem_decimate};
use rand::Rng;

fn random_surface(seed: u64) -> TriangleMesh {
    let mut rng = ottalk::seed::rng(seed);
    let n = rng.gen_range(40..200);
    let m = mesh::surface_with_vertex_count(n).unwrap();
    let v = m
        .vertices()
        .iter()
        .map(|p| [p[0], p[1], p[2] + 0.05 * rng.gen_range(-1.0..1.0)])
        .collect();
    m.with_vertices(v).unwrap()
}

#[test]
fn face_topology_hierarchy_sizes() {
    for (n, want) in [(5023, [5023, 1256, 314, 79]), (7306, [7306, 1827, 457, 115])] {
        let start = Instant::now();
        let m = mesh::surface_with_vertex_count(n).unwrap();
        let h = build_hierarchy(&m, 3, 0).unwrap();
        assert_eq!(h.sizes(), want);
        assert!(start.elapsed().as_secs_f64() < 30.0, "{n}: {:?}", start.elapsed());
    }
}

#[test]
fn sixteen_vertices_one_level() {
    let m = mesh::grid(4, 4);
    let h = build_hierarchy(&m, 1, 0).unwrap();
    assert_eq!(h.sizes(), vec![16, 4]);
}

#[test]
fn selection_and_interpolation_contracts() {
    for seed in 0..50 {
        let fine = random_surface(seed);
        let target = fine.n_vertices().div_ceil(4);
        let d = qem_decimate(&fine, target).unwrap();

        for r in 0..d.down.n_rows() {
            let row: Vec<_> = d.down.row(r).collect();
            assert_eq!(row, vec![(d.kept[r], 1.0)]);
        }
        // Q_d Q_dᵀ = I.
        let dense = d.down.to_dense();
        let gram = dense.matmul(&dense.transpose().unwrap()).unwrap();
        assert_eq!(gram, ottalk::tensor::Tensor::identity(target));

        let up = barycentric_upsample(&fine, &d.coarse).unwrap();
        for r in 0..up.n_rows() {
            let row: Vec<_> = up.row(r).collect();
            assert!(!row.is_empty() && row.len() <= 3);
            assert!(row.iter().all(|&(_, w)| (0.0..=1.0).contains(&w)));
            let s: f64 = row.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }

        // Points sampled on the coarse surface are reproduced exactly.
        let mut rng = ottalk::seed::rng(seed + 1000);
        let cv = d.coarse.vertices();
        let samples: Vec<[f64; 3]> = d
            .coarse
            .faces()
            .iter()
            .map(|f| {
                let (mut a, mut b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                if a + b > 1.0 {
                    (a, b) = (1.0 - a, 1.0 - b);
                }
                let c = 1.0 - a - b;
                [0, 1, 2].map(|k| a * cv[f[0]][k] + b * cv[f[1]][k] + c * cv[f[2]][k])
            })
            .collect();
        let k = samples.len();
        let cloud = TriangleMesh::new(
            samples.into_iter().chain([[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).collect(),
            vec![[k, k + 1, k + 2]],
        )
        .unwrap();
        let up = barycentric_upsample(&cloud, &d.coarse).unwrap();
        let rec = up.mul_dense(&d.coarse.flat_vertices(), 3);
        let want = cloud.flat_vertices();
        for i in 0..k * 3 {
            assert!((rec[i] - want[i]).abs() < 1e-9, "seed {seed}: {} vs {}", rec[i], want[i]);
        }
    }
}
