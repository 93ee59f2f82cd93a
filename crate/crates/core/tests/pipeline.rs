use georbf::dist::{distributed_assemble, DistConfig, RankSpace};
use georbf::geodesic::build_graph;
use georbf::interp::{assemble, assemble_matrices, FieldVector, KernelParams, SolverConfig};
use georbf::mesh::{compute_metrics, generate_ring, sample_points, ElementKind, RingParams, SampleMode};
use georbf::Error;
use proptest::prelude::*;

fn ring(n_theta: usize, n_section: usize, kind: ElementKind) -> georbf::mesh::Mesh {
    generate_ring(&RingParams { n_theta, n_section, ..RingParams::default() }, kind).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constants_survive_any_kernel(
        n_theta in 8usize..20,
        m in 1usize..8,
        alpha in 1.0f64..3.0,
        beta in prop_oneof![Just(f64::INFINITY), 0.2f64..2.0],
        c in -10.0f64..10.0,
    ) {
        prop_assume!(c.abs() > 1e-3);
        let src_mesh = ring(n_theta, 1, ElementKind::Tet);
        let src = sample_points(&src_mesh, SampleMode::Vertices).unwrap();
        let dst = sample_points(&ring(n_theta + 5, 1, ElementKind::Hex), SampleMode::Barycenters).unwrap();
        let graph = build_graph(&src_mesh).unwrap();
        let h = compute_metrics(&src_mesh).unwrap().h_avg;
        let params = KernelParams { m, alpha, r_max: 10.0 * h, beta, geodesic: true };
        let op = assemble(&src, &dst, Some(&graph), &params, SolverConfig::default()).unwrap();
        let result = op.evaluate(&FieldVector::sample(&src, |_| c));
        if !op.uncovered().is_empty() {
            let uncovered = matches!(result, Err(Error::Uncovered { .. }));
            prop_assert!(uncovered);
            return Ok(());
        }
        for v in result.unwrap().0.values {
            prop_assert!((v - c).abs() <= 1e-8 * c.abs());
        }
    }

    #[test]
    fn any_partition_gathers_the_serial_matrices(
        owners in proptest::collection::vec(0usize..5, 153),
        dst_owners in proptest::collection::vec(0usize..5, 16),
    ) {
        let mesh = ring(16, 2, ElementKind::Tet);
        let src = sample_points(&mesh, SampleMode::Vertices).unwrap();
        prop_assert_eq!(src.len(), owners.len());
        let dst = sample_points(&ring(16, 1, ElementKind::Hex), SampleMode::Barycenters).unwrap();
        prop_assert_eq!(dst.len(), dst_owners.len());
        let graph = build_graph(&mesh).unwrap();
        let params = KernelParams::with_source_h_avg(compute_metrics(&mesh).unwrap().h_avg);
        let split = |own: &[usize]| {
            let mut sets = vec![Vec::new(); 5];
            for (i, &r) in own.iter().enumerate() {
                sets[r].push(i);
            }
            sets
        };
        let space = RankSpace::from_partition(&src, &dst, &split(&owners), &split(&dst_owners)).unwrap();
        let d = distributed_assemble(&space, Some(&graph), &params, &DistConfig::default()).unwrap();
        let serial = assemble_matrices(&src, &dst, Some(&graph), &params).unwrap();
        prop_assert!(d.matrices.bit_identical(&serial));
    }
}

#[test]
fn field_from_another_point_set_is_rejected() {
    let mesh = ring(12, 1, ElementKind::Hex);
    let src = sample_points(&mesh, SampleMode::Vertices).unwrap();
    let dst = sample_points(&mesh, SampleMode::Barycenters).unwrap();
    let params = KernelParams { geodesic: false, ..KernelParams::with_source_h_avg(compute_metrics(&mesh).unwrap().h_avg) };
    let op = assemble(&src, &dst, None, &params, SolverConfig::default()).unwrap();
    let wrong = FieldVector::sample(&dst, |p| p[0]);
    assert!(matches!(op.evaluate(&wrong), Err(Error::Shape(_))));
}

#[test]
fn coincident_sources_give_a_degenerate_radius() {
    let mesh = ring(12, 1, ElementKind::Hex);
    let mut src = sample_points(&mesh, SampleMode::Vertices).unwrap();
    src.push(src[3]);
    let params = KernelParams { m: 1, geodesic: false, ..KernelParams::with_source_h_avg(0.3) };
    let r = assemble_matrices(&src, &src, None, &params);
    assert!(matches!(r, Err(Error::DegenerateRadius(_))));
}
