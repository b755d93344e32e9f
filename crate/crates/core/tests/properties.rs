use allo_core::dynamics::{verify_equilibrium, TabularState};
use allo_core::gridworld::{build_transition_model, parse_grid_map, sample_transitions};
use allo_core::metrics::{Cell, MetricsLog};
use allo_core::objectives::{
    allo_dual_direction, allo_dual_direction_uniform, allo_primal_direction, allo_primal_direction_uniform,
    barrier_direction, tri_index, DualVariables,
};
use allo_core::spectral::{eigendecompose, similarity_report};
use ndarray::Array2;
use proptest::prelude::*;

/// Random rectangular maps: walls at random interior cells, border closed.
fn grid_text() -> impl Strategy<Value = String> {
    (2usize..7, 2usize..7).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::bool::weighted(0.75), w * h).prop_map(move |cells| {
            let mut rows = vec!["#".repeat(w + 2)];
            for y in 0..h {
                let row: String = (0..w).map(|x| if cells[y * w + x] { '.' } else { '#' }).collect();
                rows.push(format!("#{row}#"));
            }
            rows.push("#".repeat(w + 2));
            rows.join("\n")
        })
    })
}

fn symmetric_matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..9).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let a = Array2::from_shape_vec((n, n), v).unwrap();
            (&a + &a.t()) * 0.5
        })
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn connected_maps_give_symmetric_doubly_stochastic_dynamics(text in grid_text()) {
        // Disconnected or empty maps must be rejected, never panic.
        let Ok(world) = parse_grid_map(&text) else { return Ok(()); };
        let model = build_transition_model(&world);
        let p = model.transition();
        let n = world.num_states();
        for s in 0..n {
            prop_assert!((p.row(s).sum() - 1.0).abs() < 1e-12);
            for t in 0..n {
                prop_assert!((p[[s, t]] - p[[t, s]]).abs() < 1e-12);
            }
        }
        let sys = eigendecompose(model.laplacian().view()).unwrap();
        let lam = sys.eigenvalues();
        prop_assert!(lam[0].abs() < 1e-10);
        prop_assert!(lam.iter().all(|&v| v > -1e-10 && v < 2.0 + 1e-10));
        if n > 1 {
            // connected graph: simple zero eigenvalue
            prop_assert!(lam[1] > 1e-10);
        }
        prop_assert_eq!(parse_grid_map(&world.to_map_string()).unwrap().num_states(), n);
    }

    #[test]
    fn sampled_transitions_follow_the_kernel(text in grid_text(), seed in 0u64..1000) {
        let Ok(world) = parse_grid_map(&text) else { return Ok(()); };
        let model = build_transition_model(&world);
        let data = sample_transitions(&model, 200, seed);
        prop_assert_eq!(data.len(), 200);
        for &(s, sp) in &data.pairs {
            prop_assert!(model.transition()[[s, sp]] > 0.0);
        }
        prop_assert_eq!(sample_transitions(&model, 200, seed), data);
    }

    #[test]
    fn eigendecomposition_reconstructs(a in symmetric_matrix()) {
        let sys = eigendecompose(a.view()).unwrap();
        let e = sys.eigenvectors();
        let lam = sys.eigenvalues();
        let n = a.nrows();
        let rebuilt = e.dot(&Array2::from_diag(lam)).dot(&e.t());
        let identity = e.t().dot(e);
        for i in 0..n {
            for j in 0..n {
                prop_assert!((rebuilt[[i, j]] - a[[i, j]]).abs() < 1e-9);
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((identity[[i, j]] - target).abs() < 1e-9);
            }
        }
        for w in lam.as_slice().unwrap().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for i in 0..n {
            let col = sys.eigenvector(i);
            let first = col.iter().find(|v| v.abs() > 1e-8).copied().unwrap_or(1.0);
            prop_assert!(first > 0.0);
        }
    }

    #[test]
    fn dual_direction_is_the_lower_gram_residual(u in matrix(6, 3)) {
        let r = allo_dual_direction(u.view());
        let gram = u.t().dot(&u);
        for j in 0..3 {
            for k in 0..=j {
                let target = gram[[j, k]] - if j == k { 1.0 } else { 0.0 };
                prop_assert!((r[tri_index(j, k)] - target).abs() < 1e-12);
            }
        }
        let b = barrier_direction(u.view());
        prop_assert!(b >= 0.0);
        prop_assert!((b - r.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn uniform_inner_product_only_rescales(u in matrix(5, 2), beta in prop::collection::vec(-1.0f64..1.0, 3)) {
        // With U scaled by √N the uniform-inner-product quantities coincide
        // with the Euclidean ones, up to 1/√N on the primal direction.
        let world = parse_grid_map("#######\n#.....#\n#######").unwrap();
        let l = build_transition_model(&world).laplacian().clone();
        let n = 5.0f64;
        let duals = DualVariables::from_packed(2, beta).unwrap();
        let phi = &u * n.sqrt();
        let g = allo_primal_direction(u.view(), &duals, l.view(), 1.5);
        let gu = allo_primal_direction_uniform(phi.view(), &duals, l.view(), 1.5);
        for (a, b) in g.iter().zip(gu.iter()) {
            prop_assert!((a / n.sqrt() - b).abs() < 1e-12);
        }
        let r = allo_dual_direction(u.view());
        let ru = allo_dual_direction_uniform(phi.view());
        for (a, b) in r.iter().zip(&ru) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_eigenvector_selection_is_an_equilibrium(perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(), d in 1usize..5, b in 0.1f64..5.0) {
        let world = parse_grid_map("#######\n#.....#\n#######").unwrap();
        let l = build_transition_model(&world).laplacian().clone();
        let sys = eigendecompose(l.view()).unwrap();
        let res = verify_equilibrium(l.view(), &sys, &perm[..d], b).unwrap();
        prop_assert!(res.primal_inf < 1e-8 && res.dual_inf < 1e-8);
    }

    #[test]
    fn dual_permutation_round_trips(beta in prop::collection::vec(-1.0f64..1.0, 10), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let duals = DualVariables::from_packed(4, beta).unwrap();
        let mut inverse = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let moved = duals.permuted(&perm);
        for i in 0..4 {
            prop_assert_eq!(moved.get(perm[i], perm[i]), duals.get(i, i));
        }
        let back = moved.permuted(&inverse);
        // off-diagonal entries come back symmetrised
        for j in 0..4 {
            prop_assert_eq!(back.get(j, j), duals.get(j, j));
        }
    }

    #[test]
    fn similarity_is_scale_and_sign_invariant(scale in prop::collection::vec(0.1f64..10.0, 3), flip in prop::collection::vec(any::<bool>(), 3)) {
        let world = parse_grid_map("######\n#....#\n#.##.#\n#....#\n######").unwrap();
        let sys = eigendecompose(build_transition_model(&world).laplacian().view()).unwrap();
        let mut u = sys.leading(3);
        for i in 0..3 {
            let s = if flip[i] { -scale[i] } else { scale[i] };
            u.column_mut(i).mapv_inplace(|v| v * s);
        }
        let rep = similarity_report(u.view(), &sys).unwrap();
        prop_assert!(rep.all_components.iter().all(|&c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn metrics_csv_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let mut log = MetricsLog::new(["step", "value"]);
        for (i, &v) in values.iter().enumerate() {
            log.push(vec![Cell::from(i), Cell::from(v)]).unwrap();
        }
        let back = MetricsLog::parse_csv(&log.to_csv_string()).unwrap();
        prop_assert_eq!(back, log);
    }

    #[test]
    fn permuted_equilibrium_has_expected_duals(perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let world = parse_grid_map("######\n#....#\n######").unwrap();
        let l = build_transition_model(&world).laplacian().clone();
        let sys = eigendecompose(l.view()).unwrap();
        let state = TabularState::permuted_equilibrium(&sys, &perm, 3.0).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((state.duals.get(i, i) + 2.0 * sys.eigenvalues()[p]).abs() < 1e-15);
        }
    }
}
