use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tissue_retract::sim::{
    build_tissue, Anchors, AnchorSite, PhysicsConfig, Spring, SpringKind, TissueConfig, TissueMesh, Vec3,
};

/// Node 0 pinned at the origin, node 1 free `separation` below it.
fn hanging_pair(separation: f64, k: f64, mass: f64) -> TissueMesh {
    TissueMesh {
        rows: 1,
        cols: 2,
        positions: vec![Vec3::zeros(), Vec3::new(0.0, 0.0, -separation)],
        velocities: vec![Vec3::zeros(); 2],
        masses: vec![mass; 2],
        springs: vec![Spring {
            node_a: 0,
            node_b: 1,
            rest_length: 0.01,
            stiffness: k,
            kind: SpringKind::Structural,
        }],
        pinned: BTreeSet::from([0]),
        anchors: Anchors {
            center: 1,
            left: 1,
            right: 1,
        },
        grasped: None,
    }
}

fn free_fall() -> PhysicsConfig {
    PhysicsConfig {
        support_height: None,
        ..PhysicsConfig::default()
    }
}

fn weightless() -> PhysicsConfig {
    PhysicsConfig {
        gravity: Vec3::zeros(),
        support_height: None,
        ..PhysicsConfig::default()
    }
}

fn perturbed_mesh(seed: u64, amplitude: f64) -> TissueMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mesh = build_tissue(&TissueConfig::default()).unwrap();
    for i in 0..mesh.node_count() {
        if !mesh.pinned.contains(&i) {
            mesh.positions[i] += Vec3::from_fn(|_, _| rng.random_range(-amplitude..amplitude));
        }
    }
    mesh
}

#[test]
fn hanging_node_settles_at_hooke_extension() {
    for (k, m) in [(80.0, 0.01), (40.0, 0.02), (200.0, 0.005)] {
        let cfg = free_fall();
        let mut mesh = hanging_pair(0.01, k, m);
        for _ in 0..400 {
            mesh.step(&cfg, None).unwrap();
        }
        let extension = (mesh.positions[1] - mesh.positions[0]).norm() - 0.01;
        let expected = m * 9.81 / k;
        let rel = (extension - expected).abs() / expected;
        assert!(rel < 1e-3, "k={k} m={m}: extension {extension} vs {expected} (rel {rel:e})");
    }
}

#[test]
fn pinned_corners_bit_stable_over_ten_thousand_steps() {
    let cfg = PhysicsConfig::default();
    let mut mesh = build_tissue(&TissueConfig::default()).unwrap();
    let corners: Vec<(usize, Vec3)> = mesh.pinned.iter().map(|&i| (i, mesh.positions[i])).collect();
    let anchor = mesh.anchor_position(AnchorSite::Center);
    assert!(mesh.try_grasp(&cfg, anchor));
    for step in 0..10_000 {
        // Lift and sway the held anchor, regrasping after any break.
        let phase = step as f64 * 0.05;
        let jaw = anchor + Vec3::new(0.01 * phase.sin(), 0.01 * phase.cos(), 0.02 * (1.0 + (0.3 * phase).sin()));
        mesh.step(&cfg, Some(jaw)).unwrap();
        if !mesh.is_grasped() {
            mesh.try_grasp(&cfg, mesh.anchor_position(AnchorSite::Center));
        }
    }
    for (i, p) in corners {
        assert_eq!(mesh.positions[i], p, "corner {i} moved");
        assert_eq!(mesh.velocities[i], Vec3::zeros());
    }
}

#[test]
fn release_fires_at_analytic_tension() {
    // Separation 0.05 with rest 0.01 and k 80: tension 80 * 0.04 = 3.2 N.
    let tension = 80.0 * (0.05 - 0.01);
    for (break_force, should_release) in [(2.5, true), (3.0, true), (3.5, false)] {
        let cfg = PhysicsConfig {
            grasp_break_force: break_force,
            ..weightless()
        };
        let mut mesh = hanging_pair(0.05, 80.0, 0.01);
        let jaw = mesh.positions[1];
        assert!(mesh.try_grasp(&cfg, jaw));
        let report = mesh.step(&cfg, Some(jaw)).unwrap();
        assert!((report.peak_grasp_force - tension).abs() < 1e-9);
        match report.release {
            Some(ev) => {
                assert!(should_release, "unexpected release at {break_force} N");
                assert_eq!(ev.substep, 0);
                assert!((ev.force - tension).abs() < 1e-9);
            }
            None => assert!(!should_release, "no release at {break_force} N"),
        }
    }
}

#[test]
fn released_anchor_moves_under_springs() {
    let cfg = weightless();
    let mut mesh = build_tissue(&TissueConfig::default()).unwrap();
    let anchor = mesh.anchor_position(AnchorSite::Center);
    assert!(mesh.try_grasp(&cfg, anchor));
    let lifted = anchor + Vec3::new(0.0, 0.0, 0.01);
    mesh.step(&cfg, Some(lifted)).unwrap();
    let held_at = mesh.anchor_position(AnchorSite::Center);
    mesh.release_grasp();
    mesh.step(&cfg, None).unwrap();
    let after = mesh.anchor_position(AnchorSite::Center);
    assert!(after.z < held_at.z - 1e-4, "anchor did not recoil: {held_at:?} -> {after:?}");
}

#[test]
fn kinetic_energy_of_unsprung_nodes_decays() {
    let cfg = weightless();
    let mut mesh = hanging_pair(0.01, 80.0, 0.01);
    mesh.springs.clear();
    mesh.velocities[1] = Vec3::new(0.3, -0.2, 0.1);
    let mut ke = mesh.kinetic_energy();
    for _ in 0..50 {
        mesh.step(&cfg, None).unwrap();
        let next = mesh.kinetic_energy();
        assert!(next < ke);
        ke = next;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn internal_forces_cancel(seed in any::<u64>(), amplitude in 1e-4f64..5e-3) {
        let mesh = perturbed_mesh(seed, amplitude);
        let (forces, degenerate) = mesh.spring_forces();
        prop_assert_eq!(degenerate, 0);
        let total: Vec3 = forces.iter().sum();
        prop_assert!(total.norm() <= 1e-9, "net internal force {:e}", total.norm());
    }

    #[test]
    fn max_strain_matches_full_scan(seed in any::<u64>(), amplitude in 0.0f64..5e-3) {
        let mesh = perturbed_mesh(seed, amplitude);
        let mut worst = 0.0f64;
        for s in &mesh.springs {
            let a = mesh.positions[s.node_a];
            let b = mesh.positions[s.node_b];
            let len = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            worst = worst.max((len / s.rest_length - 1.0).abs());
        }
        prop_assert!((mesh.max_strain() - worst).abs() <= 1e-12);
    }

    /// With damping, no gravity and no grasp the mechanical energy
    /// (kinetic plus elastic) never grows from one control step to the next.
    #[test]
    fn damped_energy_non_increasing(seed in any::<u64>(), log_speed in -3.0f64..0.5, amplitude in 0.0f64..2e-3) {
        let cfg = weightless();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speed = 10f64.powf(log_speed);
        let mut mesh = perturbed_mesh(seed ^ 0x9e37, amplitude);
        for i in 0..mesh.node_count() {
            if !mesh.pinned.contains(&i) {
                mesh.velocities[i] = Vec3::from_fn(|_, _| rng.random_range(-speed..speed));
            }
        }
        let mut energy = mesh.kinetic_energy() + mesh.elastic_energy();
        for step in 0..100 {
            mesh.step(&cfg, None).unwrap();
            let next = mesh.kinetic_energy() + mesh.elastic_energy();
            prop_assert!(next <= energy, "energy rose at step {}: {:e} -> {:e}", step, energy, next);
            energy = next;
        }
    }

    #[test]
    fn release_iff_force_exceeds_threshold(lift in 0.0f64..0.06, break_force in 0.5f64..8.0) {
        let cfg = PhysicsConfig { grasp_break_force: break_force, ..PhysicsConfig::default() };
        let mut mesh = build_tissue(&TissueConfig::default()).unwrap();
        let anchor = mesh.anchor_position(AnchorSite::Left);
        prop_assert!(mesh.try_grasp(&cfg, anchor));
        let report = mesh.step(&cfg, Some(anchor + Vec3::new(0.0, 0.0, lift))).unwrap();
        prop_assert_eq!(report.release.is_some(), report.peak_grasp_force > break_force);
        prop_assert_eq!(mesh.is_grasped(), report.release.is_none());
    }

    #[test]
    fn pinned_nodes_never_move(seed in any::<u64>(), steps in 1usize..40) {
        let cfg = PhysicsConfig::default();
        let mut mesh = perturbed_mesh(seed, 3e-3);
        let before: Vec<Vec3> = mesh.pinned.iter().map(|&i| mesh.positions[i]).collect();
        for _ in 0..steps {
            mesh.step(&cfg, None).unwrap();
        }
        let after: Vec<Vec3> = mesh.pinned.iter().map(|&i| mesh.positions[i]).collect();
        prop_assert_eq!(before, after);
    }
}
