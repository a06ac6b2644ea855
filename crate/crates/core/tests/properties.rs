use hullsplat::carve::{carve_occupancy, encode_volume, header_path, read_volume, write_volume, GridSpec, VoxelGrid};
use hullsplat::refine::{refine_frame, ColorMode, RefineConfig};
use hullsplat::splat::{decode_particles, encode_particles, rasterize, GaussianParticle};
use hullsplat::synth::{generate_scene, SceneSpec};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn particle() -> impl Strategy<Value = GaussianParticle> {
    (
        prop::array::uniform3(-0.8f64..0.8),
        prop::array::uniform3(-3.5f64..-1.2),
        prop::array::uniform4(-1.0f64..1.0),
        prop::array::uniform3(0.0f64..1.0),
        0.01f64..1.0,
    )
        .prop_filter("quaternion needs a direction", |(_, _, q, _, _)| {
            q.iter().map(|x| x * x).sum::<f64>() > 1e-3
        })
        .prop_map(|(m, s, q, color, opacity)| GaussianParticle {
            mean: Vector3::from(m),
            log_scale: Vector3::from(s),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            color,
            opacity,
        })
}

fn small_scene(seed: u64) -> SceneSpec {
    let mut spec = SceneSpec::random(seed, 4);
    spec.rig.image_width = 40;
    spec.rig.image_height = 40;
    spec.rig.focal = 50.0;
    spec.particles_per_ellipsoid = 400;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Records are stored as `f32`: one pass rounds, later passes keep every
    /// field except the renormalized quaternion bit-exact.
    #[test]
    fn particle_files_round_trip(ps in prop::collection::vec(particle(), 0..40)) {
        let once = decode_particles(&encode_particles(&ps)).unwrap();
        prop_assert_eq!(once.len(), ps.len());
        let tol = 4.0 * f64::from(f32::EPSILON);
        for (a, b) in ps.iter().zip(&once) {
            prop_assert!((a.mean - b.mean).amax() <= tol);
            prop_assert!((a.log_scale - b.log_scale).amax() <= 4.0 * tol);
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-3);
            for c in 0..3 {
                prop_assert!((a.color[c] - b.color[c]).abs() <= tol);
            }
            prop_assert!((a.opacity - b.opacity).abs() <= tol);
        }
        let twice = decode_particles(&encode_particles(&once)).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert_eq!(a.mean, b.mean);
            prop_assert_eq!(a.log_scale, b.log_scale);
            prop_assert_eq!(a.color, b.color);
            prop_assert_eq!(a.opacity, b.opacity);
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-6);
        }
    }

    #[test]
    fn renders_stay_in_range(ps in prop::collection::vec(particle(), 1..30), bg in prop::array::uniform3(0.0f64..1.0)) {
        let rig = hullsplat::synth::build_rig(&small_scene(1)).unwrap();
        let img = rasterize(&ps, rig.camera(0), bg);
        for px in &img.data {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&px[3]));
            for c in 0..3 {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&px[c]));
            }
        }
    }

    #[test]
    fn adding_a_particle_never_lowers_coverage(ps in prop::collection::vec(particle(), 1..20), extra in particle()) {
        let rig = hullsplat::synth::build_rig(&small_scene(2)).unwrap();
        let cam = rig.camera(1);
        let before = rasterize(&ps, cam, [1.0; 3]).coverage();
        let mut more = ps.clone();
        more.push(extra);
        let after = rasterize(&more, cam, [1.0; 3]).coverage();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(b + 1e-9 >= *a);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn higher_carving_thresholds_give_subsets(seed in 0u64..1000) {
        let (_, frame, rig) = generate_scene(&small_scene(seed), 0).unwrap();
        let spec = GridSpec::cube(16, 2.8 / 16.0, Vector3::zeros(), 0.3);
        let levels: Vec<_> = (1..=rig.len())
            .map(|t| carve_occupancy(&frame.masks, &rig, &spec, t).unwrap())
            .collect();
        for pair in levels.windows(2) {
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                prop_assert!(hi <= lo);
            }
        }
    }
}

#[test]
fn volumes_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GridSpec::cube(6, 0.25, Vector3::new(0.1, -0.2, 0.3), 0.7);
    let mut grid = VoxelGrid::empty(spec);
    for (i, (o, c)) in grid.occupancy.iter_mut().zip(grid.color.iter_mut()).enumerate() {
        *o = [0.0, 0.5, 1.0][i % 3];
        *c = [i as f32 / 216.0, 0.5, 1.0 - i as f32 / 216.0];
    }
    let cropped = grid.crop(&[1..5, 0..6, 2..4]).unwrap();
    let path = dir.path().join("v.bin");
    write_volume(&path, &cropped).unwrap();
    assert!(header_path(&path).is_file());
    let back = read_volume(&path).unwrap();
    assert_eq!(back, cropped);
    assert_eq!(encode_volume(&back), std::fs::read(&path).unwrap());
}

#[test]
fn small_steps_do_not_increase_the_loss() {
    let (truth, frame, rig) = generate_scene(&small_scene(5), 0).unwrap();
    let start: Vec<_> = truth
        .iter()
        .map(|p| GaussianParticle {
            opacity: 0.5,
            ..p.clone()
        })
        .collect();
    let cfg = RefineConfig {
        color_mode: ColorMode::Gradient,
        opacity_steps: 10,
        learning_rate: 1e-2,
        ..RefineConfig::default()
    };
    let trace = refine_frame(&start, &frame, &rig, &cfg).unwrap().trace;
    assert!(trace.len() >= 2);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{trace:?}");
    }
    assert!(trace.last().unwrap() < &trace[0]);
}
