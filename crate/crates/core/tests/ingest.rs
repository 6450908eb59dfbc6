use magloc_core::ingest::{
    project, reverse_augment, rotate_to_global, rotate_to_local, synchronize, Frame, MagSample, Orientation,
    OrientationSample, PositionSample, Projection, RawStreams, Source,
};
use proptest::prelude::*;

fn angles() -> impl Strategy<Value = Orientation> {
    (-3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1).prop_map(|(y, p, r)| Orientation::new(y, p, r))
}

proptest! {
    #[test]
    fn rotation_round_trip_keeps_magnitude(a in angles(), m in prop::array::uniform3(-60.0f64..60.0)) {
        let g = rotate_to_global(m, a);
        prop_assert!((project(g, Projection::Xyz) - project(m, Projection::Xyz)).abs() < 1e-9);
        let back = rotate_to_local(g, a);
        prop_assert!((0..3).all(|i| (back[i] - m[i]).abs() < 1e-9));
        let n = a.normalized();
        let g2 = rotate_to_global(m, n);
        prop_assert!((0..3).all(|i| (g2[i] - g[i]).abs() < 1e-9));
    }
}

#[test]
fn local_trial_converts_to_constant_global_field() {
    // A phone spinning in yaw under a fixed field sees a rotating local reading.
    let field = [20.0, 0.0, -40.0];
    let n = 101;
    let orient: Vec<OrientationSample> = (0..n)
        .map(|k| OrientationSample { t: k as f64 * 0.02, angles: Orientation::new(0.05 * k as f64, 0.1, -0.2) })
        .collect();
    let mag: Vec<MagSample> =
        orient.iter().map(|o| MagSample { t: o.t, m: rotate_to_local(field, o.angles) }).collect();
    let pos: Vec<PositionSample> = (0..n).map(|k| PositionSample { t: k as f64 * 0.02, pos: [k as f64, 0.0] }).collect();
    let streams = RawStreams {
        magnetometer: mag,
        frame: Frame::Local,
        orientation: Some(orient),
        orientation_source: None,
        positions: Some(pos),
    };
    let trial = synchronize(&streams, "spin", 50.0, Source::Human).unwrap().into_global().unwrap();
    assert_eq!(trial.frame, Frame::Global);
    assert_eq!(trial.len(), n);
    for s in &trial.samples {
        assert!((0..3).all(|i| (s.m[i] - field[i]).abs() < 1e-9), "{:?}", s.m);
    }
    let twice = reverse_augment(&reverse_augment(&trial));
    assert_eq!(twice.samples, trial.samples);
    assert_eq!(twice.positions, trial.positions);
}
