use mstraj_core::dataset::*;
use std::io::Write;

fn container(header: &str, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"MSTRAJ01");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn hand_assembled_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hand.mstraj");
    let header = r#"{"version":1,"n":2,"T":2,"K":1,"d":2,"domain":"basketball","norm_mean":[25.0,23.5],"norm_scale":[25.0,23.5],"split":"test"}"#;
    let values: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
    std::fs::File::create(&path).unwrap().write_all(&container(header, &values)).unwrap();
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.split, Split::Test);
    assert_eq!(ds.domain, Domain::Basketball);
    assert_eq!(ds.shape(), Some((2, 1, 2)));
    assert_eq!(ds.trajectories()[1].state(1, 0), &[3.0, 3.5]);
    assert_eq!(ds.stats.mean, vec![25.0, 23.5]);

    // the split defaults to train
    let header = r#"{"version":1,"n":1,"T":2,"K":1,"d":2,"domain":"boids","norm_mean":[0,0],"norm_scale":[1,1]}"#;
    std::fs::write(&path, container(header, &values[..4])).unwrap();
    assert_eq!(load_dataset(&path).unwrap().split, Split::Train);

    std::fs::write(&path, container(header, &values)).unwrap();
    assert!(matches!(load_dataset(&path), Err(DatasetError::ShapeMismatch(_))));
    std::fs::write(&path, container(&header.replace("\"version\":1", "\"version\":2"), &values[..4])).unwrap();
    assert!(matches!(load_dataset(&path), Err(DatasetError::UnsupportedVersion { found: 2, supported: 1 })));
    let mut nan = values[..4].to_vec();
    nan[3] = f32::NAN;
    std::fs::write(&path, container(header, &nan)).unwrap();
    assert!(load_dataset(&path).is_err());
}

#[test]
fn saved_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.mstraj");
    let gen = generate_boids_dataset(&BoidsParams { frames: 5, agents: 3, ..BoidsParams::default() }, 4, 2, 1).unwrap();
    save_dataset(&gen.train, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], DATASET_MAGIC);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["T"], 5);
    assert_eq!(header["K"], 3);
    assert_eq!(header["d"], 2);
    assert_eq!(header["n"], 4);
    assert_eq!(header["domain"], "boids");
    assert_eq!(bytes.len(), 12 + hlen + 4 * 5 * 3 * 2 * 4);
    // trajectory 1, frame 2, agent 1, y
    let offset = 12 + hlen + 4 * (((5 + 2) * 3 + 1) * 2 + 1);
    let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
    assert_eq!(v as f64, gen.train.trajectories()[1].state(2, 1)[1]);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.trajectories(), gen.train.trajectories());
    assert_eq!(back.stats, gen.train.stats);
}

#[test]
fn generation_depends_only_on_seed_and_index() {
    let p = BoidsParams { frames: 8, ..BoidsParams::default() };
    let small = generate_boids_dataset(&p, 3, 2, 9).unwrap();
    let large = generate_boids_dataset(&p, 6, 4, 9).unwrap();
    assert_eq!(small.train.trajectories(), &large.train.trajectories()[..3]);
    assert_eq!(small.test.trajectories(), &large.test.trajectories()[..2]);
    assert_eq!(small.train_friendly, large.train_friendly[..3]);
    let other = generate_boids_dataset(&p, 3, 2, 10).unwrap();
    assert_ne!(small.train.trajectories(), other.train.trajectories());
    assert!(generate_boids_dataset(&p, 0, 2, 9).is_err());
}

#[test]
fn simulated_flocks_respect_the_dynamics_limits() {
    let p = BoidsParams::default();
    let gen = generate_boids_dataset(&p, 200, 1, 3).unwrap();
    let friendly = gen.train_friendly.iter().filter(|&&f| f).count();
    assert!((70..=130).contains(&friendly), "{friendly} friendly of 200");
    for tr in gen.train.trajectories() {
        assert_eq!(tr.shape(), (50, 8, 2));
        for k in 0..8 {
            let s = tr.state(0, k);
            assert!(((s[0] * s[0] + s[1] * s[1]).sqrt() - p.ring_radius).abs() < 1e-6);
            for t in 1..50 {
                // speed clamp times the step, plus f32 rounding of stored states
                assert!(tr.step_length(t - 1, k) <= p.dt * 1.0 + 1e-6);
            }
        }
    }
}

#[test]
fn normalization_round_trips() {
    let gen = generate_boids_dataset(&BoidsParams { frames: 6, ..BoidsParams::default() }, 20, 1, 4).unwrap();
    let stats = &gen.train.stats;
    let mut sum = vec![0.0; 2];
    let mut n = 0.0;
    for tr in gen.train.trajectories() {
        let z = normalize(tr, stats).unwrap();
        for (i, v) in z.states().iter().enumerate() {
            sum[i % 2] += v;
        }
        n += (z.states().len() / 2) as f64;
        let back = denormalize(&z, stats).unwrap();
        for (a, b) in back.states().iter().zip(tr.states()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(sum.iter().all(|s| (s / n).abs() < 1e-9), "{sum:?}");
    assert!(normalize(&gen.train.trajectories()[0], &NormStats::identity(3)).is_err());
}

#[test]
fn court_cells_cover_the_half_court() {
    let court = CourtGeometry::default();
    assert_eq!(court.cell_count(), 90);
    let mut seen = vec![false; 90];
    for xi in 0..100 {
        for yi in 0..94 {
            let p = [xi as f64 * 0.5 + 0.25, yi as f64 * 0.5 + 0.25];
            let c = court.label_cell(&p);
            seen[c] = true;
            let center = court.cell_center(c);
            assert_eq!(court.label_cell(&center), c);
        }
    }
    assert!(seen.iter().all(|&s| s));
    // outside points clamp to the nearest edge cell
    assert_eq!(court.label_cell(&[-3.0, -3.0]), 0);
    assert_eq!(court.label_cell(&[80.0, 80.0]), 89);
}

#[test]
fn agent_ordering_is_a_permutation() {
    let states = vec![5.0, 0.0, 1.0, 0.0, 3.0, 0.0, 5.0, 1.0, 1.0, 1.0, 3.0, 1.0];
    let tr = Trajectory::new(Domain::Basketball, 2, 3, 2, states).unwrap();
    let ordered = order_agents(&tr);
    let means = ordered.agent_means();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
    let mut a: Vec<f64> = tr.states().to_vec();
    let mut b: Vec<f64> = ordered.states().to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
    assert_eq!(order_agents(&ordered), ordered);
}

#[test]
fn sidecar_labels_are_plain_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("friendly.json");
    save_sidecar_labels(&[1, 0, 1], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "[1,0,1]");
    std::fs::write(&path, "[0, 1]").unwrap();
    assert_eq!(load_sidecar_labels(&path).unwrap(), vec![0, 1]);
}
