use std::collections::BTreeMap;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chartfuse::camera::{bearing_from_box, BoundingBox};
use chartfuse::chartdb::select_markers;
use chartfuse::datasetio::{
    generate_synthetic, hflip, load_dataset, make_sample, project_marker, synthesize_frame, Augment, Split,
    SyntheticSceneSpec, MANIFEST,
};
use chartfuse::experiment::sample_options;
use chartfuse::Error;

fn spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        unmapped_prob: 0.2,
        test_fraction: 0.25,
        ..Default::default()
    }
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ds = generate_synthetic(&spec(4), 8, &a).unwrap();
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded.records, ds.records);
    loaded.save(&b).unwrap();
    let again = load_dataset(&b).unwrap();
    assert_eq!(again.records, ds.records);
    assert_eq!(again.markers.to_csv().unwrap(), ds.markers.to_csv().unwrap());
    assert_eq!(again.calibration, ds.calibration);
    for r in &ds.records {
        assert_eq!(again.load_image(r).unwrap(), ds.load_image(r).unwrap());
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_synthetic(&spec(7), 5, &dir.path().join("a")).unwrap();
    let b = generate_synthetic(&spec(7), 5, &dir.path().join("b")).unwrap();
    let c = generate_synthetic(&spec(8), 5, &dir.path().join("c")).unwrap();
    assert_eq!(a.records, b.records);
    assert_ne!(a.records, c.records);
    for name in [MANIFEST, "markers.csv", "images/f00003.png", "labels/f00003.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn load_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(1), 3, dir.path()).unwrap();
    let label = dir.path().join("labels/f00001.txt");
    let text = fs::read_to_string(&label).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines.push("0 0.5 0.5 0 0.1".into());
    fs::write(&label, lines.join("\n")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Parse { path, line, .. }) => {
            assert!(path.ends_with("labels/f00001.txt"));
            assert_eq!(line, lines.len());
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    fs::write(&label, text).unwrap();
    let manifest = dir.path().join(MANIFEST);
    let m = fs::read_to_string(&manifest).unwrap();
    let first = m.lines().next().unwrap().to_string();
    fs::write(&manifest, format!("{m}{first}\n")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("f00000"), "{err}");
}

#[test]
fn unmapped_fraction_matches_probability() {
    let s = spec(21);
    let (mut total, mut unmapped) = (0usize, 0usize);
    for i in 0..1000 {
        let f = synthesize_frame(&s, i, Split::Train).unwrap();
        total += f.buoys.len();
        unmapped += f.buoys.iter().filter(|b| b.marker_id.is_none()).count();
    }
    let p = s.unmapped_prob;
    let mean = total as f64 * p;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    assert!(
        (unmapped as f64 - mean).abs() <= 3.0 * sigma,
        "{unmapped} of {total}, expected {mean:.1} ± {:.1}",
        3.0 * sigma
    );
}

#[test]
fn labels_agree_with_projection_geometry() {
    // level camera so that box columns map straight to bearings
    let s = SyntheticSceneSpec {
        attitude_deg: 0.0,
        ..spec(3)
    };
    let calib = s.calibration().unwrap();
    let intr = calib.intrinsics;
    let (w, h) = (s.image_w as f64, s.image_h as f64);
    let mut checked = 0;
    for i in 0..40 {
        let f = synthesize_frame(&s, i, Split::Train).unwrap();
        let markers: BTreeMap<&str, _> = f.markers.iter().map(|m| (m.id.as_str(), m)).collect();
        for label in &f.record.labels {
            let Some(id) = &label.marker_id else { continue };
            let [cx, cy, bw, bh] = label.bbox;
            let (u, v) = project_marker(markers[id.as_str()], &f.true_pose, &calib).unwrap().unwrap();
            assert!((cx * w - u).abs() <= 2.0 && ((cy + bh / 2.0) * h - v).abs() <= 2.0, "{id}");

            let buoy = f.buoys.iter().find(|b| b.marker_id.as_ref() == Some(id)).unwrap();
            let bearing = bearing_from_box(&BoundingBox::normalized(cx, cy, bw, bh).unwrap(), &intr);
            let column = intr.u0 - bearing.tan() * intr.fs * intr.fl;
            let true_column = intr.u0 - buoy.bearing.tan() * intr.fs * intr.fl;
            assert!((column - true_column).abs() <= 1.0, "{id}");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn samples_follow_selection_and_flip_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(5);
    let ds = generate_synthetic(&s, 6, dir.path()).unwrap();
    let opts = sample_options(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for r in &ds.records {
        let image = ds.load_image(r).unwrap();
        let (sample, diag) = make_sample(r, &image, &ds.markers, &opts, &Augment::default(), &mut rng).unwrap();
        assert!(diag.selection_misses.is_empty());
        let selected = select_markers(&ds.markers, &r.pose, &opts.selection);
        let ids: Vec<&str> = selected.iter().map(|q| q.marker_id.as_str()).collect();
        assert_eq!(sample.queries.marker_ids, ids);
        for (k, q) in selected.iter().enumerate() {
            assert_eq!(sample.queries.raw[k], [q.polar.dist(), q.polar.bearing()]);
            let label = r.labels.iter().find(|l| l.marker_id.as_deref() == Some(ids[k]));
            assert_eq!(sample.gt.visible[k], label.is_some());
            assert_eq!(sample.gt.boxes[k], label.map(|l| l.bbox));
        }

        let flipped = hflip(&sample);
        assert_eq!(flipped.queries.marker_ids, sample.queries.marker_ids);
        for k in 0..sample.queries.len() {
            assert_eq!(flipped.queries.raw[k][1], -sample.queries.raw[k][1]);
            if let (Some(a), Some(b)) = (sample.gt.boxes[k], flipped.gt.boxes[k]) {
                assert_eq!(b[0], 1.0 - a[0]);
            }
        }
        assert_eq!(hflip(&flipped), sample);

        let (direct, _) = make_sample(
            r,
            &image,
            &ds.markers,
            &opts,
            &Augment { hflip: true, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(direct, flipped);
    }
}

#[test]
fn splits_follow_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&spec(2), 12, dir.path()).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 9);
    assert_eq!(ds.indices(Split::Test), vec![9, 10, 11]);
    assert!(ds.indices(Split::Val).is_empty());
}
