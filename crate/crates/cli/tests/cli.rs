use std::path::Path;
use std::process::{Command, Output};

use sshface::config::RunConfig;
use sshface::eval::{GroundTruthDB, GtBox};
use sshface::toy;
use sshface::BBox;

fn sshface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sshface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn anchors_dump_lists_every_anchor() {
    let o = sshface(&["anchors-dump", "--module", "2", "--feat", "4x5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("module,row,col,scale,x1,y1,x2,y2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    // Stride 16, scale 4 of base 16: 64 px anchor centred at (8, 8).
    assert_eq!(rows[0], "2,0,0,4,-24,-24,40,40");
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(sshface(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sshface(&[]).status.code(), Some(2));
    assert_eq!(sshface(&["anchors-dump", "--module", "4", "--feat", "4x5"]).status.code(), Some(2));
    assert_eq!(sshface(&["anchors-dump", "--module", "1", "--feat", "4by5"]).status.code(), Some(2));
    assert_eq!(sshface(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"anchors": 1}"#).unwrap();
    let o = sshface(&["train-toy", "--config", p(&cfg), "--out", p(&dir.path().join("w"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.sshw");
    let o = sshface(&["detect", "--weights", p(&missing), "--input", p(dir.path()), "--out", p(&dir.path().join("d.txt"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = sshface(&["eval", "--gt", p(&missing), "--dets", p(&missing)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut gt = GroundTruthDB::new();
    gt.insert_boxes("a/1.jpg", &[BBox::new(10.0, 10.0, 40.0, 50.0).unwrap(), BBox::new(60.0, 5.0, 70.0, 15.0).unwrap()])
        .unwrap();
    gt.insert("b/2.jpg", vec![GtBox { bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(), ignore: false }])
        .unwrap();
    let gt_path = dir.path().join("gt.txt");
    std::fs::write(&gt_path, gt.to_wider()).unwrap();
    let mut dets = String::new();
    for (name, boxes) in gt.images() {
        dets.push_str(&format!("{name}\n{}\n", boxes.len()));
        for b in boxes {
            let [x1, y1, x2, y2] = b.bbox.coords();
            dets.push_str(&format!("{x1} {y1} {x2} {y2} 0.9\n"));
        }
    }
    let dets_path = dir.path().join("dets.txt");
    std::fs::write(&dets_path, dets).unwrap();
    let pr = dir.path().join("pr.csv");
    let o = sshface(&["eval", "--gt", p(&gt_path), "--dets", p(&dets_path), "--pr-out", p(&pr)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().last(), Some("AP,1.000000"));
    let csv = std::fs::read_to_string(&pr).unwrap();
    assert!(csv.starts_with("threshold,recall,precision\n"));
    assert_eq!(csv.lines().last(), Some("AP,1.000000"));

    let svg = dir.path().join("pr.svg");
    let o = sshface(&["pr-plot", "--csv", p(&pr), "--out", p(&svg)]);
    assert_eq!(o.status.code(), Some(0));
    let svg = std::fs::read_to_string(&svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("AP 1.0000"));
}

#[test]
fn gradcheck_passes_and_reports_errors() {
    let o = sshface(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 9);
    assert!(!text.contains("FAIL"));
    assert!(text.contains("max_rel_error="));
}

#[test]
fn train_detect_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.toy.num_images = 4;
    cfg.train.iterations = 4;
    let cfg_path = dir.path().join("run.json");
    cfg.save(&cfg_path).unwrap();

    let mut outputs = Vec::new();
    for run in 0..2 {
        let w = dir.path().join(format!("w{run}.sshw"));
        let t = dir.path().join(format!("t{run}.csv"));
        let c = dir.path().join(format!("c{run}.json"));
        let o = sshface(&[
            "train-toy", "--config", p(&cfg_path), "--out", p(&w), "--trace", p(&t), "--config-out", p(&c), "--seed", "11",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let trace = std::fs::read_to_string(&t).unwrap();
        assert_eq!(trace.lines().count(), 5);
        outputs.push((std::fs::read(&w).unwrap(), trace, std::fs::read_to_string(&c).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let effective = RunConfig::from_json(&outputs[0].2).unwrap();
    assert_eq!(effective.train.seed, 11);

    let images = dir.path().join("images");
    std::fs::create_dir_all(images.join("sub")).unwrap();
    let mut gt = GroundTruthDB::new();
    for (i, s) in toy::generate(&cfg.toy).unwrap().iter().enumerate() {
        let name = if i % 2 == 0 { format!("img{i}.ppm") } else { format!("sub/img{i}.png") };
        s.image.save(images.join(&name)).unwrap();
        gt.insert_boxes(name, &s.faces).unwrap();
    }
    let gt_path = dir.path().join("gt.txt");
    std::fs::write(&gt_path, gt.to_wider()).unwrap();

    let c0 = dir.path().join("c0.json");
    let w0 = dir.path().join("w0.sshw");
    let mut files = Vec::new();
    for run in 0..2 {
        let d = dir.path().join(format!("d{run}.txt"));
        let o = sshface(&["detect", "--weights", p(&w0), "--input", p(&images), "--config", p(&c0), "--out", p(&d)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read_to_string(&d).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let names: Vec<&str> = files[0].lines().filter(|l| l.starts_with("img") || l.starts_with("sub/")).collect();
    assert_eq!(names, ["img0.ppm", "img2.ppm", "sub/img1.png", "sub/img3.png"]);

    let o = sshface(&["eval", "--gt", p(&gt_path), "--dets", p(&dir.path().join("d0.txt"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().last().unwrap().starts_with("AP,"));
}
