use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pecnn::dicom::{encode_slice, SliceRecord};
use pecnn::nifti::read_nifti_file;

fn pecnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pecnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn pecnn")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn slice(rows: usize, cols: usize, z: f64) -> SliceRecord {
    SliceRecord {
        rows,
        cols,
        pixel_spacing: (0.7, 0.7),
        slice_thickness: Some(1.0),
        image_position_z: z,
        rescale_slope: 1.0,
        rescale_intercept: -1024.0,
        stored_pixels: (0..rows * cols).map(|i| (i % 2000) as i32).collect(),
    }
}

#[test]
fn convert_valid_series() {
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("series");
    fs::create_dir(&series).unwrap();
    for k in 0..4 {
        fs::write(
            series.join(format!("s{k}.dcm")),
            encode_slice(&slice(6, 5, k as f64)),
        )
        .unwrap();
    }
    ok(&pecnn(&["convert", "series", "out/vol.nii"], dir.path()));
    let vol = read_nifti_file(&dir.path().join("out/vol.nii")).unwrap();
    assert_eq!(vol.dims(), [5, 6, 4]);
    assert_eq!(vol.data()[1], 1.0 - 1024.0);
}

#[test]
fn convert_failures() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = pecnn(&["convert", "empty", "x.nii"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no slices found"));

    let mixed = dir.path().join("mixed");
    fs::create_dir(&mixed).unwrap();
    fs::write(mixed.join("a.dcm"), encode_slice(&slice(6, 5, 0.0))).unwrap();
    fs::write(mixed.join("b.dcm"), encode_slice(&slice(6, 5, 1.0))).unwrap();
    fs::write(mixed.join("c.dcm"), encode_slice(&slice(7, 5, 2.0))).unwrap();
    let out = pecnn(&["convert", "mixed", "x.nii"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("c.dcm"), "{}", stderr(&out));

    fs::write(mixed.join("c.dcm"), b"not dicom").unwrap();
    let out = pecnn(&["convert", "mixed", "x.nii"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("c.dcm"), "{}", stderr(&out));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pecnn(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        pecnn(&["phantom", "--n-pos", "x"], dir.path())
            .status
            .code(),
        Some(1)
    );
    fs::write(dir.path().join("bad.cfg"), "window.middle = 3\n").unwrap();
    let out = pecnn(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown key"));
    fs::write(
        dir.path().join("odd.cfg"),
        "window.lo = -900\nwindow.hi = 100\n",
    )
    .unwrap();
    let out = pecnn(&["preprocess", "--config", "odd.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("override"));
    assert_eq!(pecnn(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn report_on_empty_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("results")).unwrap();
    let out = pecnn(&["report", "results"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(pecnn(&["report", "missing"], dir.path()).status.code() != Some(0));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn phantom_and_preprocess_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |out: &str, workers: &str| {
        ok(&pecnn(
            &[
                "phantom", "--n-pos", "3", "--n-neg", "3", "--seed", "9", "--out", out, "--dims",
                "32x32x32", "-w", workers,
            ],
            d,
        ))
    };
    gen("a", "1");
    gen("b", "3");
    assert_eq!(tree_bytes(&d.join("a")), tree_bytes(&d.join("b")));

    fs::write(
        d.join("p.cfg"),
        "paths.manifest = a/manifest.tsv\npaths.preprocessed = pre\ninput.dims = 16x16x16\n",
    )
    .unwrap();
    ok(&pecnn(&["preprocess", "-c", "p.cfg", "-w", "2"], d));
    let first = tree_bytes(&d.join("pre"));
    assert_eq!(first.len(), 7);
    ok(&pecnn(&["preprocess", "-c", "p.cfg"], d));
    assert_eq!(tree_bytes(&d.join("pre")), first);
    let vol = read_nifti_file(&d.join("pre/case_000.nii")).unwrap();
    assert_eq!(vol.dims(), [16, 16, 16]);
    assert!(vol.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pipeline_two_windows_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pecnn(
        &[
            "phantom", "--n-pos", "6", "--n-neg", "6", "--test", "4", "--seed", "3", "--out",
            "data", "--dims", "32x32x32",
        ],
        d,
    ));
    for (name, hi) in [("w130", "130"), ("w400", "400")] {
        let cfg = format!(
            "window.hi = {hi}\ninput.dims = 16x16x16\nmodel.widths = 2,2,2,2\nmodel.dense = 4\n\
             model.padding = same\ntrain.folds = 2\ntrain.epochs = 1\ntrain.patience = 1\n\
             augment.enabled = false\npaths.manifest = data/manifest.tsv\npaths.output = results/{name}\n"
        );
        fs::write(d.join(format!("{name}.cfg")), cfg).unwrap();
        let cv = ok(&pecnn(&["train", "-c", &format!("{name}.cfg")], d));
        assert!(cv.lines().any(|l| l.starts_with("mean")));
        for f in [
            "run.txt",
            "fold0.ckpt",
            "fold1.ckpt",
            "fold0.history.tsv",
            "cv.tsv",
        ] {
            assert!(d.join("results").join(name).join(f).is_file(), "{f}");
        }
        let run = fs::read_to_string(d.join("results").join(name).join("run.txt")).unwrap();
        assert!(run.starts_with(&format!("# pecnn {} config ", env!("CARGO_PKG_VERSION"))));
        ok(&pecnn(&["evaluate", "-c", &format!("{name}.cfg")], d));
    }
    let text = ok(&pecnn(&["report", "results"], d));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["HU", "Accuracy", "Sensitivity", "Specificity", "AUC"]
    );
    assert!(lines[1].starts_with("-1000 to +130"));
    assert!(lines[2].starts_with("-1000 to +400"));

    let csv = ok(&pecnn(&["report", "results", "--format", "csv"], d));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 5));
    assert_eq!(
        ok(&pecnn(&["report", "results", "--format", "csv"], d)),
        csv
    );
    assert_eq!(
        ok(&pecnn(&["report", "results", "--scope", "ensemble"], d))
            .lines()
            .count(),
        3
    );
}
