use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use dcf_core::bases::sample_fb_basis;
use dcf_core::data::{save_idx, IdxArray, Split};
use dcf_core::model_io::save_model;
use dcf_core::nn::conv2;
use tempfile::TempDir;

fn dcf(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dcf"));
    cmd.args(args).current_dir(dir).env_remove("DCF_THREADS").env_remove("DCF_MNIST_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// MNIST-named IDX files holding horizontal bars whose row encodes the label.
fn write_mnist(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let mut px = vec![0u8; n * 784];
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i * 7 + n) % 10;
            labels.push(y as u8);
            for c in 4..24 {
                px[i * 784 + (3 + 2 * y) * 28 + c] = 180 + ((i + c) % 70) as u8;
            }
        }
        let (img, lab) = split.mnist_files();
        save_idx(&dir.join(img), &IdxArray::new(vec![n, 28, 28], px).unwrap()).unwrap();
        save_idx(&dir.join(lab), &IdxArray::new(vec![n], labels).unwrap()).unwrap();
    }
}

fn fb_model(dir: &Path, name: &str) -> PathBuf {
    let fb = Arc::new(sample_fb_basis(3, 5).unwrap());
    let path = dir.join(name);
    save_model(&path, &conv2(Some(&[fb.clone(), fb]), 2).unwrap()).unwrap();
    path
}

#[test]
fn usage_and_flag_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let o = dcf(&[], tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    let o = dcf(&["basis", "--kind", "fb", "--K", "3", "--L", "5", "--out", "b", "--colour", "red"], tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&dcf(&["--help"], tmp.path(), &[])), 0);
    let o = dcf(&["basis", "--kind", "zernike", "--K", "3", "--L", "5", "--out", "b"], tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    let o = dcf(&["basis", "--kind", "fb", "--K", "26", "--L", "5", "--out", "b"], tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    let o = dcf(&["basis", "--kind", "fb", "--K", "3", "--L", "5", "--out", "b"], tmp.path(), &[("DCF_THREADS", "many")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn basis_table_matches_published_eigenvalues() {
    let tmp = TempDir::new().unwrap();
    let o = dcf(&["basis", "--kind", "fb", "--K", "14", "--L", "31", "--out", "fb.dcfb"], tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("fb_eigenvalues.csv")).unwrap();
    let mu: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    let published = [
        5.78, 14.68, 14.68, 26.37, 26.37, 30.47, 40.71, 40.71, 49.22, 49.22, 57.58, 57.58, 70.85, 70.85,
    ];
    assert_eq!(mu.len(), 14);
    for (m, p) in mu.iter().zip(published) {
        assert_eq!(format!("{m:.2}"), format!("{p:.2}"));
    }
    assert!(tmp.path().join("fb.dcfb.manifest").exists());
    let back = dcf_core::BasisSet::from_bytes(&fs::read(tmp.path().join("fb.dcfb")).unwrap()).unwrap();
    assert_eq!(back.count(), 14);
    assert_eq!(back.size(), 31);
}

#[test]
fn outputs_are_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        let out = format!("{dir}/rb.dcfb");
        let o = dcf(&["basis", "--kind", "random", "--K", "6", "--L", "7", "--seed", "4", "--out", &out], tmp.path(), &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["rb.dcfb", "rb_eigenvalues.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
    let manifest = fs::read_to_string(tmp.path().join("a/rb.dcfb.manifest")).unwrap();
    for key in ["command = basis", "version = ", "seed = 4", "config_sha256 = "] {
        assert!(manifest.contains(key), "{manifest}");
    }
}

#[test]
fn decompose_reports_conv2_savings() {
    let tmp = TempDir::new().unwrap();
    save_model(&tmp.path().join("dense.dcfn"), &conv2(None, 1).unwrap()).unwrap();
    let o = dcf(
        &["decompose", "--model", "dense.dcfn", "--kind", "fb", "--K", "3", "--out", "report.csv", "--save", "fb.dcfn"],
        tmp.path(),
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let total: Vec<&str> = csv.lines().find(|l| l.starts_with("total")).unwrap().split(',').collect();
    let col = |name: &str| total[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("dense_params"), "26080");
    assert_eq!(col("dcf_params"), "3200");
    let ratio: f64 = col("param_ratio").parse().unwrap();
    assert!((ratio / (3200.0 / 26100.0) - 1.0).abs() < 0.01, "{ratio}");
    assert!((col("K_over_L2").parse::<f64>().unwrap() - 0.12).abs() < 1e-12);
    let decomposed = dcf_core::model_io::load_model(&tmp.path().join("fb.dcfn")).unwrap();
    assert_eq!(decomposed.param_count(), conv2(None, 1).unwrap().param_count() - 26_080 + 3_200);
}

#[test]
fn eval_reports_and_maps_io_errors() {
    let tmp = TempDir::new().unwrap();
    write_mnist(&tmp.path().join("mnist"), 10, 30);
    fb_model(tmp.path(), "m.dcfn");
    let o = dcf(&["eval", "--model", "m.dcfn", "--data", "mnist/t10k-images-idx3-ubyte"], tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("samples,loss,error,accuracy\n30,"), "{out}");

    let o = dcf(&["eval", "--model", "missing.dcfn", "--data", "mnist/t10k-images-idx3-ubyte"], tmp.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.dcfn"));
    fs::write(tmp.path().join("junk.dcfn"), b"DCFNjunk").unwrap();
    let o = dcf(&["eval", "--model", "junk.dcfn", "--data", "mnist/t10k-images-idx3-ubyte"], tmp.path(), &[]);
    assert_eq!(code(&o), 2);
    let o = dcf(&["eval", "--model", "m.dcfn", "--data", "mnist/whatever"], tmp.path(), &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn stability_is_thread_count_independent() {
    let tmp = TempDir::new().unwrap();
    write_mnist(&tmp.path().join("mnist"), 10, 4);
    fb_model(tmp.path(), "m.dcfn");
    let args = |out: &'static str| {
        vec![
            "stability", "--model", "m.dcfn", "--eps", "0.05", "--fields", "2", "--inputs", "3", "--out", out,
            "--data", "mnist/t10k-images-idx3-ubyte",
        ]
    };
    let o = dcf(&args("one.csv"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dcf(&args("three.csv"), tmp.path(), &[("DCF_THREADS", "3")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let one = fs::read_to_string(tmp.path().join("one.csv")).unwrap();
    assert_eq!(one, fs::read_to_string(tmp.path().join("three.csv")).unwrap());
    assert_eq!(one.lines().count(), 1 + 6);
    assert!(one.lines().skip(1).all(|l| l.ends_with(",true,true")), "{one}");

    let mut bad = args("x.csv");
    bad[4] = "0.3";
    assert_eq!(code(&dcf(&bad, tmp.path(), &[])), 1);
    save_model(&tmp.path().join("dense.dcfn"), &conv2(None, 1).unwrap()).unwrap();
    let mut dense = args("d.csv");
    dense[2] = "dense.dcfn";
    assert_eq!(code(&dcf(&dense, tmp.path(), &[])), 1);
    dense.push("--no-rescale");
    assert_eq!(code(&dcf(&dense, tmp.path(), &[])), 0);
}

#[test]
fn train_then_report() {
    let tmp = TempDir::new().unwrap();
    write_mnist(&tmp.path().join("mnist"), 200, 50);
    let cfg = "architecture = conv2_dcf\nbasis = fb\nK = 3\nepochs = 2\nbatch_size = 50\nlr_start = 0.02\nlr_end = 0.01\ndata_dir = mnist\n";
    for run in ["r1", "r2"] {
        fs::write(tmp.path().join(format!("{run}.cfg")), format!("{cfg}output_dir = {run}\n")).unwrap();
        let o = dcf(&["train", "--config", &format!("{run}.cfg")], tmp.path(), &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let m1 = fs::read_to_string(tmp.path().join("r1/metrics.csv")).unwrap();
    assert_eq!(m1, fs::read_to_string(tmp.path().join("r2/metrics.csv")).unwrap());
    assert!(m1.starts_with("epoch,lr,train_loss,train_err,test_loss,test_err\n"));
    assert_eq!(m1.lines().count(), 3);
    assert_eq!(
        fs::read(tmp.path().join("r1/model.dcfn")).unwrap(),
        fs::read(tmp.path().join("r2/model.dcfn")).unwrap()
    );
    assert!(tmp.path().join("r1/metrics.csv.manifest").exists());

    let o = dcf(&["report", "--metrics", "r1/metrics.csv", "--out", "summary.csv"], tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(s.contains("\nepochs,2\n") && s.contains("final_test_accuracy,"), "{s}");
    assert_eq!(code(&dcf(&["report", "--out", "x.csv"], tmp.path(), &[])), 1);
    assert_eq!(code(&dcf(&["train", "--config", "nope.cfg"], tmp.path(), &[])), 2);
    fs::write(tmp.path().join("bad.cfg"), "K = 3\nflavour = mint\n").unwrap();
    assert_eq!(code(&dcf(&["train", "--config", "bad.cfg"], tmp.path(), &[])), 1);
}
