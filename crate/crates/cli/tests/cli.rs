use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn corrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrnet")).args(args).output().expect("spawn corrnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    stdout(&o)
}

const SPEC: &str = "frame_size = 32\nsquare = 6\njitter = 1\ntrain = 6\ndev = 3\ntest = 2\nseed = 7\n";

const RUN: &str = "corpus = data
frame_size = 32
stage_channels = 8,16,16,32
reduction = 4
windows = 2,2,2
head_channels = 16
hidden = 8
lstm_layers = 1
epochs = 1
batch_size = 4
";

fn setup(dir: &Path, epochs: usize) {
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    ok(corrnet(&[
        "gen-data",
        "--spec",
        dir.join("spec.txt").to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
    ]));
    fs::write(dir.join("run.txt"), RUN.replace("epochs = 1", &format!("epochs = {epochs}"))).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.txt"), SPEC).unwrap();
    for out in ["a", "b"] {
        let msg = ok(corrnet(&["gen-data", "--spec", s(&d.join("spec.txt")), "--out", s(&d.join(out))]));
        assert!(msg.contains("train=6 dev=3 test=2"), "{msg}");
    }
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let a = d.join("a").join(&n);
        if a.is_file() {
            assert_eq!(fs::read(&a).unwrap(), fs::read(d.join("b").join(&n)).unwrap(), "{n:?}");
        }
    }
}

#[test]
fn train_eval_resume_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 1);
    let out = d.join("run");
    let log = ok(corrnet(&["train", "--config", s(&d.join("run.txt")), "--out", s(&out)]));
    assert!(log.contains("epoch=1 "), "{log}");
    for f in ["run.cfg", "metrics.log", "model.cnpk", "last.cnpk"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("metrics.log")).unwrap().lines().count(), 1);

    let eval = ok(corrnet(&["eval", "--checkpoint", s(&out.join("model.cnpk")), "--split", "test"]));
    assert!(eval.contains("wer"), "{eval}");
    let again = ok(corrnet(&["eval", "--checkpoint", s(&out.join("model.cnpk")), "--split", "test"]));
    assert_eq!(eval, again);

    // Raise the epoch budget and resume from last.cnpk.
    let cfg = fs::read_to_string(out.join("run.cfg")).unwrap().replace("epochs = 1", "epochs = 2");
    fs::write(d.join("run2.txt"), cfg).unwrap();
    let log = ok(corrnet(&["train", "--config", s(&d.join("run2.txt")), "--out", s(&out), "--resume"]));
    assert!(log.contains("epoch=2 ") && !log.contains("epoch=1 "), "{log}");
    assert_eq!(fs::read_to_string(out.join("metrics.log")).unwrap().lines().count(), 2);

    let maps = d.join("maps");
    let msg =
        ok(corrnet(&["dump-maps", "--checkpoint", s(&out.join("last.cnpk")), "--sample", "0", "--out", s(&maps)]));
    assert!(msg.contains("files="), "{msg}");
    let files: Vec<String> =
        fs::read_dir(&maps).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    for k in 2..=4 {
        assert!(files.iter().any(|f| f.starts_with(&format!("stage{k}_ahat_t000_l"))), "{files:?}");
        assert!(files.iter().any(|f| *f == format!("stage{k}_m_t000.pgm")), "{files:?}");
        assert!(files.contains(&format!("stage{k}_u.txt")));
    }
    let pgm = fs::read(maps.join("stage2_m_t000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    let bad = corrnet(&["dump-maps", "--checkpoint", s(&out.join("last.cnpk")), "--sample", "99", "--out", s(&maps)]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).starts_with("error kind=invalid_argument "), "{}", stderr(&bad));
}

#[test]
fn flops_reports_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.txt"), "").unwrap();
    let text = ok(corrnet(&["flops", "--config", s(&d.join("run.txt")), "--frames", "16"]));
    assert!(text.contains("pairwise") && text.contains("compressed"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("reference ")).count() >= 3, "{text}");
    let kv = ok(corrnet(&["flops", "--config", s(&d.join("run.txt")), "--frames", "16", "--format", "kv"]));
    assert!(kv.lines().all(|l| l.contains('=')), "{kv}");
    let ratio = |frames: &str| -> f64 {
        let kv = ok(corrnet(&["flops", "--config", s(&d.join("run.txt")), "--frames", frames, "--format", "kv"]));
        kv.lines().find_map(|l| l.strip_prefix("compare.reference.0.ratio=")).expect("ratio line").parse().unwrap()
    };
    assert!(ratio("16") > 100.0);
}

#[test]
fn errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.txt"), "nonsense = 3\n").unwrap();
    let o = corrnet(&["flops", "--config", s(&d.join("bad.txt"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1, "{e}");
    assert!(e.starts_with("error kind=config "), "{e}");

    let o = corrnet(&[
        "eval",
        "--checkpoint",
        s(&d.join("missing.cnpk")),
        "--split",
        "dev",
        "--config",
        s(&d.join("bad.txt")),
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = corrnet(&["eval", "--split", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=usage "), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = corrnet(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gen-data"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 1);
    let out = d.join("run");
    ok(corrnet(&["train", "--config", s(&d.join("run.txt")), "--out", s(&out)]));
    let ck = out.join("model.cnpk");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ck, bytes).unwrap();
    let o = corrnet(&["eval", "--checkpoint", s(&ck), "--split", "dev"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=format "), "{}", stderr(&o));
}
