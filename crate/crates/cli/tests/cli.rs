use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffmorph"))
        .args(args)
        .current_dir(dir)
        .env("DIFFMORPH_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// one epoch of a small model on a handful of pairs
fn tiny_checkpoint(dir: &Path) -> String {
    assert_eq!(code(&run(dir, &["synth-data", "--out", "d", "--count", "4", "--size", "16", "--seed", "5"])), 0);
    fs::write(
        dir.join("t.cfg"),
        "data = d\noutput = run\nepochs = 1\nbatch_size = 2\nscore_widths = 8,16\ndeform_widths = 8,8\ntime_dim = 16\n",
    )
    .unwrap();
    let out = run(dir, &["train", "--config", "t.cfg"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    "run/checkpoint.dmck".into()
}

#[test]
fn every_command_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        ("synth-data", &["--out", "--count", "--size", "--seed", "--blur", "--max-mag"]),
        ("train", &["--config"]),
        ("register", &["--checkpoint", "--moving", "--fixed", "--out-field", "--out-warped", "--report"]),
        ("interpolate", &["--etas", "--out-dir"]),
        ("generate", &["--t-forward", "--steps", "--seed", "--out", "--save-trajectory"]),
        ("evaluate", &["--data", "--out", "--baseline", "--iters", "--step-size", "--with-initial"]),
    ];
    for (cmd, flags) in expected {
        let out = run(dir.path(), &[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["register"])), 2);
    assert_eq!(code(&run(dir.path(), &["synth-data", "--out", "x", "--count", "many"])), 2);
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 2);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "# comment\ndata = d\nlearning_rat = 0.1\n").unwrap();
    let out = run(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains('3') && msg.contains("learning_rat"), "{msg}");
}

#[test]
fn missing_files_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--config", "nope.cfg"])), 3);
    let out = run(
        dir.path(),
        &["register", "--checkpoint", "nope.dmck", "--moving", "m.dmt", "--fixed", "f.dmt", "--out-field", "u.dmt", "--out-warped", "w.dmt"],
    );
    assert_eq!(code(&out), 3);
    fs::write(dir.path().join("junk.dmck"), b"not a checkpoint").unwrap();
    let out = run(
        dir.path(),
        &["register", "--checkpoint", "junk.dmck", "--moving", "m.dmt", "--fixed", "f.dmt", "--out-field", "u.dmt", "--out-warped", "w.dmt"],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert_eq!(code(&run(dir.path(), &["synth-data", "--out", name, "--count", "3", "--size", "16", "--seed", "11"])), 0);
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(fs::read(a.join("manifest.txt")).unwrap(), fs::read(b.join("manifest.txt")).unwrap());
    for part in ["m", "f", "field", "maskm", "maskf"] {
        let file = format!("pairs/0002.{part}.dmt");
        assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap(), "{file}");
    }
}

#[test]
fn trained_model_registers_and_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ck = tiny_checkpoint(d);
    let log = fs::read_to_string(d.join("run/log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,l_diffusion,l_regist,total"));

    let ok = run(
        d,
        &[
            "register", "--checkpoint", &ck, "--moving", "d/pairs/0000.m.dmt", "--fixed", "d/pairs/0000.f.dmt",
            "--out-field", "u.dmt", "--out-warped", "w.dmt", "--report", "r.csv",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let field = diffmorph::tensor::io::load_tensor(d.join("u.dmt")).unwrap();
    assert_eq!(field.shape(), &[2, 16, 16]);
    assert!(fs::read_to_string(d.join("r.csv")).unwrap().starts_with("pair,nmse,ssim,psnr_db,dice,fold_pct"));

    // a 16x16 moving image against a 32x32 fixed image
    assert_eq!(code(&run(d, &["synth-data", "--out", "big", "--count", "1", "--size", "32"])), 0);
    let bad = run(
        d,
        &[
            "register", "--checkpoint", &ck, "--moving", "d/pairs/0000.m.dmt", "--fixed", "big/pairs/0000.f.dmt",
            "--out-field", "u2.dmt", "--out-warped", "w2.dmt",
        ],
    );
    assert_eq!(code(&bad), 5, "{}", stderr(&bad));
    assert!(!d.join("u2.dmt").exists());
}
