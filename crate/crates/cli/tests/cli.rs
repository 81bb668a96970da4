use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
# small enough for a test
data.count = 4
data.resolution = 16
model.resolution = 16
model.blocks = 2
model.base_channels = 4
model.noise_dim = 8
model.mapping_width = 6
model.wavelet_levels = 1
model.key_dim = 4
model.disc_channels = 2
train.batch = 2
train.checkpoint_every = 2
memory.capacity = 4
degrade.scale_r = 2
";

#[test]
fn wpd_writes_sixteen_subbands_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = rmm(&["synth-data", "--count", "1", "--resolution", "32", p(&data)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = dir.path().join("wpd");
    let o = rmm(&["wpd", "--levels", "2", p(&data.join("face_00000.png")), p(&out)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let bands = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("subband_"))
        .count();
    assert_eq!(bands, 16);
    assert!(out.join("grid.png").is_file());
    assert!(out.join("config.txt").is_file());
    assert!(!out.join(".rmm.lock").exists());
    assert!(stdout(&o).contains("subbands=16"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(&["wpd", p(&dir.path().join("nope.png")), p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("ERR:IO:"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rmm(&["--set", "train.bogus=1", "synth-data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).starts_with("ERR:CONFIG:"));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "memory.size = 3\n").unwrap();
    let o = rmm(&["--config", p(&cfg), "synth-data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_key_with_provenance() {
    let o = rmm(&["train", "--help"]);
    let text = stdout(&o);
    for key in rmm_core::config::KEYS {
        assert!(text.contains(key.key), "{} missing", key.key);
    }
    assert!(text.contains("published setting") && text.contains("tool default"));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".rmm.lock"), "").unwrap();
    let o = rmm(&["synth-data", "--count", "1", "--resolution", "16", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("ERR:LOCK:"));
}

#[test]
fn synth_and_degrade_are_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let data = dir.path().join(format!("{name}_data"));
        let lq = dir.path().join(format!("{name}_lq"));
        assert!(rmm(&["--seed", "3", "synth-data", "--count", "3", "--resolution", "32", p(&data)])
            .status
            .success());
        let o = rmm(&["--seed", "3", "degrade", p(&data), p(&lq)]);
        assert!(o.status.success(), "{}", stdout(&o));
        (data, lq)
    };
    let (d1, l1) = run("a");
    let (d2, l2) = run("b");
    for (a, b, f) in [
        (&d1, &d2, "manifest.txt"),
        (&d1, &d2, "face_00002.png"),
        (&l1, &l2, "face_00001.png"),
        (&l1, &l2, "degradation.txt"),
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(l1.join("degradation.txt")).unwrap().lines().count(), 3);
}

#[test]
fn train_restore_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    let data = dir.path().join("data");
    assert!(rmm(&["--config", c, "synth-data", p(&data)]).status.success());

    let train = |name: &str| {
        let out = dir.path().join(name);
        let o = rmm(&["--config", c, "train", "--data", p(&data), "--steps", "3", p(&out)]);
        assert!(o.status.success(), "{}", stdout(&o));
        out
    };
    let t1 = train("run1");
    let t2 = train("run2");
    for f in ["checkpoint.mmck", "bank.mmb", "checkpoint_000002.mmck", "config.txt"] {
        assert_eq!(fs::read(t1.join(f)).unwrap(), fs::read(t2.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(t1.join("log.txt")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let strip = |s: &str| s.lines().map(|l| l.split(" elapsed_ms=").next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&log), strip(&fs::read_to_string(t2.join("log.txt")).unwrap()));

    let lq = dir.path().join("lq");
    assert!(rmm(&["--config", c, "degrade", p(&data), p(&lq)]).status.success());
    let restored = dir.path().join("restored");
    let ck = t1.join("checkpoint.mmck");
    let o = rmm(&["--config", c, "restore", "--checkpoint", p(&ck), p(&lq), p(&restored)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(restored.join("face_00003.png").is_file());
    assert_eq!(fs::read_to_string(restored.join("retrieval.txt")).unwrap().lines().count(), 4);

    let o = rmm(&["metrics", p(&restored), p(&data)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("metric ")).count(), 4);
    assert!(text.lines().any(|l| l.starts_with("aggregate count=4")));

    let attn = dir.path().join("attn");
    let o = rmm(&["dump-attn", "--checkpoint", p(&ck), p(&lq.join("face_00000.png")), p(&attn)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(attn.join("block1_instance.tensor").is_file());

    let o = rmm(&["memory", "stats", p(&t1.join("bank.mmb"))]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("occupancy "));
    let dump = dir.path().join("dump");
    assert!(rmm(&["memory", "dump", p(&t1.join("bank.mmb")), p(&dump)]).status.success());
    assert!(dump.join("keys.tensor").is_file() && dump.join("slots.txt").is_file());
}

#[test]
fn gradcheck_passes() {
    let o = rmm(&["gradcheck", "--seed", "0"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("gradcheck module=")).count(), 5);
}
