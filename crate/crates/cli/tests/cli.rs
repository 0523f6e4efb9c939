use std::path::Path;
use std::process::{Command, Output};

fn hdfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdfm")).args(args).arg("--out-dir").arg(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_hdt(path: &Path, dims: &[u32], data: &[f64]) {
    let mut b = b"HDT1".to_vec();
    b.push(1);
    b.push(dims.len() as u8);
    for d in dims {
        b.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, b).unwrap();
}

#[test]
fn check_fault_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let faulty = hdfm(dir.path(), &["check", "--filter", "spectral", "--inject-fault", "eigen-sign"]);
    assert_eq!(faulty.status.code(), Some(1));
    assert!(stdout(&faulty).contains("failed: spectral::semigroup"), "{}", stdout(&faulty));
    let report = std::fs::read_to_string(dir.path().join("check_report.csv")).unwrap();
    assert!(report.starts_with("module,check,value,tolerance,status\n"));
    assert!(report.contains("semigroup") && report.contains(",fail\n"));

    assert_eq!(hdfm(dir.path(), &["check", "--filter", "nonsense"]).status.code(), Some(2));
    assert_eq!(hdfm(dir.path(), &["check", "--inject-fault", "nonsense"]).status.code(), Some(2));
    assert_eq!(hdfm(dir.path(), &["toy", "--dims", "2"]).status.code(), Some(2));
    assert_eq!(hdfm(dir.path(), &["spectrum", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(hdfm(dir.path(), &["spectrum", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn config_keys_are_validated_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "seed = 1\nbogus_key = 3\n").unwrap();
    let o = hdfm(dir.path(), &["spectrum", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"));

    let good = dir.path().join("good.conf");
    std::fs::write(&good, "# small run\nseed = 4\nn_samples = 8\ngrid_points = 5  # overridden below\nschemes = noise_fm\n").unwrap();
    let o = hdfm(dir.path(), &["spectrum", "--config", good.to_str().unwrap(), "--grid-points", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ratio_noise_fm.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
    assert!(csv.starts_with("t,ratio,scheme,r\n"));
}

#[test]
fn train_then_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = hdfm(dir.path(), &["train", "--seed", "2", "--steps", "20", "--hidden", "16", "--batch", "32", "--log-every", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 5);
    let ckpt = dir.path().join("checkpoint");
    let o = hdfm(dir.path(), &["sample", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(), "--n-samples", "5", "--steps", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("samples.hdt")).unwrap();
    assert_eq!(&bytes[..6], b"HDT1\x01\x02");
    assert_eq!(bytes.len(), 6 + 8 + 5 * 2 * 8);
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 10);

    let missing = hdfm(dir.path(), &["sample", "--seed", "3", "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn oracle_sampling_writes_images_and_rejects_bad_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let x: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64 / 32.0) - 1.0).collect();
    let oracle = dir.path().join("x.hdt");
    write_hdt(&oracle, &[1, 8, 8], &x);
    let o = hdfm(dir.path(), &["sample", "--seed", "0", "--oracle", oracle.to_str().unwrap(), "--path", "pure_blur", "--steps", "256"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("sample_000.pgm").exists());
    let bytes = std::fs::read(dir.path().join("samples.hdt")).unwrap();
    let got: Vec<f64> = bytes[6 + 12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let err: f64 = got.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err < 1e-2, "{err}");

    let broken = dir.path().join("broken.hdt");
    std::fs::write(&broken, b"HDT2\x01\x01\x04\x00\x00\x00").unwrap();
    let o = hdfm(dir.path(), &["sample", "--seed", "0", "--oracle", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    write_hdt(&broken, &[2, 3], &[0.0; 5]);
    assert_eq!(hdfm(dir.path(), &["sample", "--seed", "0", "--oracle", broken.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn traj_is_reproducible_and_tracks_full_states() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = hdfm(d.path(), &["traj", "--seed", "9", "--particles", "10"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path| std::fs::read(d.join("straightness.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let o = hdfm(a.path(), &["traj", "--seed", "9", "--particles", "10", "--track", "0,1,2"]);
    assert_eq!(o.status.code(), Some(2));
}
