use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtvsr::io::{read_volume, write_volume};
use mtvsr::RunReport;

fn mtvsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtvsr")).args(args).env("MTVSR_LOG", "warn").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "-o", s(&out), "--dims", "24", "--seed", "3"];
    args.extend_from_slice(extra);
    let o = mtvsr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = simulate(a.path(), &["--thickness", "4"]);
    let pb = simulate(b.path(), &["--thickness", "4"]);
    for f in ["t1.nii", "t2.nii", "truth_t1.nii", "manifest.json"] {
        assert_eq!(fs::read(pa.join(f)).unwrap(), fs::read(pb.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_volume(pa.join("t1.nii")).unwrap().dims(), [24, 24, 6]);
}

#[test]
fn strict_rejects_out_of_range_thickness() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("sim");
    let o = mtvsr(&["simulate", "-o", s(&out), "--dims", "24", "--thickness", "9", "--strict"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside [2, 8]"));
    let o = mtvsr(&["simulate", "-o", s(&out), "--dims", "24", "--thickness", "9"]);
    assert!(o.status.success());
}

#[test]
fn superres_three_channels_on_union_grid() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--channels", "3", "--thickness", "3"]);
    let out = d.path().join("out");
    let chans: Vec<String> = ["t1", "t2", "pd"].iter().map(|c| format!("{c}={}", s(&sim.join(format!("{c}.nii"))))).collect();
    let mut args = vec!["superres", "-o", s(&out)];
    for c in &chans {
        args.extend_from_slice(&["--channel", c]);
    }
    let o = mtvsr(&args);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let inputs: Vec<_> = ["t1", "t2", "pd"].iter().map(|c| read_volume(sim.join(format!("{c}.nii"))).unwrap()).collect();
    let union = inputs.iter().skip(1).fold(inputs[0].world_bounds(), |b, v| b.union(&v.world_bounds()));
    for c in ["t1", "t2", "pd"] {
        let v = read_volume(out.join(format!("{c}.nii"))).unwrap();
        assert_eq!(v.grid().voxel_size(), [1.0; 3]);
        assert!(v.world_bounds().contains(&union, 1e-6));
        assert!(v.data().iter().all(|x| x.is_finite()));
    }
    let r = RunReport::read(out.join("report.json")).unwrap();
    assert_eq!(r.channels.len(), 3);
    assert_eq!(r.objective_trace.unwrap().len(), r.iterations + 1);
}

#[test]
fn bs_has_no_trace() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--thickness", "4"]);
    let out = d.path().join("bs");
    let t1 = format!("t1={}", s(&sim.join("t1.nii")));
    let o = mtvsr(&["superres", "--method", "bs", "--channel", &t1, "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = RunReport::read(out.join("report.json")).unwrap();
    assert_eq!(r.method, "bs");
    assert!(r.objective_trace.is_none());
    assert_eq!(r.iterations, 0);
}

#[test]
fn missing_input_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let o = mtvsr(&["superres", "--channel", "t1=/no/such/file.nii", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.nii"));
    let r = RunReport::read(out.join("report.json")).unwrap();
    assert!(r.notes[0].contains("/no/such/file.nii"));
}

#[test]
fn max_iter_exit_code_still_writes_outputs() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--thickness", "4"]);
    let out = d.path().join("o");
    let t1 = format!("t1={}", s(&sim.join("t1.nii")));
    let o = mtvsr(&["superres", "--channel", &t1, "--max-iter", "1", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("t1.nii").exists());
    let r = RunReport::read(out.join("report.json")).unwrap();
    assert!(!r.converged);
    assert_eq!(r.objective_trace.unwrap().len(), 2);
}

#[test]
fn single_thread_runs_are_bit_identical() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--thickness", "4"]);
    let t1 = format!("t1={}", s(&sim.join("t1.nii")));
    let t2 = format!("t2={}", s(&sim.join("t2.nii")));
    let run = |name: &str| {
        let out = d.path().join(name);
        let o = mtvsr(&["superres", "--channel", &t1, "--channel", &t2, "--threads", "1", "-o", s(&out)]);
        assert!(matches!(o.status.code(), Some(0) | Some(2)));
        (fs::read(out.join("t1.nii")).unwrap(), fs::read(out.join("t2.nii")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn denoise_keeps_grid_and_rejects_mismatch() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--thickness", "4"]);
    let truth = read_volume(sim.join("truth_t1.nii")).unwrap();
    let out = d.path().join("dn");
    let clean = format!("t1={}", s(&sim.join("truth_t1.nii")));
    let o = mtvsr(&["denoise", "--channel", &clean, "--lambda", "t1=1e-6", "--tau", "t1=1", "-o", s(&out)]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_volume(out.join("t1.nii")).unwrap();
    assert_eq!(v.dims(), truth.dims());
    let num: f64 = v.data().iter().zip(truth.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    let den: f64 = truth.data().iter().map(|b| (*b as f64).powi(2)).sum();
    assert!((num / den).sqrt() < 0.01);

    let lr = format!("t2={}", s(&sim.join("t2.nii")));
    let o = mtvsr(&["denoise", "--channel", &clean, "--channel", &lr, "-o", s(&d.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_metric_rows_per_method_and_channel() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("bench");
    let o = mtvsr(&["bench", "-o", s(&out), "--dims", "20", "--thickness", "4", "--max-iter", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let rows: Vec<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[1].to_string(), r[2].to_string())
        })
        .collect();
    let mut want = vec![];
    for m in ["bs", "fot", "tv", "mtv"] {
        for c in ["t1", "t2"] {
            want.push((m.to_string(), c.to_string()));
        }
    }
    assert_eq!(rows, want);
    let traces = fs::read_to_string(out.join("traces.csv")).unwrap();
    assert!(traces.contains("mtv/multigrid") && traces.contains("mtv/cg"));
}

#[test]
fn raw_format_inputs_are_accepted() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &["--thickness", "4"]);
    let raw = d.path().join("t1.rawvol.json");
    write_volume(&read_volume(sim.join("t1.nii")).unwrap(), &raw).unwrap();
    let out = d.path().join("o");
    let arg = format!("t1={}", s(&raw));
    let o = mtvsr(&["superres", "--method", "bs", "--channel", &arg, "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
