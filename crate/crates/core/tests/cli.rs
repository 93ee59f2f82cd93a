use std::path::Path;
use std::process::{Command, Output};

fn georbf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_georbf"))
        .current_dir(dir)
        .env_remove("GEORBF_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field_of(out: &str, key: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no '{key}' in:\n{out}"));
    line[key.len()..].trim_start_matches(':').trim().parse().unwrap()
}

fn genmesh(dir: &Path, args: &[&str]) -> String {
    let o = georbf(dir, &[&["genmesh"], args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
}

#[test]
fn genmesh_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = genmesh(dir.path(), &["ring", "--n-theta", "12", "--element", "hex", "-o", "r.vtk"]);
    assert!(out.contains("elements: 12 (hex)"), "{out}");
    assert!(dir.path().join("r.vtk").exists());
    let (lo, avg, hi) = (field_of(&out, "h_min"), field_of(&out, "h_avg"), field_of(&out, "h_max"));
    assert!(0.0 < lo && lo <= avg && avg <= hi);
}

#[test]
fn tet_split_has_six_elements_per_hex() {
    let dir = tempfile::tempdir().unwrap();
    for shape in [&["ring", "--n-theta", "10", "--n-section", "2"][..], &["sheet"][..]] {
        let hex = genmesh(dir.path(), &[shape, &["--element", "hex", "-o", "h.vtk"]].concat());
        let tet = genmesh(dir.path(), &[shape, &["--element", "tet", "-o", "t.vtk"]].concat());
        let count = |s: &str| s.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap();
        assert_eq!(count(&tet), 6 * count(&hex));
    }
}

#[test]
fn bad_slit_angle_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = georbf(dir.path(), &["genmesh", "ring", "--slit-angle", "7", "-o", "r.vtk"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--slit-angle"));
}

fn meshes(dir: &Path) {
    genmesh(dir, &["ring", "--n-theta", "16", "-o", "src.vtk"]);
    genmesh(dir, &["ring", "--n-theta", "48", "--n-section", "3", "--element", "hex", "-o", "dst.vtk"]);
}

#[test]
fn constant_field_is_reproduced() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    let o = georbf(
        dir.path(),
        &["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "constant:3.7", "-o", "out.csv", "--vtk", "out.vtk"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(field_of(&stdout(&o), "e_inf") <= 1e-8);
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert!(csv.starts_with("id,x,y,z,value\n"));
    assert!(dir.path().join("out.vtk").exists());
}

#[test]
fn geodesic_thresholding_helps_on_a_coarse_ring() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    let run = |geo: &str| {
        let o = georbf(
            dir.path(),
            &["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "atan2zn", "--geodesic", geo, "-o", "o.csv"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        field_of(&stdout(&o), "e_inf")
    };
    assert!(run("on") < run("off"));
}

#[test]
fn distributed_interpolation_matches_serial_output() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    let base = ["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "atan2zn"];
    let o = georbf(dir.path(), &[&base[..], &["-o", "a.csv"]].concat());
    assert!(o.status.success());
    let o = georbf(dir.path(), &[&base[..], &["-o", "b.csv", "--ranks", "3", "--partition", "block"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ranks: 3"));
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
}

#[test]
fn csv_field_with_wrong_length_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    std::fs::write(dir.path().join("f.csv"), "id,value\n0,1.0\n1,2.0\n").unwrap();
    let o = georbf(dir.path(), &["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "csv:f.csv", "-o", "o.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expected"));
}

#[test]
fn csv_field_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    // output of a same-mesh transfer is a valid source field
    let o = georbf(dir.path(), &["interpolate", "--src", "src.vtk", "--dst", "src.vtk", "--field", "linear:1,2,3,4", "-o", "f.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = georbf(dir.path(), &["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "csv:f.csv", "-o", "o.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("e_inf"));
}

#[test]
fn invalid_kernel_parameter_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    let o = georbf(dir.path(), &["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "atan2zn", "--alpha", "0.5", "-o", "o.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_mesh_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = georbf(dir.path(), &["interpolate", "--src", "nope.vtk", "--dst", "nope.vtk", "--field", "atan2zn", "-o", "o.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_single_thread_speedup_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = georbf(
        dir.path(),
        &["bench", "--n-theta", "12", "--n-section", "1", "--dst-n-theta", "16", "--dst-n-section", "1", "-o", "b.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threads_or_ranks,stage,wall_time,speedup"));
    let mut stages = 0;
    for l in lines {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], "1");
        assert_eq!(cols[3].parse::<f64>().unwrap(), 1.0);
        stages += 1;
    }
    assert!(stages >= 5);
}

#[test]
fn bench_writes_comm_stats_for_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let o = georbf(
        dir.path(),
        &[
            "bench", "--n-theta", "12", "--n-section", "1", "--dst-n-theta", "16", "--dst-n-section", "1", "--ranks", "1,2",
            "-o", "b.csv", "--comm-output", "c.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let comm = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(comm.contains("points_sent"));
    let bench = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(bench.contains("dist_assembly"));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    meshes(dir.path());
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_georbf"))
            .current_dir(dir.path())
            .env("GEORBF_THREADS", threads)
            .args(["interpolate", "--src", "src.vtk", "--dst", "dst.vtk", "--field", "atan2zn", "-o", out])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run("1", "t1.csv");
    run("3", "t3.csv");
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("t1.csv"), read("t3.csv"));
    let o = Command::new(env!("CARGO_BIN_EXE_georbf"))
        .current_dir(dir.path())
        .env("GEORBF_THREADS", "zero")
        .args(["genmesh", "ring", "-o", "r.vtk"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn convergence_table_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["convergence", "--levels", "8:1,12:1,16:1", "--dst", "24:2"];
    for out in ["a.csv", "b.csv"] {
        let o = georbf(dir.path(), &[&args[..], &["-o", out]].concat());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert!(a.starts_with("m,alpha,level,h_max_src,e_inf_geo,e_inf_euclid,slope\n"));
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn too_few_convergence_levels_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = georbf(dir.path(), &["convergence", "--levels", "8:1,12:1", "--dst", "24:2", "-o", "c.csv"]);
    assert_eq!(o.status.code(), Some(1));
}
