//! End-to-end tests of the `drivesim` binary: exit codes, file outputs, and
//! flag handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drivesim"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("drivesim-cli-tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn synth(dir: &Path, kind: &str, scenes: usize, seed: u64) {
    let out = run(&[
        "synth",
        "--kind",
        kind,
        "--scenes",
        &scenes.to_string(),
        "--out-dir",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_exit(&out, 0);
}

#[test]
fn fit_kinematics_on_synthetic_straight_data() {
    let dir = workdir("fit-straight");
    synth(&dir, "straight", 3, 11);
    let fit_csv = dir.join("fit.csv");
    let out = run(&[
        "fit-kinematics",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
        "--out",
        fit_csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let table = std::fs::read_to_string(&fit_csv).unwrap();
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let loss: f64 = fields[2].parse().unwrap();
        assert!(loss < 1e-9, "fit loss {loss}");
        rows += 1;
    }
    assert!(rows >= 3);
}

#[test]
fn missing_tracks_file_exits_2() {
    let out = run(&[
        "fit-kinematics",
        "--tracks",
        "/nonexistent/tracks.csv",
        "--out",
        "/tmp/unused.csv",
    ]);
    assert_exit(&out, 2);
}

#[test]
fn zero_dt_flag_exits_2() {
    let dir = workdir("fit-dt");
    synth(&dir, "straight", 1, 1);
    let out = run(&[
        "fit-kinematics",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
        "--dt",
        "0",
        "--out",
        "/tmp/unused.csv",
    ]);
    assert_exit(&out, 2);
}

fn decode_png(path: &Path) -> (u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, buf)
}

#[test]
fn render_single_agent_centered_red_box() {
    let dir = workdir("render-one");
    // one stationary car at the origin, no map
    let csv = "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width\n\
               1,0,0,car,0.0,0.0,0.0,0.0,0.0,4.0,2.0\n";
    std::fs::write(dir.join("tracks.csv"), csv).unwrap();
    let png_path = dir.join("frame.png");
    let out = run(&[
        "render",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
        "--frame",
        "0",
        "--ego",
        "1",
        "--resolution",
        "64",
        "--extent",
        "20",
        "--out",
        png_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let (w, rgb) = decode_png(&png_path);
    assert_eq!(w, 64);
    // center pixel shows the ego palette color, corner shows background
    let center = ((32 * 64 + 32) * 3) as usize;
    assert_eq!(rgb[center], 255);
    assert!(rgb[center + 1] < 120, "green {}", rgb[center + 1]);
    assert!(rgb[center + 2] < 120, "blue {}", rgb[center + 2]);
    assert_eq!(&rgb[0..3], &[255, 255, 255]);
}

#[test]
fn render_ego_absent_at_frame_exits_2() {
    let dir = workdir("render-absent");
    synth(&dir, "straight", 1, 2);
    let out = run(&[
        "render",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
        "--frame",
        "9999",
        "--ego",
        "1",
        "--out",
        dir.join("x.png").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn soft_and_hard_render_agree_away_from_edges_at_tiny_sigma() {
    let dir = workdir("render-converge");
    synth(&dir, "straight", 1, 3);
    let tracks_path = dir.join("tracks.csv");
    let map_path = dir.join("map.txt");
    let common = [
        "render",
        "--tracks",
        tracks_path.to_str().unwrap(),
        "--map",
        map_path.to_str().unwrap(),
        "--frame",
        "1",
        "--ego",
        "1",
        "--resolution",
        "96",
        "--sigma-blend",
        "1e-6",
        "--gamma-blend",
        "1e-4",
    ];
    let soft_path = dir.join("soft.png");
    let hard_path = dir.join("hard.png");
    let out = run(&[&common[..], &["--out", soft_path.to_str().unwrap()]].concat());
    assert_exit(&out, 0);
    let out = run(&[
        &common[..],
        &["--hard", "--out", hard_path.to_str().unwrap()],
    ]
    .concat());
    assert_exit(&out, 0);
    let (_, soft) = decode_png(&soft_path);
    let (_, hard) = decode_png(&hard_path);
    // identical except a thin band near edges (the coverage window spans
    // under a pixel at these temperatures): count disagreeing pixels
    let mut diff = 0usize;
    for (a, b) in soft.chunks(3).zip(hard.chunks(3)) {
        if a != b {
            diff += 1;
        }
    }
    let total = soft.len() / 3;
    assert!(
        diff * 25 < total,
        "{diff} of {total} pixels differ between soft and hard"
    );
}

#[test]
fn render_output_bytes_are_deterministic() {
    let dir = workdir("render-determinism");
    synth(&dir, "fork", 1, 4);
    let mk = |name: &str| {
        let path = dir.join(name);
        let out = run(&[
            "render",
            "--tracks",
            dir.join("tracks.csv").to_str().unwrap(),
            "--map",
            dir.join("map.txt").to_str().unwrap(),
            "--frame",
            "5",
            "--ego",
            "1",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        std::fs::read(path).unwrap()
    };
    assert_eq!(mk("a.png"), mk("b.png"));
}

#[test]
fn evaluate_ground_truth_fixture_scores_zero() {
    let dir = workdir("evaluate-gt");
    synth(&dir, "straight", 2, 6);
    // build a rollouts file whose predictions equal the recorded future
    let tracks = std::fs::read_to_string(dir.join("tracks.csv")).unwrap();
    let mut rows = String::from("# drivesim-rollouts v1 seed=0 mode=fixture model=0 k=1\n");
    rows.push_str("scene_id,sample_k,agent_id,t,x,y,psi,v\n");
    for line in tracks.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let frame: usize = f[1].parse().unwrap();
        let scene_id = frame / 40;
        let t = frame % 40;
        if t >= 10 {
            rows.push_str(&format!(
                "{},0,{},{},{},{},{},{}\n",
                scene_id,
                f[0],
                t,
                f[4],
                f[5],
                f[8],
                (f[6]
                    .parse::<f64>()
                    .unwrap()
                    .hypot(f[7].parse::<f64>().unwrap()))
            ));
        }
    }
    let rollouts = dir.join("gt_rollouts.csv");
    std::fs::write(&rollouts, rows).unwrap();
    let out = run(&[
        "evaluate",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
        "--rollouts",
        rollouts.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for line in stdout.lines() {
        let value: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert_eq!(value, 0.0, "line `{line}`");
    }
}

#[test]
fn evaluate_requires_a_source() {
    let dir = workdir("evaluate-none");
    synth(&dir, "straight", 1, 7);
    let out = run(&[
        "evaluate",
        "--tracks",
        dir.join("tracks.csv").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn gradcheck_kinematics_passes() {
    let out = run(&["gradcheck", "--suite", "kinematics", "--points", "20"]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("kinematics"), "{stdout}");
    assert!(stdout.contains("ok"), "{stdout}");
}

#[test]
fn help_documents_every_flag() {
    // every long flag declared by a subcommand must appear in its help text
    for (sub, flags) in [
        ("fit-kinematics", vec!["--tracks", "--dt", "--out"]),
        (
            "render",
            vec![
                "--tracks",
                "--map",
                "--frame",
                "--ego",
                "--out",
                "--hard",
                "--resolution",
                "--extent",
                "--sigma-blend",
                "--gamma-blend",
            ],
        ),
        ("synth", vec!["--kind", "--scenes", "--out-dir"]),
        (
            "train",
            vec![
                "--tracks",
                "--map",
                "--out",
                "--epochs",
                "--batch-size",
                "--learning-rate",
                "--clip-norm",
                "--mode",
                "--kinematic-mode",
                "--model-scale",
                "--t-obs",
                "--horizon",
                "--stride",
            ],
        ),
        (
            "rollout",
            vec![
                "--tracks",
                "--map",
                "--model",
                "--k",
                "--out",
                "--mode",
                "--noise-on-states",
            ],
        ),
        (
            "evaluate",
            vec![
                "--tracks",
                "--map",
                "--model",
                "--rollouts",
                "--k",
                "--out",
                "--ade-form",
            ],
        ),
        ("gradcheck", vec!["--suite", "--points"]),
    ] {
        let out = run(&[sub, "--help"]);
        assert_exit(&out, 0);
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{sub} help is missing {flag}\n{text}");
        }
        // globals appear everywhere
        for flag in ["--seed", "--threads", "--log-level", "--config"] {
            assert!(text.contains(flag), "{sub} help is missing {flag}");
        }
    }
}

#[test]
fn config_file_fills_defaults_but_flags_win() {
    let dir = workdir("config");
    let config = dir.join("drivesim.conf");
    std::fs::write(&config, "scenes = 3\nkind = straight\nseed = 9\n").unwrap();
    // --scenes on the command line beats the config; kind/seed come from it
    let out_dir = dir.join("out");
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--scenes",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let tracks = std::fs::read_to_string(out_dir.join("tracks.csv")).unwrap();
    let max_frame: u64 = tracks
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .max()
        .unwrap();
    // 2 scenes x 40 frames: frames go up to 79
    assert_eq!(max_frame, 79);

    // config seed must match an explicit --seed 9 run
    let out_dir2 = dir.join("out2");
    let out = run(&[
        "synth",
        "--kind",
        "straight",
        "--scenes",
        "2",
        "--seed",
        "9",
        "--out-dir",
        out_dir2.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert_eq!(
        std::fs::read(out_dir.join("tracks.csv")).unwrap(),
        std::fs::read(out_dir2.join("tracks.csv")).unwrap()
    );
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["synth", "--kind", "straight", "--no-such-flag"]);
    assert_exit(&out, 2);
}
