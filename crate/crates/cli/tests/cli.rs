mod common;

use common::{bin, run, s, stdout, write_audio};
use streamdiff::formats::read_javl;
use streamdiff::RunConfig;

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn missing_audio_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.javl");
    let events = dir.path().join("ev.jsonl");
    let missing = dir.path().join("nope.jaaf");
    let o = run(&["generate", "--audio", s(&missing), "--out", s(&out), "--events", s(&events), "--blocks", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists() && !events.exists());
}

#[test]
fn truncated_audio_is_a_format_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let audio = write_audio(dir.path(), "a.jaaf", 30, 32, 1);
    let mut bytes = std::fs::read(&audio).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&audio, bytes).unwrap();
    let out = dir.path().join("out.javl");
    let o = run(&["generate", "--audio", s(&audio), "--out", s(&out), "--blocks", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
    assert!(!out.exists());
}

#[test]
fn short_audio_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let audio = write_audio(dir.path(), "a.jaaf", 9, 32, 1);
    let out = dir.path().join("out.javl");
    let o = run(&["generate", "--audio", s(&audio), "--out", s(&out), "--blocks", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn generate_writes_stream_and_ordered_events() {
    let dir = tempfile::tempdir().unwrap();
    let audio = write_audio(dir.path(), "a.jaaf", 30, 32, 2);
    let out = dir.path().join("out.javl");
    let events = dir.path().join("ev.jsonl");
    let o = run(&["generate", "--audio", s(&audio), "--out", s(&out), "--events", s(&events), "--blocks", "10", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, data) = read_javl(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!((header.channels, header.height, header.width, header.frames_per_block), (8, 4, 4, 3));
    assert_eq!(data.len(), 30 * header.frame_len());

    let rank = |k: &str| ["admitted", "denoised", "emitted", "evicted", "reset"].iter().position(|x| *x == k).unwrap();
    let mut last = (0u64, 0usize);
    let mut emitted = Vec::new();
    for line in std::fs::read_to_string(&events).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let key = (v["pass"].as_u64().unwrap(), rank(v["kind"].as_str().unwrap()));
        assert!(key >= last, "events out of order at {line}");
        last = key;
        if v["kind"] == "emitted" {
            emitted.push((v["ordinal"].as_u64().unwrap(), v["pass"].as_u64().unwrap()));
        }
    }
    let want: Vec<(u64, u64)> = (1..=10).map(|o| (o, o + 7)).collect();
    assert_eq!(emitted, want);
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("in.cfg");
    std::fs::write(&cfg, "# run\nseed = 8\nreset_threshold = 50\nwidth = 32\n").unwrap();
    let o = run(&["--config", s(&cfg), "--dump-config"]);
    assert!(o.status.success());
    let dumped = stdout(&o);
    let parsed = RunConfig::parse(&dumped).unwrap();
    assert_eq!(parsed, RunConfig::load(&cfg).unwrap());
    let again = dir.path().join("again.cfg");
    std::fs::write(&again, &dumped).unwrap();
    let o2 = run(&["generate", "--config", s(&again), "--seed", "9", "--dump-config"]);
    assert!(stdout(&o2).contains("seed = 9"));
}

#[test]
fn bad_config_is_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sink_frames = 5\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "--dump-config"]).status.code(), Some(1));
}

fn small_cfg(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, "channels = 2\ngrid_h = 2\ngrid_w = 2\nwidth = 16\nheads = 2\nlayers = 1\naudio_dim = 4\nidentity_dim = 4\n").unwrap();
    p
}

#[test]
fn bench_scales_linearly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let report = |blocks: &str| -> serde_json::Value {
        let o = run(&["bench", "--config", s(&cfg), "--blocks", blocks]);
        assert!(o.status.success());
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let zero = report("0");
    assert_eq!(zero["forwards"], 0);
    assert_eq!(zero["frames_emitted"], 0);
    let a = report("100");
    let b = report("200");
    let (fa, fb) = (a["forwards"].as_i64().unwrap(), b["forwards"].as_i64().unwrap());
    assert!((fb - fa - 100).abs() <= 1, "{fa} vs {fb}");
    assert_eq!(b["cache_frames"], 15);
    assert_eq!(b["cache_constant_after_fill"], true);
}

#[test]
fn cache_dump_lists_sink_and_recent_frames() {
    let o = run(&["cache-dump", "--blocks", "8", "--seed", "2"]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 15);
    let ids: Vec<u64> = lines.iter().map(|v| v["frame_id"].as_u64().unwrap()).collect();
    let want: Vec<u64> = (0..3).chain(12..24).collect();
    assert_eq!(ids, want);
    assert!(lines[..3].iter().all(|v| v["is_sink"] == true));
    assert!(lines[3..].iter().all(|v| v["is_sink"] == false));
}

#[test]
fn checkpoint_reproduces_seeded_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let audio = write_audio(dir.path(), "a.jaaf", 18, 32, 4);
    let ckpt = dir.path().join("p.jadn");
    assert!(run(&["init-params", "--seed", "5", "--out", s(&ckpt)]).status.success());
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, format!("checkpoint = {}\n", ckpt.display())).unwrap();
    let a = dir.path().join("a.javl");
    let b = dir.path().join("b.javl");
    let args = |out: &std::path::Path| vec!["generate".to_string(), "--audio".into(), s(&audio).into(), "--seed".into(), "5".into(), "--blocks".into(), "6".into(), "--out".into(), s(out).into()];
    assert!(bin().args(args(&a)).status().unwrap().success());
    assert!(bin().args(args(&b)).args(["--config", s(&cfg)]).status().unwrap().success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn distill_toy_writes_report_and_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = run(&["distill-toy", "--iters", "1000", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["generator_updates"], 1000);
    assert_eq!(v["fake_updates"], 200);
    assert!(v["kl_final"].as_f64().unwrap() <= 0.5 * v["kl_initial"].as_f64().unwrap());
    let kl = std::fs::read_to_string(dir.path().join("report_kl.csv")).unwrap();
    assert!(kl.starts_with("iteration,kl\n0,"));
    let scatter = std::fs::read_to_string(dir.path().join("report_samples.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 2001);
}

#[test]
fn verify_rejects_unknown_suite_and_passes_a_real_one() {
    assert_eq!(run(&["verify", "nonsense"]).status.code(), Some(1));
    let o = run(&["verify", "schedule"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("PASS schedule"));
}

#[test]
fn verify_all_passes() {
    let o = run(&["verify", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), streamdiff::verify::SUITES.len());
}
