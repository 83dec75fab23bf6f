use std::path::Path;
use std::process::{Command, Output};

use sparsemac::compress::decompress_tensor;
use sparsemac::experiment::{layer_speedup, synth_layer};
use sparsemac::pe::PeConfig;
use sparsemac::tensor::{layout_groups, sparsity_stats, Tensor4};
use sparsemac::tile::TileConfig;
use sparsemac::trace::{read_trace, write_trace, Payload, TraceFile, TraceRecord};
use sparsemac::trainops::{ConvShape, OpKind};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsemac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Data rows as columns, header and comments dropped.
fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(csv: &str) -> Vec<&str> {
    csv.lines().find(|l| !l.starts_with('#')).unwrap().split(',').collect()
}

fn col(csv: &str, name: &str) -> Vec<f64> {
    let i = header(csv).iter().position(|h| *h == name).unwrap();
    rows(csv).iter().map(|r| r[i].parse().unwrap()).collect()
}

const SMALL: &str = "s=0.5,dims=1,32,8,8";

#[test]
fn half_sparse_speedup_is_capped() {
    let out = ok(&["simulate", "--synthetic", SMALL]);
    assert!(out.starts_with("# rows = 4\n"));
    assert_eq!(
        header(&out),
        [
            "layer",
            "op",
            "dense_cycles",
            "sparse_cycles",
            "speedup",
            "effectual_fraction",
            "energy_dense",
            "energy_sparse",
            "energy_efficiency",
            "side",
            "bypass"
        ]
    );
    let s = col(&out, "speedup");
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|v| (1.0..=3.0).contains(v)), "{s:?}");
}

#[test]
fn dense_mode_is_unit_speedup() {
    let out = ok(&["simulate", "--synthetic", SMALL, "--mode", "dense"]);
    assert!(rows(&out).iter().all(|r| r[4] == "1.000000" && r[8] == "1.000000"));
}

#[test]
fn sweep_matches_layer_speedup() {
    let out = ok(&["sweep", "--synthetic", "dims=1,32,6,6", "--seed", "7"]);
    let r = rows(&out);
    assert_eq!(r.len(), 9);
    let shape = ConvShape::conv(32, 6, 6, 32, (3, 3), 1, 0).unwrap();
    for (row, s) in r.iter().zip(sparsemac::experiment::SPARSITY_LEVELS) {
        let (d, sp) = layer_speedup(&shape, s, 7, &TileConfig::default(), &OpKind::ALL).unwrap();
        assert_eq!(row[0], format!("{s:.1}"));
        assert_eq!((row[1].parse::<u64>().unwrap(), row[2].parse::<u64>().unwrap()), (d, sp));
    }
    let s = col(&out, "speedup");
    assert!(s[8] > s[0]);
}

#[test]
fn output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let args = ["simulate", "--synthetic", SMALL, "--seed", "3", "--op", "wgrad"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let mut with_out = args.to_vec();
    with_out.extend(["--out", path.to_str().unwrap()]);
    assert_eq!(ok(&with_out), "");
    let written = std::fs::read_to_string(&path).unwrap();
    // only the echoed out path differs
    assert_eq!(rows(&written), rows(&a));
    assert_ne!(a, ok(&["simulate", "--synthetic", SMALL, "--seed", "4", "--op", "wgrad"]));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# geometry\nrows = 8\ncols = 2\nop = fwd\nsynthetic = s=0.7,dims=1,16,5,5\nfilters = 4\n").unwrap();
    let out = ok(&["simulate", "--config", cfg.to_str().unwrap(), "--rows", "2"]);
    assert!(out.contains("# rows = 2\n") && out.contains("# cols = 2\n"));
    assert!(out.contains("# synthetic = s=0.7,dims=1,16,5,5\n"));
    assert_eq!(rows(&out).len(), 1);
    std::fs::write(&cfg, "rows = many\n").unwrap();
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

fn write_layer(path: &Path) -> (Tensor4, Tensor4, Tensor4) {
    let shape = ConvShape::conv(16, 7, 7, 8, (3, 3), 2, 1).unwrap();
    let (a, w, g) = synth_layer(&shape, 2, 0.6, 11).unwrap();
    let rec = |t: &Tensor4, name: &str| TraceRecord {
        name: name.into(),
        layer_id: 5,
        epoch_id: 2,
        stride: 2,
        kernel: (3, 3),
        payload: Payload::Tensor(t.clone()),
    };
    let file = TraceFile {
        records: vec![rec(&a, "conv2.A"), rec(&w, "conv2.W"), rec(&g, "conv2.G")],
    };
    write_trace(path, &file).unwrap();
    (a, w, g)
}

#[test]
fn trace_driven_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tdtr");
    let (a, w, g) = write_layer(&path);
    let p = path.to_str().unwrap();
    let sim = ok(&["simulate", "--trace", p]);
    let r = rows(&sim);
    assert_eq!(r.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["fwd", "igrad", "wgrad"]);
    assert!(r.iter().all(|r| r[0] == "conv2:L5e2"));

    let an = ok(&["analyze", "--trace", p]);
    let want: Vec<f64> = [&a, &w, &g].iter().map(|t| sparsity_stats(t).fraction()).collect();
    let got = col(&an, "zero_fraction");
    assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-6));
}

#[test]
fn compress_emits_scheduled_groups() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tdtr");
    let emit = dir.path().join("c.tdtr");
    let (a, w, g) = write_layer(&path);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, format!("emit = {}\nalloc = slotted\n", emit.display())).unwrap();
    let out = ok(&["compress", "--config", cfg.to_str().unwrap(), "--trace", path.to_str().unwrap()]);
    assert_eq!(rows(&out).len(), 3);
    let back = read_trace(&emit).unwrap();
    let (map, _) = PeConfig::default().default_map().unwrap();
    let mut recs = back.records.iter();
    for t in [&a, &w, &g] {
        let n = layout_groups(t).groups.len();
        let ids: Vec<_> = layout_groups(t).groups.iter().map(|(id, _)| *id).collect();
        let groups: Vec<_> = recs
            .by_ref()
            .take(n)
            .zip(ids)
            .map(|(r, id)| match &r.payload {
                Payload::Scheduled(sg) => (id, sg.clone()),
                Payload::Tensor(_) => panic!("expected a scheduled group"),
            })
            .collect();
        assert!(decompress_tensor(&groups, t, &map).unwrap().bits_eq(t));
    }
}

#[test]
fn malformed_traces_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.tdtr");
    write_layer(&good);
    let bytes = std::fs::read(&good).unwrap();
    let cases: Vec<Vec<u8>> = vec![
        Vec::new(),
        b"not a trace at all".to_vec(),
        bytes[..bytes.len() / 2].to_vec(),
        {
            let mut b = bytes.clone();
            b[4] = 9;
            b
        },
    ];
    for (i, case) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.tdtr"));
        std::fs::write(&p, case).unwrap();
        for cmd in ["simulate", "analyze", "compress"] {
            let o = run(&[cmd, "--trace", p.to_str().unwrap()]);
            let err = String::from_utf8_lossy(&o.stderr);
            assert_eq!(o.status.code(), Some(2), "{cmd} case {i}");
            assert!(err.starts_with("error:") && !err.contains("panicked"), "{err}");
        }
    }
    assert_eq!(run(&["simulate", "--trace", "/nonexistent.tdtr"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--synthetic", "s=2"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--trace", good.to_str().unwrap()]).status.code(), Some(2));
}
