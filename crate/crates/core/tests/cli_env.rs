//! Kept in its own binary: it sets `VICP_SEED`, which every other CLI test reads.

use std::path::Path;

use serde_json::Value;
use vicp::pipeline::{TrainConfig, Variant};

fn vicp(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("vicp").chain(args.iter().copied());
    let code = vicp::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn seed_flag_wins_over_environment_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = TrainConfig::smoke();
    c.variant = Variant::Full;
    let cfg = s(&tmp.path().join("c.toml"));
    std::fs::write(&cfg, c.to_toml()).unwrap();
    let gen = |name: &str, extra: &[&str]| {
        let out = s(&tmp.path().join(name));
        let mut args = vec!["gen", "--config", cfg.as_str(), "--out", out.as_str()];
        args.extend_from_slice(extra);
        let (code, stdout, err) = vicp(&args);
        assert_eq!(code, 0, "{err}");
        serde_json::from_str::<Value>(stdout.trim()).unwrap()["fingerprint"].clone()
    };
    let file = gen("file", &[]);
    let flag7 = gen("flag7", &["--seed", "7"]);
    assert_ne!(file, flag7);
    std::env::set_var(vicp::pipeline::SEED_ENV, "7");
    let env7 = gen("env7", &[]);
    let both = gen("both", &["--seed", "9"]);
    std::env::set_var(vicp::pipeline::SEED_ENV, "not-a-number");
    let (code, _, err) = vicp(&["gen", "--config", &cfg, "--out", &s(&tmp.path().join("bad"))]);
    std::env::remove_var(vicp::pipeline::SEED_ENV);
    assert_eq!(env7, flag7);
    assert_eq!(both, gen("flag9", &["--seed", "9"]));
    assert_eq!(code, 1);
    let line: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["error"]["kind"], "config");
}
