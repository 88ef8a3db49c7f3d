use std::path::Path;
use std::process::Command;

use mdm_tensor::{Rng, Tape, Tensor};
use mdm_video::ablation::{eval_clips, run_ablation, train_missing, AblationArm, AblationSpec};
use mdm_video::config::Config;
use mdm_video::denoiser::{ConditionSet, InputVars, LatentShape, MaskedDenoiser};
use mdm_video::flops::flops_estimate;
use mdm_video::metrics::{drift_curve, psnr};
use mdm_video::toyworld::build_corpus;
use proptest::prelude::*;

proptest! {
    #[test]
    fn drift_matches_loop_oracle(seed in any::<u64>(), frames in 1usize..6) {
        let mut rng = Rng::new(seed);
        let g: Vec<Tensor> = (0..frames).map(|_| Tensor::randn(&[1, 4, 4], &mut rng)).collect();
        let o: Vec<Tensor> = (0..frames).map(|_| Tensor::randn(&[1, 4, 4], &mut rng)).collect();
        let d = drift_curve(&g, &o).unwrap();
        for i in 0..frames {
            let mut acc = 0.0f64;
            for k in 0..16 {
                let e = g[i].data()[k] as f64 - o[i].data()[k] as f64;
                acc += e * e;
            }
            prop_assert!((d.mse[i] - acc / 16.0).abs() < 1e-7);
            prop_assert!((d.psnr[i] - 10.0 * (4.0 / (acc / 16.0)).log10()).abs() < 1e-7);
        }
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-6f64..10.0, b in 1e-6f64..10.0) {
        prop_assume!(a < b);
        prop_assert!(psnr(a) > psnr(b));
    }
}

#[test]
fn analytic_macs_match_the_tape_counter() {
    for use_mask in [true, false] {
        let mut arch = Config::default().model;
        arch.use_mask = use_mask;
        let m = MaskedDenoiser::new(&arch, 1000, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let f = |rng: &mut Rng| Tensor::randn(&[1, 16, 16], rng);
        let c = ConditionSet::full(f(&mut rng), f(&mut rng), f(&mut rng), vec![1, 5]);
        let r = m.render(&c).unwrap();
        let b = m.batch(&[f(&mut rng)], &[100], &[r]).unwrap();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let vars = InputVars::bind(&mut tape, &b);
        m.forward(&mut tape, &bound, &b, &vars).unwrap();
        let e = flops_estimate(&arch, 50, 16);
        assert_eq!(
            tape.macs(),
            e.dynamic.total() + e.mask.total(),
            "use_mask={use_mask}"
        );
    }
}

#[test]
fn default_flops_regression() {
    let e = flops_estimate(&Config::default().model, 50, 16);
    assert_eq!(e.per_frame, 4 * 50 * (e.dynamic.total() + e.mask.total()));
    assert_eq!(
        (e.dynamic.total(), e.mask.total()),
        (DYNAMIC_MACS, MASK_MACS)
    );
    assert_eq!(e.per_video, 16 * e.per_frame);
}

const DYNAMIC_MACS: u64 = 6_139_440;
const MASK_MACS: u64 = 1_648_432;

fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.train.steps = 4;
    c.train.batch_size = 2;
    c.sampler.steps = 3;
    c.sampler.clip_x0 = Some(1.5);
    c
}

#[test]
fn ablation_arms_share_everything_but_the_ablated_dimension() {
    let c = tiny_config();
    let shape = LatentShape::of(&c.model);
    let corpus = build_corpus(6, 5, shape, (1.0, 20.0), &Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let clips = eval_clips(2, 3, shape, 9).unwrap();
    let missing = run_ablation(&AblationSpec::NoMask, &c, &corpus, &[0], dir.path(), &clips);
    assert!(matches!(missing, Err(mdm_video::Error::Missing(_))));
    let spec = AblationSpec::NoMask;
    assert_eq!(
        train_missing(&spec, &c, &corpus, &[0, 1], dir.path())
            .unwrap()
            .len(),
        4
    );
    assert!(train_missing(&spec, &c, &corpus, &[0, 1], dir.path())
        .unwrap()
        .is_empty());
    let res = run_ablation(&spec, &c, &corpus, &[0, 1], dir.path(), &clips).unwrap();
    assert_eq!(res.len(), 4);
    assert!(res
        .iter()
        .all(|r| r.corpus_digest == res[0].corpus_digest && r.train_steps == 4));
    assert_eq!(
        res.iter().filter(|r| r.arm == AblationArm::NoMask).count(),
        2
    );
    assert!(res
        .iter()
        .filter(|r| r.arm == AblationArm::NoMask)
        .all(|r| r.mask.is_none()));
    let a = run_ablation(
        &AblationSpec::Full,
        &c,
        &corpus,
        &[0, 1],
        dir.path(),
        &clips,
    )
    .unwrap();
    let b = run_ablation(
        &AblationSpec::Full,
        &c,
        &corpus,
        &[0, 1],
        dir.path(),
        &clips,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a[..],
        res.iter()
            .filter(|r| r.arm == AblationArm::Full)
            .cloned()
            .collect::<Vec<_>>()[..]
    );
}

fn mdm(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mdm"))
        .args(["--out", out.to_str().unwrap(), "--seed", "3"])
        .args([
            "--set",
            "train.steps=3",
            "--set",
            "train.batch_size=2",
            "--set",
            "sampler.steps=3",
        ])
        .args(["--set", "sampler.clip_x0=1.5"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mdm(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(out: &Path) {
    ok(out, &["gen-data", "--clips", "6", "--length", "5"]);
    ok(out, &["train"]);
    ok(
        out,
        &[
            "generate", "--frames", "3", "--oracle", "--prompt", "up fast",
        ],
    );
    ok(out, &["eval-drift"]);
    ok(out, &["mask-stats"]);
    ok(out, &["flops"]);
    let plan = out.join("plan.txt");
    std::fs::write(&plan, "2\tright slow\n2\tleft fast\n").unwrap();
    let multi = out.join("multi");
    std::fs::create_dir_all(&multi).unwrap();
    let o = ok(
        &multi,
        &[
            "rollout-multi",
            "--checkpoint",
            out.join("model.ckpt").to_str().unwrap(),
            "--plan",
            plan.to_str().unwrap(),
        ],
    );
    assert!(o.contains("frames=4"));
    ok(
        out,
        &[
            "ablate",
            "--mode",
            "zero_anchor",
            "--seeds",
            "0",
            "--train-missing",
            "--eval-clips",
            "2",
            "--frames",
            "3",
        ],
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for e in walk(dir) {
        let rel = e.strip_prefix(dir).unwrap().display().to_string();
        if rel.ends_with("train_log.csv") {
            continue;
        }
        v.push((rel, std::fs::read(&e).unwrap()));
    }
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn cli_outputs_repeat_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "corpus.bin",
        "model.ckpt",
        "rollout.bin",
        "rollout.gif",
        "drift.csv",
        "mask_trend.csv",
        "flops.csv",
        "ablation_drift.csv",
        "ablation_summary.csv",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert_eq!(
        names,
        fb.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
    );
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    assert!(
        differing.is_empty(),
        "outputs differ between runs: {differing:?}"
    );
    let log = std::fs::read_to_string(a.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,grad_norm,wall_time_s"));
}

#[test]
fn cli_failures_carry_a_category_and_exit_code() {
    let d = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str, i32); 4] = [
        (&["generate", "--checkpoint", "nowhere.ckpt"], "missing", 6),
        (&["--set", "train.nonsense=1", "flops"], "config", 3),
        (&["--set", "sampler.w_txt=abc", "flops"], "config", 3),
        (&["mask-stats", "--rollout", "absent.bin"], "missing", 6),
    ];
    for (args, cat, code) in cases {
        let o = mdm(d.path(), args);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
        assert!(err.contains(&format!("category={cat}")), "{err}");
    }
    let bad = d.path().join("bad.ckpt");
    let mut bytes = b"MDMCKPT\0".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(b"truncated");
    std::fs::write(&bad, bytes).unwrap();
    let o = mdm(
        d.path(),
        &["generate", "--checkpoint", bad.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("category=corrupt"));
    ok(d.path(), &["gen-data", "--clips", "4", "--length", "4"]);
    ok(d.path(), &["train"]);
    let o = mdm(d.path(), &["generate", "--prompt", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("category=argument"));
    let o = mdm(d.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}
