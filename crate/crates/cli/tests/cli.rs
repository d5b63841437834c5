//! End-to-end tests driving the `q4fg` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use q4fg_core::container::{load_model, write_tokens};
use q4fg_core::sparsity::MaskStructure;
use q4fg_core::QuantStrategy;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_q4fg"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn q4fg");
    assert!(
        out.status.success(),
        "q4fg {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_fail(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn q4fg");
    assert!(!out.status.success(), "q4fg {args:?} unexpectedly succeeded");
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small decoder-only container used by most tests.
fn init_decoder(dir: &Path) -> PathBuf {
    let model = dir.join("base.q4fg");
    run_ok(&[
        "init",
        "--arch",
        "decoder_only",
        "--dec",
        "2",
        "--hidden",
        "16",
        "--heads",
        "2",
        "--vocab",
        "13",
        "--max-seq",
        "8",
        "--seed",
        "3",
        "--out",
        path_str(&model),
    ]);
    model
}

fn token_file(dir: &Path, name: &str, tokens: &[u32]) -> PathBuf {
    let p = dir.join(name);
    write_tokens(&p, tokens).unwrap();
    p
}

#[test]
fn quantize_selected_part_leaves_others_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let before = std::fs::read(&base).unwrap();
    let out = dir.path().join("q.q4fg");
    run_ok(&[
        "quantize",
        "--model",
        path_str(&base),
        "--out",
        path_str(&out),
        "--bits",
        "4",
        "--mapping",
        "sym",
        "--groups",
        "d_in",
        "--parts",
        "mlp_out",
    ]);
    // The input container is never mutated.
    assert_eq!(std::fs::read(&base).unwrap(), before);

    let float = load_model(&base).unwrap();
    let quant = load_model(&out).unwrap();
    assert_eq!(quant.qweights.len(), 2, "one mlp_out weight per layer");
    for name in quant.qweights.keys() {
        assert!(name.contains(".mlp_out."), "{name}");
    }
    assert!(quant.strategy.mlp_out && !quant.strategy.qkv_proj);
    // Row-wise grouping: one scale per output row.
    let q = &quant.qweights["dec.0.mlp_out.w"];
    assert_eq!(q.params.scales.len(), q.shape[0]);
    // Everything that was not quantized is bit-identical to the input.
    for (name, t) in &float.params {
        if !quant.qweights.contains_key(name) {
            assert_eq!(quant.params[name].data(), t.data(), "{name}");
        }
    }
}

#[test]
fn requantizing_a_part_fails() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let once = dir.path().join("q1.q4fg");
    let twice = dir.path().join("q2.q4fg");
    run_ok(&[
        "quantize", "--model", path_str(&base), "--out", path_str(&once), "--bits", "8",
        "--parts", "qkv_proj",
    ]);
    let out = run_fail(&[
        "quantize", "--model", path_str(&once), "--out", path_str(&twice), "--bits", "4",
        "--parts", "qkv_proj",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("already quantized"), "{stderr}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    // Unknown flag.
    let out = run_fail(&["infer", "--model", path_str(&base), "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    // Missing required argument.
    let out = run_fail(&["quantize", "--model", path_str(&base)]);
    assert_eq!(out.status.code(), Some(2));
    // Invalid part name.
    let out = run_fail(&[
        "quantize", "--model", path_str(&base), "--out", "x.q4fg", "--bits", "4", "--parts",
        "head",
    ]);
    assert_eq!(out.status.code(), Some(2));
    // Unknown subcommand.
    let out = run_fail(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_is_deterministic_and_off_matches_float_reference() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let quantized = dir.path().join("q.q4fg");
    run_ok(&[
        "quantize", "--model", path_str(&base), "--out", path_str(&quantized), "--bits", "4",
    ]);
    let toks = token_file(dir.path(), "in.bin", &[1, 2, 3, 4, 5, 6, 7, 8]);

    let r1 = dir.path().join("r1.csv");
    let r2 = dir.path().join("r2.csv");
    let o1 = run_ok(&[
        "infer", "--model", path_str(&quantized), "--input", path_str(&toks), "--strategy",
        "off", "--report", path_str(&r1),
    ]);
    let o2 = run_ok(&[
        "infer", "--model", path_str(&quantized), "--input", path_str(&toks), "--strategy",
        "off", "--report", path_str(&r2),
    ]);
    let numeric_lines = |out: &Output| -> Vec<String> {
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .filter(|l| !l.starts_with("report="))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(numeric_lines(&o1), numeric_lines(&o2), "inference must be deterministic");
    let csv1 = std::fs::read(&r1).unwrap();
    assert_eq!(csv1, std::fs::read(&r2).unwrap());

    // `off` must equal a plain library forward of the same container (whose
    // float params mirror the dequantized weights) bit for bit.
    let model = load_model(&quantized).unwrap();
    let batch = q4fg_core::model::Batch::single(
        q4fg_core::model::TokenBatch::new(1, 8, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap(),
    );
    let (tape, out) = model.run_eval(&batch, &QuantStrategy::all_disabled()).unwrap();
    let reference = tape.value(out.logits);
    let text = String::from_utf8(csv1).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("position,t0,"));
    let mut parsed: Vec<f32> = Vec::new();
    for line in lines {
        parsed.extend(line.split(',').skip(1).map(|v| v.parse::<f32>().unwrap()));
    }
    assert_eq!(parsed.len(), reference.data().len());
    for (a, b) in parsed.iter().zip(reference.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn strategy_auto_needs_tune_result_and_uses_it() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let toks = token_file(dir.path(), "in.bin", &[1, 2, 3, 4]);
    let out = run_fail(&[
        "infer", "--model", path_str(&base), "--input", path_str(&toks), "--strategy", "auto",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tune"));

    let tune = dir.path().join("tune.json");
    run_ok(&[
        "tune-strategy",
        "--model",
        path_str(&base),
        "--shapes",
        "1,4;1,8",
        "--repeats",
        "3",
        "--w-groups",
        "16",
        "--out",
        path_str(&tune),
    ]);
    let parsed =
        q4fg_core::tune::StrategyTuneResult::from_json(&std::fs::read_to_string(&tune).unwrap())
            .unwrap();
    assert_eq!(parsed.shapes.len(), 2);
    assert!(parsed.shapes.iter().all(|s| s.timings.len() == 16));
    run_ok(&[
        "infer", "--model", path_str(&base), "--input", path_str(&toks), "--strategy", "auto",
        "--tune", path_str(&tune),
    ]);
}

#[test]
fn prune_attaches_structured_masks() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let pruned = dir.path().join("p.q4fg");
    run_ok(&[
        "prune", "--model", path_str(&base), "--out", path_str(&pruned), "--nm", "2:4",
    ]);
    let model = load_model(&pruned).unwrap();
    let masks = model.masks.expect("masks stored");
    assert_eq!(masks.masks.len(), 8, "four parts x two layers");
    for (name, mask) in &masks.masks {
        assert_eq!(mask.structure, MaskStructure::PairNm { n: 2, m: 4 }, "{name}");
        let kept = mask.keep.iter().filter(|&&k| k).count();
        assert_eq!(kept * 2, mask.keep.len(), "exactly half kept in {name}");
        for group in mask.keep.chunks(4) {
            assert_eq!(group.iter().filter(|&&k| k).count(), 2, "{name}");
        }
    }
}

#[test]
fn pruning_quantized_weights_rebuilds_stored_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let quantized = dir.path().join("q.q4fg");
    run_ok(&[
        "quantize", "--model", path_str(&base), "--out", path_str(&quantized), "--bits", "4",
        "--mapping", "sym", "--groups", "d_in",
    ]);
    let pruned = dir.path().join("qp.q4fg");
    run_ok(&[
        "prune", "--model", path_str(&quantized), "--out", path_str(&pruned), "--nm", "2:4",
        "--order", "quant_then_prune",
    ]);
    // The stored codes themselves carry the mask; eval feeds them to the
    // kernels without consulting the mask metadata again.
    let model = load_model(&pruned).unwrap();
    let masks = model.masks.as_ref().expect("masks stored");
    for (name, mask) in &masks.masks {
        let codes = model.qweights[name].codes().expect("symmetric int4 codes");
        for (i, (&code, &keep)) in codes.iter().zip(&mask.keep).enumerate() {
            if !keep {
                assert_eq!(code, 0, "{name}[{i}] must be zeroed on the frozen grid");
            }
        }
    }
    // And the pruned container computes something different.
    let toks = token_file(dir.path(), "in.bin", &[1, 2, 3, 4, 5, 6, 7, 8]);
    let report_q = dir.path().join("q.csv");
    let report_p = dir.path().join("p.csv");
    for (model, report) in [(&quantized, &report_q), (&pruned, &report_p)] {
        run_ok(&[
            "infer", "--model", path_str(model), "--input", path_str(&toks), "--strategy",
            "stored", "--report", path_str(report),
        ]);
    }
    assert_ne!(
        std::fs::read(&report_q).unwrap(),
        std::fs::read(&report_p).unwrap(),
        "pruning must change the quantized forward pass"
    );
}

#[test]
fn quantize_composes_stored_masks_into_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let masked = dir.path().join("m.q4fg");
    run_ok(&[
        "prune", "--model", path_str(&base), "--out", path_str(&masked), "--nm", "2:4",
        "--parts", "mlp_out",
    ]);
    let quantized = dir.path().join("mq.q4fg");
    run_ok(&[
        "quantize", "--model", path_str(&masked), "--out", path_str(&quantized), "--bits", "4",
        "--mapping", "sym", "--groups", "d_in", "--parts", "mlp_out",
    ]);
    let model = load_model(&quantized).unwrap();
    let masks = model.masks.as_ref().expect("masks survive quantization");
    for (name, mask) in &masks.masks {
        let codes = model.qweights[name].codes().expect("symmetric int4 codes");
        let mirror = &model.params[name];
        for (i, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                assert_eq!(codes[i], 0, "{name}[{i}]: masked weight quantized to nonzero");
                assert_eq!(mirror.data()[i], 0.0, "{name}[{i}]: float mirror not masked");
            }
        }
    }
}

#[test]
fn reduce_layers_maps_evenly_spaced_teacher_layers() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("t.q4fg");
    run_ok(&[
        "init", "--arch", "decoder_only", "--dec", "6", "--hidden", "16", "--heads", "2",
        "--vocab", "13", "--max-seq", "8", "--out", path_str(&teacher),
    ]);
    let student = dir.path().join("s.q4fg");
    let out = run_ok(&[
        "reduce-layers", "--model", path_str(&teacher), "--out", path_str(&student), "--dec",
        "3",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("decoder_map=[0, 2, 4]"), "{stdout}");
    let t = load_model(&teacher).unwrap();
    let s = load_model(&student).unwrap();
    assert_eq!(s.config.num_decoder_layers, 3);
    for (si, ti) in [(0usize, 0usize), (1, 2), (2, 4)] {
        assert_eq!(
            s.params[&format!("dec.{si}.qkv.w")].data(),
            t.params[&format!("dec.{ti}.qkv.w")].data()
        );
    }
}

#[test]
fn bench_emits_pinned_csv_and_reproducible_shape_fields() {
    let dir = tempfile::tempdir().unwrap();
    let csv1 = dir.path().join("b1.csv");
    let csv2 = dir.path().join("b2.csv");
    let args = |out: &Path| {
        vec![
            "bench".to_string(),
            "--case".into(),
            "mlp_intermediate".into(),
            "--bits".into(),
            "4,8".into(),
            "--m".into(),
            "8".into(),
            "--hidden".into(),
            "32".into(),
            "--repeats".into(),
            "3".into(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let run = |out: &Path| {
        let a = args(out);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        run_ok(&refs);
    };
    run(&csv1);
    run(&csv2);
    let strip_timing = |path: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "case,bits,M,N,K,median_ns,bytes_moved,gops");
        text.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                assert_eq!(f.len(), 8);
                format!("{},{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4], f[6])
            })
            .collect()
    };
    let rows1 = strip_timing(&csv1);
    assert_eq!(rows1.len(), 2, "one row per bit width");
    assert_eq!(rows1[0], "mlp_intermediate,4,8,128,32,2048");
    assert_eq!(rows1[1], "mlp_intermediate,8,8,128,32,4096");
    assert_eq!(rows1, strip_timing(&csv2));
}

#[test]
fn bench_respects_thread_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let shape_fields = |threads: &str| -> Vec<String> {
        let csv = dir.path().join(format!("b{threads}.csv"));
        let out = bin()
            .env("Q4FG_THREADS", threads)
            .args([
                "bench", "--case", "qkv_proj", "--bits", "4", "--m", "16", "--hidden", "32",
                "--repeats", "3", "--out", csv.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(&csv)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4], f[6])
            })
            .collect()
    };
    assert_eq!(shape_fields("1"), shape_fields("2"));
}

#[test]
fn analyze_positional_ppl_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let toks = token_file(dir.path(), "s.bin", &(0..32).map(|i| i % 13).collect::<Vec<_>>());
    let out = dir.path().join("ppl.csv");
    run_ok(&[
        "analyze", "--model", path_str(&base), "--mode", "positional_ppl", "--input",
        path_str(&toks), "--out", path_str(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "position,mean,std");
    assert_eq!(text.lines().count(), 8, "header + max_seq-1 prediction rows");
}

#[test]
fn analyze_activation_range_and_quant_error_modes() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_decoder(dir.path());
    let toks = token_file(dir.path(), "s.bin", &(0..24).map(|i| i % 13).collect::<Vec<_>>());
    let range = dir.path().join("range.csv");
    run_ok(&[
        "analyze", "--model", path_str(&base), "--mode", "activation_range", "--input",
        path_str(&toks), "--layer", "1", "--part", "mlp_out", "--out", path_str(&range),
    ]);
    let text = std::fs::read_to_string(&range).unwrap();
    assert_eq!(text.lines().next().unwrap(), "position,mean,std");
    assert_eq!(text.lines().count(), 9, "header + one row per input position");

    let err = dir.path().join("err.csv");
    run_ok(&[
        "analyze", "--model", path_str(&base), "--mode", "quant_error", "--param",
        "dec.0.qkv.w", "--out", path_str(&err),
    ]);
    let text = std::fs::read_to_string(&err).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "bits,mapping,granularity,rms_error,max_error,range_utilization"
    );
    assert_eq!(text.lines().count(), 10, "passthrough + 8 scheme rows");
}

#[test]
fn train_qat_smoke_produces_student_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("t.q4fg");
    run_ok(&[
        "init", "--arch", "decoder_only", "--dec", "1", "--hidden", "16", "--heads", "2",
        "--vocab", "8", "--max-seq", "8", "--seed", "1", "--out", path_str(&teacher),
    ]);
    let student = dir.path().join("s.q4fg");
    let log = dir.path().join("log.csv");
    let out = run_ok(&[
        "train-qat",
        "--teacher",
        path_str(&teacher),
        "--out",
        path_str(&student),
        "--task",
        "markov_lm",
        "--epochs",
        "1",
        "--batch",
        "8",
        "--train-rows",
        "16",
        "--eval-rows",
        "8",
        "--eval-every",
        "2",
        "--w-logit",
        "0",
        "--w-task",
        "1",
        "--enable",
        "all",
        "--w-bits",
        "8",
        "--w-groups",
        "16",
        "--seed",
        "5",
        "--log",
        path_str(&log),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("steps=2"), "16 rows / batch 8 = 2 steps: {stdout}");
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,loss,loss_logit,loss_att,loss_rep,loss_task,eval_metric"
    );
    let trained = load_model(&student).unwrap();
    assert!(trained.strategy.any_enabled(), "QAT strategy persisted");
}

#[test]
fn encoder_decoder_infer_requires_src() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("ed.q4fg");
    run_ok(&[
        "init", "--arch", "encoder_decoder", "--enc", "1", "--dec", "1", "--hidden", "16",
        "--heads", "2", "--vocab", "13", "--max-seq", "8", "--out", path_str(&model),
    ]);
    let toks = token_file(dir.path(), "in.bin", &[1, 2, 3, 4]);
    let out = run_fail(&["infer", "--model", path_str(&model), "--input", path_str(&toks)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--src"));
    run_ok(&[
        "infer", "--model", path_str(&model), "--input", path_str(&toks), "--src",
        path_str(&toks),
    ]);
}
