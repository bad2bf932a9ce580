//! Acceptance suite. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! Run alone with `cargo test -p convlora-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convlora_core::adabn::{batch_stats, BatchNorm, BnMode};
use convlora_core::convlora::ConvLoraAdapter;
use convlora_core::data::{base_to_container, load_base, sha256_hex, AdapterCheckpoint};
use convlora_core::metrics::{param_report, selector_comparison, surface_dice, volumetric_dice, BinaryMask};
use convlora_core::tensor::{
    conv2d_backward, conv2d_forward, cross_entropy_loss, gradcheck, maxpool2d, maxpool2d_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, softmax_channels, softmax_channels_backward, upsample_nearest,
    upsample_nearest_backward, ConvSpec,
};
use convlora_core::unet::{InjectionSelector, Phase, UNet, UNetConfig};
use convlora_core::{LabelMap, Tensor};

const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;
const NET_TOL: f64 = 1e-5;
const MERGE_TOL: f64 = 1e-5;
const EMA_TOL: f64 = 1e-6;

/// Experiment profile for the adaptation criteria.
const EXP_SIZE: &str = "32";
const EXP_DEPTH: &str = "3";
const EXP_BASE: &str = "8";
const ADABN_COL: &str = "full+adabn";
const PLAIN_COL: &str = "full";
const HARDEST: &str = "t5-severe";

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Result<String>); 10] = [
        (1, "identity at init", identity_at_init),
        (2, "gradient correctness", gradient_correctness),
        (3, "merge equivalence", merge_equivalence),
        (4, "freeze soundness", freeze_soundness),
        (5, "parameter accounting", parameter_accounting),
        (6, "batch-norm adaptation closed form", adabn_closed_form),
        (7, "adaptation efficacy", adaptation_efficacy),
        (8, "placement grid", placement_grid),
        (9, "surface dice oracle", sds_oracle),
        (10, "determinism and serialization", determinism),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, f) in criteria {
        let t = Instant::now();
        eprintln!("running criterion {id}: {name}");
        let res = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_text(&p))));
        let secs = t.elapsed().as_secs_f64();
        let line = match res {
            Ok(detail) => format!("PASS [{id:>2}] {name} ({secs:.1}s): {detail}"),
            Err(e) => {
                failed += 1;
                format!("FAIL [{id:>2}] {name} ({secs:.1}s): {e:#}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- CLI plumbing

fn cli(dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_convlora"))
        .current_dir(dir)
        .args(args)
        .output()
        .context("spawning convlora")?;
    if !out.status.success() {
        bail!("convlora {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn cli_fails(dir: &Path, args: &[&str]) -> Result<bool> {
    let out = Command::new(env!("CARGO_BIN_EXE_convlora"))
        .current_dir(dir)
        .args(args)
        .output()
        .context("spawning convlora")?;
    Ok(!out.status.success())
}

/// Data, pretrained base with ESH and the placement matrix of the experiment
/// profile, produced once through the CLI.
struct Experiment {
    _root: tempfile::TempDir,
    dir: PathBuf,
}

impl Experiment {
    fn base(&self) -> PathBuf {
        self.dir.join("esh/base.clra")
    }
}

static EXPERIMENT: OnceLock<std::result::Result<Experiment, String>> = OnceLock::new();

fn experiment() -> Result<&'static Experiment> {
    EXPERIMENT
        .get_or_init(|| build_experiment().map_err(|e| format!("{e:#}")))
        .as_ref()
        .map_err(|e| anyhow!("experiment setup failed: {e}"))
}

fn build_experiment() -> Result<Experiment> {
    let root = tempfile::tempdir()?;
    let d = root.path().to_path_buf();
    eprintln!("  generating data ({EXP_SIZE}px)");
    cli(&d, &["gen-data", "--out", "data", "--seed", "0", "--size", EXP_SIZE, "--n-train", "80", "--n-test", "10"])?;
    eprintln!("  pretraining (depth {EXP_DEPTH}, base width {EXP_BASE})");
    cli(&d, &["pretrain", "--data", "data", "--out", "pre", "--depth", EXP_DEPTH, "--base-channels", EXP_BASE])?;
    eprintln!("  training the early segmentation head");
    cli(&d, &["train-esh", "--base", "pre/base.clra", "--data", "data", "--out", "esh"])?;
    eprintln!("  running the placement matrix");
    cli(&d, &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "matrix", "--matrix", "--seeds", "3"])?;
    Ok(Experiment { _root: root, dir: d })
}

struct Matrix {
    domains: Vec<String>,
    columns: Vec<String>,
    source: Vec<f64>,
    means: Vec<Vec<f64>>,
}

impl Matrix {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().context("empty matrix")?.split('\t').collect();
        ensure!(header[0] == "domain" && header[1] == "source", "bad header {header:?}");
        let columns: Vec<String> = header[2..].iter().step_by(2).map(|s| s.to_string()).collect();
        let (mut domains, mut source, mut means) = (Vec::new(), Vec::new(), Vec::new());
        for l in lines {
            let f: Vec<&str> = l.split('\t').collect();
            if f[0] == "mean" {
                continue;
            }
            domains.push(f[0].to_string());
            source.push(f[1].parse()?);
            means.push(f[2..].iter().step_by(2).map(|v| v.parse()).collect::<std::result::Result<Vec<f64>, _>>()?);
        }
        Ok(Self {
            domains,
            columns,
            source,
            means,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .with_context(|| format!("column {name} missing from {:?}", self.columns))
    }

    fn column_mean(&self, c: usize) -> f64 {
        self.means.iter().map(|r| r[c]).sum::<f64>() / self.means.len() as f64
    }
}

// ------------------------------------------------------------------ criterion 1

fn identity_at_init() -> Result<String> {
    let configs = [
        UNetConfig::tiny(),
        UNetConfig {
            depth: 3,
            base_channels: 8,
            ..UNetConfig::desk()
        },
        UNetConfig::desk(),
    ];
    let mut checked = 0;
    for (ci, cfg) in configs.iter().enumerate() {
        let base = UNet::<f32>::build(*cfg, 100 + ci as u64)?;
        let mut selectors: Vec<InjectionSelector> = (1..=cfg.depth).map(InjectionSelector::first).collect();
        selectors.push(InjectionSelector::all(cfg.depth));
        selectors.push(InjectionSelector::blocks([cfg.depth]));
        for (si, sel) in selectors.iter().enumerate() {
            let mut plain = base.clone();
            plain.set_eval();
            let mut injected = base.clone();
            injected.inject_convlora(sel, 2, 7 + si as u64)?;
            injected.set_eval();
            for k in 0..20u64 {
                let x = Tensor::<f32>::randn(&[2, 1, 16, 16], 1.0, &mut rng(1000 * ci as u64 + 50 * si as u64 + k));
                let a = plain.forward_full(&x)?;
                let b = injected.forward_full(&x)?;
                let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
                ensure!(same, "config {ci}, selector {sel}, input {k}: outputs differ after injection");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} forward passes bitwise identical across 3 configs and every selector"))
}

// ------------------------------------------------------------------ criterion 2

fn dot(a: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Records one finite-difference case.
struct FdLog {
    cases: usize,
    worst: f64,
    worst_case: String,
}

impl FdLog {
    fn record(&mut self, name: String, err: f64) -> Result<()> {
        self.cases += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_case = name.clone();
        }
        ensure!(err <= OP_TOL, "{name}: relative error {err:.3e} > {OP_TOL:e}");
        Ok(())
    }
}

fn gradient_correctness() -> Result<String> {
    let mut log = FdLog {
        cases: 0,
        worst: 0.0,
        worst_case: String::new(),
    };

    // Convolution: input, kernel and bias gradients over varied geometry.
    let geoms = [(1, 3, 1, 0), (1, 3, 2, 1), (1, 1, 1, 0), (2, 3, 2, 0), (1, 3, 1, 2), (2, 1, 1, 0)];
    for (gi, &(stride, k, _, padding)) in geoms.iter().enumerate() {
        for rep in 0..2u64 {
            let seed = 10 * gi as u64 + rep;
            let mut r = rng(seed);
            let spec = ConvSpec {
                in_channels: 2 + rep as usize,
                out_channels: 3,
                kernel_size: k,
                stride,
                padding,
            };
            let x = Tensor::<f64>::randn(&[2, spec.in_channels, 6, 5], 1.0, &mut r);
            let kern = Tensor::<f64>::randn(&spec.kernel_shape(), 0.5, &mut r);
            let bias = Tensor::<f64>::randn(&[3], 0.5, &mut r);
            let y = conv2d_forward(&x, &kern, &bias, &spec)?;
            let w = Tensor::<f64>::randn(y.shape(), 1.0, &mut r);
            let (dx, dk, db) = conv2d_backward(&w, &x, &kern, &spec)?;
            let mut p = vec![x, kern, bias];
            let rep_ = gradcheck(|p| dot(&conv2d_forward(&p[0], &p[1], &p[2], &spec).unwrap(), &w), &mut p, &[dx, dk, db], FD_STEP);
            log.record(format!("conv2d {spec:?}"), rep_.max_error())?;
        }
    }

    // Adapter factors and input.
    for case in 0..12u64 {
        let mut r = rng(200 + case);
        let k = if case % 3 == 0 { 1 } else { 3 };
        let spec = ConvSpec::same(2 + (case % 2) as usize, 3 + (case % 3) as usize, k);
        let rank = 1 + (case % 2) as usize;
        let kern = Tensor::<f64>::randn(&spec.kernel_shape(), 0.5, &mut r);
        let bias = Tensor::<f64>::randn(&[spec.out_channels], 0.5, &mut r);
        let mut a = ConvLoraAdapter::init(kern, bias, spec, rank, case)?;
        a.y = Tensor::randn(a.y.shape(), 0.5, &mut r);
        let x = Tensor::<f64>::randn(&[2, spec.in_channels, 5, 5], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[2, spec.out_channels, 5, 5], 1.0, &mut r);
        let g = a.backward(&x, &w, true)?;
        let base = a.clone();
        let mut p = vec![a.x.clone(), a.y.clone(), x];
        let rep = gradcheck(
            |p| {
                let mut ad = base.clone();
                ad.set_factors(p[0].clone(), p[1].clone()).unwrap();
                dot(&ad.forward(&p[2]).unwrap(), &w)
            },
            &mut p,
            &[g.x, g.y, g.input.context("input gradient requested")?],
            FD_STEP,
        );
        log.record(format!("adapter {spec:?} rank {rank}"), rep.max_error())?;
    }

    // Batch norm in every differentiable mode.
    for (mi, mode) in [BnMode::Train, BnMode::Eval, BnMode::Adapt].into_iter().enumerate() {
        for rep in 0..2u64 {
            let mut r = rng(300 + 10 * mi as u64 + rep);
            let mut bn = BatchNorm::<f64>::new(3);
            bn.gamma = Tensor::randn(&[3], 1.0, &mut r);
            bn.beta = Tensor::randn(&[3], 1.0, &mut r);
            bn.set_running_stats(Tensor::randn(&[3], 1.0, &mut r), Tensor::uniform(&[3], 0.5, 2.0, &mut r))?;
            bn.set_mode(mode);
            let x = Tensor::<f64>::randn(&[3, 3, 3, 2], 1.0, &mut r);
            let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut r);
            let (_, cache) = bn.clone().forward(&x)?;
            let (dx, affine) = bn.backward(&cache, &w, true)?;
            let base = bn.clone();
            let (mut p, analytic) = match affine {
                Some((dg, db)) => (vec![x, bn.gamma.clone(), bn.beta.clone()], vec![dx, dg, db]),
                None => (vec![x], vec![dx]),
            };
            let rep_ = gradcheck(
                |p| {
                    let mut l = base.clone();
                    if p.len() == 3 {
                        l.gamma = p[1].clone();
                        l.beta = p[2].clone();
                    }
                    dot(&l.forward(&p[0]).unwrap().0, &w)
                },
                &mut p,
                &analytic,
                FD_STEP,
            );
            log.record(format!("batchnorm {mode:?}"), rep_.max_error())?;
        }
    }

    // Pointwise, pooling, resampling and loss.
    for case in 0..4u64 {
        let mut r = rng(400 + case);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut r);

        let g = relu_backward(&w, &x)?;
        let e = gradcheck(|p| dot(&relu(&p[0]), &w), &mut [x.clone()], &[g], FD_STEP).max_error();
        log.record("relu".into(), e)?;

        let g = sigmoid_backward(&w, &sigmoid(&x))?;
        let e = gradcheck(|p| dot(&sigmoid(&p[0]), &w), &mut [x.clone()], &[g], FD_STEP).max_error();
        log.record("sigmoid".into(), e)?;

        let g = softmax_channels_backward(&w, &softmax_channels(&x)?)?;
        let e = gradcheck(|p| dot(&softmax_channels(&p[0]).unwrap(), &w), &mut [x.clone()], &[g], FD_STEP).max_error();
        log.record("softmax".into(), e)?;

        let (pooled, idx) = maxpool2d(&x, 2)?;
        let wp = Tensor::<f64>::randn(pooled.shape(), 1.0, &mut r);
        let g = maxpool2d_backward(&wp, &idx, x.shape())?;
        let e = gradcheck(|p| dot(&maxpool2d(&p[0], 2).unwrap().0, &wp), &mut [x.clone()], &[g], FD_STEP).max_error();
        log.record("maxpool".into(), e)?;

        let factor = 2 + case as usize % 2;
        let up = upsample_nearest(&x, factor)?;
        let wu = Tensor::<f64>::randn(up.shape(), 1.0, &mut r);
        let g = upsample_nearest_backward(&wu, factor)?;
        let e = gradcheck(|p| dot(&upsample_nearest(&p[0], factor).unwrap(), &wu), &mut [x.clone()], &[g], FD_STEP)
            .max_error();
        log.record("upsample".into(), e)?;

        let labels = LabelMap::new([2, 4, 4], (0..32).map(|_| r.random_range(0..3u32)).collect())?;
        let (_, g) = cross_entropy_loss(&x, &labels)?;
        let e = gradcheck(|p| cross_entropy_loss(&p[0], &labels).unwrap().0, &mut [x.clone()], &[g], FD_STEP)
            .max_error();
        log.record("cross-entropy".into(), e)?;
    }
    ensure!(log.cases >= 50, "only {} cases", log.cases);

    let mut net = Vec::new();
    for (phase, esh) in [(Phase::Pretrain, false), (Phase::Esh, true), (Phase::Adapt, true)] {
        let e = unet_gradcheck(phase, esh)?;
        ensure!(e <= NET_TOL, "tiny U-Net {phase:?}: relative error {e:.3e} > {NET_TOL:e}");
        net.push(format!("{phase:?} {e:.1e}"));
    }
    Ok(format!(
        "{} op cases, worst {:.2e} ({}); tiny U-Net: {}",
        log.cases,
        log.worst,
        log.worst_case,
        net.join(", ")
    ))
}

fn unet_gradcheck(phase: Phase, esh_path: bool) -> Result<f64> {
    let mut m = UNet::<f64>::build(UNetConfig::tiny(), 21)?;
    if phase == Phase::Adapt {
        m.inject_convlora(&InjectionSelector::all(2), 2, 3)?;
        let mut r = rng(1);
        m.visit_mut(&mut |name, v, _| {
            if name.ends_with(".lora_y") {
                *v = Tensor::randn(v.shape(), 0.1, &mut r);
            }
        });
    }
    m.apply_freeze_policy(phase);
    let x = Tensor::<f64>::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng(12));
    let mut r = rng(13);
    let y = LabelMap::new([2, 16, 16], (0..512).map(|_| r.random_range(0..2u32)).collect())?;
    let loss = |m: &mut UNet<f64>| {
        if esh_path {
            m.esh_loss_and_grads(&x, &y, false)
        } else {
            m.full_loss_and_grads(&x, &y)
        }
    };
    let (_, grads) = loss(&mut m)?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    m.visit(&mut |name, p| {
        if p.trainable {
            names.push(name.to_string());
            params.push(p.value.clone());
        }
    });
    let analytic: Vec<Tensor<f64>> = names.iter().map(|n| grads[n].clone()).collect();
    let base = m.clone();
    let report = gradcheck(
        |p| {
            let mut probe = base.clone();
            let map: BTreeMap<String, Tensor<f64>> = names.iter().cloned().zip(p.iter().cloned()).collect();
            probe.set_params(&map).unwrap();
            loss(&mut probe).unwrap().0
        },
        &mut params,
        &analytic,
        1e-6,
    );
    Ok(report.max_error())
}

// ------------------------------------------------------------------ criterion 3

fn merge_equivalence() -> Result<String> {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng(500 + case);
        let k = [1, 3, 5][case as usize % 3];
        let spec = ConvSpec {
            in_channels: r.random_range(2..5),
            out_channels: r.random_range(3..7),
            kernel_size: k,
            stride: 1 + case as usize % 2,
            padding: r.random_range(0..=k / 2),
        };
        let m = spec.out_channels;
        let n = spec.patch_len();
        let rank = r.random_range(1..m.min(n));
        let kern = Tensor::<f32>::randn(&spec.kernel_shape(), 0.3, &mut r);
        let bias = Tensor::<f32>::randn(&[m], 0.3, &mut r);
        let x = Tensor::<f32>::randn(&[m, rank], 0.5, &mut r);
        let y = Tensor::<f32>::randn(&[rank, n], 0.5, &mut r);
        let a = ConvLoraAdapter::from_parts(kern, bias, spec, x, y)?;
        let input = Tensor::<f32>::randn(&[2, spec.in_channels, 9, 8], 1.0, &mut r);
        let adapted = a.forward(&input)?;
        let (mk, mb) = a.merge();
        let merged = conv2d_forward(&input, &mk, &mb, &spec)?;
        let diff = adapted
            .data()
            .iter()
            .zip(merged.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max) as f64;
        let rel = diff / merged.max_abs().max(1e-12) as f64;
        worst = worst.max(rel);
        ensure!(rel <= MERGE_TOL, "case {case} {spec:?} rank {rank}: relative error {rel:.3e}");
    }

    let exp = experiment()?;
    let d = &exp.dir;
    cli(
        d,
        &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "merge_src", "--target-domain", "t4-high,t5-severe", "--seeds", "1"],
    )?;
    let mut images = 0;
    let mut worst_img = 0.0f64;
    for dom in ["t4-high", "t5-severe"] {
        let adapter = format!("merge_src/{dom}/seed0.clra");
        let merged = format!("merged_{dom}.clra");
        cli(d, &["merge", "--base", "esh/base.clra", "--adapter", &adapter, "--out", &merged])?;
        let a = image_scores(&cli(d, &["eval", "--base", "esh/base.clra", "--adapter", &adapter, "--data", "data"])?);
        let b = image_scores(&cli(d, &["eval", "--base", &merged, "--data", "data", "--domain", dom])?);
        ensure!(!a.is_empty() && a.len() == b.len(), "{dom}: {} vs {} image scores", a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            ensure!(p.0 == q.0, "image order differs");
            let e = (p.1 - q.1).abs().max((p.2 - q.2).abs());
            worst_img = worst_img.max(e);
            ensure!(e <= MERGE_TOL, "{dom} {}: merged differs by {e:.3e}", p.0);
            images += 1;
        }
    }
    Ok(format!(
        "100 kernels, worst relative {worst:.2e}; {images} image scores merged vs unmerged, worst {worst_img:.1e}"
    ))
}

fn image_scores(report: &str) -> Vec<(String, f64, f64)> {
    report
        .lines()
        .filter(|l| l.starts_with("image "))
        .map(|l| {
            let get = |k: &str| l.split_whitespace().find_map(|t| t.strip_prefix(k)).unwrap_or("nan").to_string();
            (get("id="), get("sds=").parse().unwrap_or(f64::NAN), get("dice=").parse().unwrap_or(f64::NAN))
        })
        .collect()
}

// ------------------------------------------------------------------ criterion 4

fn tensor_hashes(m: &UNet<f32>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    m.visit(&mut |name, p| {
        if !name.ends_with(".lora_x") && !name.ends_with(".lora_y") {
            let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            out.insert(name.to_string(), sha256_hex(&bytes));
        }
    });
    out
}

fn freeze_soundness() -> Result<String> {
    let exp = experiment()?;
    let d = &exp.dir;
    let file_before = sha256_hex(&std::fs::read(exp.base())?);
    cli(d, &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "freeze", "--epochs", "5", "--seeds", "1"])?;
    let file_after = sha256_hex(&std::fs::read(exp.base())?);
    ensure!(file_before == file_after, "base checkpoint file changed");

    let (base, _, checksum) = load_base(&exp.base())?;
    let reference = tensor_hashes(&base);
    let mut adapters = 0;
    for entry in std::fs::read_dir(d.join("freeze"))? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let ckpt = AdapterCheckpoint::load(&entry.path().join("seed0.clra"))?;
        let adapted = ckpt.apply(&base, &checksum)?;
        let hashes = tensor_hashes(&adapted);
        ensure!(hashes.len() == reference.len(), "tensor set differs");
        for (name, h) in &reference {
            ensure!(hashes.get(name) == Some(h), "{}: frozen tensor {name} changed", ckpt.domain_id);
        }
        let moved = ckpt.factors.values().any(|(_, y)| !y.is_all_zero());
        ensure!(moved, "{}: adapters did not train", ckpt.domain_id);
        adapters += 1;
    }
    ensure!(adapters == 5, "expected 5 adapted domains, found {adapters}");
    Ok(format!(
        "{} frozen tensors bit-identical for {adapters} domains after 5 epochs; base file sha256 {}…",
        reference.len(),
        &file_before[..12]
    ))
}

// ------------------------------------------------------------------ criterion 5

fn parameter_accounting() -> Result<String> {
    let mut m = UNet::<f32>::build(UNetConfig::paper_scale(), 0)?;
    let all = InjectionSelector::all(m.config().depth);
    m.inject_convlora(&all, 2, 0)?;
    m.apply_freeze_policy(Phase::Adapt);
    let rep = param_report(&m);
    let frac = rep.trainable_fraction();
    ensure!(frac < 0.009, "trainable fraction {:.4}% is not below 0.9%", 100.0 * frac);

    let base = UNet::<f32>::build(UNetConfig::paper_scale(), 0)?;
    let (full, adapter) = selector_comparison(&base, &InjectionSelector::blocks([1]), 2);
    let ratio = adapter as f64 / full as f64;
    ensure!(ratio <= 0.30, "block-1 adapter is {:.2}% of full fine-tuning", 100.0 * ratio);
    Ok(format!(
        "total {} trainable {} ({:.3}%, reduction {:.2}%; reference 57714 / 99.80%); block 1: {full} -> {adapter} ({:.2}% reduction; reference 14160 -> 3954, 72.07%)",
        rep.total_params,
        rep.trainable_params,
        100.0 * frac,
        rep.reduction_percent(),
        100.0 * (1.0 - ratio)
    ))
}

// ------------------------------------------------------------------ criterion 6

fn adabn_closed_form() -> Result<String> {
    let mut worst = 0.0f64;
    for (mi, momentum) in [0.1, 0.05, 0.3].into_iter().enumerate() {
        let mut r = rng(600 + mi as u64);
        let mut bn = BatchNorm::<f64>::new(3).with_momentum(momentum)?;
        bn.gamma = Tensor::randn(&[3], 1.0, &mut r);
        bn.beta = Tensor::randn(&[3], 1.0, &mut r);
        let m0 = Tensor::<f64>::randn(&[3], 1.0, &mut r);
        let v0 = Tensor::<f64>::uniform(&[3], 0.5, 2.0, &mut r);
        bn.set_running_stats(m0.clone(), v0.clone())?;
        let (g0, b0) = (bn.gamma.clone(), bn.beta.clone());
        bn.set_mode(BnMode::Adapt);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 2.0, &mut r).map(|v| v + 3.0);
        let (mu, var) = batch_stats(&x)?;
        for k in 1..=50 {
            let (_, cache) = bn.forward(&x)?;
            let decay = (1.0 - momentum).powi(k);
            for c in 0..3 {
                let em = mu[c] + (m0.data()[c] - mu[c]) * decay;
                let ev = var[c] + (v0.data()[c] - var[c]) * decay;
                let e = (bn.running_mean().data()[c] - em).abs().max((bn.running_var().data()[c] - ev).abs());
                worst = worst.max(e);
                ensure!(e <= EMA_TOL, "momentum {momentum}, K={k}, channel {c}: off by {e:.3e}");
            }
            let (_, affine) = bn.backward(&cache, &x, true)?;
            ensure!(affine.is_none(), "adaptation pass produced affine gradients");
        }
        let same = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        ensure!(same(&bn.gamma, &g0) && same(&bn.beta, &b0), "gamma/beta changed in adaptation mode");
    }
    Ok(format!("K=1..50 at momenta 0.1/0.05/0.3, worst deviation {worst:.1e}; gamma/beta bit-unchanged"))
}

// ---------------------------------------------------------------- criteria 7, 8

fn adaptation_efficacy() -> Result<String> {
    let exp = experiment()?;
    let m = Matrix::load(&exp.dir.join("matrix/matrix.tsv"))?;
    let ab = m.col(ADABN_COL)?;
    let plain = m.col(PLAIN_COL)?;
    ensure!(m.domains.len() == 5, "expected 5 target domains, got {}", m.domains.len());
    let beats_source = (0..5).filter(|&d| m.means[d][ab] >= m.source[d]).count();
    let beats_plain = (0..5).filter(|&d| m.means[d][ab] >= m.means[d][plain]).count();
    let h = m.domains.iter().position(|d| d == HARDEST).context("hardest preset missing")?;
    let gain = m.means[h][ab] - m.source[h];
    let detail = format!(
        "with batch-norm adaptation >= source on {beats_source}/5, >= adapters alone on {beats_plain}/5, {HARDEST} gain {gain:+.4} ({:.4} -> {:.4})",
        m.source[h], m.means[h][ab]
    );
    ensure!(beats_source >= 4 && beats_plain >= 3 && gain >= 0.05, "{detail}");
    Ok(detail)
}

fn placement_grid() -> Result<String> {
    let exp = experiment()?;
    let m = Matrix::load(&exp.dir.join("matrix/matrix.tsv"))?;
    ensure!(
        m.domains.len() == 5 && m.columns.len() == 5 && m.means.iter().all(|r| r.len() == 5),
        "table is {}x{}",
        m.domains.len(),
        m.columns.len()
    );
    let text = std::fs::read_to_string(exp.dir.join("matrix/matrix.txt"))?;
    ensure!(text.lines().count() == 7, "matrix.txt should have header, 5 rows and a mean row");
    let means: Vec<String> = (0..5).map(|c| format!("{} {:.4}", m.columns[c], m.column_mean(c))).collect();
    let best = (0..5)
        .max_by(|&a, &b| m.column_mean(a).total_cmp(&m.column_mean(b)))
        .expect("five columns");
    ensure!(m.columns[best] == ADABN_COL, "best column is {} ({})", m.columns[best], means.join(", "));
    Ok(format!("5x5 table; column means {}", means.join(", ")))
}

// ------------------------------------------------------------------ criterion 9

fn brute_force_sds(p: &BinaryMask, t: &BinaryMask, tol: f64) -> f64 {
    let bp = p.boundary();
    let bt = t.boundary();
    if bp.is_empty() && bt.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bt.is_empty() {
        return 0.0;
    }
    let near = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| {
            let dy = a.0 as i64 - b.0 as i64;
            let dx = a.1 as i64 - b.1 as i64;
            ((dy * dy + dx * dx) as f64) <= tol * tol
        })
    };
    let hits = bp.iter().filter(|&&a| near(a, &bt)).count() + bt.iter().filter(|&&a| near(a, &bp)).count();
    hits as f64 / (bp.len() + bt.len()) as f64
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut data = vec![false; h * w];
    match r.random_range(0..4) {
        0 => {}
        1 => {
            let p = r.random_range(0.05..0.6);
            data.iter_mut().for_each(|v| *v = r.random_bool(p));
        }
        _ => {
            for _ in 0..r.random_range(1..4) {
                let cy = r.random_range(0.0..h as f64);
                let cx = r.random_range(0.0..w as f64);
                let rad = r.random_range(0.5..(h.max(w) as f64 / 2.0 + 1.0));
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad {
                            data[y * w + x] = true;
                        }
                    }
                }
            }
        }
    }
    BinaryMask::new(h, w, data).expect("valid mask")
}

fn sds_oracle() -> Result<String> {
    let mut r = rng(900);
    for case in 0..200 {
        let h = r.random_range(1..=32);
        let w = r.random_range(1..=32);
        let p = random_mask(&mut r, h, w);
        let t = random_mask(&mut r, h, w);
        let tol = [0.0, 1.0, 1.5, 2.0, 3.7][case % 5];
        let got = surface_dice(&p, &t, tol)?;
        let want = brute_force_sds(&p, &t, tol);
        ensure!(got == want, "case {case} ({h}x{w}, tol {tol}): {got} vs oracle {want}");
        let inter = (0..h * w).filter(|&i| p.get(i / w, i % w) && t.get(i / w, i % w)).count();
        let denom = p.count() + t.count();
        let dice = if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 };
        ensure!(volumetric_dice(&p, &t)? == dice, "case {case}: volumetric dice mismatch");
    }
    Ok("200 random mask pairs up to 32x32 match the brute-force oracle exactly".into())
}

// ----------------------------------------------------------------- criterion 10

fn tree_bytes(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn tiny_run(dir: &Path) -> Result<String> {
    cli(dir, &["gen-data", "--out", "data", "--seed", "5", "--size", "16", "--n-train", "8", "--n-test", "2"])?;
    cli(dir, &["pretrain", "--data", "data", "--out", "pre", "--depth", "2", "--base-channels", "4", "--epochs", "3", "--batch-size", "4"])?;
    cli(dir, &["train-esh", "--base", "pre/base.clra", "--data", "data", "--out", "esh", "--epochs", "2", "--batch-size", "4"])?;
    cli(
        dir,
        &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "ad", "--epochs", "2", "--seeds", "2", "--target-samples", "4"],
    )?;
    cli(
        dir,
        &["eval", "--base", "esh/base.clra", "--adapter", "ad/t3-moderate/seed0.clra", "ad/t3-moderate/seed1.clra", "--data", "data", "--out", "ev"],
    )
}

fn determinism() -> Result<String> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let ra = tiny_run(a.path())?;
    let rb = tiny_run(b.path())?;
    ensure!(ra == rb, "eval reports differ between identical runs");
    let ta = tree_bytes(a.path())?;
    let tb = tree_bytes(b.path())?;
    ensure!(ta.len() == tb.len(), "runs produced {} vs {} files", ta.len(), tb.len());
    for (p, bytes) in &ta {
        ensure!(tb.get(p) == Some(bytes), "{} differs between identical runs", p.display());
    }

    let base_path = a.path().join("esh/base.clra");
    let base_bytes = std::fs::read(&base_path)?;
    let (model, info, _) = load_base(&base_path)?;
    ensure!(base_to_container(&model, &info)?.to_bytes() == base_bytes, "base checkpoint round trip not bitwise");
    let ad_path = a.path().join("ad/t3-moderate/seed0.clra");
    let ad_bytes = std::fs::read(&ad_path)?;
    ensure!(AdapterCheckpoint::from_bytes(&ad_bytes)?.to_bytes()? == ad_bytes, "adapter round trip not bitwise");

    let mut flips = 0;
    for (name, bytes) in [("adapter", &ad_bytes), ("base", &base_bytes)] {
        for i in 0..bytes.len() {
            let mut c = bytes.to_vec();
            c[i] ^= 1 << (i % 8);
            let rejected = if name == "base" {
                convlora_core::data::base_from_bytes(&c).is_err()
            } else {
                AdapterCheckpoint::from_bytes(&c).is_err()
            };
            ensure!(rejected, "{name}: flip at byte {i} went undetected");
            flips += 1;
        }
    }
    let mut corrupt = base_bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    std::fs::write(a.path().join("corrupt.clra"), &corrupt)?;
    ensure!(
        cli_fails(a.path(), &["eval", "--base", "corrupt.clra", "--data", "data"])?,
        "CLI accepted a corrupted checkpoint"
    );
    Ok(format!(
        "{} files byte-identical across two runs; checkpoints round-trip bitwise; {flips} single-byte corruptions detected",
        ta.len()
    ))
}
