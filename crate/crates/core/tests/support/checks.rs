//! Self-contained checks that return a one-line verdict. Run from this
//! crate's tests and from the workspace acceptance target.

use std::sync::Arc;

use sdc_forge_core::data::{synthetic_corpus, Batch, BatchStream};
use sdc_forge_core::detector::{DetectorConfig, DetectorState, Reason};
use sdc_forge_core::guard::{GuardConfig, Mode, Session};
use sdc_forge_core::model::{backward, forward, GemmTap, GradientSet, ModelConfig, ParameterSet};
use sdc_forge_core::optim::{adamw_step, clip_gradients, global_grad_norm, AdamWConfig, OptimizerState};
use sdc_forge_core::trainer::Trainer;
use sdc_forge_core::{Bf16, Bf16Matrix};

use super::shadow;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// splitmix64, enough randomness for test inputs.
pub struct Mix(pub u64);

impl Mix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f32 {
        (self.next() >> 40) as f32 / (1u64 << 24) as f32
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        seq_len: 8,
        ffn_mult: 4,
    }
}

/// Analytic bf16 gradients against central differences of the f64 shadow
/// model. The metric is, per group, `|g - g_fd| / |g_fd|` in the L2 norm.
pub fn finite_difference(tolerance: f64) -> Check {
    let cfg = small_model();
    let batch_size = 2;
    let mut params = ParameterSet::init(&cfg, 11).map_err(|e| e.to_string())?;
    // non-trivial gains so their gradients are not symmetric
    let mut mix = Mix(5);
    for g in params.groups_mut() {
        if g.name.ends_with("norm") {
            for v in g.value.data_mut() {
                *v = Bf16::from_f32(0.75 + 0.5 * mix.unit());
            }
        }
    }
    let n = batch_size * cfg.seq_len;
    let inputs: Vec<u32> = (0..n).map(|_| (mix.next() % 256) as u32).collect();
    let targets: Vec<u32> = (0..n).map(|_| (mix.next() % 256) as u32).collect();
    let batch = Batch::new(batch_size, cfg.seq_len, inputs.clone(), targets.clone()).map_err(|e| e.to_string())?;
    let mut tap = GemmTap::clean();
    let rec = forward(&cfg, &params, &batch, &mut tap).map_err(|e| e.to_string())?;
    let grads = backward(&cfg, &params, &rec, &batch, &mut tap).map_err(|e| e.to_string())?;

    let mut p = shadow::decode(&params);
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    for gi in 0..p.len() {
        let name = params.groups()[gi].name.clone();
        let cols = params.value(gi).cols();
        let analytic: Vec<f64> = grads.groups[gi].data().iter().map(|v| v.to_f32() as f64).collect();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for j in 0..p[gi].len() {
            // unused token rows have an exactly zero gradient on both sides
            if gi == 0 && !inputs.contains(&((j / cols) as u32)) {
                if analytic[j] != 0.0 {
                    return Err(format!("{name}[{j}]: gradient on an unused token row"));
                }
                continue;
            }
            let x = p[gi][j];
            p[gi][j] = x + h;
            let up = shadow::loss(&cfg, &p, &inputs, &targets, batch_size);
            p[gi][j] = x - h;
            let down = shadow::loss(&cfg, &p, &inputs, &targets, batch_size);
            p[gi][j] = x;
            let fd = (up - down) / (2.0 * h);
            diff += (analytic[j] - fd).powi(2);
            norm += fd * fd;
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    let msg = format!("max relative error {:.3e} ({}), tolerance {tolerance:e}", worst.0, worst.1);
    if worst.0 <= tolerance {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_set(values: &[&[f32]]) -> GradientSet {
    GradientSet {
        groups: values
            .iter()
            .map(|v| Bf16Matrix::from_f32(1, v.len(), v).expect("finite layout"))
            .collect(),
    }
}

/// An infinite pre-clip norm zeroes every finite entry.
pub fn clipping_collapse() -> Check {
    let grads = gradient_set(&[&[0.5, -0.25, 1e-3], &[f32::INFINITY, 2.0]]);
    let norm = global_grad_norm(&grads);
    ensure(norm == f32::INFINITY, || format!("norm {norm}, expected inf"))?;
    let clipped = clip_gradients(&grads, norm, 1.0);
    for (g, c) in grads.groups.iter().zip(&clipped.groups) {
        for (a, b) in g.data().iter().zip(c.data()) {
            if a.is_finite() {
                ensure(b.to_f32() == 0.0, || format!("finite entry {} clipped to {}", a.to_f32(), b.to_f32()))?;
            }
        }
    }

    // all-finite entries whose squares overflow: same collapse, and the
    // update runs on the decayed first moment alone
    let grads = gradient_set(&[&[3e19, 1.0], &[-2.0]]);
    let norm = global_grad_norm(&grads);
    ensure(norm == f32::INFINITY, || format!("overflowing norm {norm}"))?;
    let clipped = clip_gradients(&grads, norm, 1.0);
    ensure(clipped.entries().all(|v| v.to_f32() == 0.0), || "finite gradient not collapsed".into())?;
    let mut params = ParameterSet::from_groups(
        ["a", "b"]
            .iter()
            .zip([2, 1])
            .map(|(name, len)| sdc_forge_core::model::ParamGroup {
                name: name.to_string(),
                kind: sdc_forge_core::model::GroupKind::NormGain,
                value: Bf16Matrix::filled(1, len, Bf16::ONE),
            })
            .collect(),
    );
    let cfg = AdamWConfig::default();
    let mut state = OptimizerState::new(&params);
    state.t = 4;
    state.m = vec![vec![0.1, -0.2], vec![0.3]];
    state.v = vec![vec![0.01, 0.04], vec![0.09]];
    let before = state.clone();
    adamw_step(&mut params, &clipped, &mut state, &cfg, 1e-3).map_err(|e| e.to_string())?;
    for (i, (m0, m1)) in before.m.iter().zip(&state.m).enumerate() {
        for (a, b) in m0.iter().zip(m1) {
            ensure(*b == cfg.beta1 * a, || format!("group {i}: first moment {b} is not the decayed {a}"))?;
        }
    }
    Ok(format!("norm inf, {} finite entries clipped to exactly 0, momentum-only update", 5))
}

fn stall_setup() -> Result<(Trainer, AdamWConfig), String> {
    let model = ModelConfig {
        seq_len: 16,
        ..small_model()
    };
    let optim = AdamWConfig {
        lr_max: 3e-3,
        warmup_steps: 10,
        total_steps: 400,
        clip: None,
        ..AdamWConfig::default()
    };
    let corpus: Arc<[u8]> = synthetic_corpus(0, 1 << 18).into();
    let data = BatchStream::new(corpus, 8, model.seq_len, 0, 8).map_err(|e| e.to_string())?;
    let trainer = Trainer::from_seed(model, optim, 0, data).map_err(|e| e.to_string())?;
    Ok((trainer, optim))
}

/// Parameters after a step whose adaptive update was exactly zero: only
/// weight decay, computed the way the optimizer does it.
fn decay_only(value: Bf16, lr: f32, decay: f32) -> Bf16 {
    let th = value.to_f32();
    Bf16::from_f32(th - 0.0 - lr * decay * th)
}

/// With clipping off, a gradient whose square overflows makes the second
/// moment infinite and the adaptive update exactly zero from then on.
/// `warm` clean steps, one injected step, then `after` steps.
pub fn optimizer_stall(warm: u64, after: u64) -> Check {
    // one entry
    let (mut tr, optim) = stall_setup()?;
    for _ in 0..warm {
        tr.train_step(None).map_err(|e| e.to_string())?;
    }
    let (gi, j) = (3, 5);
    let mut hit = |_: u64, g: &mut GradientSet| g.groups[gi].data_mut()[j] = Bf16::MAX;
    tr.train_step_edit(None, Some(&mut hit)).map_err(|e| e.to_string())?;
    ensure(tr.optimizer().v[gi][j] == f32::INFINITY, || format!("v = {}", tr.optimizer().v[gi][j]))?;
    let decay = if tr.params().groups()[gi].kind.decays() { optim.weight_decay } else { 0.0 };
    let mut moved = 0;
    for _ in 0..after {
        let before = tr.params().value(gi).data()[j];
        let other = tr.params().value(gi).data()[j + 1];
        let out = tr.train_step(None).map_err(|e| e.to_string())?;
        let now = tr.params().value(gi).data()[j];
        ensure(now == decay_only(before, out.update.lr, decay), || {
            format!("step {}: stalled entry moved {} -> {}", out.step, before.to_f32(), now.to_f32())
        })?;
        moved += (tr.params().value(gi).data()[j + 1] != other) as u32;
    }
    ensure(moved > 0, || "neighbouring entry never moved".into())?;

    // every entry: the whole model freezes and the loss flattens
    let (mut frozen, _) = stall_setup()?;
    let (mut clean, _) = stall_setup()?;
    for _ in 0..warm {
        frozen.train_step(None).map_err(|e| e.to_string())?;
        clean.train_step(None).map_err(|e| e.to_string())?;
    }
    let mut saturate = |_: u64, g: &mut GradientSet| {
        for grp in &mut g.groups {
            for v in grp.data_mut() {
                *v = if v.to_f32() < 0.0 { Bf16::from_f32(-Bf16::MAX.to_f32()) } else { Bf16::MAX };
            }
        }
    };
    frozen.train_step_edit(None, Some(&mut saturate)).map_err(|e| e.to_string())?;
    clean.train_step(None).map_err(|e| e.to_string())?;
    let eval = frozen.data().eval_set();
    let start = frozen.eval_loss(&eval).map_err(|e| e.to_string())?;
    let clean_start = clean.eval_loss(&eval).map_err(|e| e.to_string())?;
    for _ in 0..after {
        let prev = frozen.params().clone();
        let out = frozen.train_step(None).map_err(|e| e.to_string())?;
        clean.train_step(None).map_err(|e| e.to_string())?;
        for (p, q) in prev.groups().iter().zip(frozen.params().groups()) {
            let decay = if p.kind.decays() { optim.weight_decay } else { 0.0 };
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                ensure(*b == decay_only(*a, out.update.lr, decay), || {
                    format!("step {}: {} moved beyond weight decay", out.step, p.name)
                })?;
            }
        }
        ensure(out.update.r_t == 0.0, || format!("step {}: R_t = {}", out.step, out.update.r_t))?;
    }
    let end = frozen.eval_loss(&eval).map_err(|e| e.to_string())?;
    let clean_end = clean.eval_loss(&eval).map_err(|e| e.to_string())?;
    let (stalled, progress) = ((end - start).abs(), clean_start - clean_end);
    ensure(stalled < 0.1 * progress, || {
        format!("eval loss moved {stalled} after the stall; clean run improved {progress}")
    })?;
    Ok(format!(
        "update exactly 0 for {after} steps; eval loss {start:.4} -> {end:.4} stalled, clean {clean_start:.4} -> {clean_end:.4}"
    ))
}

fn random_state(mix: &mut Mix, alpha: f32) -> DetectorState {
    DetectorState {
        config: DetectorConfig { alpha, warmup: 100, min_steps: 10 },
        prev_r: mix.unit() * 1e-2,
        prev_g: mix.unit() * 4.0,
        sum_delta_r: mix.unit() * 1e-2,
        samples: 1 + (mix.next() % 100) as u32,
        last_step: Some(50),
    }
}

/// Detector properties: monotone in alpha, silent without a rising norm,
/// non-finite rule independent of alpha, warm-up mean built from clean
/// steps only, verdicts invariant to scaling R by a power of two.
pub fn detector_rules() -> Check {
    let mut mix = Mix(42);
    let alphas = [1e-3f32, 3e-3, 1e-2, 0.03, 0.05, 0.1, 0.3, 1.0];
    for _ in 0..2000 {
        let base = random_state(&mut mix, 1.0);
        let (r, g) = (mix.unit() * 2e-2, mix.unit() * 8.0);
        let mut fired_before = false;
        for &a in &alphas {
            let s = DetectorState { config: DetectorConfig { alpha: a, ..base.config }, ..base };
            let fired = s.evaluate(r, g, 51).is_anomalous();
            ensure(fired || !fired_before, || format!("alpha {a} silent where a smaller alpha fired"))?;
            fired_before = fired;
            if g <= s.prev_g {
                ensure(!fired, || format!("fired with dG = 0 (G {g} <= {})", s.prev_g))?;
            }
            for bad in [f32::INFINITY, f32::NAN] {
                let d = s.evaluate(r, bad, 51);
                ensure(d.is_anomalous() && d.reason == Reason::NonFiniteNorm, || format!("alpha {a}: G = {bad} not flagged"))?;
                let d = s.evaluate(bad, g, 51);
                ensure(d.is_anomalous() && d.reason == Reason::NonFiniteNorm, || format!("alpha {a}: R = {bad} not flagged"))?;
            }
        }
    }

    // warm-up purity: flagged and non-finite steps never enter mu
    let cfg = DetectorConfig { alpha: 0.05, warmup: 50, min_steps: 5 };
    let mut d = DetectorState::new(cfg);
    let mut clean = Vec::new();
    let (mut r, mut g) = (1e-3f32, 1.0f32);
    for step in 1..=80u64 {
        let (rs, gs) = match step {
            20 => (r + 5.0, g + 100.0),
            30 => (r, f32::INFINITY),
            _ => {
                r += (mix.unit() - 0.5) * 1e-4;
                g += (mix.unit() - 0.5) * 0.1;
                (r, g)
            }
        };
        let dec = d.observe(rs, gs, step).map_err(|e| e.to_string())?;
        if matches!(step, 20 | 30) {
            ensure(dec.is_anomalous(), || format!("injected step {step} not flagged"))?;
        } else if dec.is_anomalous() {
            return Err(format!("clean step {step} flagged"));
        } else if clean.len() < cfg.warmup as usize {
            clean.push(dec.delta_r);
        }
    }
    let want: f32 = clean.iter().sum::<f32>() / clean.len() as f32;
    ensure(d.samples == cfg.warmup && d.mu() == Some(want), || {
        format!("mu {:?} over {} samples, expected {want} over {}", d.mu(), d.samples, cfg.warmup)
    })?;

    // homogeneity in R
    for trial in 0..200 {
        let mut m = Mix(1000 + trial);
        let seq: Vec<(f32, f32)> = (0..120)
            .map(|i| {
                let spike = if m.next() % 17 == 0 { 50.0 } else { 1.0 };
                (1e-3 * (1.0 + m.unit()) * spike, 1.0 + i as f32 * 0.01 + m.unit() * spike)
            })
            .collect();
        let verdicts = |c: f32| -> Result<Vec<bool>, String> {
            let mut d = DetectorState::new(DetectorConfig { alpha: 0.05, warmup: 30, min_steps: 10 });
            seq.iter()
                .enumerate()
                .map(|(i, &(r, g))| d.observe(r * c, g, i as u64 + 1).map(|x| x.is_anomalous()).map_err(|e| e.to_string()))
                .collect()
        };
        let base = verdicts(1.0)?;
        for c in [0.25, 8.0, 1024.0] {
            ensure(verdicts(c)? == base, || format!("trial {trial}: scaling R by {c} changed verdicts"))?;
        }
    }
    Ok("alpha-monotone, dG=0 silent, non-finite alpha-independent, mu pure, R-homogeneous".into())
}

pub fn small_trainer(seed: u64) -> Result<Trainer, String> {
    let model = small_model();
    let optim = AdamWConfig {
        warmup_steps: 5,
        total_steps: 200,
        ..AdamWConfig::default()
    };
    let corpus: Arc<[u8]> = synthetic_corpus(1, 1 << 16).into();
    let data = BatchStream::new(corpus, 4, model.seq_len, seed, 4).map_err(|e| e.to_string())?;
    Trainer::from_seed(model, optim, seed, data).map_err(|e| e.to_string())
}

/// A forced detection on a clean step recomputes to the same signals and
/// commits the same state as an unguarded run.
pub fn false_positive_path() -> Check {
    let det = DetectorConfig { alpha: 0.05, warmup: 10, min_steps: 3 };
    let mut guarded = Session::new(Mode::Guarded, small_trainer(3)?, det, None, GuardConfig::default()).map_err(|e| e.to_string())?;
    let mut plain = Session::new(Mode::Baseline, small_trainer(3)?, det, None, GuardConfig::default()).map_err(|e| e.to_string())?;
    let mut forced = 0;
    for step in 1..=30u64 {
        if step % 7 == 0 {
            guarded.force_next_detection();
            forced += 1;
        }
        let g = guarded.step().map_err(|e| e.to_string())?;
        let p = plain.step().map_err(|e| e.to_string())?;
        let report = g.guard.ok_or("guarded step without a report")?;
        if step % 7 == 0 {
            ensure(report.recomputed, || format!("step {step}: forced detection not recomputed"))?;
            ensure(report.recomputed_delta_r.to_bits() == report.original_delta_r.to_bits(), || {
                format!("step {step}: dR {} recomputed as {}", report.original_delta_r, report.recomputed_delta_r)
            })?;
        } else {
            ensure(!report.recomputed, || format!("step {step}: clean step recomputed"))?;
        }
        let (a, b) = (guarded.trainer(), plain.trainer());
        ensure(a.params() == b.params() && a.optimizer().bits_eq(b.optimizer()), || {
            format!("step {step}: committed state differs from the unguarded run")
        })?;
        ensure(guarded.detector() == plain.detector(), || format!("step {step}: detector state differs"))?;
        ensure(g.telemetry.train_loss.to_bits() == p.telemetry.train_loss.to_bits(), || format!("step {step}: loss differs"))?;
    }
    Ok(format!("{forced} forced detections: dR bit-identical, state equal to the unguarded run"))
}
