//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use t2i_core::alignment::{
    best_response_ce_loss, rank_hinge, rank_loss, rrhf_total_loss, CandidateSet, Origin, SampleStats,
};
use t2i_core::catalog::textgen::OfflineClient;
use t2i_core::catalog::{
    ingest, read_records, split_dataset, strip_lora_tags, IngestSummary, LoraTag, QualityThresholds, Registry,
    RegistryEntry,
};
use t2i_core::evaluation::{hallucination_error, timing_probe, EvalConfig, Variant};
use t2i_core::pipeline::{encode_all, instructions, run_all, TrainConfig};
use t2i_core::policy::{sft_loss_and_grad, Policy, PolicyParams};
use t2i_core::schema::{
    ArchitectureFamily, Instruction, InstructionApiPair, ModelInfo, ModelKind, ParamInfo, SamplerSet, Vocab,
};
use t2i_core::scoring::{
    clip_score, hps_score, normalize_scores, unified_from_triples, Backends, ImageFeatures, NormalizationContext,
    Provenance, ScoreTriple, ScorerBackend, StyleWorld,
};
use t2i_core::synth::style_world;
use t2i_core::util::rng;

const EXACT: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error. Gradients that cancel to zero
/// leave about 1e-10 of difference-quotient roundoff.
const FD_SCALE_FLOOR: f64 = 1e-4;
const ACCEPTANCE_SEEDS: [u64; 3] = [1, 2, 3];
const LATENCY_BOUND: f64 = 0.01;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= EXACT, || format!("{what}: got {got}, want {want}"))
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

/// Scorer returning fixed embeddings and similarity.
struct Fixed {
    text: Vec<f64>,
    image: Vec<f64>,
    tau: f64,
}

impl ScorerBackend for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }
    fn dimension(&self) -> usize {
        self.text.len()
    }
    fn embed_text(&self, _: &str) -> t2i_core::scoring::Result<Vec<f64>> {
        Ok(self.text.clone())
    }
    fn embed_image(&self, _: &ImageFeatures) -> t2i_core::scoring::Result<Vec<f64>> {
        Ok(self.image.clone())
    }
    fn reward_scalar(&self, _: &str, _: &ImageFeatures) -> t2i_core::scoring::Result<f64> {
        Ok(0.0)
    }
    fn tau(&self) -> f64 {
        self.tau
    }
}

fn features() -> ImageFeatures {
    ImageFeatures {
        vector: vec![0.0; 2],
        unit_norm: false,
        provenance: Provenance { api_id: "x".into(), prompt_hash: 0, seed: 0 },
    }
}

/// Unit vectors at angle `acos(cos)` in the plane.
fn with_cosine(cos: f64) -> Fixed {
    Fixed { text: vec![1.0, 0.0], image: vec![cos, (1.0 - cos * cos).sqrt()], tau: 0.01 }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let t = Instruction::new("a cat", "");
    let x = features();
    close(clip_score(&t, &x, &with_cosine(0.3)).map_err(|e| e.to_string())?, 0.75, "clip(cos 0.3)")?;
    close(clip_score(&t, &x, &with_cosine(-0.2)).map_err(|e| e.to_string())?, 0.0, "clip(cos -0.2)")?;
    close(clip_score(&t, &x, &with_cosine(1.0)).map_err(|e| e.to_string())?, 2.5, "clip(identical)")?;

    let hps = Fixed { text: vec![0.26, 0.0], image: vec![1.0, 0.0], tau: 0.01 };
    close(hps_score(&t, &x, &hps).map_err(|e| e.to_string())?, 26.0, "hps(dot 0.26)")?;
    let ortho = Fixed { text: vec![1.0, 0.0], image: vec![0.0, 1.0], tau: 0.01 };
    close(hps_score(&t, &x, &ortho).map_err(|e| e.to_string())?, 0.0, "hps(orthogonal)")?;
    let zero_tau = Fixed { tau: 0.0, ..ortho };
    ensure(hps_score(&t, &x, &zero_tau).is_err(), || "tau 0 accepted".into())?;

    for (raw, want) in [
        (vec![1.0, 3.0, 5.0], vec![0.0, 0.5, 1.0]),
        (vec![4.0, 4.0, 4.0], vec![0.5, 0.5, 0.5]),
        (vec![7.0], vec![0.5]),
    ] {
        let got = normalize_scores(&raw);
        for (g, w) in got.iter().zip(&want) {
            close(*g, *w, &format!("normalize {raw:?}"))?;
        }
    }

    // Population spanning [0, 2.5] x [10, 20] x [1, 3]; the probe normalizes
    // to (0.2, 0.4, 0.6).
    let lo = ScoreTriple { clip: 0.0, image_reward: 10.0, hps: 1.0 };
    let hi = ScoreTriple { clip: 2.5, image_reward: 20.0, hps: 3.0 };
    let probe = ScoreTriple { clip: 0.5, image_reward: 14.0, hps: 2.2 };
    let ctx = NormalizationContext::from_triples([&lo, &hi, &probe]);
    let u = unified_from_triples(&[probe], &ctx).map_err(|e| e.to_string())?;
    close(u.value, 0.4, "unified k=1")?;
    // Per-image 0.3 and 0.5.
    let a = ScoreTriple { clip: 0.75, image_reward: 13.0, hps: 1.6 };
    let b = ScoreTriple { clip: 1.25, image_reward: 15.0, hps: 2.0 };
    let ctx = NormalizationContext::from_triples([&lo, &hi, &a, &b]);
    let u = unified_from_triples(&[a, b], &ctx).map_err(|e| e.to_string())?;
    close(u.per_image[0], 0.3, "per-image a")?;
    close(u.per_image[1], 0.5, "per-image b")?;
    close(u.value, 0.4, "unified k=2")?;
    let same = [lo, lo];
    let ctx = NormalizationContext::from_triples(&same);
    close(unified_from_triples(&same, &ctx).map_err(|e| e.to_string())?.value, 0.5, "identical candidates")?;

    let mut r = rng(11);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100_000 {
        let dim = r.gen_range(1..16);
        let v = |r: &mut rand_chacha::ChaCha8Rng| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let s = Fixed { text: v(&mut r), image: v(&mut r), tau: 0.01 };
        let c = clip_score(&t, &x, &s).map_err(|e| e.to_string())?;
        range = (range.0.min(c), range.1.max(c));
        ensure((0.0..=2.5).contains(&c), || format!("clip {c} outside [0, 2.5]"))?;
    }
    within(start.elapsed(), Duration::from_secs(1), "formula checks")?;
    Ok(format!("hand values to 1e-12; 1e5 clip samples in [{:.3}, {:.3}]", range.0, range.1))
}

const MODELS: [&str; 5] = ["pixel-xl", "anime-xl", "photo-xl", "cyberpunk-xl", "sdxl-base"];
const WORDS: [&str; 8] = ["pixel", "anime", "photo", "neon", "cat", "castle", "girl", "city"];

fn registry() -> Registry {
    let entries = MODELS.iter().enumerate().map(|(i, m)| RegistryEntry {
        info: ModelInfo {
            model: m.to_string(),
            kind: ModelKind::Checkpoint,
            base_model: ArchitectureFamily::Sdxl,
            model_description: String::new(),
        },
        params: ParamInfo::defaults(ArchitectureFamily::Sdxl),
        hashes: Default::default(),
        download_count: 100 * (i as u64 + 1),
        baseline: *m == "sdxl-base",
    });
    Registry::build(entries, SamplerSet::default()).expect("registry")
}

fn random_policy(r: &mut impl Rng) -> Policy {
    let vocab = Vocab::new(MODELS, &SamplerSet::default(), WORDS).expect("vocab");
    let mut p = Policy::new(vocab, 16);
    p.params.weights.iter_mut().for_each(|w| *w = r.gen_range(-1.0..1.0));
    p
}

fn random_prompt(r: &mut impl Rng) -> Instruction {
    let n = r.gen_range(1..5);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(r).unwrap()).collect();
    Instruction::new(words.join(" "), "")
}

fn random_api(reg: &Registry, r: &mut impl Rng, model: &str) -> t2i_core::schema::T2IApi {
    let mut api = reg.get(model).unwrap().api();
    api.params.width = [512, 768, 1024][r.gen_range(0..3)];
    api.params.sampling_steps = [20, 30, 40][r.gen_range(0..3)];
    api
}

fn random_set(reg: &Registry, r: &mut impl Rng) -> CandidateSet {
    let mut models = MODELS.to_vec();
    models.shuffle(r);
    let n = r.gen_range(2..=MODELS.len());
    let responses: Vec<_> = models[..n].iter().map(|m| random_api(reg, r, m)).collect();
    CandidateSet {
        prompt: random_prompt(r),
        origins: vec![Origin::Multinomial; n],
        scores: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
        logprobs: vec![0.0; n],
        responses,
        stats: SampleStats::default(),
    }
}

/// Worst relative error of central differences over 20 coordinates, half
/// with nonzero analytic gradient.
fn fd_error(p: &Policy, loss: &dyn Fn(&Policy) -> f64, grad: &PolicyParams, r: &mut impl Rng) -> f64 {
    let nonzero: Vec<usize> = (0..grad.weights.len()).filter(|&i| grad.weights[i] != 0.0).collect();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let i = if k % 2 == 0 && !nonzero.is_empty() {
            nonzero[r.gen_range(0..nonzero.len())]
        } else {
            r.gen_range(0..grad.weights.len())
        };
        let mut plus = p.clone();
        plus.params.weights[i] += FD_STEP;
        let mut minus = p.clone();
        minus.params.weights[i] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let analytic = grad.weights[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let reg = registry();
    let mut r = rng(22);
    let mut worst = BTreeMap::new();
    for _ in 0..50 {
        let p = random_policy(&mut r);
        let set = random_set(&reg, &mut r);
        let pairs: Vec<InstructionApiPair> =
            set.responses.iter().map(|a| InstructionApiPair { instruction: set.prompt.clone(), api: a.clone() }).collect();
        let batch = encode_all(&p, &pairs).map_err(|e| e.to_string())?;

        let (_, g) = sft_loss_and_grad(&p, &batch).map_err(|e| e.to_string())?;
        let e = fd_error(&p, &|q| sft_loss_and_grad(q, &batch).unwrap().0, &g, &mut r);
        let (_, g) = rank_loss(&p, &set).map_err(|e| e.to_string())?;
        let e2 = fd_error(&p, &|q| rank_loss(q, &set).unwrap().0, &g, &mut r);
        let (_, g) = best_response_ce_loss(&p, &set).map_err(|e| e.to_string())?;
        let e3 = fd_error(&p, &|q| best_response_ce_loss(q, &set).unwrap().0, &g, &mut r);
        let total = rrhf_total_loss(&p, &set).map_err(|e| e.to_string())?;
        let e4 = fd_error(&p, &|q| rrhf_total_loss(q, &set).unwrap().total, &total.grad, &mut r);
        for (name, e) in [("sft", e), ("rank", e2), ("ce", e3), ("total", e4)] {
            let w = worst.entry(name).or_insert(0.0f64);
            *w = w.max(e);
        }
    }
    for (name, e) in &worst {
        ensure(*e < FD_REL_TOL, || format!("{name} gradient relative error {e:.2e}"))?;
    }
    within(start.elapsed(), Duration::from_secs(30), "gradient checks")?;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("50 instances, worst rel. error: {}", detail.join(", ")))
}

/// Pairwise hinge written pair by pair, with its derivative in `p`.
fn hinge_oracle(p: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut loss = 0.0;
    let mut d = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (lo, hi) = match s[i].partial_cmp(&s[j]).unwrap() {
                std::cmp::Ordering::Less => (i, j),
                std::cmp::Ordering::Greater => (j, i),
                std::cmp::Ordering::Equal => continue,
            };
            if p[lo] > p[hi] {
                loss += p[lo] - p[hi];
                d[lo] += 1.0;
                d[hi] -= 1.0;
            }
        }
    }
    (loss, d)
}

fn inversions(p: &[f64], s: &[f64]) -> usize {
    let mut n = 0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if s[i] < s[j] && p[i] > p[j] {
                n += 1;
            }
        }
    }
    n
}

fn criterion_3() -> Outcome {
    let mut r = rng(33);
    let mut zero_cases = 0;
    let mut tie_cases = 0;
    for case in 0..1000 {
        let n = r.gen_range(2..9);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..0.0)).collect();
        // Coarse grid so ties are common.
        let mut s: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..4)) / 4.0).collect();
        if case % 4 == 0 {
            // Align scores with log-probabilities: no inversions.
            s = p.clone();
        }
        let (loss, coef) = rank_hinge(&p, &s);
        let (want, d) = hinge_oracle(&p, &s);
        ensure((loss - want).abs() < 1e-12 && coef == d, || format!("case {case}: hinge differs from oracle"))?;
        let inv = inversions(&p, &s);
        ensure((loss == 0.0) == (inv == 0), || format!("case {case}: loss {loss} with {inv} inversions"))?;
        zero_cases += usize::from(inv == 0);

        for f in [|x: f64| 3.0 * x + 1.0, |x: f64| x.powi(3), |x: f64| (5.0 * x).exp(), |x: f64| x.atan()] {
            let t: Vec<f64> = s.iter().map(|&x| f(x)).collect();
            let (l2, c2) = rank_hinge(&p, &t);
            ensure(l2 == loss && c2 == coef, || format!("case {case}: not invariant under monotone rescaling"))?;
        }

        // Moving p within a tied group never changes the loss contribution
        // of that pair: compare against the loss with the pair removed.
        if let Some((i, j)) = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).find(|&(i, j)| s[i] == s[j]) {
            tie_cases += 1;
            let mut q = p.clone();
            q.swap(i, j);
            let swapped = rank_hinge(&q, &s).0;
            let (base_i, base_j) = (hinge_without(&p, &s, i, j), hinge_without(&q, &s, i, j));
            ensure((loss - base_i - (swapped - base_j)).abs() < 1e-12, || format!("case {case}: tie contributes"))?;
        }
    }
    Ok(format!("1000 sets ({zero_cases} inversion-free, {tie_cases} with ties)"))
}

/// Hinge loss excluding the single pair `(i, j)`.
fn hinge_without(p: &[f64], s: &[f64], i: usize, j: usize) -> f64 {
    let mut loss = 0.0;
    for a in 0..p.len() {
        for b in 0..p.len() {
            if (a, b) == (i, j) || (a, b) == (j, i) {
                continue;
            }
            if s[a] < s[b] && p[a] > p[b] {
                loss += p[a] - p[b];
            }
        }
    }
    loss
}

struct WorldRun {
    seed: u64,
    sft_halluc: f64,
    rrhf_halluc: f64,
    unified: BTreeMap<Variant, f64>,
    latency: f64,
    styles: usize,
    models: usize,
    train_pairs: usize,
}

fn world_runs() -> Result<(Vec<WorldRun>, Duration), String> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in ACCEPTANCE_SEEDS {
        let w = style_world(seed);
        let world = Arc::new(StyleWorld::new(w.spec.clone()).map_err(|e| e.to_string())?);
        let b = Backends { generation: world.clone(), scorer: world };
        let ing = ingest(&w.records, &QualityThresholds::default(), &SamplerSet::default(), &OfflineClient)
            .map_err(|e| e.to_string())?;
        let cfg = TrainConfig::default().with_seed(seed);
        let eval = EvalConfig { seed, ..Default::default() };
        let out = run_all(&ing.registry, &ing.pairs, &b, &cfg, &eval).map_err(|e| e.to_string())?;
        let prompts = instructions(&out.splits.eval);
        let halluc = |p: &Policy| hallucination_error(p, &prompts, &ing.registry).map_err(|e| e.to_string());
        runs.push(WorldRun {
            seed,
            sft_halluc: halluc(&out.sft)?,
            rrhf_halluc: halluc(&out.rrhf)?,
            unified: out.report.rows.iter().map(|r| (r.variant, r.unified_mean)).collect(),
            latency: timing_probe(&out.rrhf, &prompts, &ing.registry).map_err(|e| e.to_string())?,
            styles: w.spec.styles.len(),
            models: ing.registry.len(),
            train_pairs: out.splits.train.len(),
        });
    }
    Ok((runs, start.elapsed()))
}

fn criterion_4(runs: &[WorldRun], elapsed: Duration) -> Outcome {
    let mut parts = Vec::new();
    for r in runs {
        ensure(r.models >= 20 && r.styles >= 5 && r.train_pairs >= 500, || {
            format!("seed {}: world too small ({} models, {} styles, {} pairs)", r.seed, r.models, r.styles, r.train_pairs)
        })?;
        ensure(r.rrhf_halluc < r.sft_halluc, || {
            format!("seed {}: RRHF {:.3} not below SFT {:.3}", r.seed, r.rrhf_halluc, r.sft_halluc)
        })?;
        parts.push(format!("seed {} {:.3}->{:.3}", r.seed, r.sft_halluc, r.rrhf_halluc));
    }
    within(elapsed, Duration::from_secs(300), "StyleWorld runs")?;
    Ok(format!("hallucination SFT->RRHF: {}", parts.join(", ")))
}

fn criterion_5(runs: &[WorldRun], elapsed: Duration) -> Outcome {
    let mut parts = Vec::new();
    for r in runs {
        let u = |v| r.unified[&v];
        let (rrhf, sft, base) = (u(Variant::Rrhf), u(Variant::Sft), u(Variant::Baseline));
        ensure(rrhf > sft && sft > base, || format!("seed {}: RRHF {rrhf:.4}, SFT {sft:.4}, Baseline {base:.4}", r.seed))?;
        ensure(u(Variant::ParamsOnly) >= base, || format!("seed {}: Params-only below Baseline", r.seed))?;
        ensure(u(Variant::ModelOnly) >= base, || format!("seed {}: Model-only below Baseline", r.seed))?;
        parts.push(format!("seed {} {rrhf:.3}>{sft:.3}>{base:.3}", r.seed));
    }
    within(elapsed, Duration::from_secs(300), "StyleWorld runs")?;
    Ok(format!("unified RRHF>SFT>Baseline: {}", parts.join(", ")))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

#[derive(Deserialize)]
struct Expected {
    retained: Vec<String>,
    summary: IngestSummary,
}

#[derive(Deserialize)]
struct GrammarCase {
    input: String,
    clean: String,
    tags: Vec<LoraTag>,
}

fn criterion_6() -> Outcome {
    let f = File::open(fixtures().join("ingest_records.jsonl")).map_err(|e| e.to_string())?;
    let records = read_records(BufReader::new(f)).map_err(|e| e.to_string())?;
    let expected: Expected =
        serde_json::from_reader(File::open(fixtures().join("ingest_expected.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let out = ingest(&records, &QualityThresholds::default(), &SamplerSet::default(), &OfflineClient)
        .map_err(|e| e.to_string())?;
    let kept: Vec<String> = out.records.iter().map(|r| r.name.clone()).collect();
    ensure(records.len() == 20, || format!("fixture has {} records", records.len()))?;
    ensure(kept == expected.retained, || format!("retained {kept:?}"))?;
    ensure(out.summary == expected.summary, || format!("summary {:?}", out.summary))?;

    let cases: Vec<GrammarCase> =
        serde_json::from_reader(File::open(fixtures().join("lora_grammar.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(cases.len() == 30, || format!("{} grammar cases", cases.len()))?;
    let malformed = cases.iter().filter(|c| c.tags.iter().any(|t| t.weight.is_none())).count();
    for c in &cases {
        let s = strip_lora_tags(&c.input);
        ensure(s.clean == c.clean && s.tags == c.tags, || format!("strip_lora_tags({:?}) = {:?}", c.input, s))?;
    }

    let mut checked = 0;
    for n in [10, 23, 99, 676] {
        let pairs: Vec<InstructionApiPair> = (0..n)
            .map(|i| InstructionApiPair {
                instruction: Instruction::new(format!("prompt {i}"), ""),
                api: out.pairs[0].api.clone(),
            })
            .collect();
        let s = split_dataset(&pairs, 4).map_err(|e| e.to_string())?;
        ensure(s.align.len() == n / 10 && s.eval.len() == n / 10 && s.train.len() == n - 2 * (n / 10), || {
            format!("n={n}: sizes {}/{}/{}", s.train.len(), s.align.len(), s.eval.len())
        })?;
        let mut seen: Vec<&str> =
            s.train.iter().chain(&s.align).chain(&s.eval).map(|p| p.instruction.prompt.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        ensure(seen.len() == n, || format!("n={n}: splits overlap or drop pairs"))?;
        checked += 1;
    }
    Ok(format!(
        "{} of 20 records retained, {} pairs; 30 grammar cases ({malformed} malformed); {checked} split sizes",
        kept.len(),
        out.pairs.len()
    ))
}

fn t2i(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_t2i")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("t2i {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn tree_digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{:x}", Sha256::digest(std::fs::read(&p).expect("read"))));
            }
        }
    }
    out
}

/// Synth, ingest, train-sft, align, evaluate and recommend, twice in fresh
/// directories; every output file must hash identically.
fn cli_run(dir: &Path) -> Result<(BTreeMap<String, String>, String), String> {
    let d = dir.to_str().unwrap();
    t2i(&["synth", "--out", d, "--seed", "5"])?;
    let cfg = dir.join("run.toml");
    let mut text = std::fs::read_to_string(&cfg).map_err(|e| e.to_string())?;
    text.push_str("\n[train.sft]\nepochs = 10\n\n[train.rrhf]\nepochs = 1\n");
    std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let c = cfg.to_str().unwrap();
    for cmd in ["ingest", "train-sft", "align", "evaluate"] {
        t2i(&[cmd, "--config", c])?;
    }
    let rec = t2i(&["recommend", "--config", c, "--record", "neon", "city", "at", "night"])?;
    Ok((tree_digests(dir), rec))
}

fn criterion_7() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (da, ra) = cli_run(a.path())?;
    let (db, rb) = cli_run(b.path())?;
    ensure(da == db, || {
        let diff: Vec<_> = da.iter().filter(|(k, v)| db.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
        format!("differing files: {diff:?}")
    })?;
    ensure(ra == rb, || "recommend output differs".into())?;
    // Rerun in place over existing outputs.
    let c = a.path().join("run.toml");
    for cmd in ["ingest", "train-sft", "align", "evaluate"] {
        t2i(&[cmd, "--config", c.to_str().unwrap()])?;
    }
    ensure(tree_digests(a.path()) == da, || "in-place rerun changed outputs".into())?;
    Ok(format!("{} files byte-identical across 3 runs", da.len()))
}

fn criterion_8(runs: &[WorldRun]) -> Outcome {
    let worst = runs.iter().map(|r| r.latency).fold(0.0, f64::max);
    ensure(worst < LATENCY_BOUND, || format!("mean {worst:.5} s/prompt"))?;
    Ok(format!("worst mean {:.2e} s/prompt over {} eval splits", worst, runs.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((name, o, t.elapsed()));
    };
    timed("1 formula exactness", &criterion_1);
    timed("2 gradient correctness", &criterion_2);
    timed("3 ranking-loss laws", &criterion_3);
    let t = Instant::now();
    let world = world_runs();
    let world_time = t.elapsed();
    match &world {
        Ok((runs, elapsed)) => {
            results.push(("4 hallucination direction", criterion_4(runs, *elapsed), world_time));
            results.push(("5 unified-score ordering", criterion_5(runs, *elapsed), world_time));
        }
        Err(e) => {
            results.push(("4 hallucination direction", Err(e.clone()), world_time));
            results.push(("5 unified-score ordering", Err(e.clone()), world_time));
        }
    }
    let mut timed = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((name, o, t.elapsed()));
    };
    timed("6 ingestion fixture", &criterion_6);
    timed("7 determinism", &criterion_7);
    let latency = match &world {
        Ok((runs, _)) => criterion_8(runs),
        Err(e) => Err(e.clone()),
    };
    results.push(("8 recommendation latency", latency, Duration::ZERO));

    let mut failed = 0;
    for (name, outcome, elapsed) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<28} {why} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
