//! Acceptance gate: ten checks covering the metric fixtures, judge
//! aggregation, scalar mappings, gradient and return correctness, learning
//! convergence, episode invariants, reproducibility, and prompt fidelity.
//! Each check prints one `acceptance NN <label>: pass|FAIL` line (visible
//! with `--nocapture`); failures also panic with the diagnostic.

use std::collections::BTreeSet;
use std::fs;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use tactician::catalog::{builtin_catalog, StrategyCatalog};
use tactician::corpus::{CorpusRecord, Split};
use tactician::domain::{
    CaseDetails, CaseProfile, DialogueState, DomainKind, EpisodeStatus, Turn,
};
use tactician::eval::{average_sl_ratio, eval_record, success_rate_at, EvalRecord};
use tactician::gateway::{ChatMessage, ChatRole, CompletionRequest, Gateway, GatewayError};
use tactician::policy::{
    compute_returns, FeatureVector, PolicyConfig, PolicyParameters, TrainConfig,
};
use tactician::reward::{
    build_reward_prompt, judge, map_verbal_to_scalar, parse_feedback, sale_to_list_ratio,
    RewardConfig,
};
use tactician::roleplay::{build_assistant_prompt, build_user_prompt, TemplateSet};
use tactician::selfplay::{
    rl_train, run_episode, sft_train, EpisodeContext, EpisodeMode, NullSink, Planner,
};

/// Runs one acceptance check and prints its verdict line whether it passes
/// or panics.
fn criterion(number: u32, label: &str, body: impl FnOnce()) {
    let result = std::panic::catch_unwind(AssertUnwindSafe(body));
    match &result {
        Ok(()) => println!("acceptance {number:02} {label}: pass"),
        Err(_) => println!("acceptance {number:02} {label}: FAIL"),
    }
    if let Err(cause) = result {
        std::panic::resume_unwind(cause);
    }
}

fn tutoring_case(id: &str, exercise: &str, situation: &str) -> CaseProfile {
    CaseProfile {
        id: id.into(),
        details: CaseDetails::Tutoring {
            exercise: exercise.into(),
            situation: situation.into(),
        },
    }
}

fn support_case() -> CaseProfile {
    CaseProfile {
        id: "es0".into(),
        details: CaseDetails::EmotionalSupport {
            emotion_type: "fear".into(),
            problem_type: "job crisis".into(),
            situation: "I think I will be losing my job soon.".into(),
        },
    }
}

fn closure_gateway<F>(f: F) -> Gateway
where
    F: Fn(&CompletionRequest) -> Result<Vec<String>, GatewayError> + Send + Sync + 'static,
{
    Gateway::with_backend(Box::new(f), None)
}

// ---------------------------------------------------------------------------
// 1. Negotiation outcome ratio on the five transcript fixtures.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_sale_to_list_ratio_fixtures() {
    criterion(1, "sale-to-list ratio fixtures", || {
        let started = Instant::now();
        let ratio = |deal: &str| {
            sale_to_list_ratio(
                deal.parse::<Decimal>().unwrap(),
                Decimal::from(150),
                Decimal::from(135),
            )
            .unwrap()
        };
        // A failed negotiation contributes ratio 0 by convention.
        let no_deal = EvalRecord {
            case_id: "nd".into(),
            success: false,
            completion_turn: None,
            sl_ratio: None,
            invalid: false,
        };
        let outcomes = [
            average_sl_ratio(std::slice::from_ref(&no_deal)),
            ratio("145"),
            ratio("138"),
            average_sl_ratio(std::slice::from_ref(&no_deal)),
            ratio("137.50"),
        ];
        let expected = [0.0, 0.3333, 0.8, 0.0, 0.8333];
        for (i, (got, want)) in outcomes.iter().zip(expected.iter()).enumerate() {
            assert!(
                (got - want).abs() < 1e-4,
                "fixture {i}: got {got}, expected {want}"
            );
        }
        assert!(started.elapsed() < Duration::from_secs(1), "ratio fixtures too slow");
    });
}

// ---------------------------------------------------------------------------
// 2. Judge aggregation worked example: mean of five mapped samples.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_judge_aggregation_worked_example() {
    criterion(2, "judge aggregation worked example", || {
        let better = "No, but the Patient feels better.".to_string();
        let solved = "Yes, the Patient's issue has been solved.".to_string();
        let samples = vec![better.clone(), solved.clone(), better.clone(), solved, better];
        let gateway = closure_gateway(move |request| {
            assert_eq!(request.n_samples, 5, "judge asks for all samples at once");
            Ok(samples.clone())
        });

        let case = support_case();
        let catalog = builtin_catalog(DomainKind::EmotionalSupport);
        let templates = TemplateSet::builtin(DomainKind::EmotionalSupport);
        let state = DialogueState::with_history(
            case.clone(),
            vec![
                Turn::user("I think I will be losing my job soon."),
                Turn::system("That sounds stressful; what happened?", None),
                Turn::user("We got an email about cutting costs."),
            ],
        );
        let config = RewardConfig { l: 5, ..RewardConfig::default() };
        let outcome = judge(&gateway, &config, &case, &state, catalog, templates).unwrap();
        assert_eq!(outcome.v, 0.7, "mean mapped score");
        assert_eq!(outcome.status, EpisodeStatus::GoalCompleted, "0.7 >= 0.5 completes");
        assert_eq!(outcome.reward, 0.7, "completion reward is the score");
    });
}

// ---------------------------------------------------------------------------
// 3. Every canonical verbal option maps to its exact scalar.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_verbal_feedback_scalar_mappings() {
    criterion(3, "verbal feedback scalar mappings", || {
        let table: [(DomainKind, Vec<(&str, f64)>); 3] = [
            (
                DomainKind::EmotionalSupport,
                vec![
                    ("No, the Patient feels worse.", -1.0),
                    ("No, the Patient feels the same.", -0.5),
                    ("No, but the Patient feels better.", 0.5),
                    ("Yes, the Patient's issue has been solved.", 1.0),
                ],
            ),
            (
                DomainKind::Tutoring,
                vec![
                    ("No, the Student made an incorrect translation.", -1.0),
                    ("No, the Student did not try to translate.", -0.5),
                    (
                        "No, the Student only correctly translated a part of \"The cat is on the table\".",
                        0.5,
                    ),
                    (
                        "Yes, the Student correctly translated the whole sentence of \"The cat is on the table\".",
                        1.0,
                    ),
                ],
            ),
            (
                DomainKind::Negotiation,
                vec![
                    ("They have not reached a deal.", -1.0),
                    ("They have reached a deal at $137.50.", 1.0),
                ],
            ),
        ];
        for (domain, options) in table {
            let catalog = builtin_catalog(domain);
            for (text, expected) in options {
                let feedback = parse_feedback(catalog, text);
                assert!(!feedback.unparsed, "{domain} option not recognized: {text}");
                let score = map_verbal_to_scalar(&feedback);
                assert_eq!(score, expected, "{domain} option {text:?}");
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 4. Analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

fn coord_count(params: &PolicyParameters) -> usize {
    params.bias.len() + params.weights.len()
}

fn coord_get(params: &PolicyParameters, i: usize) -> f64 {
    if i < params.bias.len() {
        params.bias[i]
    } else {
        params.weights[i - params.bias.len()]
    }
}

fn coord_set(params: &mut PolicyParameters, i: usize, value: f64) {
    if i < params.bias.len() {
        params.bias[i] = value;
    } else {
        let offset = params.bias.len();
        params.weights[i - offset] = value;
    }
}

fn central_difference(
    params: &PolicyParameters,
    i: usize,
    h: f64,
    f: &dyn Fn(&PolicyParameters) -> f64,
) -> f64 {
    let mut plus = params.clone();
    coord_set(&mut plus, i, coord_get(params, i) + h);
    let mut minus = params.clone();
    coord_set(&mut minus, i, coord_get(params, i) - h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn gradients_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs() + numeric.abs();
    diff <= 1e-6 * scale || diff <= 1e-9
}

fn random_features(rng: &mut ChaCha8Rng, dim: u32) -> FeatureVector {
    let count = rng.gen_range(1..=4usize);
    let mut indices = BTreeSet::new();
    while indices.len() < count {
        indices.insert(rng.gen_range(0..dim));
    }
    let indices: Vec<u32> = indices.into_iter().collect();
    let values: Vec<f64> = indices
        .iter()
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect();
    FeatureVector { indices, values, dim }
}

#[test]
fn acceptance_04_gradient_finite_difference_check() {
    criterion(4, "gradient finite-difference check", || {
        let started = Instant::now();
        let catalog = builtin_catalog(DomainKind::Tutoring);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;

        for instance in 0..100 {
            let dim = rng.gen_range(4..=32u32);
            let mut base = PolicyParameters::new(catalog, dim);
            for w in &mut base.weights {
                *w = rng.gen_range(-0.5..0.5);
            }
            for b in &mut base.bias {
                *b = rng.gen_range(-0.5..0.5);
            }

            // Supervised step: recovered update direction is the exact
            // cross-entropy gradient at the entry parameters.
            let features = random_features(&mut rng, dim);
            let gold = rng.gen_range(0..base.num_actions());
            let mut stepped = base.clone();
            stepped.sft_step(&features, gold, 1.0).unwrap();
            let loss = |p: &PolicyParameters| -> f64 {
                -p.predict(&features).unwrap().probabilities[gold].ln()
            };
            for i in 0..coord_count(&base) {
                let analytic = coord_get(&base, i) - coord_get(&stepped, i);
                let numeric = central_difference(&base, i, h, &loss);
                assert!(
                    gradients_close(analytic, numeric),
                    "instance {instance} loss coord {i}: analytic {analytic} vs numeric {numeric}"
                );
            }

            // Policy-gradient step: ascent on the return-weighted log
            // likelihood of the trajectory.
            let steps = rng.gen_range(1..=4usize);
            let trajectory: Vec<(FeatureVector, usize)> = (0..steps)
                .map(|_| {
                    let f = random_features(&mut rng, dim);
                    let a = rng.gen_range(0..base.num_actions());
                    (f, a)
                })
                .collect();
            let returns: Vec<f64> = (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut updated = base.clone();
            updated.reinforce_update(&trajectory, &returns, 1.0, false).unwrap();
            let objective = |p: &PolicyParameters| -> f64 {
                trajectory
                    .iter()
                    .zip(returns.iter())
                    .map(|((f, a), r)| r * p.predict(f).unwrap().probabilities[*a].ln())
                    .sum()
            };
            for i in 0..coord_count(&base) {
                let analytic = coord_get(&updated, i) - coord_get(&base, i);
                let numeric = central_difference(&base, i, h, &objective);
                assert!(
                    gradients_close(analytic, numeric),
                    "instance {instance} objective coord {i}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        assert!(started.elapsed() < Duration::from_secs(10), "gradient check too slow");
    });
}

// ---------------------------------------------------------------------------
// 5. Discounted returns equal brute-force double summation.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_discounted_return_oracle() {
    criterion(5, "discounted return oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8usize);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma: f64 = rng.gen_range(0.01..=1.0);
            let got = compute_returns(&rewards, gamma).unwrap();
            assert_eq!(got.len(), n);
            for t in 0..n {
                let mut oracle = 0.0;
                for (tp, r) in rewards.iter().enumerate().skip(t) {
                    oracle += gamma.powi((n - 1 - tp) as i32) * r;
                }
                worst = worst.max((got[t] - oracle).abs());
            }
        }
        assert!(worst < 1e-12, "max abs error {worst}");
    });
}

// ---------------------------------------------------------------------------
// 6. Policy gradient recovers the optimum of a scripted strategy game.
// ---------------------------------------------------------------------------

/// The one strategy sequence the scripted judge rewards with 1.0.
const TARGET_SEQUENCE: [usize; 2] = [3, 1];

/// Judge verdict for the action markers spoken so far: completion only on
/// the exact target sequence, partial credit once its first move was made,
/// and the bottom score otherwise.
fn scripted_verdict(sequence: &[usize]) -> f64 {
    if sequence == TARGET_SEQUENCE {
        return 1.0;
    }
    let prefix = sequence
        .iter()
        .zip(TARGET_SEQUENCE.iter())
        .take_while(|(a, b)| a == b)
        .count();
    if prefix >= 1 {
        0.5
    } else {
        -1.0
    }
}

fn parse_markers(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("MARK") {
        rest = &rest[pos + 4..];
        if let Some(digit) = rest.chars().next().and_then(|c| c.to_digit(10)) {
            out.push(digit as usize);
        }
    }
    out
}

fn tutoring_option_for(score: f64, exercise: &str) -> String {
    if score >= 1.0 {
        format!("Yes, the Student correctly translated the whole sentence of \"{exercise}\".")
    } else if score >= 0.5 {
        format!("No, the Student only correctly translated a part of \"{exercise}\".")
    } else if score >= -0.5 {
        "No, the Student did not try to translate.".to_string()
    } else {
        "No, the Student made an incorrect translation.".to_string()
    }
}

fn request_text(request: &CompletionRequest) -> String {
    request
        .messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn acceptance_06_scripted_game_policy_convergence() {
    criterion(6, "scripted-game policy convergence", || {
        let started = Instant::now();
        let catalog = builtin_catalog(DomainKind::Tutoring);
        let templates = TemplateSet::builtin(DomainKind::Tutoring);
        let case = tutoring_case("game", "The sky is blue", "Il cielo e blu?");
        let gamma = 0.999;

        // Enumerate every strategy sequence to fix the optimal return before
        // any training happens.
        let mut optimum = f64::NEG_INFINITY;
        for code in 0..5usize.pow(4) {
            let sequence = [code / 125 % 5, code / 25 % 5, code / 5 % 5, code % 5];
            let mut rewards = Vec::new();
            for k in 1..=4 {
                let v = scripted_verdict(&sequence[..k]);
                if v >= 1.0 {
                    rewards.push(v);
                    break;
                }
                rewards.push(if k == 4 { v } else { -0.1 });
            }
            let r0 = compute_returns(&rewards, gamma).unwrap()[0];
            optimum = optimum.max(r0);
        }

        // The assistant echoes a marker for the instruction it was given, the
        // user's reply tags the stage, and the judge grades the marker
        // sequence it can read out of the conversation.
        let instructions: Vec<String> =
            catalog.actions().iter().map(|a| a.instruction.clone()).collect();
        let sys = closure_gateway(move |request| {
            let text = request_text(request);
            for (i, instruction) in instructions.iter().enumerate() {
                if text.contains(instruction.as_str()) {
                    return Ok(vec![format!("MARK{i} offered"); request.n_samples]);
                }
            }
            Ok(vec!["MARK9 missing".to_string(); request.n_samples])
        });
        let usr = closure_gateway(|request| {
            Ok(vec![format!("stage{} reply", request.messages.len()); request.n_samples])
        });
        let exercise = "The sky is blue".to_string();
        let rwd = closure_gateway(move |request| {
            let conversation =
                request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
            let score = scripted_verdict(&parse_markers(conversation));
            Ok(vec![tutoring_option_for(score, &exercise); request.n_samples])
        });

        let policy_config = PolicyConfig { feature_dim: 4096, window: 2 };
        let reward_config = RewardConfig { l: 1, max_turns: 4, ..RewardConfig::default() };
        let ctx = EpisodeContext::new(
            &sys,
            &usr,
            &rwd,
            &policy_config,
            &reward_config,
            catalog,
            templates,
        );

        let mut params = PolicyParameters::new(catalog, policy_config.feature_dim);
        // The within-episode running-mean baseline zeroes the first step's
        // advantage, so this sparse sequential game trains without it.
        let train = TrainConfig {
            rl_episodes: 5000,
            rl_learning_rate: 0.05,
            gamma,
            seed: 0,
            baseline_enabled: false,
            ..TrainConfig::default()
        };
        let cases = vec![case.clone()];
        rl_train(&mut params, &ctx, &cases, &train, &mut NullSink).unwrap();

        let rollout = run_episode(&Planner::Learned(&params), &ctx, &case, EpisodeMode::Eval);
        assert!(rollout.invalid.is_none(), "greedy rollout failed: {:?}", rollout.invalid);
        let achieved = compute_returns(&rollout.rewards(), gamma).unwrap()[0];
        assert!(
            achieved >= 0.95 * optimum,
            "greedy return {achieved} below 95% of enumerated optimum {optimum}"
        );
        assert!(started.elapsed() < Duration::from_secs(60), "convergence run too slow");
    });
}

// ---------------------------------------------------------------------------
// 7. Supervised fitting separates a keyword-labeled corpus.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_supervised_fit_on_separable_corpus() {
    criterion(7, "supervised fit on separable corpus", || {
        let started = Instant::now();
        let catalog = builtin_catalog(DomainKind::Tutoring);
        let keywords = ["alpha", "bravo", "charlie", "delta", "echo"];
        let records: Vec<CorpusRecord> = (0..200)
            .map(|i| {
                let class = i % keywords.len();
                let keyword = keywords[class];
                let mut user = Turn::user(format!("{keyword} {keyword} {keyword}"));
                user.index = 0;
                let mut system =
                    Turn::system("Noted.", Some(catalog.actions()[class].clone()));
                system.index = 1;
                CorpusRecord {
                    case: tutoring_case(&format!("d{i}"), "Exercise", "Situation"),
                    split: if i < 160 { Split::Train } else { Split::Dev },
                    dialogue: vec![user, system],
                }
            })
            .collect();

        let policy_config = PolicyConfig { feature_dim: 512, window: 4 };
        let mut params = PolicyParameters::new(catalog, policy_config.feature_dim);
        let train = TrainConfig { sft_epochs: 10, seed: 0, ..TrainConfig::default() };
        let outcome = sft_train(&mut params, &records, &policy_config, &train).unwrap();
        assert!(outcome.reports.len() <= 10, "epoch budget exceeded");
        assert!(
            outcome.best_dev_accuracy >= 0.99,
            "dev accuracy {} after {} epochs",
            outcome.best_dev_accuracy,
            outcome.reports.len()
        );
        assert!(started.elapsed() < Duration::from_secs(30), "supervised fit too slow");
    });
}

// ---------------------------------------------------------------------------
// 8. Episode invariants hold under randomized scripted backends.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_episode_invariants_under_fuzzed_judges() {
    criterion(8, "episode invariants under fuzzed judges", || {
        let catalog = builtin_catalog(DomainKind::Tutoring);
        let templates = TemplateSet::builtin(DomainKind::Tutoring);
        let case = tutoring_case("fuzz", "The cat sleeps", "Il gatto dorme?");
        let epsilon = 1.0;
        let step_penalty = -0.1;

        let sys_rng = Mutex::new(ChaCha8Rng::seed_from_u64(81));
        let sys = closure_gateway(move |request| {
            let word = sys_rng.lock().unwrap().gen_range(0..1000u32);
            Ok(vec![format!("note{word}"); request.n_samples])
        });
        let usr_rng = Mutex::new(ChaCha8Rng::seed_from_u64(82));
        let usr = closure_gateway(move |request| {
            let word = usr_rng.lock().unwrap().gen_range(0..1000u32);
            Ok(vec![format!("resp{word}"); request.n_samples])
        });
        let options = [
            "No, the Student made an incorrect translation.",
            "No, the Student did not try to translate.",
            "No, the Student only correctly translated a part of \"The cat sleeps\".",
            "Yes, the Student correctly translated the whole sentence of \"The cat sleeps\".",
        ];
        let rwd_rng = Mutex::new(ChaCha8Rng::seed_from_u64(83));
        let rwd = closure_gateway(move |request| {
            let pick = rwd_rng.lock().unwrap().gen_range(0..options.len());
            Ok(vec![options[pick].to_string(); request.n_samples])
        });

        let policy_config = PolicyConfig::default();
        let reward_config = RewardConfig { l: 1, ..RewardConfig::default() };
        assert_eq!(reward_config.max_turns, 8);
        let ctx = EpisodeContext::new(
            &sys,
            &usr,
            &rwd,
            &policy_config,
            &reward_config,
            catalog,
            templates,
        );

        let mut records: Vec<EvalRecord> = Vec::with_capacity(1000);
        for i in 0..1000 {
            let episode = run_episode(&Planner::Standard, &ctx, &case, EpisodeMode::Eval);
            assert!(episode.invalid.is_none(), "episode {i} invalid: {:?}", episode.invalid);
            let steps = &episode.steps;
            assert!(!steps.is_empty() && steps.len() <= 8, "episode {i} length {}", steps.len());

            for step in &steps[..steps.len() - 1] {
                assert_eq!(step.status, EpisodeStatus::OnGoing, "episode {i} mid-step status");
                assert_eq!(step.reward, step_penalty, "episode {i} mid-step reward");
                assert!(step.v.unwrap() < epsilon, "episode {i} continued past threshold");
            }

            let last = steps.last().unwrap();
            let final_v = last.v.unwrap();
            match episode.final_status {
                EpisodeStatus::GoalCompleted => {
                    assert!(final_v >= epsilon, "episode {i} completed below threshold");
                    assert_eq!(last.reward, final_v, "episode {i} terminal reward");
                    assert_eq!(
                        episode.completion_turn,
                        Some(steps.len() as u32),
                        "episode {i} completion turn"
                    );
                }
                EpisodeStatus::GoalFailed => {
                    assert_eq!(steps.len(), 8, "episode {i} failed before the turn cap");
                    assert!(final_v < epsilon, "episode {i} failed despite final v {final_v}");
                    assert_eq!(last.reward, final_v, "episode {i} terminal reward");
                }
                EpisodeStatus::OnGoing => panic!("episode {i} ended without a terminal status"),
            }
            if steps.len() == 8 && final_v < epsilon {
                assert_eq!(episode.final_status, EpisodeStatus::GoalFailed);
            }
            records.push(eval_record(&episode));
        }

        assert_eq!(success_rate_at(&records, 0), 0.0, "SR@0 must be zero");
        let mut previous = 0.0;
        for t in 1..=8 {
            let sr = success_rate_at(&records, t);
            assert!(sr >= previous, "SR@{t} dropped: {sr} < {previous}");
            previous = sr;
        }
    });
}

// ---------------------------------------------------------------------------
// 9. Identical seeds and scripts reproduce training bit for bit.
// ---------------------------------------------------------------------------

/// Scripted tutoring fixture for driving the real binary.
fn write_cli_fixture(dir: &Path) -> PathBuf {
    fs::write(
        dir.join("corpus.jsonl"),
        concat!(
            r#"{"case":{"id":"t1","domain":"tutoring","exercise":"The dog sleeps","situation":"Il cane dorme?"},"split":"train","dialogue":[]}"#,
            "\n",
        ),
    )
    .unwrap();
    fs::write(
        dir.join("sys.jsonl"),
        r#"{"match":{"last_user_contains":""},"outputs":["Remember that 'dog' is 'cane'."]}"#,
    )
    .unwrap();
    fs::write(
        dir.join("usr.jsonl"),
        r#"{"match":{"last_user_contains":""},"outputs":["Il cane dorme."]}"#,
    )
    .unwrap();
    fs::write(
        dir.join("rwd.jsonl"),
        r#"{"match":{"last_user_contains":""},"outputs":["Yes, the Student correctly translated the whole sentence of \"The dog sleeps\"."]}"#,
    )
    .unwrap();
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{
  "domain": "tutoring",
  "corpus": "corpus.jsonl",
  "backend_sys": {"kind": "scripted", "script_path": "sys.jsonl"},
  "backend_usr": {"kind": "scripted", "script_path": "usr.jsonl"},
  "backend_rwd": {"kind": "scripted", "script_path": "rwd.jsonl"},
  "reward": {"l": 3}
}
"#,
    )
    .unwrap();
    config
}

#[test]
fn acceptance_09_bit_identical_reruns() {
    criterion(9, "bit-identical reruns", || {
        let dir = tempfile::tempdir().unwrap();
        let config = write_cli_fixture(dir.path());
        let run = |out: &Path| {
            let status = Command::new(env!("CARGO_BIN_EXE_tactician"))
                .args([
                    "rl-train",
                    "--config",
                    config.to_str().unwrap(),
                    "--episodes",
                    "30",
                    "--seed",
                    "11",
                    "--out",
                    out.to_str().unwrap(),
                ])
                .output()
                .expect("binary runs");
            assert!(
                status.status.success(),
                "training run failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
        };
        let first = dir.path().join("runA");
        let second = dir.path().join("runB");
        run(&first);
        run(&second);
        for name in ["training_log.jsonl", "final.ckpt"] {
            let a = fs::read(first.join(name)).unwrap();
            let b = fs::read(second.join(name)).unwrap();
            assert!(a == b, "{name} differs between identically seeded runs");
        }
    });
}

// ---------------------------------------------------------------------------
// 10. Assembled prompts byte-match the golden files.
// ---------------------------------------------------------------------------

fn render(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for message in messages {
        out.push_str(match message.role {
            ChatRole::System => "<<system>>\n",
            ChatRole::User => "<<user>>\n",
            ChatRole::Assistant => "<<assistant>>\n",
        });
        out.push_str(&message.content);
        out.push('\n');
    }
    out
}

struct PromptFixture {
    case: CaseProfile,
    action_name: &'static str,
    opening: Vec<Turn>,
    system_reply: &'static str,
    user_reply: &'static str,
    assistant_golden: &'static str,
    user_golden: &'static str,
    reward_golden: &'static str,
}

fn prompt_fixtures() -> Vec<PromptFixture> {
    vec![
        PromptFixture {
            case: CaseProfile {
                id: "cb-golden".into(),
                details: CaseDetails::Negotiation {
                    item_name: "furniture".into(),
                    item_description: "Macybed Plush Queen Mattress MacyBed 8.5\" Plush \
                                       Pillowtop Queen Mattress in excellent condition. Bought \
                                       in December of 2013, 3.5 years old. Only had one owner \
                                       in one household (one person sleeping on it, minimal \
                                       ware).  No stains or discoloring. Been covered with \
                                       mattress cover since purchase."
                        .into(),
                    buyer_target_price: Decimal::from(135),
                    seller_target_price: Decimal::from(150),
                },
            },
            action_name: "Propose a counter price",
            opening: vec![
                Turn::system("Hi, how much is the furniture?", None),
                Turn::user("Hi, this is a good furniture and its price is 150."),
            ],
            system_reply: "I understand, but my budget is 135. Can we make a deal at that price?",
            user_reply: "I appreciate your offer, but I'm unable to go lower than 150 for this furniture.",
            assistant_golden: include_str!("../../tactician/tests/golden/negotiation.assistant.golden.txt"),
            user_golden: include_str!("../../tactician/tests/golden/negotiation.user.golden.txt"),
            reward_golden: include_str!("../../tactician/tests/golden/negotiation.reward.golden.txt"),
        },
        PromptFixture {
            case: CaseProfile {
                id: "esc-golden".into(),
                details: CaseDetails::EmotionalSupport {
                    emotion_type: "fear".into(),
                    problem_type: "job crisis".into(),
                    situation: "I think I will be losing my job soon. I just read an email \
                                taking about the need for us to cut cost and also how we have \
                                not got any support from the government."
                        .into(),
                },
            },
            action_name: "Question",
            opening: vec![Turn::user(
                "I think I will be losing my job soon. I just read an email taking about the \
                 need for us to cut cost and also how we have not got any support from the \
                 government.",
            )],
            system_reply: "It sounds like you're feeling anxious and uncertain about your job \
                           security due to the current financial situation.",
            user_reply: "Yes, I am feeling extremely anxious and uncertain about my job and \
                         financial stability.",
            assistant_golden: include_str!("../../tactician/tests/golden/emotional_support.assistant.golden.txt"),
            user_golden: include_str!("../../tactician/tests/golden/emotional_support.user.golden.txt"),
            reward_golden: include_str!("../../tactician/tests/golden/emotional_support.reward.golden.txt"),
        },
        PromptFixture {
            case: tutoring_case(
                "cima-golden",
                "The cat is on the table",
                "Il gatto e sulla tavola?",
            ),
            action_name: "Hint",
            opening: vec![
                Turn::system("Please translate \"The cat is on the table\" into Italian.", None),
                Turn::user("Il gatto e sulla tavola?"),
            ],
            system_reply: "Remember that 'on the table' is 'sul tavolo'.",
            user_reply: "Il gatto e sul tavolo.",
            assistant_golden: include_str!("../../tactician/tests/golden/tutoring.assistant.golden.txt"),
            user_golden: include_str!("../../tactician/tests/golden/tutoring.user.golden.txt"),
            reward_golden: include_str!("../../tactician/tests/golden/tutoring.reward.golden.txt"),
        },
    ]
}

fn check_prompt_fixture(fixture: &PromptFixture, catalog: &StrategyCatalog) {
    let domain = fixture.case.domain();
    let templates = TemplateSet::builtin(domain);
    let action = catalog.action_by_name(fixture.action_name).expect("action exists");

    let opening_state =
        DialogueState::with_history(fixture.case.clone(), fixture.opening.clone());
    let assistant =
        build_assistant_prompt(&fixture.case, Some(action), &opening_state, templates).unwrap();
    assert_eq!(render(&assistant), fixture.assistant_golden, "{domain} assistant prompt");

    let mut with_system = fixture.opening.clone();
    with_system.push(Turn::system(fixture.system_reply, Some(action.clone())));
    let user_state = DialogueState::with_history(fixture.case.clone(), with_system.clone());
    let user = build_user_prompt(&fixture.case, &user_state, templates).unwrap();
    assert_eq!(render(&user), fixture.user_golden, "{domain} user prompt");

    let mut full = with_system;
    full.push(Turn::user(fixture.user_reply));
    let full_state = DialogueState::with_history(fixture.case.clone(), full);
    let reward =
        build_reward_prompt(&fixture.case, &full_state, templates, catalog.speakers()).unwrap();
    assert_eq!(render(&reward), fixture.reward_golden, "{domain} reward prompt");
}

#[test]
fn acceptance_10_prompt_byte_fidelity() {
    criterion(10, "prompt byte fidelity", || {
        for fixture in prompt_fixtures() {
            let catalog = builtin_catalog(fixture.case.domain());
            check_prompt_fixture(&fixture, catalog);
        }
    });
}
