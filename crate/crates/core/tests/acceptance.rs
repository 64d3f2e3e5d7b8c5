//! Acceptance suite. Each test enforces one release criterion at its
//! stated tolerance and prints a `[acceptance] criterion N PASS` line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use personasim::config::RunConfig;
use personasim::golden;
use personasim::judge::{default_prompt_polarity, ConflictFinding};
use personasim::metrics::{
    line_to_line_score, prompt_to_line_score, qa_consistency_score, VerdictMatrix,
};
use personasim::model::{
    AggregateScores, ConsistencyReport, MetricKind, TaskKind, TurnScores,
};
use personasim::pipeline::{cmd_export, cmd_judge, cmd_score, cmd_simulate};
use personasim::stats::{
    binarize_likert, fleiss_kappa, metric_agreement_heatmap, AnnotationMatrix, LikertRating,
};
use personasim::stub::StubServer;

fn pass(criterion: u32, detail: &str) {
    println!("[acceptance] criterion {criterion} PASS — {detail}");
}

// --- criterion 1: golden-fixture replay --------------------------------------

#[test]
fn criterion_1_golden_fixture_replay() {
    let started = Instant::now();
    let expected: BTreeMap<&str, f64> = [
        ("open_ended_1", 0.6),
        ("open_ended_2", 0.4),
        ("open_ended_3", 1.0),
        ("education_1", 0.4),
        ("education_2", 0.8),
        ("education_3", 1.0),
        ("mental_health_1", 0.4),
        ("mental_health_2", 1.0),
        ("mental_health_3", 0.8),
    ]
    .into_iter()
    .collect();

    let fixtures = golden::all();
    assert_eq!(fixtures.len(), 9);
    for fixture in &fixtures {
        let label = expected[fixture.name.as_str()];
        assert_eq!(fixture.expected_prompt_to_line, label, "{} label drift", fixture.name);
        let polarity = default_prompt_polarity(fixture.task);
        let bits = fixture.replay_bits(polarity);
        let score = prompt_to_line_score(&bits).unwrap();
        // Tolerance: exact.
        assert_eq!(
            score, label,
            "{}: replayed {score}, printed label {label}",
            fixture.name
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "replay took {elapsed:?}, budget is 1 s");
    pass(1, &format!("9/9 printed prompt-to-line scores reproduced exactly in {elapsed:?}"));
}

// --- criterion 2: score oracle equivalence -----------------------------------

fn random_matrix(rng: &mut ChaCha8Rng) -> (usize, VerdictMatrix) {
    let t = rng.random_range(1..=12);
    let k = rng.random_range(0..=6);
    let turn_indices: Vec<usize> = (0..t).map(|i| 2 * i + 1).collect();
    let mut matrix = VerdictMatrix::empty("oracle", turn_indices);
    matrix.prompt_to_line =
        (0..t).map(|_| if rng.random_bool(0.8) { Some(rng.random_bool(0.5)) } else { None }).collect();
    matrix.conflicts = (0..t.saturating_sub(1))
        .map(|i| {
            if rng.random_bool(0.8) {
                let cited = if rng.random_bool(0.5) { vec![rng.random_range(0..20)] } else { vec![] };
                Some(ConflictFinding { turn_index: 2 * (i + 1) + 1, cited_indices: cited, raw_text: String::new() })
            } else {
                None
            }
        })
        .collect();
    matrix.qa_grades = (0..t)
        .map(|_| {
            (0..k)
                .map(|_| if rng.random_bool(0.8) { Some(rng.random_bool(0.5)) } else { None })
                .collect()
        })
        .collect();
    (t, matrix)
}

#[test]
fn criterion_2_scores_equal_naive_double_loop_recomputation() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0ffee);
    let cases = 1500usize;
    for _ in 0..cases {
        let (t, matrix) = random_matrix(&mut rng);

        // Naive double-loop recomputations, independent of the library path.
        let (mut n, mut sum) = (0u32, 0u32);
        for bit in matrix.prompt_to_line.iter().flatten() {
            n += 1;
            sum += u32::from(*bit);
        }
        let naive_prompt = (n > 0).then(|| f64::from(sum) / f64::from(n));
        assert_eq!(prompt_to_line_score(&matrix.prompt_to_line).ok(), naive_prompt);

        let naive_line = if t == 1 {
            Some(1.0)
        } else {
            let (mut n, mut clean) = (0u32, 0u32);
            for finding in matrix.conflicts.iter().flatten() {
                n += 1;
                clean += u32::from(finding.cited_indices.is_empty());
            }
            (n > 0).then(|| f64::from(clean) / f64::from(n))
        };
        assert_eq!(line_to_line_score(t, &matrix.conflicts).ok().map(|s| s.value), naive_line);

        let (mut n, mut correct) = (0u32, 0u32);
        for row in &matrix.qa_grades {
            for cell in row.iter().flatten() {
                n += 1;
                correct += u32::from(*cell);
            }
        }
        let naive_qa = (n > 0).then(|| f64::from(correct) / f64::from(n));
        assert_eq!(qa_consistency_score(&matrix.qa_grades).ok(), naive_qa);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "oracle sweep took {elapsed:?}, budget is 5 s");
    pass(2, &format!("{cases} randomized matrices matched naive recomputation bit-for-bit in {elapsed:?}"));
}

// --- criterion 3: Fleiss' kappa ------------------------------------------------

#[test]
fn criterion_3_fleiss_kappa_correctness() {
    // Perfect agreement across >= 2 used categories.
    let perfect = AnnotationMatrix::new(4, vec![vec![4, 0], vec![0, 4], vec![4, 0]]).unwrap();
    assert_eq!(fleiss_kappa(&perfect).unwrap().value, 1.0);

    // Hand-computed 3-item matrix: kappa = 22/40.
    let hand = AnnotationMatrix::new(3, vec![vec![3, 0], vec![0, 3], vec![2, 1]]).unwrap();
    let kappa = fleiss_kappa(&hand).unwrap().value;
    assert!((kappa - 0.55).abs() < 1e-12, "hand matrix gave {kappa}");

    // Random matrices against a direct formula evaluation.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0usize;
    for _ in 0..500 {
        let items = rng.random_range(2..10);
        let raters = rng.random_range(2..7);
        let categories = rng.random_range(2..5);
        let counts: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0u32; categories];
                for _ in 0..raters {
                    row[rng.random_range(0..categories)] += 1;
                }
                row
            })
            .collect();

        let n_items = items as f64;
        let n = raters as f64;
        let p_bar: f64 = counts
            .iter()
            .map(|row| {
                let sum_sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
                (sum_sq - n) / (n * (n - 1.0))
            })
            .sum::<f64>()
            / n_items;
        let mut pe = 0.0;
        for j in 0..categories {
            let share = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n_items * n);
            pe += share * share;
        }

        let matrix = AnnotationMatrix::new(raters as u32, counts).unwrap();
        let result = fleiss_kappa(&matrix).unwrap();
        if result.degenerate_chance {
            assert_eq!(result.value, 1.0);
        } else {
            let direct = (p_bar - pe) / (1.0 - pe);
            assert!(
                (result.value - direct).abs() < 1e-12,
                "kappa {} vs direct {direct}",
                result.value
            );
            checked += 1;
        }
    }
    pass(3, &format!("perfect = 1.0, hand matrix = 0.55 ± 1e-12, {checked} random matrices within 1e-12 of the direct formula"));
}

// --- criterion 4: Likert binarization ------------------------------------------

#[test]
fn criterion_4_likert_binarization() {
    for (value, expected) in [(1, 0u8), (2, 0), (3, 0), (4, 1), (5, 1), (6, 1)] {
        assert_eq!(binarize_likert(LikertRating::new(value).unwrap()), expected);
    }
    for out_of_range in [-3, 0, 7, 100] {
        assert!(LikertRating::new(out_of_range).is_err(), "{out_of_range} must be rejected");
    }
    pass(4, "ratings {1,2,3} -> 0 and {4,5,6} -> 1, out-of-range rejected");
}

// --- criterion 5: heatmap properties -------------------------------------------

fn fixture_reports() -> Vec<ConsistencyReport> {
    golden::all()
        .into_iter()
        .map(|fixture| {
            let polarity = default_prompt_polarity(fixture.task);
            let bits = fixture.replay_bits(polarity);
            let per_turn: Vec<TurnScores> = bits
                .iter()
                .enumerate()
                .map(|(i, bit)| TurnScores {
                    turn_index: 2 * i + 1,
                    prompt_to_line: bit.map(u8::from),
                    line_to_line: if i == 0 { None } else { Some(u8::from(i % 2 == 1)) },
                    qa_fraction: Some(match i % 3 {
                        0 => 1.0,
                        1 => 0.8,
                        _ => 0.2,
                    }),
                })
                .collect();
            ConsistencyReport {
                transcript_id: fixture.name.clone(),
                task: fixture.task,
                target_length: 10,
                per_turn,
                aggregate: AggregateScores::default(),
                error_turns: vec![],
                notes: vec![],
            }
        })
        .collect()
}

#[test]
fn criterion_5_heatmap_properties() {
    let reports = fixture_reports();
    let tau = 0.8;
    let heatmap = metric_agreement_heatmap(&reports, tau).unwrap();

    for row in 0..3 {
        assert_eq!(heatmap.entries[row][row], 1.0, "diagonal must be 1");
        for col in 0..3 {
            assert_eq!(heatmap.entries[row][col], heatmap.entries[col][row], "must be symmetric");
            assert!((0.0..=1.0).contains(&heatmap.entries[row][col]));
        }
    }

    // Brute-force pairwise recount over the pooled fixture turns.
    let metrics = [MetricKind::PromptToLine, MetricKind::LineToLine, MetricKind::Qa];
    let classify = |turn: &TurnScores, metric: MetricKind| -> Option<u8> {
        match metric {
            MetricKind::PromptToLine => turn.prompt_to_line,
            MetricKind::LineToLine => turn.line_to_line,
            MetricKind::Qa => turn.qa_fraction.map(|f| u8::from(f >= tau)),
        }
    };
    for (i, &m1) in metrics.iter().enumerate() {
        for (j, &m2) in metrics.iter().enumerate().skip(i + 1) {
            let (mut total, mut agree) = (0usize, 0usize);
            for report in &reports {
                for turn in &report.per_turn {
                    if let (Some(a), Some(b)) = (classify(turn, m1), classify(turn, m2)) {
                        total += 1;
                        agree += usize::from(a == b);
                    }
                }
            }
            let recount = agree as f64 / total as f64;
            assert_eq!(heatmap.entries[i][j], recount, "({m1}, {m2}) recount mismatch");
            assert_eq!(heatmap.support[i][j], total);
        }
    }
    pass(5, "symmetric, unit diagonal, entries in [0,1], pooled entries equal brute-force recount");
}

// --- criterion 6: end-to-end determinism and resume ------------------------------

fn offline_config(dir: &Path) -> RunConfig {
    fs::create_dir_all(dir.join("scripted")).unwrap();
    RunConfig {
        task: TaskKind::MentalHealth,
        output_dir: dir.to_path_buf(),
        scripted: Some(dir.join("scripted")),
        seed: 2024,
        lengths: vec![6, 10],
        conversations_per_length: 2,
        metrics: MetricKind::ALL.into_iter().collect(),
        probe_count: 3,
        ..RunConfig::default()
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                out.insert(path.strip_prefix(base).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn criterion_6_end_to_end_determinism_and_resume() {
    // Two full scripted runs must be byte-identical.
    let full_run = |dir: &Path| {
        let config = offline_config(dir);
        cmd_simulate(&config).unwrap();
        cmd_judge(&config).unwrap();
        cmd_score(&config).unwrap();
        cmd_export(&config).unwrap();
        snapshot(dir)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let snap_a = full_run(dir_a.path());
    let snap_b = full_run(dir_b.path());
    assert!(snap_a.len() > 10, "run produced too few files to be meaningful");
    assert_eq!(snap_a, snap_b, "scripted runs with one seed must be byte-identical");

    // An interrupted judge resumes with zero duplicate provider calls.
    let reference_dir = tempfile::tempdir().unwrap();
    let mut reference_config = offline_config(reference_dir.path());
    reference_config.call_log = true;
    cmd_simulate(&reference_config).unwrap();
    cmd_judge(&reference_config).unwrap();
    let reference_log = fs::read_to_string(reference_dir.path().join("logs/calls.records")).unwrap();

    let resumed_dir = tempfile::tempdir().unwrap();
    let mut resumed_config = offline_config(resumed_dir.path());
    resumed_config.call_log = true;
    cmd_simulate(&resumed_config).unwrap();
    resumed_config.max_calls = Some(17);
    assert!(cmd_judge(&resumed_config).unwrap().interrupted);
    resumed_config.max_calls = None;
    assert!(!cmd_judge(&resumed_config).unwrap().interrupted);

    let resumed_log = fs::read_to_string(resumed_dir.path().join("logs/calls.records")).unwrap();
    let mut calls: Vec<&str> = resumed_log.lines().collect();
    let mut reference: Vec<&str> = reference_log.lines().collect();
    calls.sort_unstable();
    reference.sort_unstable();
    assert_eq!(calls, reference, "interrupted + resumed calls must equal one uninterrupted run");
    assert_eq!(
        snapshot(&resumed_dir.path().join("verdicts")),
        snapshot(&reference_dir.path().join("verdicts")),
        "resumed verdict files must match an uninterrupted run"
    );
    pass(6, "two scripted runs byte-identical; interrupt at 17 calls resumed with zero duplicate provider calls");
}

// --- criterion 7: scale smoke test ------------------------------------------------

#[test]
fn criterion_7_scale_smoke_800_transcripts_against_stub_endpoint() {
    let started = Instant::now();
    let server = StubServer::start().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut config = RunConfig {
        task: TaskKind::MentalHealth,
        output_dir: dir.path().to_path_buf(),
        seed: 99,
        lengths: vec![10, 20, 40, 60],
        conversations_per_length: 200,
        metrics: MetricKind::ALL.into_iter().collect(),
        probe_count: 5,
        // Probing every fifth turn keeps the smoke run desk-sized; the
        // stride changes cost, not the formula.
        qa_stride: 5,
        jobs: 4,
        ..RunConfig::default()
    };
    for provider in [
        &mut config.provider.judge,
        &mut config.provider.simulator,
        &mut config.provider.task_agent,
    ] {
        provider.endpoint_url = server.url().to_string();
        provider.api_key_env_var.clear();
        provider.parallelism = 4;
    }

    let simulate = cmd_simulate(&config).unwrap();
    assert_eq!(simulate.written, 800, "expected 800 transcripts");
    assert_eq!(simulate.failed, 0);

    let judge = cmd_judge(&config).unwrap();
    assert_eq!(judge.transcripts, 800);
    assert!(!judge.interrupted);

    let score = cmd_score(&config).unwrap();
    assert_eq!(score.reports_written, 800);
    assert!(score.missing_verdicts.is_empty());

    // The summary table must carry mean ± std for all three metrics in
    // every length bucket.
    let summary = fs::read_to_string(dir.path().join("reports/summary.tsv")).unwrap();
    let mut buckets: BTreeMap<(usize, String), (f64, f64, usize)> = BTreeMap::new();
    for line in summary.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        buckets.insert(
            (fields[1].parse().unwrap(), fields[2].to_string()),
            (fields[3].parse().unwrap(), fields[4].parse().unwrap(), fields[5].parse().unwrap()),
        );
    }
    for length in [10usize, 20, 40, 60] {
        for metric in ["prompt", "line", "qa"] {
            let (mean, std, count) = buckets
                .get(&(length, metric.to_string()))
                .unwrap_or_else(|| panic!("summary missing ({length}, {metric})"));
            assert!((0.0..=1.0).contains(mean));
            assert!(*std >= 0.0);
            assert_eq!(*count, 200, "bucket ({length}, {metric}) holds all 200 transcripts");
        }
    }
    let elapsed = started.elapsed();
    pass(
        7,
        &format!(
            "800 transcripts simulated + judged against the HTTP stub ({} requests served) in {elapsed:?}",
            server.requests_served()
        ),
    );
}

// --- criterion 8: out-of-scope statement --------------------------------------------

#[test]
fn criterion_8_desk_scale_substitution_statement() {
    // Reproducing published model-specific consistency tables, the
    // human-study agreement constants, and fine-tuning gains requires
    // the original model weights, GPU training, and human annotators;
    // none of that is attainable at desk scale. The substitute gate is
    // criteria 1-7: fixture replay plus the formula and protocol
    // property suites, which validate every computation this toolkit
    // defines.
    let fixtures = golden::all();
    assert_eq!(fixtures.len(), 9, "fixture replay suite must exist");
    pass(
        8,
        "model-specific table values, human-study constants, and fine-tuning gains are out of desk-scale scope; substituted by criteria 1-7",
    );
}
