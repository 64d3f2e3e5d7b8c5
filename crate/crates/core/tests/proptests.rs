//! Property tests: serialization round-trips, score-function oracle
//! equivalence against naive recomputations, Fleiss' kappa against a
//! direct formula evaluation, and heatmap structure.

use proptest::prelude::*;

use personasim::judge::ConflictFinding;
use personasim::metrics::{
    line_to_line_score, prompt_to_line_score, qa_consistency_score, VerdictMatrix,
};
use personasim::model::{
    deserialize_transcript, serialize_transcript, AgentRole, Persona, TaskKind, Transcript,
    Utterance,
};
use personasim::stats::{fleiss_kappa, metric_agreement_heatmap, AnnotationMatrix};

// --- naive oracles, kept deliberately separate from the library path ---
// Plain index loops on purpose; these must not share idioms with the
// implementation they check.

#[allow(clippy::manual_flatten)]
fn oracle_prompt_score(bits: &[Option<bool>]) -> Option<f64> {
    let mut n = 0u32;
    let mut sum = 0u32;
    for bit in bits {
        if let Some(b) = bit {
            n += 1;
            if *b {
                sum += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(f64::from(sum) / f64::from(n))
    }
}

#[allow(clippy::manual_flatten)]
fn oracle_line_score(t: usize, conflicts: &[Option<ConflictFinding>]) -> Option<f64> {
    if t == 0 {
        return None;
    }
    if t == 1 {
        return Some(1.0);
    }
    let mut n = 0u32;
    let mut sum = 0u32;
    for slot in conflicts {
        if let Some(finding) = slot {
            n += 1;
            if finding.cited_indices.is_empty() {
                sum += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(f64::from(sum) / f64::from(n))
    }
}

#[allow(clippy::manual_flatten)]
fn oracle_qa_score(grid: &[Vec<Option<bool>>]) -> Option<f64> {
    let mut n = 0u32;
    let mut sum = 0u32;
    for row in grid {
        for cell in row {
            if let Some(correct) = cell {
                n += 1;
                if *correct {
                    sum += 1;
                }
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(f64::from(sum) / f64::from(n))
    }
}

fn oracle_fleiss(counts: &[Vec<u32>], raters: u32) -> f64 {
    let n_items = counts.len() as f64;
    let n = raters as f64;
    let categories = counts[0].len();
    let p_bar: f64 = counts
        .iter()
        .map(|row| {
            let sum_sq: f64 = row.iter().map(|&c| (c as f64).powi(2)).sum();
            (sum_sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / n_items;
    let mut pe = 0.0;
    for j in 0..categories {
        let share = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n_items * n);
        pe += share * share;
    }
    (p_bar - pe) / (1.0 - pe)
}

// --- strategies ---

fn arb_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[ -~\\n\\t\u{00e9}\u{4e16}]{1,40}")
        .unwrap()
        .prop_filter("utterance text must be non-empty", |s| !s.is_empty())
}

fn arb_transcript() -> impl Strategy<Value = Transcript> {
    (
        0usize..14,
        prop::bool::ANY,
        arb_text(),
        proptest::collection::vec(arb_text(), 0..14),
        proptest::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,16}", 0..4),
        any::<u64>(),
    )
        .prop_map(|(len, opener_sim, persona_text, texts, metadata, seed)| {
            let opener = if opener_sim { AgentRole::UserSimulator } else { AgentRole::TaskAgent };
            let utterances: Vec<Utterance> = texts
                .into_iter()
                .take(len)
                .enumerate()
                .map(|(index, text)| Utterance {
                    index,
                    speaker: if index % 2 == 0 { opener } else { opener.other() },
                    text,
                    regen_count: (index % 3) as u32,
                })
                .collect();
            let count = utterances.len();
            Transcript {
                id: format!("prop-{seed:x}"),
                persona: Persona {
                    id: "prop-p".into(),
                    task: TaskKind::OpenEnded,
                    text: persona_text,
                    role_label: "Speaker".into(),
                    metadata,
                },
                task: TaskKind::OpenEnded,
                utterances,
                target_length: count.max(1),
                seed,
            }
        })
}

fn arb_matrix() -> impl Strategy<Value = (usize, VerdictMatrix)> {
    (1usize..10, 0usize..6).prop_flat_map(|(t, k)| {
        let prompt = proptest::collection::vec(proptest::option::of(any::<bool>()), t);
        let conflicts = proptest::collection::vec(
            proptest::option::of(proptest::collection::vec(0usize..20, 0..3)),
            t.saturating_sub(1),
        );
        let grades = proptest::collection::vec(
            proptest::collection::vec(proptest::option::of(any::<bool>()), k),
            t,
        );
        (Just(t), prompt, conflicts, grades).prop_map(move |(t, prompt, conflicts, grades)| {
            let turn_indices: Vec<usize> = (0..t).map(|i| 2 * i + 1).collect();
            let mut matrix = VerdictMatrix::empty("prop", turn_indices);
            matrix.prompt_to_line = prompt;
            matrix.conflicts = conflicts
                .into_iter()
                .enumerate()
                .map(|(i, slot)| {
                    slot.map(|cited| ConflictFinding {
                        turn_index: 2 * (i + 1) + 1,
                        cited_indices: cited,
                        raw_text: String::new(),
                    })
                })
                .collect();
            matrix.qa_grades = grades;
            (t, matrix)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn serialization_round_trips(transcript in arb_transcript()) {
        let serialized = serialize_transcript(&transcript);
        let back = deserialize_transcript(&serialized).unwrap();
        prop_assert_eq!(back, transcript);
    }

    #[test]
    fn scores_match_naive_oracles((t, matrix) in arb_matrix()) {
        prop_assert_eq!(
            prompt_to_line_score(&matrix.prompt_to_line).ok(),
            oracle_prompt_score(&matrix.prompt_to_line)
        );
        prop_assert_eq!(
            line_to_line_score(t, &matrix.conflicts).ok().map(|s| s.value),
            oracle_line_score(t, &matrix.conflicts)
        );
        prop_assert_eq!(
            qa_consistency_score(&matrix.qa_grades).ok(),
            oracle_qa_score(&matrix.qa_grades)
        );
    }

    #[test]
    fn scores_stay_in_unit_interval((t, matrix) in arb_matrix()) {
        if let Ok(score) = prompt_to_line_score(&matrix.prompt_to_line) {
            prop_assert!((0.0..=1.0).contains(&score));
        }
        if let Ok(score) = line_to_line_score(t, &matrix.conflicts) {
            prop_assert!((0.0..=1.0).contains(&score.value));
        }
        if let Ok(score) = qa_consistency_score(&matrix.qa_grades) {
            prop_assert!((0.0..=1.0).contains(&score));
        }
    }

    #[test]
    fn flipping_bit_up_is_monotone((_t, matrix) in arb_matrix(), turn in 0usize..10) {
        let mut bits = matrix.prompt_to_line.clone();
        let turn = turn % bits.len().max(1);
        if bits.get(turn).copied().flatten() == Some(false) {
            let before = prompt_to_line_score(&bits).unwrap();
            bits[turn] = Some(true);
            let after = prompt_to_line_score(&bits).unwrap();
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn kappa_matches_direct_formula(
        rows in proptest::collection::vec((0u32..5, 0u32..5, 0u32..5), 2..12)
    ) {
        // Build rows with a constant rater count of 6 across 3 categories.
        let raters = 6u32;
        let counts: Vec<Vec<u32>> = rows
            .iter()
            .map(|&(a, b, _)| {
                let a = a.min(raters);
                let b = b.min(raters - a);
                vec![a, b, raters - a - b]
            })
            .collect();
        let matrix = AnnotationMatrix::new(raters, counts.clone()).unwrap();
        match fleiss_kappa(&matrix) {
            Ok(result) if !result.degenerate_chance => {
                let direct = oracle_fleiss(&counts, raters);
                prop_assert!((result.value - direct).abs() < 1e-12);
            }
            Ok(result) => prop_assert_eq!(result.value, 1.0),
            Err(_) => prop_assert!(false, "kappa failed on a valid matrix"),
        }
    }
}

#[test]
fn length_table_matches_independent_recount_on_twelve_reports() {
    use personasim::model::{AggregateScores, ConsistencyReport};
    use personasim::stats::consistency_by_length;

    // 12 reports across the four standard length buckets, with values
    // spread enough that mean and std are both non-trivial.
    let values = [
        (10usize, 0.6),
        (10, 0.4),
        (10, 0.9),
        (20, 0.5),
        (20, 0.7),
        (20, 0.7),
        (40, 0.2),
        (40, 0.8),
        (40, 0.5),
        (60, 1.0),
        (60, 0.1),
        (60, 0.4),
    ];
    let reports: Vec<ConsistencyReport> = values
        .iter()
        .enumerate()
        .map(|(i, &(length, value))| ConsistencyReport {
            transcript_id: format!("t{i}"),
            task: TaskKind::OpenEnded,
            target_length: length,
            per_turn: vec![],
            aggregate: AggregateScores { prompt_to_line: Some(value), line_to_line: None, qa: None },
            error_turns: vec![],
            notes: vec![],
        })
        .collect();

    let rows = consistency_by_length(&reports);
    assert_eq!(rows.len(), 4);
    for row in rows {
        // Spreadsheet-style recount: plain accumulation formulas.
        let bucket: Vec<f64> = values
            .iter()
            .filter(|(length, _)| *length == row.target_length)
            .map(|&(_, value)| value)
            .collect();
        let mean = bucket.iter().sum::<f64>() / bucket.len() as f64;
        let variance =
            bucket.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / bucket.len() as f64;
        assert!((row.stats.mean - mean).abs() < 1e-12);
        assert!((row.stats.std - variance.sqrt()).abs() < 1e-12);
        assert_eq!(row.stats.count, 3);
    }
}

#[test]
fn heatmap_is_symmetric_with_unit_diagonal_on_golden_replay() {
    // Build small reports from the golden fixtures' prompt bits, with
    // synthetic line/qa values, then recount one pooled entry by hand.
    use personasim::model::{AggregateScores, ConsistencyReport, TurnScores};

    let mut reports = Vec::new();
    for fixture in personasim::golden::all() {
        let polarity = personasim::judge::default_prompt_polarity(fixture.task);
        let bits = fixture.replay_bits(polarity);
        let per_turn: Vec<TurnScores> = bits
            .iter()
            .enumerate()
            .map(|(i, bit)| TurnScores {
                turn_index: 2 * i + 1,
                prompt_to_line: bit.map(u8::from),
                line_to_line: Some(u8::from(i % 2 == 0)),
                qa_fraction: Some(if i % 3 == 0 { 1.0 } else { 0.4 }),
            })
            .collect();
        reports.push(ConsistencyReport {
            transcript_id: fixture.name.clone(),
            task: fixture.task,
            target_length: 10,
            per_turn,
            aggregate: AggregateScores::default(),
            error_turns: vec![],
            notes: vec![],
        });
    }
    let heatmap = metric_agreement_heatmap(&reports, 0.8).unwrap();
    for row in 0..3 {
        assert_eq!(heatmap.entries[row][row], 1.0);
        for col in 0..3 {
            assert_eq!(heatmap.entries[row][col], heatmap.entries[col][row]);
            assert!((0.0..=1.0).contains(&heatmap.entries[row][col]));
        }
    }
    // Brute-force recount of the (prompt, line) entry.
    let mut total = 0usize;
    let mut agree = 0usize;
    for report in &reports {
        for turn in &report.per_turn {
            if let (Some(p), Some(l)) = (turn.prompt_to_line, turn.line_to_line) {
                total += 1;
                if p == l {
                    agree += 1;
                }
            }
        }
    }
    assert_eq!(heatmap.entries[0][1], agree as f64 / total as f64);
    assert_eq!(heatmap.support[0][1], total);
}
