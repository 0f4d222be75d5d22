use std::collections::VecDeque;

use proptest::prelude::*;
use unigen_core::data::{read_dataset, write_dataset, DatasetManifest, LabelSpace, Provenance, SampleRecord, Stage};
use unigen_core::relabel::{passes_threshold, soft_relabel};
use unigen_core::tensor::{l2_norm, Matrix};
use unigen_core::trainer::{scl_loss, EncoderPair, MemoryBank, ParamSet};
use unigen_core::weighting::robust_loss;

fn unit_rows(raw: &[Vec<f64>]) -> Option<Matrix> {
    let mut rows = Vec::with_capacity(raw.len());
    for r in raw {
        let n = l2_norm(r);
        if n < 1e-3 {
            return None;
        }
        rows.push(r.iter().map(|v| v / n).collect());
    }
    Some(Matrix::from_rows(&rows))
}

/// Straight transcription of the loss as a double sum, with no shared code.
fn scl_brute(anchors: &Matrix, labels: &[usize], bank: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let mut pool: Vec<(Vec<f64>, usize)> = (0..anchors.rows()).map(|i| (anchors.row(i).to_vec(), labels[i])).collect();
    pool.extend(bank.iter().cloned());
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..anchors.rows() {
        let zi = anchors.row(i);
        let positives: Vec<usize> = (0..pool.len()).filter(|&p| p != i && pool[p].1 == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut term = 0.0;
        for &p in &positives {
            let denom: f64 = (0..pool.len()).filter(|&a| a != i).map(|a| sim(zi, &pool[a].0).exp()).sum();
            term += -(sim(zi, &pool[p].0).exp() / denom).ln();
        }
        total += term / positives.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>, f64)> {
    (1usize..=4, 1usize..=8, 0usize..=8).prop_flat_map(|(d, n, m)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), m),
            prop::collection::vec(0usize..3, m),
            0.05f64..1.0,
        )
    })
}

fn filled_bank(rows: &[Vec<f64>], classes: &[usize]) -> Option<(MemoryBank, Vec<(Vec<f64>, usize)>)> {
    let mut bank = MemoryBank::new(64);
    if rows.is_empty() {
        return Some((bank, Vec::new()));
    }
    let z = unit_rows(rows)?;
    bank.update(&z, classes, &vec![None; rows.len()], 0.8);
    let plain = bank.entries().map(|e| (e.projection.clone(), e.class_id)).collect();
    Some((bank, plain))
}

fn rotation(d: usize, angle: f64, a: usize, b: usize) -> Matrix {
    let mut r = Matrix::zeros(d, d);
    for i in 0..d {
        r.set(i, i, 1.0);
    }
    if a != b {
        r.set(a, a, angle.cos());
        r.set(b, b, angle.cos());
        r.set(a, b, -angle.sin());
        r.set(b, a, angle.sin());
    }
    r
}

fn record(text: String, soft: Vec<f64>, weight: Option<f64>) -> SampleRecord {
    let prov = Provenance {
        generator: "lexicon-lm".into(),
        prompt: "The text in positive sentiment is:".into(),
        top_k: 40,
        top_p: 0.9,
        max_new_tokens: 64,
        stop_sequences: vec!["\n".into()],
        seed: 7,
    };
    let mut r = SampleRecord::seeded(text, 0, soft.len(), prov);
    r.set_soft_label(soft);
    r.weight = weight;
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scl_matches_the_double_sum((a, la, b, lb, tau) in batch_strategy()) {
        let Some(anchors) = unit_rows(&a) else { return Ok(()) };
        let Some((bank, plain)) = filled_bank(&b, &lb) else { return Ok(()) };
        let fast = scl_loss(&anchors, &la, &bank, tau);
        let slow = scl_brute(&anchors, &la, &plain, tau);
        prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1.0), "{fast} vs {slow}");
    }

    #[test]
    fn scl_is_rotation_invariant((a, la, b, lb, tau) in batch_strategy(), angle in 0.0f64..6.28, axes in (0usize..4, 0usize..4)) {
        let Some(anchors) = unit_rows(&a) else { return Ok(()) };
        let Some((bank, _)) = filled_bank(&b, &lb) else { return Ok(()) };
        let d = anchors.cols();
        let r = rotation(d, angle, axes.0 % d, axes.1 % d);
        let rotated_bank_rows: Vec<Vec<f64>> = bank.entries().map(|e| e.projection.clone()).collect();
        let rotated_bank = if rotated_bank_rows.is_empty() {
            MemoryBank::new(64)
        } else {
            let rb = Matrix::from_rows(&rotated_bank_rows).matmul(&r);
            let classes: Vec<usize> = bank.entries().map(|e| e.class_id).collect();
            let mut out = MemoryBank::new(64);
            out.update(&rb, &classes, &vec![None; classes.len()], 0.8);
            out
        };
        let before = scl_loss(&anchors, &la, &bank, tau);
        let after = scl_loss(&anchors.matmul(&r), &la, &rotated_bank, tau);
        prop_assert!((before - after).abs() <= 1e-8 * before.abs().max(1.0));
    }

    #[test]
    fn soft_relabel_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-50.0f64..0.0, 2..6),
        shift in -100.0f64..100.0,
        tau in 0.01f64..2.0,
    ) {
        let p = soft_relabel(&logits, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (x, y) in p.iter().zip(soft_relabel(&shifted, tau)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn threshold_rule_is_max_against_uniform_plus_margin(p in 0.0f64..1.0, t_re in 0.0f64..0.5) {
        let soft = vec![p, 1.0 - p];
        let expected = p.max(1.0 - p) >= 0.5 + t_re + 1e-9;
        let ambiguous = (p.max(1.0 - p) - 0.5 - t_re).abs() < 1e-9;
        if !ambiguous {
            prop_assert_eq!(passes_threshold(&soft, t_re), expected);
        }
    }

    #[test]
    fn robust_loss_is_bounded(p in 1e-12f64..1.0, q in 0.05f64..1.0) {
        let l = robust_loss(&[1.0 - p, p], 1, q);
        prop_assert!(l >= -1e-15 && l <= 1.0 / q + 1e-12);
    }

    #[test]
    fn bank_is_fifo_bounded_and_unit(
        steps in prop::collection::vec(
            prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), 0usize..2, 0.0f64..1.0), 1..6),
            1..60,
        ),
        capacity in 1usize..16,
    ) {
        let mut bank = MemoryBank::new(capacity);
        let mut model: VecDeque<(usize, f64)> = VecDeque::new();
        for batch in steps {
            let rows: Vec<Vec<f64>> = batch.iter().map(|(v, _, _)| v.clone()).collect();
            let Some(z) = unit_rows(&rows) else { continue };
            let classes: Vec<usize> = batch.iter().map(|(_, c, _)| *c).collect();
            let weights: Vec<Option<f64>> = batch.iter().map(|(_, _, w)| Some(*w)).collect();
            bank.update(&z, &classes, &weights, 0.8);
            for (c, w) in classes.iter().zip(&weights) {
                if w.unwrap() > 0.8 {
                    model.push_back((*c, w.unwrap()));
                    if model.len() > capacity {
                        model.pop_front();
                    }
                }
            }
            prop_assert!(bank.len() <= capacity);
            let stored: Vec<(usize, f64)> = bank.entries().map(|e| (e.class_id, e.weight.unwrap())).collect();
            prop_assert_eq!(&stored, &model.iter().copied().collect::<Vec<_>>());
            for e in bank.entries() {
                prop_assert!((l2_norm(&e.projection) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn momentum_matches_closed_form(
        k0 in prop::collection::vec(-5.0f64..5.0, 1..8),
        q_off in prop::collection::vec(-5.0f64..5.0, 8),
        m in 0.0f64..1.0,
        t in 0usize..200,
    ) {
        let n = k0.len();
        let mut query = ParamSet::new();
        query.insert("encoder.w", Matrix::from_vec(1, n, q_off[..n].to_vec()));
        let mut pair = EncoderPair::new(query, m);
        pair.key.insert("encoder.w", Matrix::from_vec(1, n, k0.clone()));
        for _ in 0..t {
            pair.momentum_update().unwrap();
        }
        let mt = m.powi(t as i32);
        for (i, v) in pair.key.get("encoder.w").unwrap().data().iter().enumerate() {
            let expected = mt * k0[i] + (1.0 - mt) * q_off[i];
            prop_assert!((v - expected).abs() <= 1e-10 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn dataset_round_trips_bit_exactly(
        rows in prop::collection::vec(("[a-z][a-z ,.!'\"\\\\é]{0,40}", 0.0f64..1.0, prop::option::of(0.0f64..1.0)), 1..20),
        stage_ix in 0usize..4,
    ) {
        let stage = [Stage::Generated, Stage::Relabeled, Stage::Weighted, Stage::Selected][stage_ix];
        let mut m = DatasetManifest::new(LabelSpace::sentiment(), stage, "abc123");
        for (text, p, w) in rows {
            m.records.push(record(text, vec![1.0 - p, p], w));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&m, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(&back, &m);
        let path2 = dir.path().join("e.jsonl");
        write_dataset(&back, &path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
