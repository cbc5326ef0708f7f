use crrg_core::corpusio::{
    augment_rsna_image, extract_findings, join_records, preprocess_mimic_image, split_dataset,
    ImageGrid, MimicAugConfig, RsnaAugConfig, Split, SplitRatios, StudyKey, StudyRecord,
    MIMIC_SIZE, RSNA_SIZE,
};
use crrg_core::optimkit::{
    adamw_step, warmup_lr, AdamWConfig, AdamWState, PlateauMode, PlateauScheduler, WarmupSchedule,
};
use crrg_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn plateau_never_raises_lr(metrics in prop::collection::vec(-5.0..5.0f64, 1..60), patience in 0u32..4, cooldown in 0u32..4, factor in 0.05..0.95f64, max in any::<bool>()) {
        let mode = if max { PlateauMode::Max } else { PlateauMode::Min };
        let mut s = PlateauScheduler::new(0.1, factor, patience, cooldown, mode).unwrap();
        let mut prev = s.current_lr;
        for m in metrics {
            let lr = s.step(m).unwrap();
            prop_assert!(lr <= prev);
            prop_assert_eq!(lr, 0.1 * factor.powi(s.reductions() as i32));
            prev = lr;
        }
    }

    #[test]
    fn adamw_zero_gradient_is_identity(p in prop::collection::vec(-10.0..10.0f64, 1..40), steps in 1usize..5, lr in 0.0..1.0f64) {
        let mut params = p.clone();
        let mut state = AdamWState::new(p.len());
        let cfg = AdamWConfig::new(lr, 0.0).unwrap();
        for _ in 0..steps {
            adamw_step(&mut params, &vec![0.0; p.len()], &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(params, p);
    }

    #[test]
    fn warmup_nondecreasing_and_reaches_base(warmup in 0u32..10, extra in 1u32..10, base in 1e-6..1.0f64) {
        let s = WarmupSchedule { warmup_epochs: warmup, total_epochs: warmup + extra, base_lr: base };
        let lrs: Vec<f64> = (0..s.total_epochs).map(|e| warmup_lr(&s, e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(lrs[warmup as usize], base);
        prop_assert!(warmup_lr(&s, s.total_epochs).is_err());
    }

    #[test]
    fn join_is_bounded_and_idempotent(
        r in prop::collection::btree_set(0u8..40, 0..30),
        i in prop::collection::btree_set(0u8..40, 0..30),
        g in prop::collection::btree_set(0u8..40, 0..30),
    ) {
        let key = |k: u8| StudyKey::new(format!("p{}", k / 4), format!("s{k}"), format!("i{k}"));
        let out = join_records(
            r.iter().map(|&k| (key(k), format!("FINDINGS: r{k}"))).collect(),
            i.iter().map(|&k| (key(k), format!("img{k}.pgm"))).collect(),
            g.iter().map(|&k| (key(k), Vec::new())).collect(),
        ).unwrap();
        prop_assert!(out.records.len() <= r.len().min(i.len()).min(g.len()));
        prop_assert_eq!(out.records.len(), r.iter().filter(|k| i.contains(k) && g.contains(k)).count());
        let again = join_records(
            out.records.iter().map(|s| (s.key(), s.raw_report.clone().unwrap())).collect(),
            out.records.iter().map(|s| (s.key(), s.image_path.clone())).collect(),
            out.records.iter().map(|s| (s.key(), s.regions.clone())).collect(),
        ).unwrap();
        prop_assert_eq!(again.records, out.records);
    }

    #[test]
    fn split_counts_sum_and_are_deterministic(n in 0usize..400, seed in any::<u64>()) {
        let mut a = records(n);
        let mut b = records(n);
        let counts = split_dataset(&mut a, &SplitRatios::default(), seed).unwrap();
        split_dataset(&mut b, &SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), counts[0]);
        prop_assert_eq!(a.iter().filter(|r| r.split == Split::Test).count(), counts[2]);
    }

    #[test]
    fn findings_never_contain_newlines(lines in prop::collection::vec("[a-zA-Z .,]{0,30}", 1..6), header_at in 0usize..6) {
        let mut doc: Vec<String> = lines.clone();
        let at = header_at.min(doc.len());
        doc.insert(at, format!("FINDINGS: {}", lines[0]));
        doc.push("IMPRESSION: none.".into());
        if let Ok(f) = extract_findings(&doc.join("\n")) {
            prop_assert!(!f.contains('\n') && !f.contains('\r'));
            prop_assert!(!f.is_empty());
        }
    }
}

fn records(n: usize) -> Vec<StudyRecord> {
    (0..n)
        .map(|k| StudyRecord {
            subject_id: format!("p{k}"),
            study_id: format!("s{k}"),
            image_id: format!("i{k}"),
            image_path: String::new(),
            findings: Some("clear".into()),
            raw_report: None,
            regions: Vec::new(),
            split: Split::Unassigned,
        })
        .collect()
}

#[test]
fn ten_thousand_records_split_exactly() {
    let mut r = records(10_000);
    assert_eq!(
        split_dataset(&mut r, &SplitRatios::default(), 3).unwrap(),
        [7000, 1500, 1500]
    );
}

#[test]
fn distinct_seeds_give_distinct_splits() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..100u64 {
        let mut r = records(50);
        split_dataset(&mut r, &SplitRatios::default(), seed).unwrap();
        seen.insert(r.iter().map(|x| x.split as u8).collect::<Vec<_>>());
    }
    assert_eq!(seen.len(), 100);
}

#[test]
fn image_pipelines_emit_fixed_sizes() {
    let mut rng = seeded(5);
    for _ in 0..12 {
        let (w, h) = (rng.random_range(16..700), rng.random_range(16..700));
        let img = ImageGrid::new(
            w,
            h,
            (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let m = preprocess_mimic_image(&img, &MimicAugConfig::default(), &mut rng).unwrap();
        assert_eq!((m.width, m.height), (MIMIC_SIZE, MIMIC_SIZE));
        if w >= RSNA_SIZE && h >= RSNA_SIZE {
            let r = augment_rsna_image(&img, &RsnaAugConfig::default(), &mut rng).unwrap();
            assert_eq!((r.width, r.height), (RSNA_SIZE, RSNA_SIZE));
        }
    }
}
