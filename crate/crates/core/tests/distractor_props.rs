mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use refgen::config::PipelineConfig;
use refgen::distractor::{find_distractors_explained, DistractorType, TaskInstance};
use refgen::pipeline::{distract_all, generate_corpus, Resources};
use refgen::reasoning::AttributeLexicon;
use refgen::scene_graph::Corpus;
use refgen::synth::synthetic_corpus;
use refgen::ImageId;

use common::{fixture_instances, oracle_match, oracle_type_holds};

/// Checks one instance against the oracles. Returns a description of the
/// first violation.
fn audit(corpus: &Corpus, inst: &TaskInstance, lexicon: &AttributeLexicon) -> Result<(), String> {
    let expr = &inst.expression;
    let target_graph = corpus.graph(&inst.target_image).ok_or("target image missing")?;
    let m = oracle_match(&expr.tree, target_graph, lexicon);
    if m.len() != 1 || !m.contains(&expr.target_id) {
        return Err(format!("{}: target not unique in its image", expr.id));
    }
    let mut seen: BTreeSet<&ImageId> = BTreeSet::new();
    seen.insert(&inst.target_image);
    for (kind, images) in &inst.distractors {
        if images.len() != 3 {
            return Err(format!("{}: {kind} has {} images", expr.id, images.len()));
        }
        for img in images {
            if !seen.insert(img) {
                return Err(format!("{}: image {img} reused", expr.id));
            }
            if !oracle_type_holds(*kind, &corpus.graphs()[img], expr, lexicon) {
                return Err(format!("{}: {img} is not a {kind} distractor", expr.id));
            }
        }
    }
    // Only the target region satisfies the expression across all candidates.
    let mut matching = 0;
    for image in inst.candidate_regions.keys() {
        matching += oracle_match(&expr.tree, &corpus.graphs()[image], lexicon).len();
    }
    if matching != 1 {
        return Err(format!("{}: {matching} matching regions", expr.id));
    }
    // Greedy minimality: a smaller unclaimed qualifying image would have
    // been taken first.
    let mut claimed: BTreeSet<&ImageId> = BTreeSet::from([&inst.target_image]);
    for kind in DistractorType::PRIORITY {
        let chosen = &inst.distractors[&kind];
        let largest = chosen.iter().max().ok_or("empty type")?;
        for (img, graph) in corpus.graphs() {
            if img < largest
                && !claimed.contains(img)
                && !chosen.contains(img)
                && oracle_type_holds(kind, graph, expr, lexicon)
            {
                return Err(format!("{}: {kind} skipped {img}", expr.id));
            }
        }
        claimed.extend(chosen.iter());
    }
    Ok(())
}

#[test]
fn fixture_instances_pass_the_audit() {
    let (corpus, instances) = fixture_instances("synthetic20.json");
    assert!(!instances.is_empty());
    let lexicon = AttributeLexicon::builtin();
    for inst in &instances {
        audit(&corpus, inst, &lexicon).unwrap();
        let diff: BTreeSet<_> = inst.distractors[&DistractorType::DiffCat].iter().collect();
        let cat: BTreeSet<_> = inst.distractors[&DistractorType::Cat].iter().collect();
        assert!(diff.is_disjoint(&cat));
    }
}

#[test]
fn shortages_name_the_missing_types() {
    // Three images only: no expression can find twelve distractors.
    let corpus = synthetic_corpus(3, 6, 2);
    let resources = Resources::default();
    let (records, _) = generate_corpus(&corpus, &resources, &PipelineConfig::default());
    assert!(!records.is_empty());
    let (instances, log) = distract_all(&corpus, &records, 3, &resources.lexicon);
    assert!(instances.is_empty());
    assert_eq!(log.discarded, records.len() as u64);
    for r in &records {
        let short = find_distractors_explained(&corpus, r, 3, &resources.lexicon).unwrap_err();
        assert_eq!(short.expression_id, r.id);
        assert!(short.missing.values().all(|&found| found < 3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_corpora_pass_the_audit(images in 8usize..20, objects in 4usize..9, seed in any::<u64>()) {
        let corpus = synthetic_corpus(images, objects, seed);
        let resources = Resources::default();
        let (records, _) = generate_corpus(&corpus, &resources, &PipelineConfig::default());
        let (first, log) = distract_all(&corpus, &records, 3, &resources.lexicon);
        let (second, _) = distract_all(&corpus, &records, 3, &resources.lexicon);
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(log.instances + log.discarded, records.len() as u64);
        for inst in &first {
            if let Err(e) = audit(&corpus, inst, &resources.lexicon) {
                prop_assert!(false, "{}", e);
            }
        }
    }
}
