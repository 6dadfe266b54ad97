use udoc::autograd::Graph;
use udoc::config::RunConfig;
use udoc::corpus::{generate_corpus, Corpus};
use udoc::downstream::{finetune, labels, FinetuneModel, Task, NUM_CLASSES};
use udoc::encoder::region_slots;
use udoc::model::{prepare_docs, UdocModel};

fn setup(steps: usize) -> (RunConfig, Corpus) {
    let mut cfg = RunConfig::tiny();
    cfg.finetune.steps = steps;
    cfg.finetune.batch_size = 4;
    cfg.finetune.lr = 1e-3;
    let corpus = generate_corpus(21, 40, &cfg.corpus).unwrap();
    (cfg, corpus)
}

fn majority_rate(corpus: &Corpus, task: Task, docs: &[usize]) -> f64 {
    let mut counts = [0usize; NUM_CLASSES];
    let mut n = 0;
    for &d in docs {
        for l in labels(&corpus.docs[d], task) {
            counts[l] += 1;
            n += 1;
        }
    }
    *counts.iter().max().unwrap() as f64 / n as f64
}

#[test]
fn zero_steps_stay_near_chance() {
    let (cfg, corpus) = setup(0);
    for task in [Task::Entity, Task::Doc] {
        let model = UdocModel::new(&cfg, 4);
        let r = finetune(model, &corpus, task, &cfg).unwrap();
        assert!(r.losses.is_empty());
        let ceiling = majority_rate(&corpus, task, &r.test_docs);
        assert!(
            r.report.micro_f1 <= ceiling + 0.1,
            "{task}: untrained F1 {} above majority rate {ceiling}",
            r.report.micro_f1
        );
    }
}

#[test]
fn finetuning_is_deterministic_and_keeps_the_text_table() {
    let (cfg, corpus) = setup(6);
    let text = UdocModel::new(&cfg, 4).text.checksum();
    let a = finetune(UdocModel::new(&cfg, 4), &corpus, Task::Entity, &cfg).unwrap();
    let b = finetune(UdocModel::new(&cfg, 4), &corpus, Task::Entity, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.report, b.report);
    assert_eq!(a.model.model.text.checksum(), text);
    assert!(a.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn entity_training_reduces_the_loss() {
    let (cfg, corpus) = setup(60);
    let r = finetune(UdocModel::new(&cfg, 4), &corpus, Task::Entity, &cfg).unwrap();
    let head: f64 = r.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = r.losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (cfg, corpus) = setup(3);
    let r = finetune(UdocModel::new(&cfg, 4), &corpus, Task::Doc, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    r.model.checkpoint(&cfg).save(&path).unwrap();
    let ckpt = udoc::checkpoint::Checkpoint::load(&path).unwrap();
    let back = FinetuneModel::from_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(back.task, Task::Doc);
    let docs = prepare_docs(&corpus.docs, &back.model.text).unwrap();
    for d in &docs {
        assert_eq!(back.predict(d).unwrap(), r.model.predict(d).unwrap());
    }
}

#[test]
fn document_features_pool_only_region_slots() {
    let (cfg, corpus) = setup(0);
    let m = FinetuneModel::new(UdocModel::new(&cfg, 4), Task::Doc, 1);
    let docs = prepare_docs(&corpus.docs, &m.model.text).unwrap();
    let doc = &docs[0];
    let mut g = Graph::new();
    let f = m.doc_features(&mut g, doc).unwrap();
    let got = g.value(f).clone();

    let mut g = Graph::new();
    let (seq, out) = m.model.encode_doc(&mut g, doc).unwrap();
    let regions = region_slots(&seq.kinds);
    assert_eq!(regions.len(), doc.regions());
    assert!(!regions.contains(&0) && !regions.contains(&(seq.kinds.len() - 1)));
    let (hv, ht) = (g.value(out.h_visual).clone(), g.value(out.h_textual).clone());
    let d = hv.cols();
    for c in 0..d {
        let mv: f64 = regions.iter().map(|&r| hv.row_slice(r)[c]).sum::<f64>() / regions.len() as f64;
        let mt: f64 = regions.iter().map(|&r| ht.row_slice(r)[c]).sum::<f64>() / regions.len() as f64;
        assert!((got.data()[c] - mv * mt).abs() < 1e-12);
    }
}

#[test]
fn entity_predictions_cover_every_region() {
    let (cfg, corpus) = setup(0);
    let m = FinetuneModel::new(UdocModel::new(&cfg, 4), Task::Entity, 1);
    let docs = prepare_docs(&corpus.docs, &m.model.text).unwrap();
    for (doc, rec) in docs.iter().zip(&corpus.docs) {
        let p = m.predict(doc).unwrap();
        assert_eq!(p.len(), rec.regions.len());
        assert!(p.iter().all(|&c| c < NUM_CLASSES));
    }
}

#[test]
fn a_single_class_corpus_is_learned_exactly() {
    let (mut cfg, mut corpus) = setup(40);
    cfg.finetune.lr = 1e-2;
    for d in &mut corpus.docs {
        for r in &mut d.regions {
            r.type_label = udoc::corpus::RegionType::Table;
        }
    }
    let r = finetune(UdocModel::new(&cfg, 4), &corpus, Task::Doc, &cfg).unwrap();
    assert_eq!(r.report.accuracy, 1.0);
}
