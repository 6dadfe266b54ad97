use udoc::autograd::Graph;
use udoc::config::RunConfig;
use udoc::corpus::generate_corpus;
use udoc::encoder::region_slots;
use udoc::model::{prepare_docs, UdocModel};
use udoc::sequence::SlotKind;

#[test]
fn encoding_a_page_is_deterministic_and_well_shaped() {
    let cfg = RunConfig::desk();
    let corpus = generate_corpus(12, 3, &cfg.corpus).unwrap();
    let model = UdocModel::new(&cfg, 12);
    let docs = prepare_docs(&corpus.docs, &model.text).unwrap();
    let m = &cfg.model;
    for doc in &docs {
        let n = doc.regions();
        let mut g1 = Graph::new();
        let (seq, a) = model.encode_doc(&mut g1, doc).unwrap();
        let mut g2 = Graph::new();
        let (_, b) = model.encode_doc(&mut g2, doc).unwrap();
        assert_eq!(g1.value(a.h_visual), g2.value(b.h_visual));
        assert_eq!(g1.value(a.z_vla), g2.value(b.z_vla));

        assert_eq!(seq.kinds.len(), n + 2);
        assert_eq!(seq.kinds[0], SlotKind::Cls);
        assert_eq!(seq.kinds[n + 1], SlotKind::Sep);
        assert_eq!(region_slots(&seq.kinds), (1..=n).collect::<Vec<_>>());
        assert_eq!(g1.value(a.h_visual).shape(), [n + 2, m.d_model]);
        assert_eq!(g1.value(a.h_textual).shape(), [n + 2, m.d_model]);
        assert_eq!(g1.value(a.v_hat).shape(), [n, m.d_quant]);
        assert_eq!(g1.value(a.s_hat).shape(), [n, m.d_text]);
        assert_eq!(g1.value(a.z_vla).shape(), [n, m.d_text]);
        assert_eq!(g1.value(a.mvm_pred).shape(), [n, m.d_visual()]);
        assert!(g1.value(a.h_visual).is_finite() && g1.value(a.h_textual).is_finite());
    }
}

#[test]
fn region_order_permutes_region_outputs() {
    let cfg = RunConfig::tiny();
    let corpus = generate_corpus(2, 1, &cfg.corpus).unwrap();
    let model = UdocModel::new(&cfg, 2);
    let doc = prepare_docs(&corpus.docs, &model.text).unwrap().remove(0);
    let n = doc.regions();
    let mut rev = doc.clone();
    rev.boxes.reverse();
    rev.positions.reverse();
    rev.sentences.reverse();

    let mut g = Graph::new();
    let (_, a) = model.encode_doc(&mut g, &doc).unwrap();
    let (_, b) = model.encode_doc(&mut g, &rev).unwrap();
    let (sa, sb) = (g.value(a.s_hat).clone(), g.value(b.s_hat).clone());
    for r in 0..n {
        for (x, y) in sa.row_slice(r).iter().zip(sb.row_slice(n - 1 - r)) {
            assert!((x - y).abs() < 1e-10, "region {r}: {x} vs {y}");
        }
    }
}
