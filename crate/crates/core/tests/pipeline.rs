use std::collections::HashMap;
use std::fs;

use rerank_lab::corpus::{build_vocabulary, load_candidates, load_collection, load_qrels, load_queries, write_candidates};
use rerank_lab::embeddings::{EmbeddingTable, Featurizer};
use rerank_lab::evaluation::{evaluate, rerank_all, NeuralScorer, RerankConfig};
use rerank_lab::firststage::{candidate_pool, load_run, retrieve, save_run, Bm25Params, InvertedIndex};
use rerank_lab::nn::Checkpoint;
use rerank_lab::rankers::{ModelConfig, ModelKind, Ranker};
use rerank_lab::synthetic::{separable, SeparableSpec};
use rerank_lab::training::{load_triples, train, TrainConfig, Validation};

fn spec() -> SeparableSpec {
    SeparableSpec {
        queries: 12,
        documents: 60,
        candidates: 10,
        seed: 3,
        ..SeparableSpec::default()
    }
}

#[test]
fn bm25_candidates_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    separable(&spec()).unwrap().write_files(dir.path()).unwrap();

    let index = InvertedIndex::build(load_collection(&dir.path().join("collection.tsv")).unwrap()).unwrap();
    let docs: HashMap<_, _> = load_collection(&dir.path().join("collection.tsv"))
        .unwrap()
        .map(|d| d.map(|d| (d.id.clone(), d)))
        .collect::<Result<_, _>>()
        .unwrap();
    let queries = load_queries(&dir.path().join("queries.tsv")).unwrap();
    let qrels = load_qrels(&dir.path().join("qrels.txt")).unwrap();

    let mut runs = Vec::new();
    let mut pools = Vec::new();
    for q in &queries {
        let ranked = retrieve(q, &index, Bm25Params::default(), 10).unwrap();
        pools.push(candidate_pool(q, &ranked, &docs).unwrap());
        runs.push(ranked);
    }
    // the rare token is the only lexical match, so BM25 finds every answer
    let first = evaluate(&runs, &qrels, 10).unwrap();
    assert_eq!(first.mrr, 1.0);

    let path = dir.path().join("pools.tsv");
    write_candidates(&path, &pools).unwrap();
    let back = load_candidates(&path).unwrap();
    assert_eq!(back.len(), pools.len());
    for (a, b) in pools.iter().zip(&back) {
        assert_eq!(a.query, b.query);
        let ids = |l: &rerank_lab::corpus::CandidateList| l.candidates.iter().map(|c| c.doc.clone()).collect::<Vec<_>>();
        assert_eq!(ids(a), ids(b));
    }

    let run_path = dir.path().join("bm25.run");
    save_run(&run_path, &runs, "bm25").unwrap();
    let loaded = load_run(&run_path).unwrap();
    let doc_ids = |r: &[rerank_lab::firststage::RankedList]| {
        r.iter().map(|l| l.doc_ids().map(str::to_string).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(doc_ids(&runs), doc_ids(&loaded));
    assert_eq!(evaluate(&loaded, &qrels, 10).unwrap(), first);
}

#[test]
fn restored_checkpoint_reranks_like_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable(&spec()).unwrap();
    data.write_files(dir.path()).unwrap();

    let vocab = build_vocabulary(load_collection(&dir.path().join("collection.tsv")).unwrap(), 1).unwrap();
    let featurizer = Featurizer::Word(vocab);
    let config = ModelConfig {
        seed: 5,
        ..ModelConfig::new(ModelKind::Knrm)
    };
    let embeddings = EmbeddingTable::random(featurizer.rows(), 16, 5).unwrap().into_matrix();
    let mut ranker = Ranker::new(config.clone(), embeddings.clone()).unwrap();
    let triples = load_triples(&dir.path().join("triples.tsv"), config.input).unwrap();
    assert_eq!(triples.skipped, 0);

    let train_config = TrainConfig {
        batch_size: 8,
        epochs: 3,
        eval_every: 5,
        max_steps: Some(15),
        seed: 5,
        ..TrainConfig::default()
    };
    let out = dir.path().join("train");
    let outcome = train(
        &mut ranker,
        &featurizer,
        &triples.triples,
        Validation {
            candidates: &data.candidates,
            qrels: &data.qrels,
        },
        &train_config,
        Some(&out),
    )
    .unwrap();
    assert_eq!(outcome.steps, 15);
    for step in [5, 10, 15] {
        assert!(out.join(format!("step_{step}.ckpt")).exists());
    }
    assert!(fs::read_to_string(out.join("train_log.tsv")).unwrap().lines().count() > 1);

    let mut restored = Ranker::new(config, embeddings).unwrap();
    Checkpoint::load(&out.join("best.ckpt"))
        .unwrap()
        .restore_params(restored.params_mut())
        .unwrap();

    let rerank = |r: &Ranker<f32>| {
        let scorer = NeuralScorer {
            ranker: r,
            featurizer: &featurizer,
        };
        rerank_all(&scorer, &data.candidates, RerankConfig::new(10).unwrap()).unwrap()
    };
    let (a, b) = (rerank(&ranker), rerank(&restored));
    assert_eq!(a, b);
    assert_eq!(evaluate(&b, &data.qrels, 10).unwrap().mrr, outcome.best_mrr);
}

#[test]
fn pretrained_vectors_fill_known_terms_only() {
    let dir = tempfile::tempdir().unwrap();
    separable(&spec()).unwrap().write_files(dir.path()).unwrap();
    let vocab = build_vocabulary(load_collection(&dir.path().join("collection.tsv")).unwrap(), 1).unwrap();
    let known: Vec<&str> = vocab.terms().map(|(_, t)| t).take(3).collect();

    let path = dir.path().join("vectors.txt");
    let mut body = String::from("4 2\n");
    for (i, t) in known.iter().enumerate() {
        body.push_str(&format!("{t} {i} -{i}.5\n"));
    }
    body.push_str("notaterm 9 9\n");
    fs::write(&path, body).unwrap();

    let (table, report) = EmbeddingTable::load_pretrained(&path, &vocab, 2, 0).unwrap();
    assert!(report.header_skipped);
    assert_eq!(report.found, 3);
    assert_eq!(report.missing, vocab.term_count() - 3);
    for (i, t) in known.iter().enumerate() {
        let row = table.row(vocab.id(t).unwrap());
        assert_eq!(row, &[i as f32, -(i as f32) - 0.5]);
    }

    fs::write(&path, format!("{} 1 2 3\n", known[0])).unwrap();
    let err = EmbeddingTable::load_pretrained(&path, &vocab, 2, 0).unwrap_err();
    assert!(err.is_data_error());
}
