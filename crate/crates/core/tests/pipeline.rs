use cpcl_core::classifier::BranchMasks;
use cpcl_core::config::Paths;
use cpcl_core::ingest::{load_manifest, read_feature_file, AudioTrack};
use cpcl_core::sentiment::{HashingEmbedder, SkgStore};
use cpcl_core::synthetic::{generate, write_corpus, SyntheticConfig};
use cpcl_core::training::{split_indices, train_seed, Dataset};
use cpcl_core::RunConfig;

fn small_preset() -> RunConfig {
    let mut cfg = RunConfig::synthetic_preset();
    let synth = cfg.synthetic.as_mut().unwrap();
    synth.n_samples = 30;
    cfg.train.epochs = 3;
    cfg.train.seeds = vec![0];
    cfg
}

#[test]
fn corpus_on_disk_matches_memory() {
    let cfg = small_preset();
    let synth: SyntheticConfig = cfg.synthetic.clone().unwrap();
    let corpus = generate(&synth, cfg.model.n_mfcc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path(), synth.sample_rate).unwrap();

    let descriptors = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(descriptors.len(), synth.n_samples);
    assert_eq!(read_feature_file(&descriptors[0].video_feat).unwrap(), corpus.samples[0].video);

    let from_disk = RunConfig {
        paths: Paths {
            manifest: Some(dir.path().join("manifest.jsonl")),
            skg: Some(dir.path().join("skg.tsv")),
            ..Paths::default()
        },
        synthetic: None,
        ..cfg
    };
    let (samples, triples) = from_disk.load_data().unwrap();
    assert_eq!(triples, corpus.triples);
    for (a, b) in samples.iter().zip(&corpus.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!((&a.video, &a.face, &a.text, &a.comments), (&b.video, &b.face, &b.text, &b.comments));
        match (&a.audio, &b.audio) {
            (AudioTrack::Mfcc(x), AudioTrack::Mfcc(y)) => {
                assert_eq!((x.rows, x.cols), (y.rows, y.cols));
                let worst = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(worst < 1e-9, "mfcc differs by {worst}");
            }
            _ => panic!("expected MFCC audio"),
        }
    }
}

#[test]
fn short_training_run_produces_log_and_metrics() {
    let cfg = small_preset();
    let (samples, triples) = cfg.load_data().unwrap();
    let emb = HashingEmbedder { dim: cfg.model.sentiment_dim };
    let store = SkgStore::from_triples(triples, &emb);
    let data = Dataset { samples: &samples, store: &store, embedder: &emb };
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let (tr, ev) = split_indices(&labels, cfg.train.eval_fraction, 0);
    assert_eq!(tr.len() + ev.len(), samples.len());

    let run = train_seed(&data, &tr, &ev, &cfg.model, &cfg.train, BranchMasks::default(), 0).unwrap();
    assert_eq!(run.log.len(), cfg.train.epochs);
    assert!(run.log.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    assert_eq!(run.metrics.total(), ev.len());
    assert!((0.0..=1.0).contains(&run.metrics.accuracy));
}
