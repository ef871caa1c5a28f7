use xmixup::analysis::{discrepancy_report, write_report};
use xmixup::corpus::{gen_bundle, load_jsonl, save_jsonl, BundleSizes, DatasetBundle, ToyLanguageSpec};
use xmixup::encoder::EncoderConfig;
use xmixup::objectives::TaskKind;
use xmixup::pipeline::{evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use xmixup::runconfig::RunConfig;

fn tiny(task: TaskKind) -> TrainConfig {
    let mut c = TrainConfig::for_task(task);
    c.encoder = EncoderConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 30,
        max_len: 16,
    };
    c.batch_size = 4;
    c.epochs = 1;
    c
}

fn bundle(task: TaskKind) -> DatasetBundle {
    let spec = ToyLanguageSpec::new(30, 0.1, 0.1, 0.3, 3).unwrap();
    gen_bundle(task, BundleSizes { train: 16, test: 8 }, &spec, 3).unwrap()
}

#[test]
fn corpus_survives_disk_for_every_task() {
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Classification, TaskKind::Structured, TaskKind::Span] {
        let b = bundle(task);
        for name in ["data.jsonl", "data.jsonl.gz"] {
            let path = dir.path().join(name);
            save_jsonl(&b, &path).unwrap();
            assert_eq!(load_jsonl(&path).unwrap(), b);
        }
    }
}

#[test]
fn generate_train_checkpoint_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Classification, TaskKind::Structured, TaskKind::Span] {
        let data = dir.path().join("data.jsonl");
        save_jsonl(&bundle(task), &data).unwrap();
        let b = load_jsonl(&data).unwrap();
        let out = train(&tiny(task), &b, "e2e").unwrap();
        let ckpt = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &Checkpoint::from_output(&out)).unwrap();
        let model = load_checkpoint(&ckpt).unwrap().model();
        assert_eq!(evaluate(&model, &b.test).unwrap(), evaluate(&out.model, &b.test).unwrap());

        let report = discrepancy_report(&model, &b.test).unwrap();
        let c = report.cka_between("raw", "source", "target").unwrap();
        assert!((0.0..=1.0).contains(&c));
        assert!(report.cka_between("mixup", "source", "target").is_some());
        write_report(&report, dir.path()).unwrap();
        for file in ["cka.csv", "centroids.csv", "pca.csv"] {
            let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
            assert!(text.lines().count() > 1, "{file}");
        }
    }
}

#[test]
fn baseline_model_reports_only_raw_representations() {
    let b = bundle(TaskKind::Classification);
    let out = train(&tiny(TaskKind::Classification).baseline(), &b, "base").unwrap();
    let report = discrepancy_report(&out.model, &b.test).unwrap();
    assert!(report.cka_between("raw", "source", "target").is_some());
    assert!(report.cka_between("mixup", "source", "target").is_none());
}

#[test]
fn run_config_text_drives_generation_and_training() {
    let text = "task = span\nepochs = 1\nseed = 5\n[data]\ntrain_size = 12\ntest_size = 4\n";
    let cfg = RunConfig::from_text(text).unwrap();
    assert_eq!(cfg.train.task, TaskKind::Span);
    assert_eq!(cfg.train.mixup.schedule_k, 2000.0);
    let again = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    let b = gen_bundle(cfg.train.task, cfg.sizes(), &cfg.language().unwrap(), cfg.train.seed).unwrap();
    assert_eq!((b.train.len(), b.test.len()), (12, 4));
    let out = train(&cfg.train, &b, "from_text").unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert!(out.metrics[0].loss_total.is_finite());
}
