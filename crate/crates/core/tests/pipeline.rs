use cmlm::autodiff::{finite_diff_check, Tensor, DEFAULT_STEP};
use cmlm::config::RunConfig;
use cmlm::encoder::{EncoderConfig, EncoderParams};
use cmlm::experiment::{run_protocol, sweep, SweepAxis};
use cmlm::masking::make_crm_batch;
use cmlm::par::Execution;
use cmlm::rng::seeded;
use cmlm::text::{build_vocab, encode, load_jsonl, TokenId, TokenSequence};
use cmlm::training::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmlm::training::{fine_tune, post_train, FineTuneConfig, Objective, TrainConfig};

fn write_jsonl(dir: &std::path::Path) -> std::path::PathBuf {
    let mut lines = Vec::new();
    for i in 0..40 {
        let (cue, label) = if i % 2 == 0 { ("sunny warm", "good") } else { ("rainy cold", "bad") };
        let filler = ["today", "in town", "by the sea", "all week"][i % 4];
        lines.push(format!(r#"{{"text_a": "it is {cue} {filler}", "text_b": "said report {}", "label": "{label}"}}"#, i % 3));
    }
    let p = dir.join("data.jsonl");
    std::fs::write(&p, lines.join("\n")).unwrap();
    p
}

#[test]
fn jsonl_to_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_jsonl(&write_jsonl(dir.path()), &[]).unwrap();
    assert_eq!(data.label_names, ["good", "bad"]);
    let vocab = build_vocab(&data.texts(), 200).unwrap();
    let labeled: Vec<(TokenSequence, usize)> = data
        .examples
        .iter()
        .map(|e| (encode(e, &vocab, 16).unwrap(), e.label))
        .collect();
    let unlabeled: Vec<TokenSequence> = labeled.iter().map(|(s, _)| s.clone()).collect();

    let enc = EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        max_len: 16,
        ..EncoderConfig::desk(vocab.len())
    };
    let mut params = EncoderParams::<f32>::init(&enc, &mut seeded(1)).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        k: 2,
        ..Default::default()
    };
    let post = post_train(&mut params, &unlabeled, &cfg, &mut seeded(2)).unwrap();
    assert_eq!(post.steps as usize, 2 * unlabeled.len().div_ceil(cfg.batch_size));
    assert!(post.components.iter().all(|c| c.cl > 0.0 && c.mlm > 0.0));

    params.set_classifier(2, &mut seeded(3)).unwrap();
    let ft = FineTuneConfig {
        lr: 1e-3,
        epochs: 8,
        batch_size: 8,
        checkpoint_interval: 10,
        ..Default::default()
    };
    let out = fine_tune(&params, &labeled, &labeled, &ft, &mut seeded(4), Execution::default()).unwrap();
    assert!(out.best.metric >= 0.9, "{:?}", out.best);

    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint {
        config: serde_json::json!({"note": "pipeline"}),
        params: out.params.clone(),
        step: out.best.step,
        rng: None,
        vocab: vocab.tokens().to_vec(),
        label_names: data.label_names.clone(),
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let ids: Vec<Vec<TokenId>> = labeled.iter().map(|(s, _)| s.ids().to_vec()).collect();
    assert_eq!(
        back.params.predict(&ids, Execution::Sequential).unwrap(),
        out.params.predict(&ids, Execution::Parallel).unwrap()
    );
}

#[test]
fn pair_inputs_keep_separator_unmasked() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_jsonl(&write_jsonl(dir.path()), &[]).unwrap();
    let vocab = build_vocab(&data.texts(), 200).unwrap();
    let mut rng = seeded(5);
    for e in &data.examples {
        let s = encode(e, &vocab, 14).unwrap();
        let b = make_crm_batch(&s, 1, 0.5, 1.0, vocab.len(), &mut rng).unwrap();
        let sep = s.ids().iter().position(|&t| t == cmlm::text::SEP).unwrap();
        assert!(!b.anchor.pattern.selected[sep] && !b.views[0].pattern.selected[sep]);
        assert_eq!(b.anchor.corrupted[sep], cmlm::text::SEP);
    }
}

#[test]
fn execution_modes_agree() {
    let mut rng = seeded(6);
    let params = vec![Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng), Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng)];
    let f = |t: &mut cmlm::autodiff::Tape<f64>, v: &[cmlm::autodiff::Var]| {
        let h = t.matmul(v[0], v[1])?;
        let s = t.softmax(h)?;
        let l = t.log(s)?;
        Ok(t.sum(l))
    };
    let a = finite_diff_check(f, &params, DEFAULT_STEP, Execution::Sequential).unwrap();
    let b = finite_diff_check(f, &params, DEFAULT_STEP, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

fn tiny() -> RunConfig {
    RunConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn: 16,
        max_len: 16,
        lr: 1e-3,
        epochs: Some(1),
        ft_lr: 1e-2,
        ft_epochs: Some(2),
        subset_size: 10,
        num_subsets: 2,
        seeds: vec![3, 4],
        dev_size: 20,
        pool_size: 50,
        eval_pool_size: 40,
        unlabeled_pool_size: 30,
        synth_vocab: 24,
        ..Default::default()
    }
}

#[test]
fn protocol_reports_are_reproducible() {
    let a = run_protocol(&tiny(), "fixed").unwrap();
    let b = run_protocol(&a.config, "fixed").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len(), 4);
}

#[test]
fn sweep_over_k_and_methods() {
    let rows = sweep(&tiny(), SweepAxis::K, &[1.0, 2.0], "fixed").unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].config_fingerprint, rows[1].config_fingerprint);
    for method in ["tapt", "cssl:eda-pair", "ft"] {
        let c = RunConfig {
            method: method.parse::<Objective>().unwrap(),
            ..tiny()
        };
        let r = run_protocol(&c, "fixed").unwrap();
        assert_eq!(r.method, method);
        assert!(r.records.iter().all(|x| (0.0..=1.0).contains(&x.value)));
    }
}
