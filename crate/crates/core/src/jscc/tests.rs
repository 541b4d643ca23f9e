use super::*;
use crate::channel::ChannelKind;
use crate::corpus::{tokenize, DataPair};
use crate::neural::gradcheck::check_gradients;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        channel_dim: 2,
        max_len: 8,
        dropout: 0.0,
    }
}

fn vocab() -> Vocabulary {
    let s = tokenize("the cat sat on a mat . dogs run fast");
    Vocabulary::build([s.as_slice()], 1)
}

fn seq(text: &str, v: &Vocabulary) -> TokenSequence {
    crate::corpus::encode_text(text, v, 8).unwrap()
}

fn model() -> (JsccModel<f32>, Vocabulary) {
    let v = vocab();
    (JsccModel::new(tiny_cfg(), v.size(), 3).unwrap(), v)
}

#[test]
fn semantic_encode_shape_and_purity() {
    let (m, v) = model();
    let s = seq("the cat sat", &v);
    let a = m.semantic_encode(&s).unwrap();
    assert_eq!(a.shape(), (8, 8));
    assert_eq!(a, m.semantic_encode(&s).unwrap());
    let short = TokenSequence {
        ids: vec![1, 2],
        true_length: 2,
    };
    assert!(matches!(m.semantic_encode(&short), Err(Error::Shape(_))));
}

#[test]
fn pad_region_does_not_leak_into_valid_positions() {
    let (m, v) = model();
    let s = seq("the cat sat", &v);
    let mut other = s.clone();
    for id in other.ids.iter_mut().skip(s.true_length) {
        *id = v.id("dogs");
    }
    let a = m.semantic_encode(&s).unwrap();
    let b = m.semantic_encode(&other).unwrap();
    assert_eq!(a.slice_rows(0, s.true_length), b.slice_rows(0, s.true_length));

    // Against a forward pass over the unpadded rows alone.
    let mut tape = Tape::new();
    let p = m.params.bind_frozen(&mut tape);
    let layout = Layout::new([s.true_length]);
    let z = m.encode_rows(&mut tape, &p, s.active(), &layout, &mut Dropout::off());
    let unpadded = tape.value(z);
    for (x, y) in unpadded.data().iter().zip(a.slice_rows(0, s.true_length).data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn channel_encode_is_unit_power_with_expected_shape() {
    let (m, v) = model();
    let h = m.semantic_encode(&seq("a mat", &v)).unwrap();
    let x = m.channel_encode(&h).unwrap();
    assert_eq!(x.shape(), (8, 2));
    assert!((x.mean_power() - 1.0).abs() < 1e-6);
}

#[test]
fn default_dimensions() {
    let v = vocab();
    let m = JsccModel::<f32>::new(ModelConfig::default(), v.size(), 0).unwrap();
    let s = crate::corpus::encode_text("the cat", &v, 32).unwrap();
    let h = m.semantic_encode(&s).unwrap();
    assert_eq!(h.shape(), (32, 128));
    let x = m.channel_encode(&h).unwrap();
    assert_eq!(x.shape(), (32, 16));
    assert_eq!(m.channel_decode(&x).unwrap().shape(), (32, 128));
}

#[test]
fn zero_channel_encoder_is_rejected() {
    let (mut m, v) = model();
    let (w, b) = (m.net.channel_enc.w, m.net.channel_enc.b);
    *m.params.get_mut(w) = Tensor::zeros(8, 4);
    *m.params.get_mut(b) = Tensor::zeros(1, 4);
    let h = m.semantic_encode(&seq("a mat", &v)).unwrap();
    assert!(matches!(m.channel_encode(&h), Err(Error::ZeroBlock)));
}

#[test]
fn channel_decode_is_affine() {
    let (m, _) = model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng| {
        let s = (0..6).map(|_| channel::complex_gaussian(rng, 1.0)).collect();
        SymbolBlock::new(3, 2, s).unwrap()
    };
    let (y1, y2) = (mk(&mut rng), mk(&mut rng));
    let (a, b) = (0.7, -1.3);
    let mix = SymbolBlock::new(
        3,
        2,
        y1.symbols()
            .iter()
            .zip(y2.symbols())
            .map(|(p, q)| p * a + q * b)
            .collect(),
    )
    .unwrap();
    let d1 = m.channel_decode(&y1).unwrap();
    let d2 = m.channel_decode(&y2).unwrap();
    let dm = m.channel_decode(&mix).unwrap();
    let bias = m.params.get(m.net.channel_dec.b);
    for r in 0..3 {
        for c in 0..8 {
            let expect = a as f32 * d1.get(r, c) + b as f32 * d2.get(r, c)
                - (a + b - 1.0) as f32 * bias.get(0, c);
            assert!((dm.get(r, c) - expect).abs() < 1e-5);
        }
    }
    assert_eq!(d1, m.channel_decode(&y1).unwrap());
}

#[test]
fn zero_knowledge_equals_baseline_and_decoding_halts() {
    let (m, v) = model();
    let s = seq("the cat sat on a mat", &v);
    let cfg = ChannelConfig::new(ChannelKind::Awgn, 5.0, 0).unwrap();
    let (r, _) = transmit_sentence(&m, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let base = m.semantic_decode(&r, None).unwrap();
    let zero = Tensor::zeros(1, 8);
    assert_eq!(m.semantic_decode(&r, Some(&zero)).unwrap(), base);
    assert_eq!(base.len(), 8);
    assert!(base.true_length <= 8);
    let empty = m.knowledge_embed(&[], &v);
    assert_eq!(empty, zero);
}

#[test]
fn knowledge_embed_is_mean_of_triples_and_order_free() {
    let (m, v) = model();
    let t1 = FactTriple::new("the cat", "sat on", "a mat").unwrap();
    let t2 = FactTriple::new("dogs", "run", "fast").unwrap();
    let t3 = FactTriple::new("a cat", "on", "the mat").unwrap();
    let a = m.knowledge_embed(&[t1.clone(), t2.clone(), t3.clone()], &v);
    let b = m.knowledge_embed(&[t3.clone(), t1.clone(), t2.clone()], &v);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
    // singleton: projection of that triple's mean token embedding
    let single = m.knowledge_embed(std::slice::from_ref(&t2), &v);
    let emb = m.params.get(m.net.embed);
    let ids = v.ids_of(&t2.render());
    let mut mean = vec![0.0f32; 8];
    for &i in &ids {
        for (o, &e) in mean.iter_mut().zip(emb.row(i)) {
            *o += e / ids.len() as f32;
        }
    }
    let w = m.params.get(m.net.knowledge_proj.w);
    let bias = m.params.get(m.net.knowledge_proj.b);
    for c in 0..8 {
        let expect: f32 = (0..8).map(|k| mean[k] * w.get(k, c)).sum::<f32>() + bias.get(0, c);
        assert!((single.get(0, c) - expect).abs() < 1e-4);
    }
}

#[test]
fn sequence_loss_oracles() {
    let v = vocab();
    let s = seq("the cat sat", &v);
    let n = s.true_length - 1;
    let vs = v.size();
    let uniform = Tensor::<f64>::zeros(7, vs);
    let l = sequence_loss(&s, &uniform).unwrap();
    assert!((l - n as f64 * (vs as f64).ln()).abs() < 1e-9);

    let mut perfect = Tensor::<f64>::filled(7, vs, -1e3);
    for (i, &t) in s.active()[1..].iter().enumerate() {
        perfect.set(i, t, 1e3);
    }
    assert!(sequence_loss(&s, &perfect).unwrap() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Tensor<f64> = normal(&mut rng, 7, vs, 2.0);
    let mut shifted = logits.clone();
    for c in 0..vs {
        shifted.set(2, c, shifted.get(2, c) + 17.5);
    }
    let a = sequence_loss(&s, &logits).unwrap();
    assert!((a - sequence_loss(&s, &shifted).unwrap()).abs() < 1e-9);
    assert!(a >= 0.0);
    let mut bad = logits.clone();
    bad.set(0, 0, f64::NAN);
    assert!(matches!(sequence_loss(&s, &bad), Err(Error::NonFinite(_))));
}

#[test]
fn codec_cross_entropy_gradients_match_finite_differences() {
    let v = vocab();
    let m = JsccModel::<f64>::new(tiny_cfg(), v.size(), 9).unwrap();
    let seqs = [seq("the cat sat", &v), seq("dogs run fast .", &v)];
    let knowledge = vec![vec![v.ids_of("cat sat mat")], vec![]];
    let params = m.params.tensors().to_vec();
    let report = check_gradients(&params, 1e-5, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        m.noiseless_loss(tape, &p, &seqs, &knowledge).unwrap()
    });
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

fn pairs(v: &Vocabulary) -> Vec<DataPair> {
    ["the cat sat", "dogs run fast", "a cat on a mat", "the mat ."]
        .iter()
        .map(|t| DataPair::new(t, vec![FactTriple::new("cat", "on", "mat").unwrap()], v, 8).unwrap())
        .collect()
}

#[test]
fn training_is_deterministic_and_descends() {
    let v = vocab();
    let cfg = TrainConfig {
        batch_size: 2,
        lr: 3e-3,
        epochs: 3,
        train_snr_db: 10.0,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let a = train_jscc(&pairs(&v), &v, &tiny_cfg(), &cfg, Some(dir.path())).unwrap();
    let b = train_jscc(&pairs(&v), &v, &tiny_cfg(), &cfg, None).unwrap();
    assert_eq!(a.model.params.tensors(), b.model.params.tensors());
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert!(a.epoch_losses[2] < a.epoch_losses[0], "{:?}", a.epoch_losses);
    let log = std::fs::read_to_string(dir.path().join(train::TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,loss"));
    let loaded = JsccModel::load(&dir.path().join("checkpoint"), &v).unwrap();
    assert_eq!(loaded.params.tensors(), a.model.params.tensors());
}

#[test]
fn divergence_aborts_with_a_checkpoint() {
    let v = vocab();
    let cfg = TrainConfig {
        batch_size: 2,
        lr: f64::MAX,
        epochs: 5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train_jscc(&pairs(&v), &v, &tiny_cfg(), &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let m = JsccModel::load(&dir.path().join("checkpoint"), &v).unwrap();
    assert!(m.params.tensors().iter().all(|t| t.is_finite()));
}
