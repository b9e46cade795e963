use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xcache::cache::{build_cache, build_xc_cache, generate_with_cache, CacheBlob, CacheModel, CacheStrategy};
use xcache::checkpoint::{load_checkpoint, load_decoder, save_checkpoint, save_decoder};
use xcache::decoder::{greedy_generate, DecoderConfig, DecoderWeights};
use xcache::encoders::{BidirEncoderConfig, EncoderKind, EncoderOutput};
use xcache::store::Dtype;
use xcache::synth::{self, GenConfig};
use xcache::trainer::{StepStats, TrainConfig, Trainer};
use xcache::vocab::{ReservedTokens, Vocab};
use xcache::xc::{XCConfig, XCModel};
use xcache::Error;

fn small_decoder() -> (DecoderConfig, DecoderWeights) {
    let cfg = DecoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        vocab_size: Vocab::default().size(),
        max_seq: 160,
        rope_theta: 10000.0,
        mlp_hidden: 32,
        norm_eps: 1e-5,
    };
    let w = DecoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    (cfg, w)
}

fn small_model(kind: EncoderKind) -> XCModel {
    let (cfg, w) = small_decoder();
    let xcfg = XCConfig {
        n_cross_layers: 1,
        skip: 1,
        final_layer: true,
        cross_hidden: 16,
        cross_n_heads: 2,
        cross_n_kv_heads: 2,
        dropout_p: 0.1,
        use_bias: false,
        encoder: kind,
    };
    let bidir = BidirEncoderConfig {
        n_layers: 1,
        d_enc: 16,
        n_heads: 2,
        mlp_hidden: 32,
        ..BidirEncoderConfig::toy(cfg.vocab_size)
    };
    XCModel::new(cfg, w, xcfg, Some(bidir), &mut ChaCha8Rng::seed_from_u64(12)).unwrap()
}

fn records(n: usize) -> Vec<synth::QARecord> {
    synth::generate(&GenConfig {
        n_records: n,
        context_len: 24,
        n_distractor_facts: 2,
        seed: 4,
        ..GenConfig::default()
    })
    .unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 4,
        ..TrainConfig::toy()
    }
}

fn run(model: &mut XCModel, tr: &mut Trainer, recs: &[synth::QARecord], until: usize) -> Vec<StepStats> {
    let mut log = Vec::new();
    tr.run(model, recs, None, until, |s| {
        log.push(s.clone());
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let recs = records(10);
    let mut a = small_model(EncoderKind::SmallBidirectional);
    let mut b = a.clone();
    let mut ta = Trainer::new(&a, train_cfg()).unwrap();
    let straight = run(&mut a, &mut ta, &recs, 6);

    let mut tb = Trainer::new(&b, train_cfg()).unwrap();
    let first = run(&mut b, &mut tb, &recs, 3);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &b, Some(&tb)).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.model, b);
    let mut tc = ck.trainer.unwrap();
    assert_eq!(tc.opt, tb.opt);
    let mut c = ck.model;
    let rest = run(&mut c, &mut tc, &recs, 6);

    let resumed: Vec<f32> = first.iter().chain(&rest).map(|s| s.loss).collect();
    let direct: Vec<f32> = straight.iter().map(|s| s.loss).collect();
    assert_eq!(resumed, direct);
    assert_eq!(c, a);
}

#[test]
fn decoder_checkpoint_round_trip() {
    let (cfg, w) = small_decoder();
    let dir = tempfile::tempdir().unwrap();
    save_decoder(dir.path(), &cfg, &w).unwrap();
    let (c2, w2) = load_decoder(dir.path()).unwrap();
    assert_eq!(c2, cfg);
    for ((_, x), (_, y)) in w.named_tensors().iter().zip(w2.named_tensors()) {
        assert!(x.bit_eq(y));
    }
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let m = small_model(EncoderKind::DecoderAsEncoder);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m, None).unwrap();
    let p = dir.path().join("weights.xcc");
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn cache_files_round_trip_every_strategy() {
    let m = small_model(EncoderKind::SmallBidirectional);
    let ctx: Vec<usize> = records(1)[0].joined_context();
    let dir = tempfile::tempdir().unwrap();
    for s in CacheStrategy::ALL {
        let cm = match s {
            CacheStrategy::Xc => CacheModel::Xc(&m),
            _ => CacheModel::Decoder(&m.decoder, &m.decoder_cfg),
        };
        let blob = build_cache(cm, &ctx, s).unwrap();
        let path = dir.path().join(format!("{s}.xcc"));
        blob.save(&path, Dtype::F32).unwrap();
        let back = CacheBlob::load(&path).unwrap();
        assert_eq!(back.dims(), blob.dims());
        let q = [ctx[3], ReservedTokens::standard().answer];
        let a = generate_with_cache(cm, &blob, &q, 4, None).unwrap();
        let b = generate_with_cache(cm, &back, &q, 4, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn f16_cache_stays_close() {
    let m = small_model(EncoderKind::SmallBidirectional);
    let rec = &records(1)[0];
    let blob = build_xc_cache(&m, &rec.contexts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.xcc");
    blob.save(&p, Dtype::F16).unwrap();
    let (CacheBlob::Xc(a), CacheBlob::Xc(b)) = (blob, CacheBlob::load(&p).unwrap()) else {
        panic!("not an XC blob");
    };
    assert!(a.states.max_abs_diff(&b.states) < 1e-2);
}

#[test]
fn cache_from_another_model_is_refused() {
    let m = small_model(EncoderKind::SmallBidirectional);
    let ctx = records(1)[0].joined_context();
    let blob = build_cache(CacheModel::Decoder(&m.decoder, &m.decoder_cfg), &ctx, CacheStrategy::Kv).unwrap();
    let other = DecoderConfig {
        rope_theta: 500.0,
        ..m.decoder_cfg.clone()
    };
    let r = generate_with_cache(CacheModel::Decoder(&m.decoder, &other), &blob, &[1], 2, None);
    assert!(matches!(r, Err(Error::Cache(_))));
}

#[test]
fn empty_encoding_generation_matches_plain_decoder_at_zero_gate() {
    let m = small_model(EncoderKind::SmallBidirectional);
    let prompt = [9, 40, 1];
    let empty = EncoderOutput::empty(m.d_enc(), m.encoder_kind());
    let a = m.generate(&prompt, &empty, 6, usize::MAX).unwrap();
    let b = greedy_generate(&m.decoder, &m.decoder_cfg, &prompt, 6, usize::MAX).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incremental_generation_agrees_with_full_forward() {
    let mut m = small_model(EncoderKind::SmallBidirectional);
    for layer in &mut m.cross {
        layer.gate.data_mut()[0] = 0.7;
    }
    let rec = &records(1)[0];
    let enc = m.encode_contexts(&rec.contexts).unwrap();
    let prompt = vec![rec.query[0], ReservedTokens::standard().answer];
    let out = m.generate(&prompt, &enc, 5, usize::MAX).unwrap();
    let mut seq = prompt.clone();
    for &tok in &out {
        let logits = m.forward(&seq, &enc).unwrap();
        let last = logits.row(seq.len() - 1);
        assert_eq!(xcache::decoder::argmax(last), tok);
        seq.push(tok);
    }
}
