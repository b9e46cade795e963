use std::collections::HashMap;

use proptest::prelude::*;

use xcache::config::RunConfig;
use xcache::metrics::{best_over_references, exact_match, token_prf};
use xcache::store::{
    decode_container, encode_container, f16_decode, f16_encode, CacheFileHeader, ContainerKind, Dtype,
};
use xcache::synth::{self, GenConfig, NeedlePosition};
use xcache::trainer::{build_fim_sequence, epoch_schedule, lr_at, FimOrder, TaskKind, TrainConfig};
use xcache::vocab::{ReservedTokens, Vocab};
use xcache::Error;

#[test]
fn f16_decode_matches_half_for_every_pattern() {
    for bits in 0..=u16::MAX {
        let ours = f16_decode(bits);
        let theirs = half::f16::from_bits(bits).to_f32();
        assert!(ours.to_bits() == theirs.to_bits() || (ours.is_nan() && theirs.is_nan()), "{bits:#06x}");
    }
}

proptest! {
    #[test]
    fn f16_encode_matches_half(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        let ours = f16_encode(x);
        let theirs = half::f16::from_f32(x).to_bits();
        if x.is_nan() {
            prop_assert!(f16_decode(ours).is_nan());
        } else {
            prop_assert_eq!(ours, theirs);
        }
    }

    #[test]
    fn f16_round_trip_is_identity_on_halves(bits in any::<u16>()) {
        let x = f16_decode(bits);
        prop_assume!(!x.is_nan());
        prop_assert_eq!(f16_encode(x), bits);
    }

    #[test]
    fn container_round_trip(
        dims in prop::collection::vec(1usize..5, 1..4),
        f16 in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dtype = if f16 { Dtype::F16 } else { Dtype::F32 };
        let h = CacheFileHeader::new(ContainerKind::Xc, dtype, &dims, seed.to_le_bytes()).unwrap();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 - 3.0) * 0.25).collect();
        let bytes = encode_container(&h, &data).unwrap();
        let (c, used) = decode_container(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&c.header, &h);
        prop_assert_eq!(c.data, data);
    }

    #[test]
    fn any_flipped_byte_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let h = CacheFileHeader::new(ContainerKind::Kv, Dtype::F16, &[2, 2, 3, 4], [7; 8]).unwrap();
        let data: Vec<f32> = (0..48).map(|i| i as f32).collect();
        let mut bytes = encode_container(&h, &data).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_container(&bytes).is_err());
    }

    #[test]
    fn truncation_is_corrupt_or_format(cut in 0usize..200) {
        let h = CacheFileHeader::new(ContainerKind::Xc, Dtype::F32, &[5, 8], [1; 8]).unwrap();
        let bytes = encode_container(&h, &[0.5; 40]).unwrap();
        prop_assume!(cut < bytes.len());
        match decode_container(&bytes[..cut]) {
            Err(Error::Corrupt(_)) | Err(Error::Format(_)) => {}
            other => prop_assert!(false, "{:?}", other.map(|c| c.1)),
        }
    }

    #[test]
    fn token_prf_matches_multiset_oracle(
        p in prop::collection::vec(0u8..6, 0..12),
        g in prop::collection::vec(0u8..6, 0..12),
    ) {
        let got = token_prf(&p, &g);
        let mut left: HashMap<u8, i64> = HashMap::new();
        for t in &g {
            *left.entry(*t).or_default() += 1;
        }
        let mut common = 0i64;
        for t in &p {
            let c = left.entry(*t).or_default();
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
        let (prec, rec, f1) = if p.is_empty() && g.is_empty() {
            (1.0, 1.0, 1.0)
        } else if common == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let pr = common as f64 / p.len() as f64;
            let rc = common as f64 / g.len() as f64;
            (pr, rc, 2.0 * pr * rc / (pr + rc))
        };
        prop_assert!((got.precision - prec).abs() < 1e-12);
        prop_assert!((got.recall - rec).abs() < 1e-12);
        prop_assert!((got.f1 - f1).abs() < 1e-12);
        prop_assert_eq!(exact_match(&p, &g) == 1.0, p == g);
    }

    #[test]
    fn best_reference_is_the_max(
        p in prop::collection::vec(0u8..4, 0..6),
        refs in prop::collection::vec(prop::collection::vec(0u8..4, 0..6), 1..5),
    ) {
        let best = best_over_references(&p, &refs, |a, b| token_prf(a, b).f1).unwrap();
        let brute = refs.iter().map(|r| token_prf(&p, r).f1).fold(0.0f64, f64::max);
        prop_assert_eq!(best, brute);
    }

    #[test]
    fn vocab_render_parse_round_trip(ids in prop::collection::vec(0usize..135, 0..40)) {
        let v = Vocab::default();
        let text = v.render(&ids).unwrap();
        prop_assert_eq!(v.parse(&text).unwrap(), ids);
    }

    #[test]
    fn fim_layouts_are_permutations(len in 1usize..30, a in 0usize..30, b in 0usize..30) {
        let ctx: Vec<usize> = (100..100 + len).collect();
        let (i, j) = (a.min(b).min(len), a.max(b).min(len));
        let r = ReservedTokens::standard();
        for order in [FimOrder::Psm, FimOrder::Spm] {
            let seq = build_fim_sequence(&ctx, (i, j), order, &r).unwrap();
            prop_assert_eq!(seq.len(), len + 4);
            let mid_at = seq.iter().position(|t| *t == r.fim_mid).unwrap();
            prop_assert_eq!(&seq[mid_at + 1..seq.len() - 1], &ctx[i..j]);
            let mut body: Vec<usize> = seq.iter().copied().filter(|t| *t >= 100).collect();
            body.sort_unstable();
            prop_assert_eq!(body, ctx.clone());
        }
    }

    #[test]
    fn schedule_is_warmup_then_decay(step in 0usize..50_000) {
        let c = TrainConfig::reference();
        let lr = lr_at(step, &c);
        prop_assert!((0.0..=c.base_lr).contains(&lr));
        if step < c.warmup_steps {
            prop_assert!(lr_at(step + 1, &c) >= lr);
        } else {
            prop_assert!(lr_at(step + 1, &c) <= lr);
        }
    }

    #[test]
    fn every_record_seen_once_per_pass(n in 1usize..60, bs in 1usize..9, epoch in 0usize..4, seed in any::<u64>()) {
        let sched = epoch_schedule(n, bs, epoch, seed).unwrap();
        prop_assert_eq!(sched.len(), 2 * n.div_ceil(bs));
        for pass in [1, 2] {
            let mut seen: Vec<usize> = sched
                .iter()
                .filter(|b| b.pass == pass)
                .flat_map(|b| b.items.iter().map(|(i, _)| *i))
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
        for b in &sched {
            prop_assert!(b.items.len() <= bs);
            for (_, t) in &b.items {
                prop_assert_eq!(*t == TaskKind::Answer, b.pass == 1);
            }
        }
    }

    #[test]
    fn synthetic_records_hold_their_answer(seed in any::<u64>(), len in 32usize..80, pos in 0usize..5) {
        let position = [
            NeedlePosition::Begin,
            NeedlePosition::Middle,
            NeedlePosition::End,
            NeedlePosition::BothEnds,
            NeedlePosition::Random,
        ][pos];
        let cfg = GenConfig {
            n_records: 3,
            context_len: len,
            n_distractor_facts: 2,
            needle_position: position,
            seed,
            ..GenConfig::default()
        };
        for r in synth::generate(&cfg).unwrap() {
            let ctx = r.joined_context();
            prop_assert_eq!(ctx.len(), len);
            let key = r.query[0];
            let at = ctx.iter().position(|t| *t == key).unwrap();
            prop_assert_eq!(ctx[at + 1], r.answers[0][0]);
            let copies = if position == NeedlePosition::BothEnds { 2 } else { 1 };
            prop_assert_eq!(ctx.iter().filter(|t| **t == key).count(), copies);
        }
    }

    #[test]
    fn jsonl_round_trip(seed in any::<u64>(), unans in 0.0f64..1.0, syn in 0.0f64..1.0) {
        let cfg = GenConfig {
            n_records: 5,
            context_len: 24,
            n_distractor_facts: 2,
            unanswerable_rate: unans,
            synonym_rate: syn,
            seed,
            ..GenConfig::default()
        };
        let v = Vocab::default();
        let recs = synth::generate(&cfg).unwrap();
        let text = synth::to_jsonl(&recs, &v).unwrap();
        prop_assert_eq!(synth::from_jsonl(text.as_bytes(), &v).unwrap(), recs);
    }
}

#[test]
fn generation_is_reproducible() {
    let cfg = GenConfig {
        n_records: 20,
        seed: 5,
        ..GenConfig::default()
    };
    assert_eq!(synth::generate(&cfg).unwrap(), synth::generate(&cfg).unwrap());
}

#[test]
fn config_dump_reloads() {
    let mut c = RunConfig::toy();
    c.set("xc.dropout_p", "0.1").unwrap();
    let mut d = RunConfig::reference();
    d.apply_str(&c.to_kv().unwrap()).unwrap();
    assert_eq!(c, d);
}
