mod common;

use std::sync::Arc;

use common::{gaussian_matrix, random_stack, rng};
use proptest::prelude::*;
use vqkv_core::cache::SegmentLengths;
use vqkv_core::{CacheKind, CacheState, CodebookStack, CompressionSchedule, Matrix, WindowPolicy};

fn stacks(seed: u64, key_dim: usize, value_dim: usize) -> (Arc<CodebookStack>, Arc<CodebookStack>) {
    let mut r = rng(seed);
    (
        Arc::new(random_stack(&mut r, key_dim, &[6, 5], CacheKind::Key)),
        Arc::new(random_stack(&mut r, value_dim, &[7], CacheKind::Value)),
    )
}

/// Expected segment lengths after a prefill of `prompt` rows followed by
/// `appends` decode steps.
fn expected_segments(policy: &WindowPolicy, prompt: usize, appends: usize) -> SegmentLengths {
    let total = prompt + appends;
    let init = total.min(policy.init_len);
    let beyond = total - init;
    let local = beyond.min(policy.local_len);
    let outside = beyond - local;
    let prefill_quantized = prompt.saturating_sub(policy.init_len + policy.local_len);
    let evicted = outside - prefill_quantized;
    let flushed = match policy.schedule {
        CompressionSchedule::Batched => evicted / policy.local_len * policy.local_len,
        CompressionSchedule::PerStep => evicted,
    };
    SegmentLengths {
        init,
        intermediate: prefill_quantized + flushed,
        pending: evicted - flushed,
        local,
    }
}

struct Script {
    keys: Matrix,
    values: Matrix,
    prompt: usize,
}

fn script(seed: u64, prompt: usize, appends: usize, key_dim: usize, value_dim: usize) -> Script {
    let mut r = rng(seed ^ 0x5eed);
    let total = prompt + appends;
    Script {
        keys: gaussian_matrix(&mut r, total, key_dim, 1.0),
        values: gaussian_matrix(&mut r, total, value_dim, 1.0),
        prompt,
    }
}

/// Drives `state` through the script, checking `check` after every step.
fn replay(state: &mut CacheState, s: &Script, mut check: impl FnMut(&CacheState, usize)) {
    let mut done = 0;
    if s.prompt > 0 {
        state
            .prefill(
                &s.keys.slice_rows(0..s.prompt),
                &s.values.slice_rows(0..s.prompt),
            )
            .unwrap();
        done = s.prompt;
        check(state, done);
    }
    for t in done..s.keys.rows() {
        state.append_token(s.keys.row(t), s.values.row(t)).unwrap();
        check(state, t + 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accounting_matches_replay_oracle(
        seed in any::<u64>(),
        init_len in 0usize..5,
        local_len in 1usize..6,
        prompt in 0usize..20,
        appends in 0usize..30,
        per_step in any::<bool>(),
    ) {
        let policy = WindowPolicy {
            init_len,
            local_len,
            schedule: if per_step { CompressionSchedule::PerStep } else { CompressionSchedule::Batched },
        };
        let (ks, vs) = stacks(seed, 3, 2);
        let s = script(seed, prompt, appends, 3, 2);
        let mut state = CacheState::new(policy, ks.clone(), vs.clone()).unwrap();
        let mut previous_codes = state.key_codes().clone();
        let mut failure = None;
        replay(&mut state, &s, |st, len| {
            if failure.is_some() {
                return;
            }
            let seg = st.segments();
            if seg.total() != st.total_len() || st.total_len() != len {
                failure = Some(format!("total {} vs {:?} at {len}", st.total_len(), seg));
                return;
            }
            let expected = expected_segments(&policy, s.prompt, len - s.prompt.min(len));
            if seg != expected {
                failure = Some(format!("{seg:?} vs {expected:?} at {len}"));
                return;
            }
            // intermediate codes are append-only
            let codes = st.key_codes();
            for r in 0..previous_codes.rows() {
                if codes.row(r) != previous_codes.row(r) {
                    failure = Some(format!("code row {r} rewritten at {len}"));
                }
            }
            previous_codes = codes.clone();

            // token order: raw rows verbatim, intermediate rows as their reconstruction
            let view = st.view_block(0..len).unwrap();
            for r in 0..len {
                let (k, v) = (s.keys.row(r), s.values.row(r));
                let in_mid = r >= seg.init && r < seg.init + seg.intermediate;
                if view.exact[r] == in_mid {
                    failure = Some(format!("exactness of row {r} at {len}"));
                }
                let (ek, ev) = if in_mid {
                    (ks.reconstruct(&ks.quantize(k).unwrap().0).unwrap(),
                     vs.reconstruct(&vs.quantize(v).unwrap().0).unwrap())
                } else {
                    (k.to_vec(), v.to_vec())
                };
                if view.keys.row(r) != ek.as_slice() || view.values.row(r) != ev.as_slice() {
                    failure = Some(format!("row {r} differs at {len}"));
                }
            }
        });
        prop_assert!(failure.is_none(), "{}", failure.unwrap());
    }

    #[test]
    fn deferred_and_eager_codes_agree(
        seed in any::<u64>(),
        local_len in 1usize..7,
        prompt in 0usize..15,
        appends in 0usize..40,
    ) {
        let (ks, vs) = stacks(seed, 4, 3);
        let s = script(seed, prompt, appends, 4, 3);
        let batched = WindowPolicy { init_len: 2, local_len, schedule: CompressionSchedule::Batched };
        let eager = WindowPolicy { schedule: CompressionSchedule::PerStep, ..batched };
        let mut a = CacheState::new(batched, ks.clone(), vs.clone()).unwrap();
        let mut b = CacheState::new(eager, ks, vs).unwrap();
        replay(&mut a, &s, |_, _| {});
        replay(&mut b, &s, |_, _| {});
        let (ca, cb) = (a.key_codes(), b.key_codes());
        prop_assert!(ca.rows() <= cb.rows());
        for r in 0..ca.rows() {
            prop_assert_eq!(ca.row(r), cb.row(r));
            prop_assert_eq!(a.value_codes().row(r), b.value_codes().row(r));
        }
        // whatever the schedule, readers see the same rows
        let len = a.total_len();
        if len > 0 {
            let (va, vb) = (a.view_block(0..len).unwrap(), b.view_block(0..len).unwrap());
            for r in 0..len {
                if va.exact[r] == vb.exact[r] {
                    prop_assert_eq!(va.keys.row(r), vb.keys.row(r));
                }
            }
        }
    }
}

#[test]
fn long_prompt_window_split() {
    let (ks, vs) = stacks(1, 2, 2);
    let s = script(1, 2048, 0, 2, 2);
    let mut state = CacheState::new(WindowPolicy::default(), ks, vs).unwrap();
    state.prefill(&s.keys, &s.values).unwrap();
    let seg = state.segments();
    assert_eq!(
        (seg.init, seg.intermediate, seg.pending, seg.local),
        (4, 1020, 0, 1024)
    );
    assert_eq!(state.stats().prefill_batches, 1);
}

#[test]
fn one_batch_per_window_of_appends() {
    let policy = WindowPolicy::new(4, 16);
    let (ks, vs) = stacks(2, 3, 3);
    let s = script(2, 64, 16 * 5, 3, 3);
    let mut state = CacheState::new(policy, ks, vs).unwrap();
    let mut batch_steps = Vec::new();
    let mut last = 0;
    replay(&mut state, &s, |st, len| {
        if st.stats().decode_batches != last {
            last = st.stats().decode_batches;
            batch_steps.push(len);
        }
    });
    assert_eq!(
        batch_steps,
        vec![64 + 16, 64 + 32, 64 + 48, 64 + 64, 64 + 80]
    );
    assert_eq!(state.segments().pending, 0);
}

#[test]
fn memory_report_of_full_scale_stacks() {
    let zero = |n: usize, s: usize| {
        let stages = (0..n)
            .map(|_| vqkv_core::Codebook::with_identity(Matrix::zeros(s, 128)).unwrap())
            .collect();
        Arc::new(CodebookStack::new(stages, CacheKind::Key).unwrap())
    };
    let keys = zero(56, 1024);
    let values = zero(16, 512);
    let mut state = CacheState::new(WindowPolicy::default(), keys, values).unwrap();
    let rows = Matrix::zeros(2048, 128);
    state.prefill(&rows, &rows).unwrap();
    let report = state.memory_report();
    assert_eq!(report.intermediate_rows, 1020);
    assert_eq!(report.compressed_payload_bits, 1020 * (56 * 10 + 16 * 9));
    let percent = report.effective_ratio * 100.0;
    assert!((percent - 82.8).abs() <= 0.05, "{percent}");
}
