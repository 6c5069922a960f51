use msgen_core::reward::*;
use proptest::prelude::*;

const EXACT: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < EXACT
}

fn inputs(ids: Vec<f64>, subject: f64, aes: f64, nat: f64) -> RewardInputs {
    RewardInputs {
        per_subject_id: ids,
        r_subject: subject,
        r_aes: aes,
        r_nat: nat,
    }
}

#[test]
fn face_reward_hand_cases() {
    for g in [0.0, 0.3, 1.0] {
        assert!(close(face_reward(&[0.8], g).unwrap(), 0.8));
    }
    assert!(close(face_reward(&[0.9, 0.5], 0.5).unwrap(), 0.6));
    assert!(close(face_reward(&[0.9, 0.5], 0.0).unwrap(), 0.7));
    assert!(face_reward(&[], 0.5).is_err());
}

#[test]
fn fidelity_and_quality_hand_cases() {
    assert!(close(fidelity_reward(0.35, 0.35, 0.5).unwrap(), 0.35));
    assert!(close(fidelity_reward(0.6, 0.8, 0.5).unwrap(), 0.7));
    assert_eq!(fidelity_reward(0.6, 0.8, 0.0).unwrap(), 0.6);
    assert!(fidelity_reward(1.2, 0.8, 0.5).is_err());
    assert!(close(quality_reward(0.45, 0.45, 0.4).unwrap(), 0.45));
    assert!(close(quality_reward(1.0, 0.0, 0.4).unwrap(), 0.6));
    assert_eq!(quality_reward(0.3, 0.9, 1.0).unwrap(), 0.9);
    assert!(quality_reward(0.3, -0.1, 0.4).is_err());
}

#[test]
fn total_reward_hand_cases() {
    let w = RewardWeights::default();
    assert_eq!((w.w_fid, w.w_qual, w.alpha, w.beta_q, w.gamma), (0.6, 0.4, 0.5, 0.4, 0.5));
    let b = total_reward(&inputs(vec![1.0, 1.0], 1.0, 1.0, 1.0), &w).unwrap();
    assert!(close(b.r_total, 1.0));
    // r_fid = 0.5 (face 0.5, subject 0.5), r_qual = 0.25 (aes 0.25, nat 0.25).
    let b = total_reward(&inputs(vec![0.5], 0.5, 0.25, 0.25), &w).unwrap();
    assert!(close(b.r_fid, 0.5) && close(b.r_qual, 0.25));
    assert!(close(b.r_total, 0.4));
}

#[test]
fn frame_average_cases() {
    assert!(close(frame_average(&[0.3; 5]).unwrap(), 0.3));
    assert_eq!(frame_average(&[1.0, 0.0]).unwrap(), 0.5);
    assert!(frame_average(&[]).is_err());
}

#[test]
fn weights_are_validated() {
    let bad = RewardWeights {
        w_fid: 0.7,
        ..RewardWeights::default()
    };
    assert!(bad.validate().is_err());
    assert!(RewardWeights::default().validate().is_ok());
}

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn raising_any_component_never_lowers_the_total(
        ids in proptest::collection::vec(unit(), 1..4),
        subject in unit(), aes in unit(), nat in unit(),
        which in 0usize..6, bump in 0.0f64..1.0,
    ) {
        let w = RewardWeights::default();
        let base = inputs(ids.clone(), subject, aes, nat);
        let mut up = base.clone();
        let raise = |v: &mut f64| *v = (*v + bump).min(1.0);
        match which {
            0 => raise(&mut up.per_subject_id[0]),
            1 => { let k = ids.len() - 1; raise(&mut up.per_subject_id[k]) }
            2 => raise(&mut up.r_subject),
            3 => raise(&mut up.r_aes),
            4 => raise(&mut up.r_nat),
            _ => up.per_subject_id.iter_mut().for_each(raise),
        }
        let (a, b) = (total_reward(&base, &w).unwrap(), total_reward(&up, &w).unwrap());
        prop_assert!(b.r_total >= a.r_total - EXACT);
        prop_assert!(close(a.r_total, w.w_fid * a.r_fid + w.w_qual * a.r_qual));
        prop_assert!((0.0..=1.0).contains(&a.r_total));
    }

    #[test]
    fn frame_average_is_rotation_invariant(v in proptest::collection::vec(unit(), 1..10), k in 0usize..10) {
        let mut r = v.clone();
        r.rotate_left(k % v.len());
        prop_assert!((frame_average(&v).unwrap() - frame_average(&r).unwrap()).abs() < EXACT);
    }
}
