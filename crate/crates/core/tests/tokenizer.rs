//! Token layout bijections and position tables.

use dtca::tensor::{Graph, Tensor};
use dtca::tokenizer::{embed_tokens, patchify, PatchGrid, PositionTables, TokenBatch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -10.0, 10.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn patchify_round_trips(b in 1usize..3, f in 1usize..4, p in 1usize..5, gh in 1usize..5, gw in 1usize..5, seed: u64) {
        let x = random(&[b, f, gh * p, gw * p], seed);
        let grid = PatchGrid::new(gh * p, gw * p, p).unwrap();
        let t = grid.patchify(&x).unwrap();
        prop_assert_eq!(t.shape(), &[b, gh * gw, f, p * p]);
        prop_assert_eq!(grid.unpatchify(&t).unwrap(), x);
    }

    #[test]
    fn assemble_extract_round_trips(b in 1usize..3, c in 1usize..5, fc in 1usize..4, fn_ in 1usize..5, n in 1usize..6, seed: u64) {
        let grid = PatchGrid::new(c, 1, 1).unwrap();
        let cond = TokenBatch { tokens: random(&[b, c, fc, n], seed), cond_frames: fc, pred_frames: 0, grid };
        let pred = TokenBatch { tokens: random(&[b, c, fn_, n], seed ^ 1), cond_frames: 0, pred_frames: fn_, grid };
        let z = TokenBatch::assemble(&cond, &pred).unwrap();
        prop_assert_eq!(z.frames(), fc + fn_);
        prop_assert_eq!(&z.tokens.narrow(2, 0, fc).unwrap(), &cond.tokens);
        prop_assert_eq!(&z.extract_prediction().unwrap().tokens, &pred.tokens);
    }
}

#[test]
fn first_token_is_top_left_patch_row_major() {
    let x = Tensor::<f32>::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
    let t = patchify(&x, 2).unwrap();
    assert_eq!(t.shape(), &[1, 4, 1, 4]);
    assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    let whole = patchify(&x, 4).unwrap();
    assert_eq!(whole.data(), x.data());
    assert!(patchify(&x, 3).is_err());
}

#[test]
fn paper_scale_latent_has_256_tokens() {
    assert_eq!(PatchGrid::new(32, 32, 2).unwrap().tokens(), 256);
}

#[test]
fn desk_layout_slices_frames() {
    let grid = PatchGrid::new(16, 16, 2).unwrap();
    let cond = TokenBatch { tokens: Tensor::<f32>::full(&[1, 64, 2, 8], 1.0), cond_frames: 2, pred_frames: 0, grid };
    let pred = TokenBatch { tokens: Tensor::<f32>::full(&[1, 64, 4, 8], 2.0), cond_frames: 0, pred_frames: 4, grid };
    let z = TokenBatch::assemble(&cond, &pred).unwrap();
    assert_eq!(z.frames(), 6);
    for c in 0..64 {
        for f in 0..6 {
            let want = if f < 2 { 1.0 } else { 2.0 };
            assert_eq!(z.tokens.get(&[0, c, f, 3]), want);
        }
    }
    let bad = TokenBatch { tokens: Tensor::<f32>::zeros(&[1, 64, 4, 4]), ..pred };
    assert!(TokenBatch::assemble(&cond, &bad).is_err());
}

#[test]
fn identity_embedding_leaves_tokens_unchanged() {
    let x = random(&[2, 3, 2, 4], 5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::eye(4));
    let out = embed_tokens(&mut g, xv, w, None).unwrap();
    assert_eq!(g.value(out), &x);

    let zero = g.constant(Tensor::zeros(&[2, 3, 2, 4]));
    let bias = g.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = embed_tokens(&mut g, zero, w, Some(bias)).unwrap();
    for row in g.value(out).data().chunks(4) {
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn full_rank_embedding_separates_distinct_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::<f64>::uniform(&[4, 16], -1.0, 1.0, &mut rng);
    for case in 0..50 {
        let a = Tensor::<f64>::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let mut b = a.clone();
        b.data_mut()[case % 4] += 1e-3;
        let (ea, eb) = (a.matmul(&w).unwrap(), b.matmul(&w).unwrap());
        assert!(ea.sub(&eb).unwrap().max_abs() > 0.0);
    }
}

#[test]
fn positions_are_added_and_never_collide() {
    let grid = PatchGrid::new(16, 16, 2).unwrap();
    let pos = PositionTables::<f64>::new(grid, 6, 64).unwrap();
    let zero = TokenBatch { tokens: Tensor::<f64>::zeros(&[1, 64, 6, 64]), cond_frames: 2, pred_frames: 4, grid };
    let tagged = zero.add_positions(&pos, 0).unwrap();
    assert_eq!(tagged.tokens.reshape(&[64, 6, 64]).unwrap(), pos.combined(0, 6).unwrap());

    // a fixed difference between two tokens survives position tagging
    let mut x = Tensor::<f64>::zeros(&[2, 64, 6, 64]);
    let stride = 64 * 6 * 64;
    for k in 0..64 {
        x.data_mut()[stride + k] = 0.5;
    }
    let tb = TokenBatch { tokens: x.clone(), ..zero.clone() };
    let out = tb.add_positions(&pos, 0).unwrap();
    for k in 0..64 {
        let d = out.tokens.data()[stride + k] - out.tokens.data()[k];
        assert!((d - 0.5).abs() < 1e-12);
    }

    let table = pos.combined(0, 6).unwrap();
    let rows: Vec<&[f64]> = table.data().chunks(64).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(dist > 1e-6, "rows {i} and {j} collide");
        }
    }
    assert!(pos.combined(3, 4).is_err());
}
