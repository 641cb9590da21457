mod common;

use common::checks::roundtrip_case;
use common::*;
use crswin_core::tensor::Tensor;
use crswin_core::windowing::{cyclic_shift, window_partition, window_reverse, WindowLayout};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_tensor(rng: &mut ChaCha8Rng, g: [usize; 3], c: usize) -> Tensor {
    rand_tensor(rng, &[g[0], g[1], g[2], c], 10.0)
}

#[test]
fn window_partition_places_tokens_by_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = [4, 2, 6];
    let w = [2, 2, 3];
    let layout = WindowLayout::block(g, w, [0; 3]).unwrap();
    let x = grid_tensor(&mut rng, g, 2);
    let parts = window_partition(&x, &layout).unwrap();
    let nw = [2, 1, 2];
    for d in 0..g[0] {
        for h in 0..g[1] {
            for ww in 0..g[2] {
                let win = ((d / w[0]) * nw[1] + h / w[1]) * nw[2] + ww / w[2];
                let tok = ((d % w[0]) * w[1] + h % w[1]) * w[2] + ww % w[2];
                for c in 0..2 {
                    let src = ((d * g[1] + h) * g[2] + ww) * 2 + c;
                    let dst = (win * 12 + tok) * 2 + c;
                    assert_eq!(parts.data()[dst], x.data()[src]);
                }
            }
        }
    }
}

#[test]
fn two_hundred_random_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        roundtrip_case(&mut rng, case);
    }
}

#[test]
fn shift_moves_values_to_offset_positions() {
    let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4, 1]).unwrap();
    let y = cyclic_shift(&x, [1, -1, 2]).unwrap();
    for d in 0..2 {
        for h in 0..3 {
            for w in 0..4 {
                let src = (((d + 1) % 2) * 3 + (h + 1) % 3) * 4 + (w + 2) % 4;
                assert_eq!(y.data()[(d * 3 + h) * 4 + w], src as f64);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stage_layouts_tile_and_invert(d in 1usize..7, h in 1usize..7, w in 1usize..7, shifted: bool, seed: u64) {
        let g = [d, h, w];
        let win = [2, 2, 2];
        if let Ok(layout) = WindowLayout::for_stage(g, win, shifted) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = grid_tensor(&mut rng, g, 2);
            let back = window_reverse(&window_partition(&x, &layout).unwrap(), &layout).unwrap();
            prop_assert_eq!(back.data(), x.data());
            for a in 0..3 {
                if g[a] <= 2 {
                    prop_assert_eq!(layout.shift()[a], 0);
                }
            }
        } else {
            prop_assert!((0..3).any(|a| g[a] > 2 && g[a] % 2 != 0));
        }
    }
}
