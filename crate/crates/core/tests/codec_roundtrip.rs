//! Bitstream bijection and byte stability.
//!
//! Golden files under `tests/golden` are regenerated with
//! `GQTOK_BLESS=1 cargo test --test codec_roundtrip`.

mod common;

use gqtok::codec::{pack, unpack, HEADER_LEN};
use gqtok::quantizer::TokenGrid;
use common::{golden_cases, golden_path};
use proptest::prelude::*;

#[test]
fn golden_files_are_byte_stable() {
    let bless = std::env::var_os("GQTOK_BLESS").is_some();
    for (name, grid, hh, ww) in golden_cases() {
        let bytes = pack(&grid, hh, ww).unwrap();
        let path = golden_path(name);
        if bless {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &bytes).unwrap();
        }
        let stored = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(bytes, stored, "{name}");
        let (header, back) = unpack(&stored).unwrap();
        assert_eq!(back, grid, "{name}");
        assert_eq!((header.image_height as usize, header.image_width as usize), (hh, ww));
    }
}

#[test]
fn exhaustive_tiny_grids() {
    // every shape with h*w*g*d' <= 8 and every assignment of its bits
    let mut grids = 0usize;
    for h in 1..=8usize {
        for w in 1..=8 / h {
            for g in 1..=8 / (h * w) {
                for dp in 1..=8 / (h * w * g) {
                    let bits = h * w * g * dp;
                    for pattern in 0u32..(1 << bits) {
                        let indices = (0..h * w * g)
                            .map(|n| (pattern >> (bits - (n + 1) * dp)) & ((1 << dp) - 1))
                            .collect();
                        let grid = TokenGrid::new(h, w, g, dp, indices).unwrap();
                        let bytes = pack(&grid, h, w).unwrap();
                        assert_eq!(bytes.len(), HEADER_LEN + bits.div_ceil(8));
                        // the payload is the pattern itself, left-aligned
                        let payload = bytes[HEADER_LEN..].iter().fold(0u64, |a, &b| (a << 8) | b as u64);
                        assert_eq!(payload >> ((bytes.len() - HEADER_LEN) * 8 - bits), pattern as u64);
                        assert_eq!(unpack(&bytes).unwrap().1, grid);
                        grids += 1;
                    }
                }
            }
        }
    }
    assert!(grids > 1000);
}

fn grid_strategy() -> impl Strategy<Value = TokenGrid> {
    (1usize..=6, 1usize..=6, 1usize..=4, 1usize..=16).prop_flat_map(|(h, w, g, dp)| {
        prop::collection::vec(0u32..(1u32 << dp), h * w * g)
            .prop_map(move |ids| TokenGrid::new(h, w, g, dp, ids).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_grids_round_trip(grid in grid_strategy(), hh in 1usize..=1024, ww in 1usize..=1024) {
        let bytes = pack(&grid, hh, ww).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + (grid.h * grid.w * grid.g * grid.d_prime).div_ceil(8));
        let (_, back) = unpack(&bytes).unwrap();
        prop_assert_eq!(back, grid);
    }
}

#[test]
fn empty_grid_is_rejected() {
    let grid = TokenGrid {
        h: 0,
        w: 3,
        g: 1,
        d_prime: 2,
        indices: vec![],
    };
    assert!(pack(&grid, 4, 4).is_err());
}
