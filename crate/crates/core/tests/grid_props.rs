//! Property tests for the room partition: round-trip containment, the
//! reconstruction bound, exact tiling, and one-hot injectivity.

use e2esl_core::grid::{AreaIndex, GridSpec, Point2, RoomDims};
use proptest::prelude::*;

fn arb_grid() -> impl Strategy<Value = GridSpec> {
    (2.0f64..12.0, 2.0f64..12.0, 1usize..20, 1usize..20).prop_map(|(x, y, mx, my)| {
        GridSpec::new(RoomDims::new(x, y, 3.0).unwrap(), mx, my).unwrap()
    })
}

proptest! {
    #[test]
    fn round_trip_containment(grid in arb_grid(), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let p = Point2::new(fx * grid.room().x_len, fy * grid.room().y_len);
        let m = grid.locate_area(p).unwrap();
        let (xs, xe, ys, ye) = grid.area_bounds(m).unwrap();
        // half-open cells, except the far wall which clamps inward
        prop_assert!(xs <= p.x && (p.x < xe || p.x == grid.room().x_len));
        prop_assert!(ys <= p.y && (p.y < ye || p.y == grid.room().y_len));
    }

    #[test]
    fn reconstruction_bound(grid in arb_grid(), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let p = Point2::new(fx * grid.room().x_len, fy * grid.room().y_len);
        let m = grid.locate_area(p).unwrap();
        let center = grid.area_center(m).unwrap();
        prop_assert!(p.dist(&center) <= grid.max_center_dist() + 1e-9);
    }

    #[test]
    fn one_hot_injective(grid in arb_grid()) {
        let total = grid.m_total();
        for m in 1..=total.min(64) {
            for n in (m + 1)..=total.min(64) {
                let a = grid.one_hot(AreaIndex::new(m)).unwrap();
                let b = grid.one_hot(AreaIndex::new(n)).unwrap();
                prop_assert!(a != b);
                prop_assert!(a.dense::<f64>() != b.dense::<f64>());
            }
        }
    }
}

#[test]
fn cells_tile_the_room_exactly() {
    // dense lattice: every point lands in exactly the cell whose bounds
    // contain it, and every cell is hit
    let grid = GridSpec::new(RoomDims::new(5.0, 6.0, 3.0).unwrap(), 15, 15).unwrap();
    let steps = 173; // coprime-ish with the grid so points avoid edges
    let mut hits = vec![0usize; grid.m_total()];
    for i in 0..steps {
        for j in 0..steps {
            let p = Point2::new(
                (i as f64 + 0.5) / steps as f64 * 5.0,
                (j as f64 + 0.5) / steps as f64 * 6.0,
            );
            let m = grid.locate_area(p).unwrap();
            let mut containing = 0;
            for cell in 1..=grid.m_total() {
                let (xs, xe, ys, ye) = grid.area_bounds(AreaIndex::new(cell)).unwrap();
                if xs <= p.x && p.x < xe && ys <= p.y && p.y < ye {
                    containing += 1;
                    assert_eq!(cell, m.get(), "point {p:?}");
                }
            }
            assert_eq!(containing, 1, "point {p:?} contained by {containing} cells");
            hits[m.get() - 1] += 1;
        }
    }
    assert!(hits.iter().all(|&h| h > 0), "some cell never hit");
}
