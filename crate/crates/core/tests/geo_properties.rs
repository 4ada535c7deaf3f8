use geoloc::geo::{
    build_grid, class_of_offset, covering_tiles, geodesic_distance_m, iou_vs_aligned, local_meters, offset_point,
    GeoPoint, MatchClass, Offset2D, TileGeometry,
};
use proptest::prelude::*;

fn side() -> f64 {
    TileGeometry::default().side_len_m()
}

proptest! {
    #[test]
    fn iou_is_bounded_and_sign_symmetric(dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let g = TileGeometry::default();
        let v = iou_vs_aligned(Offset2D::new(dx, dy), &g);
        prop_assert!((0.0..=1.0).contains(&v));
        for (sx, sy) in [(-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            prop_assert_eq!(v, iou_vs_aligned(Offset2D::new(sx * dx, sy * dy), &g));
        }
        prop_assert_eq!(v, iou_vs_aligned(Offset2D::new(dy, dx), &g));
    }

    #[test]
    fn iou_shrinks_with_displacement(dx in 0.0f64..70.0, dy in 0.0f64..70.0, ex in 0.0f64..5.0) {
        let g = TileGeometry::default();
        let near = iou_vs_aligned(Offset2D::new(dx, dy), &g);
        let far = iou_vs_aligned(Offset2D::new(dx + ex, dy), &g);
        prop_assert!(far <= near + 1e-15);
    }

    #[test]
    fn class_implies_iou_floor(dx in -40.0f64..40.0, dy in -40.0f64..40.0) {
        let g = TileGeometry::default();
        let off = Offset2D::new(dx, dy);
        let v = iou_vs_aligned(off, &g);
        match class_of_offset(off, side()) {
            MatchClass::Positive => prop_assert!(v >= 9.0 / 23.0 - 1e-9),
            MatchClass::SemiPositive => prop_assert!(v > 1.0 / 7.0 - 1e-9),
            MatchClass::Negative => prop_assert!(dx.abs() >= side() / 2.0 - 1e-6 || dy.abs() >= side() / 2.0 - 1e-6),
        }
    }

    #[test]
    fn offset_point_roundtrips(lat in -60.0f64..60.0, lon in -170.0f64..170.0, e in -500.0f64..500.0, n in -500.0f64..500.0) {
        let origin = GeoPoint::new(lat, lon).unwrap();
        let p = offset_point(origin, Offset2D::new(e, n));
        let back = local_meters(origin, p, origin);
        prop_assert!((back.dx_m - e).abs() < 1e-6 && (back.dy_m - n).abs() < 1e-6);
        let d = geodesic_distance_m(origin, p);
        prop_assert!((d - e.hypot(n)).abs() < 1e-3 * (1.0 + e.hypot(n)));
    }

    #[test]
    fn interior_points_have_one_positive_and_three_semis(u in 0.0f64..1.0, v in 0.0f64..1.0, k in 3u32..7) {
        let l = side();
        let sw = GeoPoint::new(40.7, -74.0).unwrap();
        let span = f64::from(k) * l;
        let grid = build_grid(sw, offset_point(sw, Offset2D::new(span, span)), TileGeometry::default()).unwrap();
        prop_assert_eq!(grid.rows(), 2 * k - 1);
        // Stay a millimeter inside the outermost centers.
        let inner = span - l - 2e-3;
        let q = offset_point(sw, Offset2D::new(l / 2.0 + 1e-3 + u * inner, l / 2.0 + 1e-3 + v * inner));
        let c = covering_tiles(q, grid.tiles()).unwrap();
        prop_assert_eq!(c.semi.len(), 3);
        prop_assert_eq!(class_of_offset(c.positive.offset, l), MatchClass::Positive);
        let ids = c.tile_ids();
        prop_assert_eq!(ids.len(), 4);
    }
}

#[test]
fn grid_size_follows_stride_formula() {
    let l = side();
    let sw = GeoPoint::new(10.0, 20.0).unwrap();
    for (kx, ky) in [(1.0, 1.0), (2.0, 3.0), (4.0, 4.0), (4.6, 2.2)] {
        let ne = offset_point(sw, Offset2D::new(kx * l, ky * l));
        let grid = build_grid(sw, ne, TileGeometry::default()).unwrap();
        // Partial strides round up so the far edge of the area is still covered.
        let per_axis = |k: f64| ((k * l - l) / (l / 2.0) - 1e-9).ceil() as u32 + 1;
        assert_eq!((grid.cols(), grid.rows()), (per_axis(kx), per_axis(ky)), "span {kx} x {ky}");
    }
}
